"""2D skeleton conditioning images from the posed body template.

Keypoints resolve to posed joint origins or mesh vertices, project through
the pinhole camera, facial keypoints get occlusion-culled against the posed
mesh, and the result rasterizes with pure integer arithmetic (Bresenham
lines, integer discs) so images are bit-exact across platforms and runs.
"""
from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np

from .body import BodyTemplate, Pose, LbsResult, lbs_transform
from .camera import Camera

# Stroke geometry at the 512-pixel reference resolution.
BASE_LINE_WIDTH = 4
BASE_POINT_RADIUS = 4
CULL_EPSILON = 1e-4  # segment-parameter margin for the occlusion test


@dataclass
class ProjectedKeypoints:
    """Per-keypoint world position, image position, and visibility."""

    world: np.ndarray  # [K, 3]
    pixel: np.ndarray  # [K, 2] float (x, y)
    depth: np.ndarray  # [K] camera depth
    visible: np.ndarray  # [K] bool
    facial: np.ndarray  # [K] bool
    names: list[str]


@dataclass
class SkeletonImage:
    """Conditioning image plus the keypoint visibility that produced it."""

    pixels: np.ndarray  # [H, W, 3] in [0, 1]
    visible_mask: np.ndarray  # [K] bool


def project_keypoints(template: BodyTemplate, posed_vertices: np.ndarray,
                      joints_posed: np.ndarray, cam: Camera) -> ProjectedKeypoints:
    """Resolve and project every template keypoint.

    Joint keypoints take the posed joint origin, vertex keypoints the posed
    mesh vertex. A keypoint is visible when its depth lies in (near, far)
    and its pixel lands inside the image.
    """
    posed_vertices = np.asarray(posed_vertices, dtype=np.float64)
    joints_posed = np.asarray(joints_posed, dtype=np.float64)
    world = np.empty((len(template.keypoints), 3))
    facial = np.empty(len(template.keypoints), dtype=bool)
    names = []
    for k, kp in enumerate(template.keypoints):
        source = joints_posed if kp.kind == "joint" else posed_vertices
        world[k] = source[kp.index]
        facial[k] = kp.facial
        names.append(kp.name)
    pixel, depth = cam.project_points(world)
    with np.errstate(invalid="ignore"):
        visible = ((depth > cam.near) & (depth < cam.far)
                   & np.all(np.isfinite(pixel), axis=1)
                   & (pixel[:, 0] >= 0.0) & (pixel[:, 0] < cam.width)
                   & (pixel[:, 1] >= 0.0) & (pixel[:, 1] < cam.height))
    return ProjectedKeypoints(world=world, pixel=pixel, depth=depth,
                              visible=visible, facial=facial, names=names)


def _segment_hits_mesh(origin: np.ndarray, target: np.ndarray, tri: np.ndarray,
                       epsilon: float) -> bool:
    """Barycentric segment/triangle test against all triangles at once.

    Hits count only at segment parameter t in (epsilon, 1 - epsilon), so
    neither the camera pinhole nor the keypoint's own surface registers.
    """
    direction = target - origin  # [3]
    e1 = tri[:, 1] - tri[:, 0]  # [F, 3]
    e2 = tri[:, 2] - tri[:, 0]
    h = np.cross(direction[None, :], e2)  # [F, 3]
    a = np.einsum("fd,fd->f", e1, h)
    parallel = np.abs(a) < 1e-12
    inv = 1.0 / np.where(parallel, 1.0, a)
    s = origin[None, :] - tri[:, 0]  # [F, 3]
    u = inv * np.einsum("fd,fd->f", s, h)
    q = np.cross(s, e1)
    v = inv * (q @ direction)
    t = inv * np.einsum("fd,fd->f", e2, q)
    hit = (~parallel & (u >= 0.0) & (u <= 1.0) & (v >= 0.0) & (u + v <= 1.0)
           & (t > epsilon) & (t < 1.0 - epsilon))
    return bool(hit.any())


def occlusion_cull(template: BodyTemplate, posed_vertices: np.ndarray,
                   projected: ProjectedKeypoints, cam: Camera,
                   epsilon: float = CULL_EPSILON) -> np.ndarray:
    """Visibility flags with mesh-occluded facial keypoints turned off. [K]

    Casts the segment from the camera center to each visible facial
    keypoint; any posed template triangle crossing it hides the keypoint.
    Non-facial keypoints pass through untouched.
    """
    posed_vertices = np.asarray(posed_vertices, dtype=np.float64)
    tri = posed_vertices[template.faces.astype(np.int64)]  # [F, 3, 3]
    origin = cam.origin
    visible = projected.visible.copy()
    for k in np.nonzero(projected.facial & projected.visible)[0]:
        if _segment_hits_mesh(origin, projected.world[k], tri, epsilon):
            visible[k] = False
    return visible


def hue_palette(n: int) -> np.ndarray:
    """Evenly spaced fully saturated hues, one color per index. [n, 3]"""
    return np.array([colorsys.hsv_to_rgb(i / max(n, 1), 1.0, 1.0) for i in range(n)])


def default_bones(template: BodyTemplate) -> list[tuple[int, int]]:
    """Parent-child joint keypoint pairs, ordered by child joint index."""
    joint_to_kp = {kp.index: k for k, kp in enumerate(template.keypoints)
                   if kp.kind == "joint"}
    bones = []
    for child, parent in enumerate(template.parents):
        if parent >= 0 and child in joint_to_kp and int(parent) in joint_to_kp:
            bones.append((joint_to_kp[int(parent)], joint_to_kp[child]))
    return bones


def stroke_size(base: int, height: int, width: int) -> int:
    """Scale a 512-reference stroke size to the render resolution, min 1."""
    return max(1, round(base * min(height, width) / 512))


def _draw_disc(img: np.ndarray, cx: int, cy: int, radius: int, color: np.ndarray) -> None:
    h, w = img.shape[:2]
    r2 = radius * radius
    for dy in range(-radius, radius + 1):
        yy = cy + dy
        if yy < 0 or yy >= h:
            continue
        for dx in range(-radius, radius + 1):
            if dx * dx + dy * dy > r2:
                continue
            xx = cx + dx
            if 0 <= xx < w:
                img[yy, xx] = color


def _draw_line(img: np.ndarray, x0: int, y0: int, x1: int, y1: int,
               width: int, color: np.ndarray) -> None:
    """Integer Bresenham stroke; each step stamps a width x width square."""
    h, w = img.shape[:2]
    lo = -(width // 2)
    hi = width - 1 + lo  # offsets lo..hi inclusive, width of them total
    dx = abs(x1 - x0)
    dy = -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        for oy in range(lo, hi + 1):
            yy = y0 + oy
            if yy < 0 or yy >= h:
                continue
            for ox in range(lo, hi + 1):
                xx = x0 + ox
                if 0 <= xx < w:
                    img[yy, xx] = color
        if x0 == x1 and y0 == y1:
            break
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def rasterize_skeleton(projected: ProjectedKeypoints, visible: np.ndarray,
                       palette: np.ndarray, height: int, width: int,
                       bones: list[tuple[int, int]],
                       line_width: int | None = None,
                       point_radius: int | None = None) -> SkeletonImage:
    """Draw bones then keypoints on black; pure integer rasterization.

    A bone is drawn only when both endpoints are visible, in list order,
    colored by its second endpoint's palette entry; visible keypoints then
    draw as filled discs by index. Later strokes overwrite earlier ones, so
    the draw order fixes the image bit-for-bit.
    """
    if line_width is None:
        line_width = stroke_size(BASE_LINE_WIDTH, height, width)
    if point_radius is None:
        point_radius = stroke_size(BASE_POINT_RADIUS, height, width)
    palette = np.asarray(palette, dtype=np.float64)
    img = np.zeros((height, width, 3))
    centers = np.floor(projected.pixel).astype(np.int64)
    for i, j in bones:
        if visible[i] and visible[j]:
            _draw_line(img, centers[i, 0], centers[i, 1],
                       centers[j, 0], centers[j, 1], line_width, palette[j])
    for k in range(len(visible)):
        if visible[k]:
            _draw_disc(img, centers[k, 0], centers[k, 1], point_radius, palette[k])
    return SkeletonImage(pixels=img, visible_mask=np.asarray(visible, dtype=bool))


def render_skeleton(template: BodyTemplate, pose: Pose, cam: Camera, *,
                    bones: list[tuple[int, int]] | None = None,
                    palette: np.ndarray | None = None,
                    line_width: int | None = None,
                    point_radius: int | None = None,
                    lbs: LbsResult | None = None,
                    epsilon: float = CULL_EPSILON) -> SkeletonImage:
    """Full conditioning pipeline: pose, project, cull, rasterize.

    Pass a precomputed ``lbs`` to guarantee the skeleton sees exactly the
    geometry some other renderer posed (same viewpoint, same pose).
    """
    if lbs is None:
        lbs = lbs_transform(template, pose)
    projected = project_keypoints(template, lbs.vertices, lbs.joints_posed, cam)
    visible = occlusion_cull(template, lbs.vertices, projected, cam, epsilon)
    if bones is None:
        bones = default_bones(template)
    if palette is None:
        palette = hue_palette(len(template.keypoints))
    return rasterize_skeleton(projected, visible, palette, cam.height, cam.width,
                              bones, line_width, point_radius)
