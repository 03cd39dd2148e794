"""Keypoint projection, facial occlusion culling, and integer rasterization."""
import numpy as np
import pytest

from avatarforge.body import BodyTemplate, Keypoint, Pose, lbs_transform
from avatarforge.camera import Camera, look_at_camera
from avatarforge.mannequin import preset_pose
from avatarforge.rotations import quat_to_mat
from avatarforge.skeleton import (ProjectedKeypoints, default_bones, hue_palette,
                                  occlusion_cull, project_keypoints,
                                  rasterize_skeleton, render_skeleton, stroke_size)

from conftest import random_unit_quats


# ---------------------------------------------------------------- oracles

def homogeneous_projection_oracle(world, cam):
    """Project via an explicit 3x4 homogeneous matrix built from intrinsics."""
    K = np.array([[cam.fx, 0.0, cam.cx],
                  [0.0, cam.fy, cam.cy],
                  [0.0, 0.0, 1.0]])
    P = K @ np.concatenate([cam.rotation, cam.translation[:, None]], axis=1)
    h = np.concatenate([world, np.ones((len(world), 1))], axis=1) @ P.T  # [K, 3]
    return h[:, :2] / h[:, 2:3], h[:, 2]


def segment_hits_triangle_oracle(origin, target, v0, v1, v2, eps=1e-4):
    """Scalar segment/triangle test via a 3x3 linear solve (not barycentric
    cross products): o + t d = v0 + u e1 + v e2."""
    d = target - origin
    A = np.column_stack([d, v0 - v1, v0 - v2])
    try:
        t, u, v = np.linalg.solve(A, v0 - origin)
    except np.linalg.LinAlgError:
        return False
    return bool(u >= 0 and v >= 0 and u + v <= 1 and eps < t < 1 - eps)


def brute_force_cull_oracle(template, posed_vertices, projected, cam, eps=1e-4):
    origin = cam.origin
    visible = projected.visible.copy()
    for k in range(len(template.keypoints)):
        if not (projected.facial[k] and visible[k]):
            continue
        for f in template.faces:
            a, b, c = posed_vertices[f[0]], posed_vertices[f[1]], posed_vertices[f[2]]
            if segment_hits_triangle_oracle(origin, projected.world[k], a, b, c, eps):
                visible[k] = False
                break
    return visible


def disc_pixel_oracle(cx, cy, radius):
    return {(cx + dx, cy + dy)
            for dx in range(-radius, radius + 1)
            for dy in range(-radius, radius + 1)
            if dx * dx + dy * dy <= radius * radius}


def colored_pixels(img):
    ys, xs = np.nonzero(np.any(img != 0.0, axis=2))
    return {(int(x), int(y)) for x, y in zip(xs, ys)}


# ----------------------------------------------------------- test helpers

def frontal_camera(width=64, height=64, fx=60.0):
    return Camera(fx=fx, fy=fx, cx=width / 2, cy=height / 2, width=width,
                  height=height, rotation=np.eye(3), translation=np.zeros(3))


def keypoint_index(template, name):
    return [kp.name for kp in template.keypoints].index(name)


def mannequin_scene(template, nose_depth, occluder_depth=None):
    """Park every vertex at one far point, then place the nose keypoint on
    the optical axis and optionally one triangle spanning the axis.

    Parked faces are degenerate (repeated vertex -> zero-area) so only the
    explicitly placed triangle can intersect view segments.
    """
    verts = np.full((template.n_vertices, 3), 100.0)
    nose = next(kp for kp in template.keypoints if kp.name == "nose_tip")
    verts[nose.index] = (0.0, 0.0, nose_depth)
    if occluder_depth is not None:
        kp_verts = {kp.index for kp in template.keypoints if kp.kind == "vertex"}
        face = next(f for f in template.faces if not set(map(int, f)) & kp_verts)
        verts[face[0]] = (-5.0, -5.0, occluder_depth)
        verts[face[1]] = (5.0, -5.0, occluder_depth)
        verts[face[2]] = (0.0, 5.0, occluder_depth)
    joints = np.full((template.n_joints, 3), 100.0)
    return verts, joints


def tiny_template():
    """Minimal 3-face template: one joint keypoint, two facial keypoints."""
    nv, nj = 9, 2
    regressor = np.zeros((nj, nv), dtype=np.float32)
    regressor[0, 0] = 1.0
    regressor[1, 1] = 1.0
    return BodyTemplate(
        vertices_rest=np.zeros((nv, 3), dtype=np.float32),
        faces=np.array([[0, 1, 2], [3, 4, 5], [4, 5, 6]], dtype=np.uint32),
        shape_basis=np.zeros((nv, 3, 0), dtype=np.float32),
        n_expression=0,
        joint_regressor=regressor,
        parents=np.array([-1, 0], dtype=np.int32),
        skin_weights=np.full((nv, nj), 0.5, dtype=np.float32),
        part_labels={},
        keypoints=[Keypoint("root", "joint", 0),
                   Keypoint("probe_a", "vertex", 7, facial=True),
                   Keypoint("probe_b", "vertex", 8, facial=True)],
    )


def manual_projected(pixels, visible, facial=None):
    pixels = np.asarray(pixels, dtype=np.float64)
    n = len(pixels)
    facial = np.zeros(n, dtype=bool) if facial is None else np.asarray(facial)
    return ProjectedKeypoints(world=np.zeros((n, 3)), pixel=pixels,
                              depth=np.ones(n), visible=np.asarray(visible),
                              facial=facial, names=[f"kp{i}" for i in range(n)])


# ------------------------------------------------------------- projection

def test_project_on_axis_hits_principal_point(body_template):
    cam = frontal_camera()
    verts = np.full((body_template.n_vertices, 3), -5.0)
    joints = np.full((body_template.n_joints, 3), -5.0)
    joints[0] = (0.0, 0.0, 1.0)  # pelvis keypoint on the optical axis
    proj = project_keypoints(body_template, verts, joints, cam)
    k = keypoint_index(body_template, "pelvis")
    assert np.allclose(proj.pixel[k], (cam.cx, cam.cy), atol=1e-12)
    assert proj.depth[k] == pytest.approx(1.0)
    assert proj.visible[k]


def test_project_behind_camera_invisible(body_template):
    cam = frontal_camera()
    verts = np.full((body_template.n_vertices, 3), -5.0)
    joints = np.full((body_template.n_joints, 3), -5.0)
    joints[0] = (0.0, 0.0, -1.0)
    proj = project_keypoints(body_template, verts, joints, cam)
    assert not proj.visible[keypoint_index(body_template, "pelvis")]
    assert not proj.visible.any()


def test_project_out_of_frame_invisible(body_template):
    cam = frontal_camera()
    verts = np.full((body_template.n_vertices, 3), -5.0)
    joints = np.full((body_template.n_joints, 3), -5.0)
    joints[0] = (10.0, 0.0, 1.0)  # pixel x = 60*10 + 32, far off frame
    proj = project_keypoints(body_template, verts, joints, cam)
    k = keypoint_index(body_template, "pelvis")
    assert np.isfinite(proj.depth[k]) and proj.depth[k] > 0
    assert not proj.visible[k]


def test_project_matches_homogeneous_matrix_oracle(body_template, rng):
    R = quat_to_mat(random_unit_quats(rng, 1))[0]
    cam = Camera(fx=80.0, fy=70.0, cx=31.0, cy=33.5, width=64, height=64,
                 rotation=R, translation=rng.normal(size=3) * 0.1)
    verts = rng.normal(size=(body_template.n_vertices, 3))
    verts = verts + R.T @ np.array([0.0, 0.0, 3.0])  # cluster in front
    joints = rng.normal(size=(body_template.n_joints, 3)) + R.T @ np.array([0.0, 0.0, 3.0])
    proj = project_keypoints(body_template, verts, joints, cam)
    pix_o, depth_o = homogeneous_projection_oracle(proj.world, cam)
    assert np.allclose(proj.depth, depth_o, rtol=1e-9, atol=1e-12)
    front = depth_o > 0
    assert front.all()  # scene construction keeps every keypoint in front
    assert np.allclose(proj.pixel, pix_o, rtol=1e-9, atol=1e-9)
    vis_o = ((depth_o > cam.near) & (depth_o < cam.far)
             & (pix_o[:, 0] >= 0) & (pix_o[:, 0] < cam.width)
             & (pix_o[:, 1] >= 0) & (pix_o[:, 1] < cam.height))
    assert np.array_equal(proj.visible, vis_o)


def test_project_resolves_joint_and_vertex_sources(body_template, rng):
    verts = rng.normal(size=(body_template.n_vertices, 3))
    joints = rng.normal(size=(body_template.n_joints, 3))
    proj = project_keypoints(body_template, verts, joints, frontal_camera())
    for k, kp in enumerate(body_template.keypoints):
        expected = joints[kp.index] if kp.kind == "joint" else verts[kp.index]
        assert np.array_equal(proj.world[k], expected)
        assert proj.facial[k] == kp.facial
        assert proj.names[k] == kp.name


# ---------------------------------------------------------------- culling

def test_cull_hides_facial_keypoint_behind_triangle(body_template):
    cam = frontal_camera()
    verts, joints = mannequin_scene(body_template, nose_depth=2.0, occluder_depth=1.0)
    proj = project_keypoints(body_template, verts, joints, cam)
    k = keypoint_index(body_template, "nose_tip")
    assert proj.visible[k]
    visible = occlusion_cull(body_template, verts, proj, cam)
    assert not visible[k]


def test_cull_keeps_facial_keypoint_in_front_of_triangle(body_template):
    cam = frontal_camera()
    verts, joints = mannequin_scene(body_template, nose_depth=0.5, occluder_depth=1.0)
    proj = project_keypoints(body_template, verts, joints, cam)
    visible = occlusion_cull(body_template, verts, proj, cam)
    assert visible[keypoint_index(body_template, "nose_tip")]


def test_cull_never_touches_body_keypoints(body_template):
    cam = frontal_camera()
    verts, joints = mannequin_scene(body_template, nose_depth=2.0, occluder_depth=1.0)
    joints[:] = (0.0, 0.0, 2.0)  # every joint dead behind the occluder
    proj = project_keypoints(body_template, verts, joints, cam)
    visible = occlusion_cull(body_template, verts, proj, cam)
    body = ~proj.facial
    assert proj.visible[body].all()
    assert np.array_equal(visible[body], proj.visible[body])


def test_cull_epsilon_margins_at_segment_ends(body_template):
    # Segment runs from the origin to the nose at depth 2, so an occluder at
    # depth z crosses at parameter t = z / 2. Crossings inside the 1e-4
    # margins at either end must not cull.
    cam = frontal_camera()
    k = keypoint_index(body_template, "nose_tip")
    for z, expect_visible in [(2.0 * (1.0 - 5e-5), True),   # t just above 1 - eps
                              (2.0 * (1.0 - 2e-4), False),  # t just below 1 - eps
                              (2.0 * 5e-5, True),           # t just below eps
                              (2.0 * 2e-4, False)]:         # t just above eps
        verts, joints = mannequin_scene(body_template, nose_depth=2.0, occluder_depth=z)
        proj = project_keypoints(body_template, verts, joints, cam)
        visible = occlusion_cull(body_template, verts, proj, cam)
        assert visible[k] == expect_visible, f"occluder depth {z}"


def test_cull_restored_when_camera_moves_off_occluder():
    # Probe keypoint verts belong to no face here, so the one small occluder
    # is the only real triangle in the scene.
    template = tiny_template()
    verts = np.full((template.n_vertices, 3), 100.0)
    verts[7] = (0.0, 0.0, 2.0)  # probe_a
    verts[[0, 1, 2]] = [(-0.5, -0.5, 1.0), (0.5, -0.5, 1.0), (0.0, 0.5, 1.0)]
    joints = np.asarray(template.joint_regressor, dtype=np.float64) @ verts
    k = keypoint_index(template, "probe_a")

    front = frontal_camera()
    proj = project_keypoints(template, verts, joints, front)
    assert proj.visible[k]
    assert not occlusion_cull(template, verts, proj, front)[k]

    side = look_at_camera(eye=(3.0, 0.0, 0.0), target=(0.0, 0.0, 2.0),
                          width=64, height=64, fov_y_deg=60.0)
    proj = project_keypoints(template, verts, joints, side)
    assert proj.visible[k]
    assert occlusion_cull(template, verts, proj, side)[k]


def test_cull_matches_brute_force_oracle():
    template = tiny_template()
    cam = frontal_camera()
    rng = np.random.default_rng(7)
    culled = 0
    for _ in range(1000):
        verts = rng.normal(size=(template.n_vertices, 3))
        verts[:, 2] += 2.5
        joints = np.asarray(template.joint_regressor, dtype=np.float64) @ verts
        proj = project_keypoints(template, verts, joints, cam)
        visible = occlusion_cull(template, verts, proj, cam)
        oracle = brute_force_cull_oracle(template, verts, proj, cam)
        assert np.array_equal(visible, oracle)
        assert np.array_equal(visible[~proj.facial], proj.visible[~proj.facial])
        culled += int(np.sum(proj.visible & ~visible))
    assert culled > 0  # the sweep actually exercised occlusion


# ---------------------------------------------------------- rasterization

def test_raster_all_black_when_nothing_visible():
    proj = manual_projected([(10.0, 10.0), (20.0, 20.0)], [False, False])
    image = rasterize_skeleton(proj, proj.visible, hue_palette(2), 32, 48, [(0, 1)])
    assert image.pixels.shape == (32, 48, 3)
    assert not image.pixels.any()
    assert not image.visible_mask.any()


def test_raster_disc_matches_pixel_enumeration_oracle():
    proj = manual_projected([(10.0, 10.0)], [True])
    color = np.array([[0.2, 0.5, 0.8]])
    image = rasterize_skeleton(proj, proj.visible, color, 32, 32, [],
                               line_width=1, point_radius=3)
    expected = disc_pixel_oracle(10, 10, 3)
    assert len(expected) == 29
    assert colored_pixels(image.pixels) == expected
    ys, xs = np.nonzero(np.any(image.pixels != 0.0, axis=2))
    assert np.allclose(image.pixels[ys, xs], color[0])


def test_raster_horizontal_bone_width_one():
    proj = manual_projected([(5.0, 5.0), (15.0, 5.0)], [True, True])
    palette = np.ones((2, 3))
    image = rasterize_skeleton(proj, proj.visible, palette, 32, 32, [(0, 1)],
                               line_width=1, point_radius=0)
    assert colored_pixels(image.pixels) == {(x, 5) for x in range(5, 16)}


def test_raster_diagonal_bone_width_one():
    proj = manual_projected([(0.0, 0.0), (5.0, 5.0)], [True, True])
    image = rasterize_skeleton(proj, proj.visible, np.ones((2, 3)), 16, 16,
                               [(0, 1)], line_width=1, point_radius=0)
    assert colored_pixels(image.pixels) == {(i, i) for i in range(6)}


def test_raster_wide_bone_stamps_square_cross_section():
    proj = manual_projected([(5.0, 5.0), (15.0, 5.0)], [True, True])
    image = rasterize_skeleton(proj, proj.visible, np.ones((2, 3)), 32, 32,
                               [(0, 1)], line_width=4, point_radius=0)
    # Width-4 stamp covers offsets -2..1 around each Bresenham pixel.
    expected = {(x, y) for x in range(3, 17) for y in range(3, 7)}
    assert colored_pixels(image.pixels) == expected


def test_raster_bone_needs_both_endpoints_visible():
    proj = manual_projected([(5.0, 5.0), (15.0, 5.0)], [True, False])
    palette = np.ones((2, 3))
    image = rasterize_skeleton(proj, proj.visible, palette, 32, 32, [(0, 1)],
                               line_width=1, point_radius=0)
    assert colored_pixels(image.pixels) == {(5, 5)}  # lone endpoint disc


def test_raster_keypoints_overwrite_bones_and_later_indices_win():
    proj = manual_projected([(8.0, 10.0), (16.0, 10.0)], [True, True])
    palette = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    image = rasterize_skeleton(proj, proj.visible, palette, 32, 32, [(0, 1)],
                               line_width=1, point_radius=2)
    # Bone pixels between the discs keep the bone color (second endpoint).
    assert np.array_equal(image.pixels[10, 12], palette[1])
    # Disc 0 overwrites the bone that ran through its center.
    assert np.array_equal(image.pixels[10, 8], palette[0])
    assert np.array_equal(image.pixels[10, 16], palette[1])


def test_raster_centers_floor_fractional_pixels():
    proj = manual_projected([(10.9, 10.9)], [True])
    image = rasterize_skeleton(proj, proj.visible, np.ones((1, 3)), 32, 32, [],
                               line_width=1, point_radius=0)
    assert colored_pixels(image.pixels) == {(10, 10)}


def test_stroke_size_scales_with_resolution():
    assert stroke_size(4, 512, 512) == 4
    assert stroke_size(4, 256, 256) == 2
    assert stroke_size(4, 128, 128) == 1
    assert stroke_size(4, 64, 64) == 1  # never below one pixel
    assert stroke_size(4, 512, 256) == 2  # short image side rules


def test_hue_palette_distinct_colors():
    palette = hue_palette(18)
    assert palette.shape == (18, 3)
    assert palette.min() >= 0.0 and palette.max() <= 1.0
    assert np.array_equal(palette[0], (1.0, 0.0, 0.0))
    assert len({tuple(c) for c in palette}) == 18


def test_default_bones_follow_kinematic_tree(body_template):
    bones = default_bones(body_template)
    joint_kp = {kp.index: k for k, kp in enumerate(body_template.keypoints)
                if kp.kind == "joint"}
    expected = [(joint_kp[int(p)], joint_kp[c])
                for c, p in enumerate(body_template.parents) if p >= 0]
    assert bones == expected
    assert len(bones) == body_template.n_joints - 1


# ------------------------------------------------------------ integration

def test_render_skeleton_deterministic_and_orientation_aware(body_template):
    pose = preset_pose("a", body_template.n_joints)
    lbs = lbs_transform(body_template, pose)
    center = lbs.vertices.mean(axis=0)
    front_cam = look_at_camera(eye=center + (0.0, 0.0, 2.0), target=center,
                               width=192, height=192, fov_y_deg=55.0)
    back_cam = look_at_camera(eye=center + (0.0, 0.0, -2.0), target=center,
                              width=192, height=192, fov_y_deg=55.0)

    front = render_skeleton(body_template, pose, front_cam)
    again = render_skeleton(body_template, pose, front_cam)
    assert np.array_equal(front.pixels, again.pixels)  # bit-exact rerun
    assert front.pixels.any()

    back = render_skeleton(body_template, pose, back_cam)
    nose = keypoint_index(body_template, "nose_tip")
    body = np.array([kp.kind == "joint" for kp in body_template.keypoints])
    # Body joints sit inside the mesh but are exempt from culling.
    assert front.visible_mask[body].all()
    assert back.visible_mask[body].all()
    # The head mesh hides the nose from behind but not from the front.
    assert front.visible_mask[nose]
    assert not back.visible_mask[nose]


def test_render_skeleton_accepts_precomputed_lbs(body_template):
    pose = preset_pose("stride", body_template.n_joints)
    lbs = lbs_transform(body_template, pose)
    cam = look_at_camera(eye=(0.2, 0.3, 2.2), target=lbs.vertices.mean(axis=0),
                         width=128, height=128, fov_y_deg=60.0)
    direct = render_skeleton(body_template, pose, cam)
    reused = render_skeleton(body_template, pose, cam, lbs=lbs)
    assert np.array_equal(direct.pixels, reused.pixels)
