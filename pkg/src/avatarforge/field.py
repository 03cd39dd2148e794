"""Canonical radiance field: a frequency-encoded MLP with volume rendering.

The field maps a world position to non-negative density (softplus head)
and RGB color (sigmoid head). Rendering integrates stratified quadrature
samples front to back inside the field's bounding box, with per-ray
near/far from a slab intersection so empty pixels cost nothing. The
quadrature backward pass mirrors the splat compositor: a suffix sweep
over samples yields exact gradients of color, alpha, and depth with
respect to density and color, which then backpropagate through the MLP
to a flat parameter gradient.

File format ".nfck": magic + JSON header (architecture, bounds) +
float32 parameter blob.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .body import BodyTemplate, Pose, lbs_transform
from .camera import Camera
from .fileio import read_blob_file, write_blob_file
from .mesh_raster import rasterize_mesh
from .mlp import MLP
from .optim import Adam
from .splat import RenderOutput

FIELD_MAGIC = b"NFCKPT01"

# per-sample optical depth cap: exp(-60) ~ 9e-27, far below any tolerance,
# and a finite floor keeps the backward-pass division by exp(-x) exact
_MAX_OPTICAL_DEPTH = 60.0


def frequency_encode(p: np.ndarray, n_bands: int) -> np.ndarray:
    """[M, 3] unit-cube coordinates -> [M, 3 + 6*n_bands] features.

    Bands are sin/cos of 2^k * pi * p, plus the raw coordinates.
    """
    feats = [p]
    for k in range(n_bands):
        w = (2.0 ** k) * np.pi
        feats.append(np.sin(w * p))
        feats.append(np.cos(w * p))
    return np.concatenate(feats, axis=1)


def frequency_encode_grad(p: np.ndarray, n_bands: int,
                          grad_feats: np.ndarray) -> np.ndarray:
    """Chain grad_feats [M, 3+6L] back to the raw coordinates [M, 3]."""
    g = grad_feats[:, 0:3].copy()
    for k in range(n_bands):
        w = (2.0 ** k) * np.pi
        gs = grad_feats[:, 3 + 6 * k:6 + 6 * k]
        gc = grad_feats[:, 6 + 6 * k:9 + 6 * k]
        g += w * (gs * np.cos(w * p) - gc * np.sin(w * p))
    return g


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class RadianceField:
    """Density + color field over a fixed axis-aligned bounding box."""

    def __init__(self, bounds, n_bands: int = 8, hidden=(128, 128, 128, 128),
                 seed: int = 0, dtype=np.float32, n_samples: int = 64):
        lo, hi = np.asarray(bounds[0], dtype=np.float64), np.asarray(bounds[1], dtype=np.float64)
        if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
            raise ValueError("bounds must be ([3] lo, [3] hi) with hi > lo")
        self.bounds = (lo, hi)
        self.n_bands = int(n_bands)
        self.hidden = tuple(int(h) for h in hidden)
        self.n_samples = int(n_samples)
        in_dim = 3 + 6 * self.n_bands
        self.mlp = MLP((in_dim, *self.hidden, 4), seed=seed, dtype=dtype)

    @classmethod
    def for_template(cls, template: BodyTemplate, pad: float = 0.1, **kwargs):
        """Field whose box is the template's rest bounds padded by `pad`."""
        lo, hi = template.bounds()
        c = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo) * (1.0 + pad)
        return cls((c - half, c + half), **kwargs)

    @property
    def params(self) -> np.ndarray:
        return self.mlp.params

    @property
    def n_params(self) -> int:
        return self.mlp.n_params

    def _to_unit(self, points: np.ndarray) -> np.ndarray:
        lo, hi = self.bounds
        return (2.0 * (points - lo) / (hi - lo) - 1.0).astype(self.mlp.dtype)

    def _heads(self, raw: np.ndarray):
        density = np.logaddexp(0.0, raw[:, 0])  # softplus, overflow-safe
        color = _sigmoid(raw[:, 1:4])
        return density, color

    def query(self, points: np.ndarray, chunk: int = 262144):
        """Evaluate (density [M], color [M, 3]) at world points."""
        points = np.asarray(points, dtype=np.float64)
        m = points.shape[0]
        density = np.empty(m)
        color = np.empty((m, 3))
        for s in range(0, m, chunk):
            enc = frequency_encode(self._to_unit(points[s:s + chunk]), self.n_bands)
            raw = self.mlp.forward(enc)
            d, c = self._heads(raw.astype(np.float64))
            density[s:s + chunk] = d
            color[s:s + chunk] = c
        return density, color

    def param_grads_at(self, points: np.ndarray, grad_density: np.ndarray,
                       grad_color: np.ndarray = None, chunk: int = 65536) -> np.ndarray:
        """Accumulate d(sum gd*density + sum gc*color)/d params at points.

        Recomputes activations chunk by chunk so callers never hold the
        full activation set; accumulation order is fixed by the chunking,
        keeping the result deterministic.
        """
        points = np.asarray(points, dtype=np.float64)
        total = np.zeros(self.n_params)
        for s in range(0, points.shape[0], chunk):
            enc = frequency_encode(self._to_unit(points[s:s + chunk]), self.n_bands)
            raw, cache = self.mlp.forward(enc, need_cache=True)
            raw64 = raw.astype(np.float64)
            grad_raw = np.zeros_like(raw64)
            grad_raw[:, 0] = grad_density[s:s + chunk] * _sigmoid(raw64[:, 0])
            if grad_color is not None:
                col = _sigmoid(raw64[:, 1:4])
                grad_raw[:, 1:4] = grad_color[s:s + chunk] * col * (1.0 - col)
            g, _ = self.mlp.backward(cache, grad_raw.astype(self.mlp.dtype))
            total += g.astype(np.float64)
        return total


def _ray_box(origin, dirs, lo, hi, t_min, t_max):
    """Slab intersection; returns (near [R], far [R], hit [R])."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (lo - origin) / dirs
        t1 = (hi - origin) / dirs
    enter = np.nanmax(np.minimum(t0, t1), axis=1)
    leave = np.nanmin(np.maximum(t0, t1), axis=1)
    near = np.maximum(enter, t_min)
    far = np.minimum(leave, t_max)
    return near, far, far > near


@dataclass
class VolumeRenderCache:
    """Forward intermediates replayed by volume_render_backward."""
    shape: tuple           # (H, W)
    hit: np.ndarray        # [R] bool
    points: np.ndarray     # [Rh, N, 3] world sample positions
    t: np.ndarray          # [Rh, N] ray parameters (camera depth units)
    delta: np.ndarray      # [Rh] per-sample world-length step
    far: np.ndarray        # [Rh]
    a: np.ndarray          # [Rh, N] per-sample alpha
    om: np.ndarray         # [Rh, N] 1 - a = exp(-tau*delta)
    trans: np.ndarray      # [Rh, N] transmittance before each sample
    color: np.ndarray      # [Rh, N, 3] per-sample color
    background: np.ndarray  # [3]


def volume_render(field, cam: Camera, n_samples: int = None, rng=None,
                  background=(0.0, 0.0, 0.0), need_cache: bool = False,
                  ray_mask=None):
    """Quadrature render of the field: color, alpha, expected depth.

    Rays are clipped to the field's box; a missed ray keeps the
    background with alpha 0 and depth 0. Samples are placed at interval
    midpoints, or stratified-jittered when `rng` is given. Depth is the
    expected termination depth with the surviving transmittance assigned
    to the ray's far bound. An optional [H, W] boolean `ray_mask`
    restricts evaluation to a pixel subset (training on ray batches);
    unmasked pixels keep the background.
    """
    n = field.n_samples if n_samples is None else int(n_samples)
    h, w = cam.height, cam.width
    bg = np.asarray(background, dtype=np.float64)

    dirs = cam.ray_directions().reshape(-1, 3)
    origin = cam.origin
    lo, hi = field.bounds
    near, far, hit = _ray_box(origin, dirs, lo, hi, cam.near, cam.far)
    if ray_mask is not None:
        hit &= np.asarray(ray_mask, dtype=bool).reshape(-1)

    out_color = np.tile(bg, (h * w, 1))
    out_alpha = np.zeros(h * w)
    out_depth = np.zeros(h * w)

    if not hit.any():
        out = RenderOutput(out_color.reshape(h, w, 3), out_alpha.reshape(h, w),
                           out_depth.reshape(h, w))
        if need_cache:
            return out, VolumeRenderCache((h, w), hit, np.zeros((0, n, 3)),
                                          np.zeros((0, n)), np.zeros(0), np.zeros(0),
                                          np.zeros((0, n)), np.zeros((0, n)),
                                          np.zeros((0, n)), np.zeros((0, n, 3)), bg)
        return out

    d_hit = dirs[hit]
    near_h, far_h = near[hit], far[hit]
    rh = d_hit.shape[0]
    if rng is None:
        frac = (np.arange(n) + 0.5) / n
        t = near_h[:, None] + frac[None, :] * (far_h - near_h)[:, None]
    else:
        u = rng.uniform(size=(rh, n))
        t = near_h[:, None] + (np.arange(n)[None, :] + u) / n * (far_h - near_h)[:, None]
    pts = origin[None, None, :] + t[:, :, None] * d_hit[:, None, :]

    density, color = field.query(pts.reshape(-1, 3))
    density = density.reshape(rh, n)
    color = color.reshape(rh, n, 3)

    # optical depth uses geometric step length: dirs are z-normalized
    delta = (far_h - near_h) / n * np.linalg.norm(d_hit, axis=1)
    x = np.minimum(density * delta[:, None], _MAX_OPTICAL_DEPTH)
    om = np.exp(-x)                      # 1 - alpha_i
    a = -np.expm1(-x)
    t_incl = np.cumprod(om, axis=1)
    trans = np.concatenate([np.ones((rh, 1)), t_incl[:, :-1]], axis=1)
    t_final = t_incl[:, -1]
    weights = trans * a                  # [Rh, N]

    out_color[hit] = np.einsum("rn,rnc->rc", weights, color) + t_final[:, None] * bg
    out_alpha[hit] = 1.0 - t_final
    out_depth[hit] = np.sum(weights * t, axis=1) + t_final * far_h

    out = RenderOutput(out_color.reshape(h, w, 3), out_alpha.reshape(h, w),
                       out_depth.reshape(h, w))
    if need_cache:
        cache = VolumeRenderCache((h, w), hit, pts, t, delta, far_h,
                                  a, om, trans, color, bg)
        return out, cache
    return out


def _suffix_after(values: np.ndarray) -> np.ndarray:
    """S[k] = sum_{i>k} values[i] along axis 1."""
    rev = np.flip(np.cumsum(np.flip(values, axis=1), axis=1), axis=1)
    return rev - values


def volume_render_backward(field, cache: VolumeRenderCache, grad_color=None,
                           grad_alpha=None, grad_depth=None) -> np.ndarray:
    """Backpropagate image-space gradients to flat field parameters."""
    h, w = cache.shape
    rh, n = cache.a.shape
    if rh == 0:
        return np.zeros(field.n_params)

    def _per_ray(g, channels=1):
        if g is None:
            return None
        flat = np.asarray(g, dtype=np.float64).reshape(h * w, -1)[cache.hit]
        return flat if channels > 1 else flat[:, 0]

    gc = _per_ray(grad_color, 3)
    ga = _per_ray(grad_alpha)
    gd = _per_ray(grad_depth)

    a, om, trans = cache.a, cache.om, cache.trans
    t_final = trans[:, -1] * om[:, -1]
    weights = trans * a
    g_a = np.zeros((rh, n))
    grad_c = None

    if gc is not None:
        grad_c = np.empty((rh, n, 3))
        for ch in range(3):
            v = cache.color[:, :, ch]
            s_after = _suffix_after(weights * v) + (t_final * cache.background[ch])[:, None]
            g_a += gc[:, ch, None] * (trans * v - s_after / om)
            grad_c[:, :, ch] = gc[:, ch, None] * weights
    if ga is not None:
        s_after = _suffix_after(weights)  # background term of alpha is zero
        g_a += ga[:, None] * (trans - s_after / om)
    if gd is not None:
        s_after = _suffix_after(weights * cache.t) + (t_final * cache.far)[:, None]
        g_a += gd[:, None] * (trans * cache.t - s_after / om)

    # a = 1 - exp(-tau * delta)  =>  da/dtau = delta * exp(-x) = delta * om
    grad_tau = g_a * cache.delta[:, None] * om

    return field.param_grads_at(
        cache.points.reshape(-1, 3), grad_tau.reshape(-1),
        None if grad_c is None else grad_c.reshape(-1, 3))


def pretrain(field, template: BodyTemplate, pose: Pose, steps: int,
             rng_seed: int, *, resolution: int = 128, n_samples: int = None,
             n_rays: int = None, lr: float = 5e-3, lambda_depth: float = 1.0,
             sampler=None, jitter_samples: bool = True):
    """Fit the field's alpha and depth to mesh rasterizations.

    Per step: sample a camera, rasterize the posed template to
    silhouette + depth, render the field, and descend
    MSE(alpha, silhouette) + lambda_depth * MSE(depth inside the
    silhouette). With `n_rays` set, each step trains on that many
    uniformly drawn pixels instead of the full frame. Returns per-step
    log records; the field is updated in place. Zero steps leave the
    parameters untouched.
    """
    from .sampling import CameraSampler

    rng = np.random.default_rng(rng_seed)
    if sampler is None:
        sampler = CameraSampler()
    posed = lbs_transform(template, pose).vertices
    opt = Adam(field.params.shape, lr=lr)
    npix_total = resolution * resolution
    records = []
    for step in range(steps):
        cam = sampler.sample(rng, pose, template, resolution=resolution)
        target = rasterize_mesh(posed, template.faces, cam)
        if n_rays is None or n_rays >= npix_total:
            sampled = np.ones((resolution, resolution), dtype=bool)
        else:
            sampled = np.zeros(npix_total, dtype=bool)
            sampled[rng.choice(npix_total, size=n_rays, replace=False)] = True
            sampled = sampled.reshape(resolution, resolution)
        out, cache = volume_render(field, cam, n_samples=n_samples,
                                   rng=rng if jitter_samples else None,
                                   need_cache=True, ray_mask=sampled)
        npix = int(sampled.sum())
        d_alpha = np.where(sampled, out.alpha - target.silhouette, 0.0)
        loss_alpha = float(np.sum(d_alpha ** 2) / npix)
        grad_alpha = 2.0 * d_alpha / npix

        mask = sampled & (target.silhouette > 0.5)
        cnt = max(int(mask.sum()), 1)
        d_depth = np.where(mask, out.depth - target.depth, 0.0)
        loss_depth = float(np.sum(d_depth ** 2) / cnt)
        grad_depth = lambda_depth * 2.0 * d_depth / cnt

        grads = volume_render_backward(field, cache, grad_alpha=grad_alpha,
                                       grad_depth=grad_depth)
        opt.step(field.params, grads)
        records.append({"step": step, "loss": loss_alpha + lambda_depth * loss_depth,
                        "loss_alpha": loss_alpha, "loss_depth": loss_depth})
    return records


def geometry_loss(field, template: BodyTemplate, pose: Pose, n_samples: int,
                  rng_seed: int, *, parts=("hand_l", "hand_r", "face"),
                  tau_max: float = 20.0, tau_min: float = 2.0,
                  band: float = None):
    """Margin ranking loss tying field density to labeled mesh parts.

    Samples n_samples surface points (density should exceed tau_max) and
    n_samples points pushed outward along face normals by `band`
    (density should stay under tau_min); the loss is the mean squared
    margin violation over all 2*n_samples points. Returns
    (loss, flat parameter gradients).
    """
    missing = [p for p in parts if p not in template.part_labels]
    if missing:
        raise ValueError(f"template has no parts named {missing}")
    if band is None:
        lo, hi = template.bounds()
        band = 0.02 * float(np.linalg.norm(hi - lo))

    rng = np.random.default_rng(rng_seed)
    verts = lbs_transform(template, pose).vertices
    face_ids = np.concatenate([template.part_labels[p] for p in parts])
    tri = verts[template.faces[face_ids]]            # [F, 3, 3]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    probs = areas / areas.sum()

    pick = rng.choice(len(face_ids), size=n_samples, p=probs)
    su = np.sqrt(rng.uniform(size=n_samples))
    v = rng.uniform(size=n_samples)
    bary = np.stack([1.0 - su, su * (1.0 - v), su * v], axis=1)
    on_pts = np.einsum("sk,skc->sc", bary, tri[pick])
    normals = cross[pick] / np.linalg.norm(cross[pick], axis=1, keepdims=True)
    off_pts = on_pts + band * normals

    tau, _ = field.query(np.vstack([on_pts, off_pts]))
    tau_on, tau_off = tau[:n_samples], tau[n_samples:]
    viol_on = np.maximum(0.0, tau_max - tau_on)
    viol_off = np.maximum(0.0, tau_off - tau_min)
    denom = 2.0 * n_samples
    loss = float((np.sum(viol_on ** 2) + np.sum(viol_off ** 2)) / denom)

    grad_tau = np.concatenate([-2.0 * viol_on, 2.0 * viol_off]) / denom
    grads = field.param_grads_at(np.vstack([on_pts, off_pts]), grad_tau)
    return loss, grads


def extract_points(field, grid_resolution: int, density_threshold: float,
                   bounds=None, chunk: int = 262144) -> np.ndarray:
    """Centers of grid cells whose density exceeds the threshold.

    The grid covers `bounds` (default: the field's box) and is scanned
    in fixed x-major raster order, so the output ordering is stable.
    An empty result is a normal outcome.
    """
    if grid_resolution < 2:
        raise ValueError("grid_resolution must be at least 2")
    lo, hi = (np.asarray(b, dtype=np.float64) for b in (bounds or field.bounds))
    r = int(grid_resolution)
    axes = [lo[i] + (np.arange(r) + 0.5) * (hi[i] - lo[i]) / r for i in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    keep = np.zeros(grid.shape[0], dtype=bool)
    for s in range(0, grid.shape[0], chunk):
        density, _ = field.query(grid[s:s + chunk])
        keep[s:s + chunk] = density > density_threshold
    return grid[keep]


def silhouette_iou(field, template: BodyTemplate, pose: Pose, cameras,
                   alpha_threshold: float = 0.5) -> float:
    """Mean IoU between field alpha masks and mesh silhouettes."""
    posed = lbs_transform(template, pose).vertices
    ious = []
    for cam in cameras:
        mesh_mask = rasterize_mesh(posed, template.faces, cam).silhouette > 0.5
        field_mask = volume_render(field, cam).alpha > alpha_threshold
        union = np.logical_or(mesh_mask, field_mask).sum()
        inter = np.logical_and(mesh_mask, field_mask).sum()
        ious.append(inter / union if union else 1.0)
    return float(np.mean(ious))


def save_field(path, field: RadianceField) -> None:
    """Write a ".nfck" checkpoint; parameters are stored as float32."""
    lo, hi = field.bounds
    header = {
        "kind": "radiance-field",
        "n_bands": field.n_bands,
        "hidden": list(field.hidden),
        "n_samples": field.n_samples,
        "bounds": [lo.tolist(), hi.tolist()],
    }
    write_blob_file(path, FIELD_MAGIC, header,
                    [("params", field.params.astype(np.float32))])


def load_field(path) -> RadianceField:
    header, arrays = read_blob_file(path, FIELD_MAGIC)
    field = RadianceField(tuple(np.asarray(b) for b in header["bounds"]),
                          n_bands=header["n_bands"], hidden=header["hidden"],
                          n_samples=header["n_samples"], dtype=np.float32)
    field.params[:] = arrays["params"]
    return field
