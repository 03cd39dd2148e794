"""Schedule consistency, oracle denoiser identities, and SDS gradients."""
import io
import socket
import struct
import threading

import numpy as np
import pytest

from avatarforge.body import Pose
from avatarforge.camera import look_at_camera
from avatarforge.gaussians import GaussianSet
from avatarforge.guidance import (Condition, ExternalGuidance, OracleGuidance,
                                  add_noise, linear_schedule,
                                  mannequin_target_provider, oracle_denoise,
                                  pack_tensor, procedural_texture, read_tensor,
                                  sample_timestep, sds_gradient)
from avatarforge.mesh_raster import rasterize_mesh
from avatarforge.body import lbs_transform
from avatarforge.splat import render, render_backward


@pytest.fixture(scope="module")
def schedule():
    return linear_schedule()


def fixed_target_guidance(target, schedule, cfg_scale=1.0):
    """Oracle wired to one constant target image for any (camera, pose)."""
    return OracleGuidance(schedule=schedule, cfg_scale=cfg_scale,
                          target_provider=lambda cam, pose: np.array(target))


def any_condition():
    cam = look_at_camera(eye=(0.0, 0.0, 2.0), target=(0.0, 0.0, 0.0),
                         width=8, height=8, fov_y_deg=60.0)
    return Condition(camera=cam, pose=Pose.identity(1))


# ----------------------------------------------------------------- schedule

def test_linear_schedule_default_shape_and_endpoints(schedule):
    assert schedule.n_steps == 1000
    assert schedule.alpha[0] == pytest.approx(1.0 - 1e-4, abs=1e-15)
    assert schedule.alpha[-1] == pytest.approx(1.0 - 2e-2, abs=1e-15)


def test_schedule_alpha_bar_strictly_decreasing_in_unit_interval(schedule):
    ab = schedule.alpha_bar
    assert np.all(ab > 0.0) and np.all(ab < 1.0)
    assert np.all(np.diff(ab) < 0.0)


def test_schedule_alpha_bar_is_cumulative_product(schedule):
    assert np.max(np.abs(schedule.alpha_bar - np.cumprod(schedule.alpha))) <= 1e-9


def test_schedule_validate_rejects_tampering(schedule):
    import dataclasses
    bad = dataclasses.replace(schedule, alpha_bar=schedule.alpha_bar.copy())
    bad.alpha_bar[5] = bad.alpha_bar[3]  # kills strict decrease
    with pytest.raises(ValueError):
        bad.validate()
    bad2 = dataclasses.replace(schedule, alpha_bar=schedule.alpha_bar * 0.99)
    with pytest.raises(ValueError, match="cumulative product"):
        bad2.validate()


def test_schedule_timestep_validation(schedule):
    for t in (-1, 1000, 2.5, "3"):
        with pytest.raises(ValueError):
            schedule.check_t(t)
    assert schedule.check_t(np.int64(7)) == 7


# ---------------------------------------------------------------- add_noise

def test_add_noise_zero_eps_scales_signal_exactly(schedule, rng):
    x = rng.random(size=(5, 6, 3))
    x_t = add_noise(x, 137, np.zeros_like(x), schedule)
    assert np.array_equal(x_t, schedule.signal_scale(137) * x)


def test_add_noise_near_t0_barely_perturbs(schedule, rng):
    x = rng.random(size=(5, 6, 3))
    eps = rng.standard_normal(x.shape)
    x_t = add_noise(x, 0, eps, schedule)
    assert np.abs(x_t - x).max() < 0.06  # alpha_bar[0] = 1 - 1e-4


def test_add_noise_matches_formula_reevaluation(schedule, rng):
    # Formula re-evaluation oracle on random triples.
    for _ in range(20):
        t = int(rng.integers(0, schedule.n_steps))
        x = rng.standard_normal((4, 4, 3))
        eps = rng.standard_normal((4, 4, 3))
        ab = schedule.alpha_bar[t]
        expected = np.sqrt(ab) * x + np.sqrt(1.0 - ab) * eps
        assert np.allclose(add_noise(x, t, eps, schedule), expected,
                           rtol=0.0, atol=1e-12)


def test_add_noise_rejects_bad_arguments(schedule, rng):
    x = rng.random(size=(4, 4, 3))
    with pytest.raises(ValueError):
        add_noise(x, -1, np.zeros_like(x), schedule)
    with pytest.raises(ValueError):
        add_noise(x, schedule.n_steps, np.zeros_like(x), schedule)
    with pytest.raises(ValueError, match="shape"):
        add_noise(x, 3, np.zeros((2, 2, 3)), schedule)


# ----------------------------------------------------------- oracle denoiser

def test_oracle_recovers_noise_when_image_is_target(schedule, rng):
    target = rng.random(size=(6, 6, 3))
    eps = rng.standard_normal(target.shape)
    x_t = add_noise(target, 412, eps, schedule)
    eps_hat = oracle_denoise(x_t, 412, target, schedule)
    assert np.allclose(eps_hat, eps, rtol=0.0, atol=1e-12)


def test_oracle_residual_identity_on_random_triples(schedule, rng):
    # Keystone identity: eps_hat - eps = sqrt(ab)/sqrt(1-ab) (x - target).
    target = rng.random(size=(5, 7, 3))
    for _ in range(100):
        t = int(rng.integers(0, schedule.n_steps))
        x = rng.random(size=target.shape)
        eps = rng.standard_normal(target.shape)
        eps_hat = oracle_denoise(add_noise(x, t, eps, schedule), t, target, schedule)
        expected = (schedule.signal_scale(t) / schedule.noise_scale(t)) * (x - target)
        assert np.abs((eps_hat - eps) - expected).max() <= 1e-6


def test_cfg_scale_one_returns_conditional_exactly(schedule, rng):
    target = rng.random(size=(6, 6, 3))
    x_t = rng.standard_normal(target.shape)
    guidance = fixed_target_guidance(target, schedule, cfg_scale=1.0)
    eps_hat = guidance.denoise(x_t, 300, any_condition())
    assert np.array_equal(eps_hat, oracle_denoise(x_t, 300, target, schedule))


def test_cfg_interpolates_toward_gray_unconditional(schedule, rng):
    target = rng.random(size=(6, 6, 3))
    x_t = rng.standard_normal(target.shape)
    cond = any_condition()
    for s in (0.0, 3.0, 50.0):
        guidance = fixed_target_guidance(target, schedule, cfg_scale=s)
        eps_c = oracle_denoise(x_t, 250, target, schedule)
        eps_u = oracle_denoise(x_t, 250, np.full_like(x_t, 0.5), schedule)
        expected = (1.0 - s) * eps_u + s * eps_c
        assert np.array_equal(guidance.denoise(x_t, 250, cond), expected)


def test_oracle_guidance_validates_inputs(schedule, rng):
    guidance = fixed_target_guidance(rng.random(size=(6, 6, 3)), schedule)
    with pytest.raises(TypeError):
        guidance.denoise(np.zeros((6, 6, 3)), 10, condition=np.zeros((6, 6, 3)))
    with pytest.raises(ValueError, match="target"):
        guidance.denoise(np.zeros((4, 4, 3)), 10, any_condition())


def test_oracle_guidance_caches_targets_per_view(schedule):
    calls = []

    def provider(camera, pose):
        calls.append(1)
        return np.full((8, 8, 3), 0.25)

    guidance = OracleGuidance(schedule=schedule, target_provider=provider)
    cond = any_condition()
    a = guidance.target(cond.camera, cond.pose)
    b = guidance.target(cond.camera, cond.pose)
    assert np.array_equal(a, b)
    assert len(calls) == 1
    other = Pose.identity(1)
    other.joint_rotations[0] = (0.0, 1.0, 0.0, 0.0)
    guidance.target(cond.camera, other)
    assert len(calls) == 2


# ------------------------------------------------------------ target texture

def test_procedural_texture_is_seeded_tricolor(body_template):
    tex = procedural_texture(body_template, seed=0)
    assert tex.shape == (body_template.n_vertices, 3)
    assert len({tuple(c) for c in tex}) <= 3
    assert np.array_equal(tex, procedural_texture(body_template, seed=0))
    assert not np.array_equal(tex, procedural_texture(body_template, seed=1))


def test_mannequin_targets_deterministic_with_gray_background(body_template):
    provider = mannequin_target_provider(body_template, seed=0)
    pose = Pose.identity(body_template.n_joints)
    lbs = lbs_transform(body_template, pose)
    cam = look_at_camera(eye=(0.0, 0.2, 2.4), target=lbs.vertices.mean(axis=0),
                         width=48, height=48, fov_y_deg=55.0)
    img = provider(cam, pose)
    assert np.array_equal(img, provider(cam, pose))
    assert img.shape == (48, 48, 3)
    sil = rasterize_mesh(lbs.vertices, body_template.faces, cam).silhouette
    assert sil.sum() > 0  # figure actually in frame
    assert np.all(img[sil == 0.0] == 0.5)
    assert img.min() >= 0.0 and img.max() <= 1.0


# --------------------------------------------------------- timestep sampling

def test_sample_timestep_respects_fraction_range(schedule):
    rng = np.random.default_rng(0)
    draws = [sample_timestep(rng, schedule, (0.02, 0.98)) for _ in range(4000)]
    assert min(draws) >= 20 and max(draws) <= 979
    assert len(set(draws)) > 500  # actually spans the range
    assert all(sample_timestep(rng, schedule, (0.5, 0.5)) == 500 for _ in range(10))
    full = [sample_timestep(rng, schedule, (0.0, 1.0)) for _ in range(1000)]
    assert min(full) >= 0 and max(full) <= 999


def test_sample_timestep_rejects_bad_ranges(schedule):
    rng = np.random.default_rng(0)
    for bad in ((-0.1, 0.5), (0.6, 0.4), (0.2, 1.3)):
        with pytest.raises(ValueError):
            sample_timestep(rng, schedule, bad)


# ------------------------------------------------------------- sds gradients

def identity_hook(grad_image):
    return grad_image.copy()


def test_sds_zero_residual_fixed_point_is_exactly_zero(schedule, rng):
    # Rendering the target exactly must kill the gradient bitwise, for any
    # seed and therefore any sampled (t, eps).
    target = rng.random(size=(8, 8, 3))
    guidance = fixed_target_guidance(target, schedule, cfg_scale=1.0)
    cond = any_condition()
    for seed in range(20):
        out = sds_gradient(target, identity_hook, schedule, guidance, cond,
                           seed=seed, call_index=seed * 3)
        assert np.all(out.grads == 0.0), f"seed {seed}"


def test_sds_residual_sign_pushes_toward_target(schedule, rng):
    target = rng.random(size=(8, 8, 3)) * 0.5
    hot = target.copy()
    hot[3, 4, 1] += 0.3  # render overshoots the target in one channel
    guidance = fixed_target_guidance(target, schedule, cfg_scale=1.0)
    cond = any_condition()
    for seed in range(10):
        grads = sds_gradient(hot, identity_hook, schedule, guidance, cond,
                             seed=seed).grads
        assert grads[3, 4, 1] > 0.0  # descent lowers the hot pixel
        grads[3, 4, 1] = 0.0
        assert np.abs(grads).max() < 1e-9  # everything else at fixed point


def test_sds_deterministic_per_seed_and_call_index(schedule, rng):
    render_img = rng.random(size=(6, 6, 3))
    guidance = fixed_target_guidance(rng.random(size=(6, 6, 3)), schedule)
    cond = any_condition()
    a = sds_gradient(render_img, identity_hook, schedule, guidance, cond,
                     seed=11, call_index=4)
    b = sds_gradient(render_img, identity_hook, schedule, guidance, cond,
                     seed=11, call_index=4)
    c = sds_gradient(render_img, identity_hook, schedule, guidance, cond,
                     seed=11, call_index=5)
    assert np.array_equal(a.grads, b.grads) and a.t == b.t
    assert a.t != c.t or not np.array_equal(a.grads, c.grads)


def test_sds_chain_xt_multiplies_signal_scale(schedule, rng):
    render_img = rng.random(size=(6, 6, 3))
    guidance = fixed_target_guidance(rng.random(size=(6, 6, 3)), schedule)
    cond = any_condition()
    kwargs = dict(seed=3, t_range=(0.4, 0.4))  # degenerate range pins t = 400
    plain = sds_gradient(render_img, identity_hook, schedule, guidance, cond,
                         **kwargs)
    chained = sds_gradient(render_img, identity_hook, schedule, guidance, cond,
                           chain_xt=True, **kwargs)
    assert plain.t == chained.t == 400
    assert np.array_equal(chained.grads, schedule.signal_scale(400) * plain.grads)


def test_sds_monte_carlo_matches_closed_form(schedule, rng):
    # 10^4 single-sample estimates at fixed t vs w(t) sqrt(ab)/sqrt(1-ab)
    # (render - target) through the hook, within 3 standard errors.
    render_img = rng.random(size=(6, 7, 3))
    target = rng.random(size=(6, 7, 3))
    guidance = fixed_target_guidance(target, schedule, cfg_scale=1.0)
    cond = any_condition()
    weight = lambda t: 0.7
    samples = np.stack([
        sds_gradient(render_img, identity_hook, schedule, guidance, cond,
                     seed=900, call_index=i, t_range=(0.4, 0.4),
                     weight_fn=weight).grads
        for i in range(10_000)])
    closed = 0.7 * (schedule.signal_scale(400) / schedule.noise_scale(400)) \
        * (render_img - target)
    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / np.sqrt(samples.shape[0])
    assert np.all(np.abs(mean - closed) <= 3.0 * se + 1e-12)


def test_sds_through_splat_renderer_backward(schedule):
    # Real render hook: the fixed point zeroes every attribute gradient,
    # and an overbright render drives splat colors down (positive grads).
    g = GaussianSet(position=np.array([[0.0, 0.0, 0.0]]),
                    rotation=np.array([[1.0, 0.0, 0.0, 0.0]]),
                    log_scale=np.log(np.full((1, 3), 0.15)),
                    opacity_logit=np.array([2.0]),
                    color=np.array([[0.9, 0.7, 0.4]]))
    cam = look_at_camera(eye=(0.0, 0.0, 2.0), target=(0.0, 0.0, 0.0),
                         width=32, height=32, fov_y_deg=50.0)
    img = render(g, cam).color
    cond = Condition(camera=cam, pose=Pose.identity(1))
    hook = lambda grad_image: render_backward(g, cam, grad_image)

    fixed = fixed_target_guidance(img, schedule, cfg_scale=1.0)
    for seed in (0, 1, 2):
        grads = sds_gradient(img, hook, schedule, fixed, cond, seed=seed).grads
        for name, arr in grads.as_dict().items():
            assert np.all(arr == 0.0), name

    dimmer = fixed_target_guidance(img * 0.6, schedule, cfg_scale=1.0)
    grads = sds_gradient(img, hook, schedule, dimmer, cond, seed=5).grads
    assert np.all(grads.color[0] > 0.0)


# -------------------------------------------------------- external protocol

def test_tensor_roundtrip_preserves_shape_and_bytes(rng):
    for shape in ((), (3,), (2, 3, 4), (5, 1)):
        arr = rng.standard_normal(shape).astype(np.float32)
        blob = pack_tensor(arr)
        back = read_tensor(io.BytesIO(blob).read)
        assert back.shape == arr.shape and back.dtype == np.float32
        assert np.array_equal(back, arr)


def test_read_tensor_rejects_truncation_and_absurd_rank(rng):
    blob = pack_tensor(rng.standard_normal((4, 4)).astype(np.float32))
    with pytest.raises(ConnectionError):
        read_tensor(io.BytesIO(blob[:-3]).read)
    with pytest.raises(ValueError, match="rank"):
        read_tensor(io.BytesIO(struct.pack("<I", 99)).read)


def _serve_once(sock_path, record):
    server = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    server.bind(sock_path)
    server.listen(1)

    def run():
        conn, _ = server.accept()
        with conn:
            (token_len,) = struct.unpack("<I", conn.recv(4))
            record["token"] = conn.recv(token_len) if token_len else b""
            (record["t"],) = struct.unpack("<I", conn.recv(4))
            x_t = read_tensor(conn.recv)
            record["condition"] = read_tensor(conn.recv)
            reply = x_t * np.float32(2.0) + np.float32(1.0)
            conn.sendall(pack_tensor(reply))
        server.close()

    thread = threading.Thread(target=run, daemon=True)
    thread.start()
    return thread


def test_external_guidance_speaks_the_wire_protocol(tmp_path, rng):
    sock_path = str(tmp_path / "backend.sock")
    record = {}
    thread = _serve_once(sock_path, record)
    guidance = ExternalGuidance(address=sock_path)
    x_t = rng.standard_normal((5, 4, 3))
    skel = rng.random(size=(5, 4, 3)).astype(np.float32)
    cond = any_condition()
    cond.image = skel
    cond.token = b"subject-7"
    eps_hat = guidance.denoise(x_t, 123, cond)
    thread.join(timeout=5.0)
    expected = x_t.astype(np.float32) * np.float32(2.0) + np.float32(1.0)
    assert np.array_equal(eps_hat, expected.astype(np.float64))
    assert record["token"] == b"subject-7"
    assert record["t"] == 123
    assert np.array_equal(record["condition"], skel)
