import numpy as np
import pytest

from avatarforge import rigging
from avatarforge.body import Pose, canonical_mesh, lbs_transform
from avatarforge.gaussians import (GaussianSet, HybridAvatar, KIND_MESH_BINDING,
                                   KIND_UNCONSTRAINED, load_avatar, save_avatar)
from avatarforge.mannequin import JOINT_NAMES, preset_pose
from avatarforge.rotations import quat_exp, quat_to_mat

from conftest import random_unit_quats


def rest_vertices(template):
    return canonical_mesh(template, Pose.identity(template.n_joints))


def build_avatar(template, rng, n_unconstrained=12, parts=(), k=1,
                 dtype=np.float64, weights=None):
    """Assemble a small hybrid avatar: unconstrained members, then bound."""
    verts = rest_vertices(template)
    lo, hi = template.bounds()
    pos_u = rng.uniform(lo, hi, size=(n_unconstrained, 3))
    if weights is None:
        weights = rigging.init_lbs_weights(pos_u, template, verts)
    part_names = list(parts)
    bindings = [rigging.bind_to_mesh(template, p, k, verts) for p in part_names]
    n_b = sum(len(b) for b in bindings)
    n = n_unconstrained + n_b
    position = np.concatenate([pos_u] + [b.position for b in bindings]) if n_b else pos_u
    rotation = np.concatenate(
        [random_unit_quats(rng, n_unconstrained)] + [b.rotation for b in bindings])
    log_scale = np.concatenate(
        [rng.normal(-3.0, 0.2, (n_unconstrained, 3))] + [b.log_scale for b in bindings])
    kind = np.concatenate([np.full(n_unconstrained, KIND_UNCONSTRAINED, dtype=np.uint8),
                           np.full(n_b, KIND_MESH_BINDING, dtype=np.uint8)])
    gauss = GaussianSet(position, rotation, log_scale,
                        rng.normal(0.0, 1.0, n), rng.uniform(0.05, 0.95, (n, 3)),
                        dtype=dtype)
    avatar = HybridAvatar(
        gaussians=gauss, kind=kind, lbs_weights=np.asarray(weights),
        binding_part=np.concatenate(
            [np.full(len(b), i, dtype=np.int32) for i, b in enumerate(bindings)])
        if n_b else np.zeros(0, dtype=np.int32),
        binding_face=np.concatenate([b.face for b in bindings]).astype(np.uint32)
        if n_b else np.zeros(0, dtype=np.uint32),
        binding_bary=np.concatenate([b.bary for b in bindings])
        if n_b else np.zeros((0, 3), dtype=np.float32),
        binding_offset=np.zeros(n_b, dtype=np.float32),
        part_names=part_names,
        part_shape=np.zeros(template.shape_basis.shape[2], dtype=np.float32),
    )
    avatar.validate()
    return avatar


# ---------------------------------------------------------------------------
# Weight initialization


def test_init_weights_at_vertex_copies_row(body_template):
    verts = rest_vertices(body_template)
    picks = np.array([5, 77, 300, 1499])
    w = rigging.init_lbs_weights(verts[picks], body_template, verts)
    expected = body_template.skin_weights.astype(np.float64)[picks]
    assert np.array_equal(w, expected)


def test_init_weights_tie_breaks_to_lowest_index(body_template):
    n_v = body_template.n_vertices
    # park every vertex far away, then plant an exact tie between 3 and 7
    verts = np.full((n_v, 3), 50.0)
    verts[:, 0] += np.arange(n_v)
    verts[3] = (1.0, 0.0, 0.0)
    verts[7] = (-1.0, 0.0, 0.0)
    query = np.zeros((1, 3))
    assert rigging.nearest_vertex_index(query, verts)[0] == 3
    w = rigging.init_lbs_weights(query, body_template, verts)
    assert np.array_equal(w[0], body_template.skin_weights.astype(np.float64)[3])


def test_init_weights_matches_bruteforce_scan(body_template, rng):
    verts = rest_vertices(body_template)
    lo, hi = body_template.bounds()
    points = rng.uniform(lo, hi, size=(200, 3))
    idx = rigging.nearest_vertex_index(points, verts)
    for i, p in enumerate(points):  # exhaustive oracle, first minimum wins
        d2 = np.sum((verts - p) ** 2, axis=1)
        best = 0
        for v in range(1, verts.shape[0]):
            if d2[v] < d2[best]:
                best = v
        assert idx[i] == best
    w = rigging.init_lbs_weights(points, body_template, verts)
    assert np.array_equal(w, body_template.skin_weights.astype(np.float64)[idx])


def test_init_weights_rejects_empty_or_mismatched_template(body_template):
    with pytest.raises(ValueError):
        rigging.init_lbs_weights(np.zeros((2, 3)), body_template, np.zeros((0, 3)))
    with pytest.raises(ValueError):
        rigging.init_lbs_weights(np.zeros((2, 3)), body_template, np.zeros((10, 3)))


# ---------------------------------------------------------------------------
# KNN smoothing


def stochastic_rows(rng, n, n_j):
    w = rng.uniform(0.0, 1.0, (n, n_j))
    return w / w.sum(axis=1, keepdims=True)


def test_knn_smooth_zero_iterations_is_identity(body_template, rng):
    pos = rng.normal(size=(20, 3))
    w = stochastic_rows(rng, 20, body_template.n_joints)
    out = rigging.knn_smooth_lbs(w, pos, body_template, rest_vertices(body_template),
                                 rigging.KnnSmoothingConfig(iterations=0))
    assert np.array_equal(out, w)


def test_knn_smooth_identical_rows_fixed_point(body_template, rng):
    pos = rng.normal(size=(15, 3))
    row = stochastic_rows(rng, 1, body_template.n_joints)
    w = np.repeat(row, 15, axis=0)
    out = rigging.knn_smooth_lbs(w, pos, body_template, rest_vertices(body_template),
                                 rigging.KnnSmoothingConfig(k_neighbors=4, iterations=5))
    np.testing.assert_allclose(out, w, atol=1e-12)


def test_knn_smooth_three_point_line_hand_oracle(body_template):
    # Gaussians on a line at x = 0, 1, 3; one reference vertex at (0, 2, 0).
    positions = np.array([[0.0, 0, 0], [1.0, 0, 0], [3.0, 0, 0]])
    reference = np.array([[0.0, 2.0, 0.0]])
    n_j = body_template.n_joints
    w = np.zeros((3, n_j))
    w[0, 0] = 1.0
    w[1, 1] = 1.0
    w[2, 0] = w[2, 1] = 0.5
    eps = 1e-8
    cfg = rigging.KnnSmoothingConfig(k_neighbors=3, iterations=1, distance_epsilon=eps)
    out = rigging.knn_smooth_lbs(w, positions, body_template, reference, cfg)

    # hand evaluation of one synchronous update
    d_nv = [max(4.0, eps), max(5.0, eps), max(13.0, eps)]
    expected = np.zeros_like(w)
    for i in range(3):
        agg = np.zeros(3)
        for kk in range(3):
            d_ng = max(float(np.sum((positions[i] - positions[kk]) ** 2)), eps)
            agg[kk] = 1.0 / (d_ng * d_nv[kk])
        agg /= agg.sum()
        for kk in range(3):
            expected[i] += agg[kk] * w[kk]
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_knn_smooth_rows_stay_stochastic(body_template, rng):
    pos = rng.normal(size=(50, 3))
    w = stochastic_rows(rng, 50, body_template.n_joints)
    verts = rest_vertices(body_template)
    for iters in (1, 2, 5, 10):
        out = rigging.knn_smooth_lbs(w, pos, body_template, verts,
                                     rigging.KnnSmoothingConfig(iterations=iters))
        assert out.min() >= 0.0
        assert np.abs(out.sum(axis=1) - 1.0).max() < 1e-6


def test_knn_smooth_permutation_equivariant(body_template, rng):
    pos = rng.normal(size=(40, 3))
    w = stochastic_rows(rng, 40, body_template.n_joints)
    verts = rest_vertices(body_template)
    cfg = rigging.KnnSmoothingConfig(k_neighbors=6, iterations=3)
    out = rigging.knn_smooth_lbs(w, pos, body_template, verts, cfg)
    perm = rng.permutation(40)
    out_perm = rigging.knn_smooth_lbs(w[perm], pos[perm], body_template, verts, cfg)
    np.testing.assert_allclose(out_perm, out[perm], atol=1e-12)


def test_knn_smooth_clamps_large_k(body_template, rng):
    pos = rng.normal(size=(12, 3))
    w = stochastic_rows(rng, 12, body_template.n_joints)
    verts = rest_vertices(body_template)
    big = rigging.knn_smooth_lbs(w, pos, body_template, verts,
                                 rigging.KnnSmoothingConfig(k_neighbors=999, iterations=2))
    exact = rigging.knn_smooth_lbs(w, pos, body_template, verts,
                                   rigging.KnnSmoothingConfig(k_neighbors=12, iterations=2))
    assert np.array_equal(big, exact)


def test_knn_smooth_validates_inputs(body_template, rng):
    with pytest.raises(ValueError):
        rigging.KnnSmoothingConfig(k_neighbors=0)
    with pytest.raises(ValueError):
        rigging.KnnSmoothingConfig(iterations=-1)
    with pytest.raises(ValueError):
        rigging.KnnSmoothingConfig(distance_epsilon=0.0)
    pos = rng.normal(size=(5, 3))
    bad = np.full((5, body_template.n_joints), 0.5)  # rows sum to 6
    with pytest.raises(ValueError):
        rigging.knn_smooth_lbs(bad, pos, body_template, rest_vertices(body_template),
                               rigging.KnnSmoothingConfig())


# ---------------------------------------------------------------------------
# Articulation


def test_articulate_identity_pose_exact(body_template, rng):
    # dyadic weights are exactly row-stochastic in float32 storage
    w = np.zeros((8, body_template.n_joints))
    w[np.arange(8), np.arange(8)] = 1.0
    w[0, 0] = w[0, 1] = 0.5
    w[0, 8] = 0.0
    avatar = build_avatar(body_template, rng, n_unconstrained=8, weights=w)
    posed = rigging.articulate(avatar, body_template, Pose.identity(body_template.n_joints))
    g = avatar.gaussians
    np.testing.assert_allclose(posed.position, g.position, atol=1e-12)
    np.testing.assert_allclose(quat_to_mat(posed.rotation), quat_to_mat(g.rotation),
                               atol=1e-12)
    np.testing.assert_allclose(posed.log_scale, g.log_scale, atol=1e-12)
    assert np.array_equal(posed.color, g.color)
    assert np.array_equal(posed.opacity_logit, g.opacity_logit)


def test_articulate_identity_pose_float32(body_template, rng):
    avatar = build_avatar(body_template, rng, n_unconstrained=30, dtype=np.float32)
    posed = rigging.articulate(avatar, body_template, Pose.identity(body_template.n_joints))
    np.testing.assert_allclose(posed.position, avatar.gaussians.position, atol=1e-5)
    np.testing.assert_allclose(posed.log_scale, avatar.gaussians.log_scale, atol=1e-6)


def test_articulate_one_hot_weights_move_rigidly(body_template, rng):
    joint = JOINT_NAMES.index("l_elbow")
    w = np.zeros((6, body_template.n_joints))
    w[:, joint] = 1.0
    avatar = build_avatar(body_template, rng, n_unconstrained=6, weights=w)
    pose = Pose.identity(body_template.n_joints)
    pose.joint_rotations[joint] = quat_exp(np.array([0.4, 0.2, -0.3]))
    pose.joint_rotations[JOINT_NAMES.index("l_shoulder")] = quat_exp(np.array([0.0, 0.5, 0.1]))
    posed = rigging.articulate(avatar, body_template, pose)

    lbs = lbs_transform(body_template, pose)
    rot_j = lbs.joint_rotations[joint]
    trn_j = lbs.joint_translations[joint]
    p = avatar.gaussians.position.astype(np.float64)
    np.testing.assert_allclose(posed.position, p @ rot_j.T + trn_j, atol=1e-6)
    expected_rot = np.einsum("ab,nbc->nac", rot_j, quat_to_mat(avatar.gaussians.rotation))
    np.testing.assert_allclose(quat_to_mat(posed.rotation), expected_rot, atol=1e-6)
    assert np.array_equal(posed.log_scale, avatar.gaussians.log_scale)


def test_articulate_commutes_with_global_rigid(body_template, rng):
    avatar = build_avatar(body_template, rng, n_unconstrained=15, parts=("face",), k=1)
    deform = rigging.DeformNet.for_template(body_template, n_bands=2, hidden=(16,),
                                            dtype=np.float64)
    deform.params[:] = rng.normal(0.0, 0.5, deform.n_params)
    pose = preset_pose("stride")
    pose_global = pose.copy()
    q_g = random_unit_quats(rng, 1)[0]
    t_g = np.array([0.3, -0.2, 0.7])
    pose_global.global_rotation = q_g
    pose_global.global_translation = t_g

    base = rigging.articulate(avatar, body_template, pose, deform=deform)
    moved = rigging.articulate(avatar, body_template, pose_global, deform=deform)
    rot_g = quat_to_mat(q_g)
    np.testing.assert_allclose(moved.position, base.position @ rot_g.T + t_g, atol=1e-6)
    np.testing.assert_allclose(quat_to_mat(moved.rotation),
                               np.einsum("ab,nbc->nac", rot_g, quat_to_mat(base.rotation)),
                               atol=1e-6)
    # float32 skin-weight rows sum to 1 only within ~3e-8, so the global
    # translation leaks into blended vertices by that deficit; bound areas
    # (hence log scales) jitter at ~4e-7, inside the 1e-6 contract
    np.testing.assert_allclose(moved.log_scale, base.log_scale, atol=1e-6)
    pairs = rng.integers(0, len(base), size=(40, 2))
    d_base = np.linalg.norm(base.position[pairs[:, 0]] - base.position[pairs[:, 1]], axis=1)
    d_moved = np.linalg.norm(moved.position[pairs[:, 0]] - moved.position[pairs[:, 1]], axis=1)
    np.testing.assert_allclose(d_moved, d_base, atol=1e-6)


def test_articulate_rejects_mismatched_weights(body_template, rng):
    gauss = GaussianSet(rng.normal(size=(4, 3)), random_unit_quats(rng, 4),
                        np.zeros((4, 3)), np.zeros(4), np.full((4, 3), 0.5))
    avatar = HybridAvatar.from_unconstrained(gauss, np.full((4, 5), 0.2))
    with pytest.raises(ValueError):
        rigging.articulate(avatar, body_template, Pose.identity(body_template.n_joints))


def test_articulate_bound_centers_stay_on_triangle_planes(body_template, rng):
    avatar = build_avatar(body_template, rng, n_unconstrained=5, dtype=np.float32,
                          parts=("hand_l", "face"), k=3)
    for _ in range(20):
        pose = Pose.identity(body_template.n_joints)
        pose.joint_rotations = quat_exp(rng.normal(0.0, 0.25, (body_template.n_joints, 3)))
        pose.global_rotation = random_unit_quats(rng, 1)[0]
        pose.global_translation = rng.normal(0.0, 0.5, 3)
        posed = rigging.articulate(avatar, body_template, pose)
        lbs = lbs_transform(body_template, rigging.effective_pose(avatar, body_template, pose))
        faces = body_template.faces[avatar.binding_face.astype(np.int64)]
        tri = lbs.vertices[faces]
        normal = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        normal /= np.linalg.norm(normal, axis=1, keepdims=True)
        offset = np.einsum(
            "md,md->m",
            posed.position[avatar.bound_index].astype(np.float64) - tri[:, 0], normal)
        assert np.abs(offset).max() < 1e-6


# ---------------------------------------------------------------------------
# Mesh binding


def test_bind_unit_area_right_triangle_hand_values():
    # legs of length sqrt(2) give area exactly 1, so sqrt(area) drops out
    s = np.sqrt(2.0)
    verts = np.array([[0.0, 0, 0], [s, 0, 0], [0, s, 0]])
    faces = np.array([[0, 1, 2]])
    b = rigging.bind_triangles(verts, faces, 1)
    assert len(b) == 1 and b.skipped == 0
    np.testing.assert_allclose(b.position[0], [s / 3, s / 3, 0.0], atol=1e-12)
    np.testing.assert_allclose(quat_to_mat(b.rotation)[0], np.eye(3), atol=1e-12)
    np.testing.assert_allclose(b.log_scale[0], np.log([0.5, 0.5, 0.05]), atol=1e-12)

    b3 = rigging.bind_triangles(verts, faces, 3)
    assert len(b3) == 3
    expected_sites = np.array([[0.5, 0.25, 0.25], [0.25, 0.5, 0.25], [0.25, 0.25, 0.5]])
    assert np.array_equal(b3.bary, expected_sites)
    np.testing.assert_allclose(b3.position, expected_sites @ verts, atol=1e-12)


def test_bind_frames_rotate_with_the_mesh(rng):
    verts = rng.normal(size=(9, 3))
    faces = np.arange(9).reshape(3, 3)
    base = rigging.bind_triangles(verts, faces, 3)
    rot = quat_to_mat(random_unit_quats(rng, 1)[0])
    shift = np.array([0.2, -1.0, 0.4])
    moved = rigging.bind_triangles(verts @ rot.T + shift, faces, 3)
    np.testing.assert_allclose(moved.position, base.position @ rot.T + shift, atol=1e-6)
    np.testing.assert_allclose(quat_to_mat(moved.rotation),
                               np.einsum("ab,nbc->nac", rot, quat_to_mat(base.rotation)),
                               atol=1e-6)
    np.testing.assert_allclose(moved.log_scale, base.log_scale, atol=1e-9)


def test_bind_to_mesh_covers_part_and_sums_bary(body_template):
    verts = rest_vertices(body_template)
    b = rigging.bind_to_mesh(body_template, "face", 3, verts)
    n_faces = len(body_template.part_labels["face"])
    assert len(b) == 3 * n_faces - 3 * b.skipped
    assert np.abs(b.bary.sum(axis=1) - 1.0).max() < 1e-12
    assert set(np.unique(b.face)) <= set(int(i) for i in body_template.part_labels["face"])


def test_bind_skips_degenerate_triangles():
    verts = np.array([[0.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0], [2.0, 2, 2]])
    faces = np.array([[0, 1, 2], [3, 3, 0], [0, 1, 2]])  # middle one has zero area
    b = rigging.bind_triangles(verts, faces, 1)
    assert b.skipped == 1
    assert len(b) == 2
    assert np.array_equal(b.face, [0, 2])


def test_bind_rejects_unknown_part_and_site_count(body_template):
    verts = rest_vertices(body_template)
    with pytest.raises(ValueError, match="no part named"):
        rigging.bind_to_mesh(body_template, "tail", 1, verts)
    with pytest.raises(ValueError, match="gaussians_per_triangle"):
        rigging.bind_to_mesh(body_template, "face", 2, verts)


# ---------------------------------------------------------------------------
# Shape editing


def test_shape_edit_zero_delta_is_identity(body_template, rng):
    avatar = build_avatar(body_template, rng, n_unconstrained=10, parts=("face",))
    n_basis = body_template.shape_basis.shape[2]
    out = rigging.apply_shape_edit(avatar, body_template, np.zeros(n_basis))
    assert np.array_equal(out.gaussians.position, avatar.gaussians.position)
    assert np.array_equal(out.part_shape, avatar.part_shape)


def test_shape_edit_matches_canonical_mesh_displacement(body_template, rng):
    avatar = build_avatar(body_template, rng, n_unconstrained=40)
    n_basis = body_template.shape_basis.shape[2]
    delta = rng.normal(0.0, 0.5, n_basis)
    out = rigging.apply_shape_edit(avatar, body_template, delta)
    assert out.anchor_vertices is not None

    pose_d = Pose.identity(body_template.n_joints, shape=delta[:body_template.n_shape],
                           expression=delta[body_template.n_shape:])
    field_disp = canonical_mesh(body_template, pose_d) - rest_vertices(body_template)
    moved = out.gaussians.position - avatar.gaussians.position
    np.testing.assert_allclose(moved, field_disp[out.anchor_vertices], atol=1e-9)
    np.testing.assert_allclose(out.part_shape, delta, atol=1e-6)


def test_shape_edit_reversible_via_cached_anchors(body_template, rng):
    avatar = build_avatar(body_template, rng, n_unconstrained=25, parts=("hand_r",),
                          dtype=np.float32)
    n_basis = body_template.shape_basis.shape[2]
    delta = rng.normal(0.0, 0.4, n_basis)
    there = rigging.apply_shape_edit(avatar, body_template, delta)
    back = rigging.apply_shape_edit(there, body_template, -delta)
    np.testing.assert_allclose(back.gaussians.position, avatar.gaussians.position,
                               atol=1e-6)
    np.testing.assert_allclose(back.part_shape, avatar.part_shape, atol=1e-6)


def test_shape_edit_bound_members_follow_mesh(body_template, rng):
    avatar = build_avatar(body_template, rng, n_unconstrained=4, parts=("face",), k=1)
    n_basis = body_template.shape_basis.shape[2]
    delta = rng.normal(0.0, 0.5, n_basis)
    out = rigging.apply_shape_edit(avatar, body_template, delta)
    verts_new = (body_template.vertices_rest.astype(np.float64)
                 + body_template.shape_basis.astype(np.float64) @ delta)
    tri = verts_new[body_template.faces[avatar.binding_face.astype(np.int64)]]
    expected = np.einsum("mk,mkd->md", avatar.binding_bary.astype(np.float64), tri)
    np.testing.assert_allclose(out.gaussians.position[avatar.bound_index], expected,
                               atol=1e-6)


def test_shape_edit_dimension_mismatch_rejected(body_template, rng):
    avatar = build_avatar(body_template, rng, n_unconstrained=3)
    with pytest.raises(ValueError, match="coefficients"):
        rigging.apply_shape_edit(avatar, body_template, np.zeros(7))


# ---------------------------------------------------------------------------
# Deformation network


def test_deform_zero_initialized_and_bounded(body_template, rng):
    net = rigging.DeformNet.for_template(body_template, n_bands=2, hidden=(12,),
                                         dtype=np.float64)
    pose = preset_pose("stride")
    pts = rng.normal(0.0, 0.3, (30, 3))
    dp, ds, dq = net.forward(pts, pose)
    assert np.array_equal(dp, np.zeros((30, 3)))
    assert np.array_equal(ds, np.zeros((30, 3)))
    assert np.array_equal(dq, np.zeros((30, 3)))

    net.params[:] = rng.normal(0.0, 40.0, net.n_params)  # drive tanh into saturation
    dp, ds, dq = net.forward(pts, pose)
    out = np.concatenate([dp, ds, dq], axis=1)
    assert np.abs(out).max() <= net.output_scale  # tanh(x) hits 1.0 exactly in float
    assert np.abs(out).max() > 0.8 * net.output_scale


def test_deform_fresh_network_is_articulate_noop(body_template, rng):
    avatar = build_avatar(body_template, rng, n_unconstrained=10)
    net = rigging.DeformNet.for_template(body_template)
    pose = preset_pose("t")
    with_net = rigging.articulate(avatar, body_template, pose, deform=net)
    without = rigging.articulate(avatar, body_template, pose)
    assert np.array_equal(with_net.position, without.position)
    assert np.array_equal(with_net.rotation, without.rotation)
    assert np.array_equal(with_net.log_scale, without.log_scale)


def test_deform_parameter_gradients_match_fd(body_template, rng):
    net = rigging.DeformNet.for_template(body_template, n_bands=2, hidden=(10,),
                                         dtype=np.float64)
    net.params[:] = rng.normal(0.0, 0.4, net.n_params)
    pose = preset_pose("stride")
    pts = rng.normal(0.0, 0.3, (7, 3))
    g1, g2, g3 = (rng.normal(size=(7, 3)) for _ in range(3))

    def loss():
        dp, ds, dq = net.forward(pts, pose)
        return float(np.sum(g1 * dp) + np.sum(g2 * ds) + np.sum(g3 * dq))

    (_, cache) = net.forward(pts, pose, need_cache=True)
    grads, _ = net.backward(cache, g1, g2, g3)
    h = 1e-4
    for idx in rng.choice(net.n_params, size=25, replace=False):
        keep = net.params[idx]
        net.params[idx] = keep + h
        up = loss()
        net.params[idx] = keep - h
        dn = loss()
        net.params[idx] = keep
        fd = (up - dn) / (2 * h)
        denom = max(abs(fd), abs(grads[idx]), 1e-8)
        assert abs(fd - grads[idx]) / denom < 1e-3


def test_deform_position_gradients_match_fd(body_template, rng):
    net = rigging.DeformNet.for_template(body_template, n_bands=2, hidden=(10,),
                                         dtype=np.float64)
    net.params[:] = rng.normal(0.0, 0.4, net.n_params)
    pose = preset_pose("y")
    pts = rng.normal(0.0, 0.3, (5, 3))
    g1, g2, g3 = (rng.normal(size=(5, 3)) for _ in range(3))
    (_, cache) = net.forward(pts, pose, need_cache=True)
    _, g_pos = net.backward(cache, g1, g2, g3, with_grad_positions=True)

    h = 1e-5
    for i, a in [(0, 0), (1, 2), (2, 1), (3, 0), (4, 2)]:
        shift = np.zeros_like(pts)
        shift[i, a] = h

        def loss(p):
            dp, ds, dq = net.forward(p, pose)
            return float(np.sum(g1 * dp) + np.sum(g2 * ds) + np.sum(g3 * dq))

        fd = (loss(pts + shift) - loss(pts - shift)) / (2 * h)
        denom = max(abs(fd), abs(g_pos[i, a]), 1e-8)
        assert abs(fd - g_pos[i, a]) / denom < 1e-3


def test_deform_checkpoint_roundtrip(body_template, rng, tmp_path):
    avatar = build_avatar(body_template, rng, n_unconstrained=6, dtype=np.float32)
    net = rigging.DeformNet.for_template(body_template, n_bands=3, hidden=(8, 8))
    net.params[:] = rng.normal(0.0, 0.3, net.n_params).astype(np.float32)
    rigging.attach_deform(avatar, net)
    path = tmp_path / "avatar.hga"
    save_avatar(path, avatar)
    loaded = rigging.deform_from_avatar(load_avatar(path))
    assert loaded is not None
    assert np.array_equal(loaded.params, net.params)
    pose = preset_pose("t")
    pts = rng.normal(0.0, 0.3, (9, 3))
    for a, b in zip(net.forward(pts, pose), loaded.forward(pts, pose)):
        assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# Articulation backward


def fd_articulate_loss(avatar, template, pose, deform, g_pos, g_rot, g_ls):
    posed = rigging.articulate(avatar, template, pose, deform=deform)
    return float(np.sum(g_pos * posed.position) + np.sum(g_rot * posed.rotation)
                 + np.sum(g_ls * posed.log_scale))


@pytest.mark.parametrize("with_deform", [False, True])
def test_articulate_backward_matches_fd(body_template, rng, with_deform):
    avatar = build_avatar(body_template, rng, n_unconstrained=6)
    deform = None
    if with_deform:
        deform = rigging.DeformNet.for_template(body_template, n_bands=2, hidden=(10,),
                                                dtype=np.float64)
        deform.params[:] = rng.normal(0.0, 0.4, deform.n_params)
    pose = preset_pose("stride")
    n = len(avatar.gaussians)
    g_pos = rng.normal(size=(n, 3))
    g_rot = rng.normal(size=(n, 4))
    g_ls = rng.normal(size=(n, 3))

    posed, cache = rigging.articulate(avatar, body_template, pose, deform=deform,
                                      need_cache=True)
    grads = rigging.articulate_backward(cache, g_pos, g_rot, g_ls)
    h = 1e-4

    def check(arr, grad, probes):
        for i, a in probes:
            keep = arr[i, a]
            arr[i, a] = keep + h
            up = fd_articulate_loss(avatar, body_template, pose, deform, g_pos, g_rot, g_ls)
            arr[i, a] = keep - h
            dn = fd_articulate_loss(avatar, body_template, pose, deform, g_pos, g_rot, g_ls)
            arr[i, a] = keep
            fd = (up - dn) / (2 * h)
            denom = max(abs(fd), abs(grad[i, a]), 1e-8)
            assert abs(fd - grad[i, a]) / denom < 1e-3, (i, a, fd, grad[i, a])

    g = avatar.gaussians
    check(g.position, grads.position, [(i, a) for i in range(6) for a in range(3)])
    check(g.rotation, grads.rotation, [(i, a) for i in range(6) for a in range(4)])
    check(g.log_scale, grads.log_scale, [(i, a) for i in range(6) for a in range(3)])
    if with_deform:
        assert grads.deform_params is not None
        for idx in rng.choice(deform.n_params, size=20, replace=False):
            keep = deform.params[idx]
            deform.params[idx] = keep + h
            up = fd_articulate_loss(avatar, body_template, pose, deform, g_pos, g_rot, g_ls)
            deform.params[idx] = keep - h
            dn = fd_articulate_loss(avatar, body_template, pose, deform, g_pos, g_rot, g_ls)
            deform.params[idx] = keep
            fd = (up - dn) / (2 * h)
            denom = max(abs(fd), abs(grads.deform_params[idx]), 1e-8)
            assert abs(fd - grads.deform_params[idx]) / denom < 1e-3


def test_articulate_backward_part_shape_fd_at_identity(body_template, rng):
    # at the identity pose the joint maps are identity for any shape
    # coefficients, so the frozen-joint shape gradient is exact under FD
    avatar = build_avatar(body_template, rng, n_unconstrained=5, parts=("face",), k=1)
    pose = Pose.identity(body_template.n_joints)
    n = len(avatar.gaussians)
    g_pos = rng.normal(size=(n, 3))
    zeros_r, zeros_s = np.zeros((n, 4)), np.zeros((n, 3))

    _, cache = rigging.articulate(avatar, body_template, pose, need_cache=True)
    grads = rigging.articulate_backward(cache, g_pos, zeros_r, zeros_s)
    h = 2.0**-13  # exactly representable in float32 part_shape storage
    n_basis = body_template.shape_basis.shape[2]
    for k in range(n_basis):
        for sign, out in ((1.0, "up"), (-1.0, "dn")):
            shifted = avatar.copy()
            shifted.part_shape = (np.zeros(n_basis) + sign * h * (np.arange(n_basis) == k)
                                  ).astype(np.float32)
            val = fd_articulate_loss(shifted, body_template, pose, None, g_pos,
                                     zeros_r, zeros_s)
            if sign > 0:
                up = val
            else:
                dn = val
        fd = (up - dn) / (2 * h)
        denom = max(abs(fd), abs(grads.part_shape[k]), 1e-8)
        assert abs(fd - grads.part_shape[k]) / denom < 1e-3, (k, fd, grads.part_shape[k])


def test_articulate_backward_bound_rows_have_no_direct_grads(body_template, rng):
    avatar = build_avatar(body_template, rng, n_unconstrained=3, parts=("hand_l",), k=1)
    pose = preset_pose("stride")
    n = len(avatar.gaussians)
    _, cache = rigging.articulate(avatar, body_template, pose, need_cache=True)
    grads = rigging.articulate_backward(cache, rng.normal(size=(n, 3)),
                                        rng.normal(size=(n, 4)), rng.normal(size=(n, 3)))
    b = avatar.bound_index
    assert np.array_equal(grads.position[b], np.zeros((b.size, 3)))
    assert np.array_equal(grads.rotation[b], np.zeros((b.size, 4)))
    assert np.array_equal(grads.log_scale[b], np.zeros((b.size, 3)))
    assert np.any(grads.part_shape != 0.0)
