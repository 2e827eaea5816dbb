import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from orientpose import grad as G
from orientpose import skeleton as K


def unit_orients(rng, n=None):
    shape = (16, 3) if n is None else (n, 16, 3)
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def path_sum_oracle(orients, lengths, topo):
    """Each joint = sum of L_i * v_i over the limbs on its root path."""
    by_child = {c: i for i, (_, c) in enumerate(topo.limbs)}
    pose = np.zeros((topo.n_joints, 3))
    for j in range(topo.n_joints):
        k = j
        while k != topo.root_index:
            i = by_child[k]
            pose[j] += lengths[i] * orients[i]
            k = topo.limbs[i][0]
    return pose


def test_canonical_counts_and_root():
    topo = K.canonical_topology()
    assert topo.n_joints == 17 and topo.n_limbs == 16
    assert topo.joints[topo.root_index] == "pelvis"
    i = topo.limb_names.index("pelvis->r_hip")
    assert topo.limbs[i][0] == topo.root_index


def test_every_joint_reachable_from_root():
    topo = K.canonical_topology()
    for j in range(topo.n_joints):
        path = topo.limb_path(j)
        if j == topo.root_index:
            assert path == []
        else:
            assert topo.limbs[path[0]][0] == topo.root_index
            assert topo.limbs[path[-1]][1] == j


def test_topology_rejects_bad_order():
    topo = K.canonical_topology()
    limbs = list(topo.limbs)
    limbs[1], limbs[2] = limbs[2], limbs[1]
    with pytest.raises(ValueError):
        K.LimbTopology(topo.joints, tuple(limbs))
    with pytest.raises(ValueError):
        K.LimbTopology(topo.joints[:16], topo.limbs[:15])


def test_mirror_permutations_are_involutions():
    topo = K.canonical_topology()
    pj, pl = topo.mirror_joints(), topo.mirror_limbs()
    assert np.array_equal(pj[pj], np.arange(17))
    assert np.array_equal(pl[pl], np.arange(16))
    assert topo.joints[pj[topo.joints.index("l_wrist")]] == "r_wrist"


def test_collinear_chain():
    topo = K.canonical_topology()
    pose = K.fk_integrate(np.tile([0.0, 0.0, 1.0], (16, 1)), np.full(16, 100.0))
    head = topo.joints.index("head")
    assert pose[head, 2] == 100.0 * topo.depth(head)
    assert np.all(pose[:, :2] == 0)


def test_zero_orientation_places_child_at_parent():
    o = unit_orients(np.random.default_rng(0))
    o[0] = 0
    pose = K.fk_integrate(o, K.default_lengths())
    assert np.array_equal(pose[K.canonical_topology().limbs[0][1]], np.zeros(3))


def test_fk_matches_path_sum_oracle():
    rng = np.random.default_rng(1)
    topo = K.canonical_topology()
    for _ in range(50):
        o = unit_orients(rng)
        lengths = rng.uniform(50, 500, 16)
        pose = K.fk_integrate(o, lengths)
        np.testing.assert_allclose(pose, path_sum_oracle(o, lengths, topo), atol=1e-9)
        assert np.array_equal(pose[0], np.zeros(3))


def test_fk_batched_matches_single():
    rng = np.random.default_rng(2)
    o = unit_orients(rng, 5)
    batch = K.fk_integrate(o, K.default_lengths())
    for i in range(5):
        assert np.array_equal(batch[i], K.fk_integrate(o[i], K.default_lengths()))


def test_fk_rejects_non_finite_and_bad_shape():
    o = unit_orients(np.random.default_rng(3))
    o[3, 1] = np.nan
    with pytest.raises(ValueError):
        K.fk_integrate(o, K.default_lengths())
    with pytest.raises(ValueError):
        K.fk_integrate(np.zeros((15, 3)), K.default_lengths())


def test_fk_tensor_matches_numpy_and_is_differentiable():
    rng = np.random.default_rng(4)
    o = unit_orients(rng, 3)
    t = K.fk_integrate_tensor(G.Tensor(o), K.default_lengths())
    np.testing.assert_allclose(t.data, K.fk_integrate(o, K.default_lengths()), atol=1e-12)
    x = G.Tensor(o)
    err = G.finite_diff_check(lambda v: G.square(K.fk_integrate_tensor(v, K.default_lengths())).sum(), x)
    assert err < 1e-6


def test_round_trip():
    rng = np.random.default_rng(5)
    for _ in range(20):
        o = unit_orients(rng)
        lengths = rng.uniform(10, 400, 16)
        dec = K.orientations_from_pose(K.fk_integrate(o, lengths))
        np.testing.assert_allclose(dec.orients, o, atol=1e-9)
        np.testing.assert_allclose(dec.lengths, lengths, atol=1e-9)
        assert not dec.degenerate.any()


def test_degenerate_limb():
    pose = K.fk_integrate(unit_orients(np.random.default_rng(6)), K.default_lengths())
    topo = K.canonical_topology()
    p, c = topo.limbs[4]
    pose[c] = pose[p]
    dec = K.orientations_from_pose(pose)
    assert np.array_equal(dec.orients[4], np.zeros(3))
    assert dec.lengths[4] == 0 and dec.degenerate[4]
    assert dec.degenerate.sum() == 1


def test_hand_built_chain():
    # pelvis -> r_hip -> r_knee only; the rest collapse onto the root
    pose = np.zeros((17, 3))
    pose[1] = (0, 100, 0)
    pose[2] = (0, 100, 50)
    pose[3:] = pose[2]
    for j in range(4, 17):
        pose[j] = 0
    dec = K.orientations_from_pose(pose)
    np.testing.assert_allclose(dec.orients[0], (0, 1, 0))
    np.testing.assert_allclose(dec.orients[1], (0, 0, 1))
    assert dec.lengths[0] == 100 and dec.lengths[1] == 50


def test_non_finite_pose_rejected():
    pose = np.zeros((17, 3))
    pose[5, 0] = np.inf
    with pytest.raises(ValueError):
        K.orientations_from_pose(pose)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 15), st.floats(0.01, 1.0))
def test_single_limb_perturbation_is_bounded(seed, limb, mag):
    rng = np.random.default_rng(seed)
    lengths = K.default_lengths()
    o = unit_orients(rng)
    delta = rng.standard_normal(3)
    delta *= mag / np.linalg.norm(delta)
    o2 = o.copy()
    o2[limb] += delta
    moved = np.linalg.norm(K.fk_integrate(o2, lengths) - K.fk_integrate(o, lengths), axis=-1)
    assert moved.max() <= lengths[limb] * mag + 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rigid_rotation_equivariance(seed):
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    rot = q * np.sign(np.diag(r))
    if np.linalg.det(rot) < 0:
        rot[:, 0] *= -1
    o = unit_orients(rng)
    lengths = K.default_lengths()
    np.testing.assert_allclose(K.fk_integrate(o @ rot.T, lengths),
                               K.fk_integrate(o, lengths) @ rot.T, atol=1e-9)


def test_config_round_trip(tmp_path):
    topo, lengths = K.load_skeleton_config()
    path = tmp_path / "skel.json"
    K.save_skeleton_config(path, topo, lengths * 1.1)
    topo2, lengths2 = K.load_skeleton_config(path)
    assert topo2 == topo
    np.testing.assert_allclose(lengths2, lengths * 1.1)


def test_lengths_validated():
    with pytest.raises(ValueError):
        K.check_lengths(np.r_[np.ones(15), 0.0])
    with pytest.raises(ValueError):
        K.check_lengths(np.ones(15))


def test_default_lengths_is_a_copy():
    a = K.default_lengths()
    a[:] = 0
    assert np.all(K.default_lengths() > 0)
