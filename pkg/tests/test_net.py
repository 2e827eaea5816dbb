import numpy as np
import pytest

from orientpose import extract as E
from orientpose import grad as G
from orientpose import loss as L
from orientpose import net as N
from orientpose import skeleton as K
from orientpose import synthdata as S

CFG = N.FcnnConfig()


def unit(rng, n=16):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def est_of(v, s):
    return E.InitialEstimate(np.asarray(v, float), None, np.asarray(s, float), None)


def test_stage_outputs_have_96_channels():
    params = N.init_fcnn(CFG, seed=0)
    for p in params.values():
        p.data += np.random.default_rng(1).normal(0, 0.1, p.shape).astype(p.dtype)
    img = np.random.default_rng(2).random((2, 3, 64, 64)).astype(np.float32)
    outs = N.fcnn_forward(img, params, CFG)
    assert len(outs) == CFG.stages
    for o in outs:
        assert o.shape == (2, 96, 16, 16)
        assert np.all((o.data[:, :16] >= 0) & (o.data[:, :16] <= 1))


def test_three_stage_config():
    cfg = N.FcnnConfig(stages=3)
    outs = N.fcnn_forward(np.zeros((1, 3, 64, 64)), N.init_fcnn(cfg, 0), cfg)
    assert [o.shape[1] for o in outs] == [96, 96, 96]


def test_zero_network():
    zero = N.zero_like_params(N.init_fcnn(CFG, 0))
    outs = N.fcnn_forward(np.zeros((1, 3, 64, 64)), zero, CFG)
    for o in outs:
        assert np.all(o.data[:, :16] == 0.5) and np.all(o.data[:, 16:] == 0)


def test_fcnn_shape_errors():
    params = N.init_fcnn(CFG, 0)
    with pytest.raises(ValueError, match="expected"):
        N.fcnn_forward(np.zeros((1, 3, 32, 32)), params, CFG)
    with pytest.raises(ValueError):
        N.FcnnConfig(stages=0)
    with pytest.raises(ValueError):
        N.FcnnConfig(strides=(1, 1, 1, 1))
    assert N.FcnnConfig.from_dict(eval(CFG.to_json().replace("true", "True"))) == CFG


def test_branch_isolation():
    """From stage 2 on, conf and 2D heads never see the previous 3D maps."""
    params = N.init_fcnn(CFG, 3, dtype=np.float64)
    rng = np.random.default_rng(4)
    for p in params.values():
        p.data += rng.normal(0, 0.05, p.shape)
    img = G.Tensor(rng.random((1, 3, 64, 64)))
    with G.Tape() as tape:
        outs = N.fcnn_forward(img, params, CFG)
        probe = (outs[-1][:, :48] * outs[-1][:, :48]).sum()
    g = tape.backward(probe)
    for k, p in N.branch_params(params, "o3d").items():
        got = g.get(p)
        assert got is None or not np.any(got), k


def test_pc_features_length_and_examples():
    x = N.pc_features(est_of(np.tile([0.0, 0.0, 1.0], (16, 1)), np.ones(16)))
    assert x.shape == (1, 200)
    assert np.all(x.data[0, 64:] == 1)
    rng = np.random.default_rng(5)
    v, s = unit(rng), rng.random(16)
    v[3], s[3] = 0, 0
    corr = N.pc_features(est_of(v, s)).data[0, 64:]
    iu = np.triu_indices(16)
    touching = (iu[0] == 3) | (iu[1] == 3)
    assert touching.sum() == 16 and np.all(corr[touching] == 0)
    # v1 . v2 = -0.5 with scores 1 and 0.8
    v = np.tile([1.0, 0.0, 0.0], (16, 1))
    v[2] = [-0.5, np.sqrt(0.75), 0.0]
    s = np.ones(16)
    s[2] = 0.8
    x = N.pc_features(est_of(v, s)).data[0]
    pos = [k for k, (i, j) in enumerate(zip(*iu)) if (i, j) == (1, 2)][0]
    assert abs(x[64 + pos] - (-0.4)) < 1e-12


def test_pc_features_packing_oracle():
    rng = np.random.default_rng(6)
    v, s = unit(rng), rng.random(16)
    x = N.pc_features(est_of(v, s)).data[0]
    assert np.array_equal(x[:16], s) and np.array_equal(x[16:64], v.reshape(-1))
    want = []
    for i in range(16):
        for j in range(i, 16):
            want.append(float(v[i] @ v[j]) * s[i] * s[j])
    np.testing.assert_allclose(x[64:], want, atol=1e-14)
    diag = [k for k, (i, j) in enumerate(zip(*np.triu_indices(16))) if i == j]
    np.testing.assert_allclose(x[64:][diag], s ** 2, atol=1e-14)
    assert np.all(np.abs(x[64:]) <= 1)


def test_pc_forward_zero_params_and_determinism():
    zero = N.zero_like_params(N.init_pc(0))
    x = np.random.default_rng(7).random((3, 200))
    assert np.all(N.pc_forward(x, zero).data == 0)
    p = N.init_pc(8, zero_output=False)
    a, b = N.pc_forward(x, p).data, N.pc_forward(x, N.init_pc(8, zero_output=False)).data
    assert a.shape == (3, 16, 3) and a.tobytes() == b.tobytes()
    with pytest.raises(ValueError):
        N.pc_forward(np.zeros((1, 199)), p)


def test_pc_forward_matches_layer_oracle():
    p = N.init_pc(9, zero_output=False)
    for k in p:
        p[k].data += np.random.default_rng(10).normal(0, 0.01, p[k].shape)
    x = np.random.default_rng(11).random((2, 200))
    w = {k: v.data for k, v in p.items()}
    h1 = np.maximum(0, (x @ w["pc.in.w"] + w["pc.in.b"]) @ w["pc.h1.w"] + w["pc.h1.b"])
    h2 = np.maximum(0, h1 @ w["pc.h2.w"] + w["pc.h2.b"]) + h1
    out = (h2 @ w["pc.out.w"] + w["pc.out.b"]).reshape(2, 16, 3)
    np.testing.assert_allclose(N.pc_forward(x, p).data, out, rtol=1e-12, atol=1e-12)


def test_pc_forward_gradient_fd():
    p = N.init_pc(12, zero_output=False)
    x = G.Tensor(np.random.default_rng(13).random((1, 200)))
    w = p["pc.h2.w"]

    def f(t):
        q = dict(p)
        q["pc.h2.w"] = t
        dv = N.pc_forward(x, q)
        return (dv * dv).sum()

    coords = np.random.default_rng(14).choice(w.size, 100, replace=False)
    assert G.finite_diff_check(f, G.Tensor(w.data.copy()), coords=coords) < 1e-4


def test_pc_apply_examples():
    v = np.tile([1.0, 0.0, 0.0], (16, 1))
    np.testing.assert_array_equal(N.pc_apply(v, np.zeros((16, 3))).data, v)
    out = N.pc_apply(np.zeros((1, 3)), np.array([[0.0, 2.0, 0.0]])).data
    np.testing.assert_allclose(out, [[0.0, 1.0, 0.0]])
    out = N.pc_apply(np.array([[1.0, 0, 0]]), np.array([[0.0, 1.0, 0]])).data
    np.testing.assert_allclose(out, [[2 ** -0.5, 2 ** -0.5, 0]], atol=1e-15)
    assert np.all(N.pc_apply(np.array([[1e-7, 0, 0]]), np.zeros((1, 3))).data == 0)
    rng = np.random.default_rng(15)
    out = N.pc_apply(rng.standard_normal((50, 3)), rng.standard_normal((50, 3))).data
    norms = np.linalg.norm(out, axis=1)
    assert np.all((np.abs(norms - 1) < 1e-12) | (norms == 0))


def test_untrained_pc_is_identity():
    rng = np.random.default_rng(16)
    pose = S.sample_pose(rng)
    dec = K.orientations_from_pose(pose)
    est = est_of(dec.orients, np.ones(16))
    comp = N.pc_complement(est, N.init_pc(0))
    np.testing.assert_allclose(comp.orients.data[0], dec.orients, atol=1e-15)
    np.testing.assert_allclose(comp.pose.data[0], pose, atol=1e-9)


def test_pc_loss_leaves_fcnn_untouched():
    """A PC training step on the complemented-pose loss moves no FCNN parameter."""
    params = N.init_fcnn(CFG, 17, dtype=np.float64)
    pc = N.init_pc(18, zero_output=False)
    samples = S.generate_dataset(2, 19)
    b = S.to_batch(samples, S.SynthConfig(), dtype=np.float64)
    before = {k: p.data.copy() for k, p in params.items()}
    with G.Tape() as tape:
        outs = N.fcnn_forward(b.images, params, CFG)
        est = E.decode_tensor(outs[-1])
        comp = N.pc_complement(est, pc)
        l_cp = L.l1_pose_loss(comp.pose, b.pose3d)
    g = tape.backward(l_cp)
    for k, p in params.items():
        got = g.get(p)
        assert got is None or not np.any(got), k
    assert any(np.any(g.get(p)) for p in pc.values())
    opt = G.RmsProp({**params, **pc}, lr=1e-3)
    opt.step(g)
    for k, p in params.items():
        assert p.data.tobytes() == before[k].tobytes()


def test_model_create_and_param_count():
    m = N.Model.create(CFG, seed=0)
    assert m.pc["pc.in.w"].dtype == np.float32
    assert set(m.all_params()) == {f"fcnn.{k}" for k in m.fcnn} | set(m.pc)
    assert N.n_params(m.pc) == 200 * 512 + 512 + 2 * (512 * 512 + 512) + 512 * 48 + 48
