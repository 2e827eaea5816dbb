import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from orientpose import metrics as M
from orientpose import synthdata as S


def random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def random_pose(rng):
    return S.sample_pose(rng)


def test_mpjpe_examples():
    rng = np.random.default_rng(0)
    gt = random_pose(rng)
    assert M.mpjpe(gt, gt) == 0
    # root-centering cancels a global shift, so move every joint but the root
    moved = gt.copy()
    moved[1:] += (3.0, 4.0, 0.0)
    assert abs(M.mpjpe(moved, gt) - 5.0 * 16 / 17) < 1e-12
    pred = random_pose(rng)
    oracle = np.mean([np.linalg.norm((pred[j] - pred[0]) - (gt[j] - gt[0])) for j in range(17)])
    assert abs(M.mpjpe(pred, gt) - oracle) < 1e-9


def test_mpjpe_rigid_invariance():
    rng = np.random.default_rng(1)
    a, b = random_pose(rng), random_pose(rng)
    r = random_rotation(rng)
    assert abs(M.mpjpe(a @ r.T + 5, b @ r.T + 5) - M.mpjpe(a, b)) < 1e-9


def test_procrustes_recovers_similarity():
    rng = np.random.default_rng(2)
    gt = random_pose(rng)
    r0 = random_rotation(rng)
    pred = 2.0 * gt @ r0.T + np.array([10.0, -20.0, 30.0])
    np.testing.assert_allclose(M.procrustes_align(pred, gt), gt, atol=1e-6)
    np.testing.assert_allclose(M.procrustes_align(gt, gt), gt, atol=1e-9)


def test_procrustes_is_a_proper_rotation():
    rng = np.random.default_rng(3)
    gt = random_pose(rng)
    mirrored = gt * np.array([-1.0, 1.0, 1.0])
    aligned = M.procrustes_align(mirrored, gt)
    x = mirrored - mirrored.mean(0)
    y = aligned - aligned.mean(0)
    rot, *_ = np.linalg.lstsq(x, y, rcond=None)
    scale = np.cbrt(np.linalg.det(rot))
    assert scale > 0
    np.testing.assert_allclose((rot / scale) @ (rot / scale).T, np.eye(3), atol=1e-8)


def test_procrustes_beats_random_similarities():
    rng = np.random.default_rng(4)
    gt = random_pose(rng)
    pred = gt + rng.normal(0, 40, gt.shape)
    best = np.sum((M.procrustes_align(pred, gt) - gt) ** 2)
    for _ in range(10_000):
        r = random_rotation(rng)
        s = rng.uniform(0.5, 1.5)
        t = rng.normal(0, 20, 3)
        cand = s * pred @ r.T + t
        assert best <= np.sum((cand - gt) ** 2) + 1e-6


def test_procrustes_degenerate():
    line = np.zeros((17, 3))
    line[:, 0] = np.arange(17)
    with pytest.raises(ValueError, match="degenerate"):
        M.procrustes_align(line, line)


def pa_reference(pred, gt):
    """Umeyama's closed form written out step by step."""
    mx, my = pred.mean(0), gt.mean(0)
    x, y = pred - mx, gt - my
    cov = y.T @ x / len(x)
    u, d, vt = np.linalg.svd(cov)
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2, 2] = -1
    r = u @ s @ vt
    var_x = (x ** 2).sum() / len(x)
    c = np.trace(np.diag(d) @ s) / var_x
    aligned = c * x @ r.T + my
    return np.linalg.norm(aligned - gt, axis=1).mean()


def test_pa_mpjpe_matches_reference():
    rng = np.random.default_rng(5)
    for _ in range(50):
        a, b = random_pose(rng), random_pose(rng)
        assert abs(M.pa_mpjpe(a, b) - pa_reference(a, b)) < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_pa_mpjpe_similarity_invariance(seed):
    rng = np.random.default_rng(seed)
    a, b = random_pose(rng), random_pose(rng)
    moved = rng.uniform(0.3, 3) * a @ random_rotation(rng).T + rng.normal(0, 100, 3)
    assert abs(M.pa_mpjpe(moved, b) - M.pa_mpjpe(a, b)) < 1e-6
    # the identity is one candidate similarity, so aligned squared error never grows
    sq_aligned = np.sum((M.procrustes_align(a, b) - b) ** 2)
    assert sq_aligned <= np.sum((a - b) ** 2) + 1e-6


def test_pa_mpjpe_not_above_mpjpe_on_random_clouds():
    rng = np.random.default_rng(10)
    for _ in range(1000):
        a, b = rng.normal(0, 200, (2, 17, 3))
        a, b = a - a[0], b - b[0]
        assert M.pa_mpjpe(a, b) <= M.mpjpe(a, b)


def test_pck_auc_boundaries():
    assert M.pck_curve(np.zeros(17), [150.0])[0] == 1
    rng = np.random.default_rng(6)
    gt = random_pose(rng)
    pck, auc = M.pck_auc(gt[None], gt[None])
    assert pck == 1 and abs(auc - (1 - 1 / 31)) < 1e-12
    curve = M.pck_curve(np.full(50, 200.0))
    assert curve.max() == 0 and curve.mean() == 0
    # strict inequality: an error exactly at the threshold is not correct
    assert M.pck_curve(np.array([150.0]), [150.0])[0] == 0


def test_uniform_errors_auc_half():
    errs = np.random.default_rng(7).uniform(0, 150, 200_000)
    assert abs(M.pck_curve(errs).mean() - 0.5) < 0.02


def test_pck_monotone():
    errs = np.random.default_rng(8).gamma(2, 40, 5000)
    curve = M.pck_curve(errs, np.linspace(0, 300, 61))
    assert np.all(np.diff(curve) >= 0)


def test_pck_empty():
    with pytest.raises(ValueError):
        M.pck_curve(np.array([]))


def test_evaluate_and_csv(tmp_path):
    rng = np.random.default_rng(9)
    gts = np.stack([random_pose(rng) for _ in range(4)])
    preds = gts + rng.normal(0, 30, gts.shape)
    rep = M.evaluate(preds, gts)
    assert rep.mpjpe >= rep.pa_mpjpe >= 0
    assert 0 <= rep.auc <= rep.pck150 <= 1
    assert len(rep.per_joint) == 17 and rep.per_joint[0] == 0
    rows = [("none", "before_pc", rep), ("translation40", "before_pc", rep), ("none", "after_pc", rep)]
    path = tmp_path / "r.csv"
    M.write_report_csv(path, rows)
    back = M.read_report_csv(path)
    assert [r["condition"] for r in back] == ["none", "translation40", "none"]
    assert abs(float(back[0]["mpjpe"]) - rep.mpjpe) < 1e-4
    table = M.format_table(rows).splitlines()
    assert table[0].split()[1:] == ["none", "translation40"]
    assert table[1].startswith("before_pc") and table[2].startswith("after_pc")


def test_collapsed_prediction_non_strict():
    rng = np.random.default_rng(11)
    gt = random_pose(rng)
    flat = np.zeros((17, 3))
    with pytest.raises(ValueError):
        M.pa_mpjpe(flat, gt)
    want = np.linalg.norm(gt - gt.mean(0), axis=1).mean()
    assert abs(M.pa_mpjpe(flat, gt, strict=False) - want) < 1e-9
    # in the least-squares sense the centroid beats every other single point
    best = np.sum((gt - gt.mean(0)) ** 2)
    for _ in range(200):
        c = gt.mean(0) + rng.normal(0, 5, 3)
        assert np.sum((gt - c) ** 2) >= best
    rep = M.evaluate(flat[None], gt[None])
    assert np.isfinite(rep.pa_mpjpe) and rep.pa_mpjpe <= rep.mpjpe
