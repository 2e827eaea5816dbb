import numpy as np
import pytest

from orientpose import mapcodec as C
from orientpose import skeleton as K
from orientpose import synthdata as S


def region_oracle(a, b, d, w, h):
    """Per-pixel loop over centres, written independently of limb_region."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    out = np.zeros((h, w), dtype=bool)
    length = np.linalg.norm(b - a)
    for r in range(h):
        for c in range(w):
            p = np.array([c, r], dtype=float)
            if length >= d:
                u = (b - a) / length
                t = np.dot(p - a, u)
                off = abs(u[0] * (p - a)[1] - u[1] * (p - a)[0])
                out[r, c] = 0 <= t <= length and off < d / 2
            else:
                m = (a + b) / 2
                out[r, c] = m[0] - d / 2 <= c < m[0] + d / 2 and m[1] - d / 2 <= r < m[1] + d / 2
    return out


def test_horizontal_limb_rows_and_columns():
    mask = C.limb_region((10, 32), (50, 32), 6, (64, 64))
    rows, cols = np.nonzero(mask)
    assert set(rows) == set(range(30, 35))
    assert set(cols) == set(range(10, 51))
    assert mask.sum() == 5 * 41
    assert np.array_equal(mask, region_oracle((10, 32), (50, 32), 6, 64, 64))


def test_zero_length_square():
    mask = C.limb_region((20, 20), (20, 20), 4, (64, 64))
    rows, cols = np.nonzero(mask)
    assert mask.sum() == 16
    assert rows.max() - rows.min() == 3 and cols.max() - cols.min() == 3
    assert 20 in rows and 20 in cols


def test_out_of_image_empty():
    assert not C.limb_region((-100, -100), (-100, -100), 6, (64, 64)).any()
    assert not C.limb_region((-100, -100), (-80, -120), 6, (64, 64)).any()


def test_random_regions_match_oracle():
    rng = np.random.default_rng(0)
    for _ in range(40):
        a, b = rng.uniform(-4, 20, 2), rng.uniform(-4, 20, 2)
        d = rng.uniform(0.5, 5)
        assert np.array_equal(C.limb_region(a, b, d, (16, 12)), region_oracle(a, b, d, 16, 12))


def test_non_square_dims_orientation():
    mask = C.limb_region((2, 1), (2, 1), 1, (10, 4))
    assert mask.shape == (4, 10)
    assert mask[1, 2] and mask.sum() == 1


def test_bad_width():
    with pytest.raises(ValueError):
        C.limb_region((0, 0), (1, 1), 0, (8, 8))


def _pose(seed, cfg=S.SynthConfig()):
    s = S.make_sample(np.random.default_rng(seed), cfg)
    return s.pose2d.astype(float), K.orientations_from_pose(s.pose3d).orients


def test_encode_broadcasts_orientation():
    p2, o3 = _pose(1)
    o3[5] = (0, 0, 1)
    m = C.encode_maps(p2, o3, d=1.5, dims=(16, 16))
    mask = m.conf[5].astype(bool)
    assert mask.any()
    assert np.all(m.orient3d[5][:, mask].T == (0, 0, 1))
    assert np.all(m.orient3d[5][:, ~mask] == 0)


def test_encode_out_of_image_limb_zero():
    p2, o3 = _pose(2)
    p2[3] = (-50, -50)
    p2[2] = (-55, -50)
    m = C.encode_maps(p2, o3, d=1.5, dims=(16, 16))
    assert not m.conf[2].any() and not m.orient2d[2].any() and not m.orient3d[2].any()


def test_encode_invariants():
    topo = K.canonical_topology()
    for seed in range(10):
        p2, o3 = _pose(seed)
        m = C.encode_maps(p2, o3, d=1.5, dims=(16, 16))
        assert set(np.unique(m.conf)) <= {0.0, 1.0}
        assert m.n_channels == 96 and m.to_array().shape == (96, 16, 16)
        for i, (p, c) in enumerate(topo.limbs):
            mask = m.conf[i].astype(bool)
            assert mask.sum() == region_oracle(p2[p], p2[c], 1.5, 16, 16).sum()
            n2 = np.linalg.norm(m.orient2d[i][:, mask], axis=0)
            assert np.allclose(n2, 1) or np.all(n2 == 0)
            np.testing.assert_allclose(np.linalg.norm(m.orient3d[i][:, mask], axis=0), 1)
            support = np.any(m.orient3d[i] != 0, axis=0)
            assert np.array_equal(support, mask)


def test_zero_2d_length_gives_zero_2d_direction():
    p2, o3 = _pose(3)
    p2[1] = p2[0]
    m = C.encode_maps(p2, o3, d=1.5, dims=(16, 16))
    assert m.conf[0].any() and not m.orient2d[0].any()


def test_flip_equivariance():
    topo = K.canonical_topology()
    pj, pl = topo.mirror_joints(), topo.mirror_limbs()
    for seed in range(5):
        p2, o3 = _pose(seed + 20)
        m = C.encode_maps(p2, o3, d=1.5, dims=(16, 16))
        fp = p2[pj].copy()
        fp[:, 0] = 15 - fp[:, 0]
        fo = o3[pl] * (-1, 1, 1)
        f = C.encode_maps(fp, fo, d=1.5, dims=(16, 16))
        for j in range(16):
            i = pl[j]
            assert np.array_equal(f.conf[j], m.conf[i][:, ::-1])
            np.testing.assert_allclose(f.orient2d[j], m.orient2d[i][:, :, ::-1] * np.array([-1, 1])[:, None, None], atol=1e-12)
            np.testing.assert_allclose(f.orient3d[j], m.orient3d[i][:, :, ::-1] * np.array([-1, 1, 1])[:, None, None], atol=1e-12)


def test_array_round_trip():
    p2, o3 = _pose(4)
    m = C.encode_maps(p2, o3, d=1.5, dims=(16, 16))
    back = C.MapSet.from_array(m.to_array())
    assert np.array_equal(back.conf, m.conf)
    assert np.array_equal(back.orient2d, m.orient2d)
    assert np.array_equal(back.orient3d, m.orient3d)
    with pytest.raises(ValueError):
        C.MapSet.from_array(np.zeros((95, 4, 4)))


def test_mapset_file_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    m = C.MapSet(rng.random((16, 12, 10)).astype(np.float32),
                 rng.standard_normal((16, 2, 12, 10)).astype(np.float32),
                 rng.standard_normal((16, 3, 12, 10)).astype(np.float32))
    path = tmp_path / "m.bin"
    C.write_mapset(path, m)
    raw = path.read_bytes()
    assert raw[:4] == b"OPMS" and len(raw) == 16 + 4 * 96 * 120
    assert np.frombuffer(raw[4:16], "<u4").tolist() == [10, 12, 16]
    # (limb, channel, row, col): the second float32 of limb 0 is conf[0, 0, 1]
    assert np.frombuffer(raw[16:24], "<f4")[1] == m.conf[0, 0, 1]
    assert np.frombuffer(raw[16 + 4 * 120: 20 + 4 * 120], "<f4")[0] == m.orient2d[0, 0, 0, 0]
    back = C.read_mapset(path)
    for a, b in ((back.conf, m.conf), (back.orient2d, m.orient2d), (back.orient3d, m.orient3d)):
        assert a.tobytes() == b.tobytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(ValueError, match="bytes"):
        C.read_mapset(path)


def test_debug_images(tmp_path):
    p2, o3 = _pose(6)
    files = C.dump_debug_images(C.encode_maps(p2, o3, d=1.5, dims=(16, 16)), tmp_path)
    assert len(files) == 96 and all(f.exists() for f in files)
