"""Ground-truth limb confidence and orientation maps.

Pixel ``(row, col)`` has its centre at the point ``(x=col, y=row)``.
A limb whose 2D length is at least ``d`` occupies the oriented rectangle
around its axis: ``0 <= t <= length`` along the axis and ``|offset| < d/2``
across it.  Shorter limbs fall back to the axis-aligned ``d x d`` square
``[m - d/2, m + d/2)`` around their midpoint ``m``.

Channel layout of a stacked map tensor (``to_array``): 16 confidence
channels, then 16 x 2 orientation-2D channels, then 16 x 3 orientation-3D
channels, each limb-major.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .skeleton import LimbTopology, canonical_topology

N_LIMBS = 16
CHANNELS = N_LIMBS * (1 + 2 + 3)
MAPSET_MAGIC = b"OPMS"


@dataclass
class MapSet:
    conf: np.ndarray      # (16, H, W)
    orient2d: np.ndarray  # (16, 2, H, W)
    orient3d: np.ndarray  # (16, 3, H, W)

    @property
    def height(self) -> int:
        return self.conf.shape[1]

    @property
    def width(self) -> int:
        return self.conf.shape[2]

    @property
    def n_channels(self) -> int:
        return self.conf.shape[0] + self.orient2d.shape[0] * 2 + self.orient3d.shape[0] * 3

    def to_array(self) -> np.ndarray:
        """Stack into a ``(96, H, W)`` network-layout array."""
        h, w = self.height, self.width
        return np.concatenate([self.conf, self.orient2d.reshape(-1, h, w),
                               self.orient3d.reshape(-1, h, w)], axis=0)

    @classmethod
    def from_array(cls, arr) -> "MapSet":
        arr = np.asarray(arr)
        if arr.shape[0] != CHANNELS:
            raise ValueError(f"expected {CHANNELS} channels, got {arr.shape[0]}")
        h, w = arr.shape[1:]
        return cls(arr[:N_LIMBS], arr[N_LIMBS:3 * N_LIMBS].reshape(N_LIMBS, 2, h, w),
                   arr[3 * N_LIMBS:].reshape(N_LIMBS, 3, h, w))


def pixel_centers(dims: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    w, h = dims
    ys, xs = np.mgrid[0:h, 0:w]
    return xs.astype(np.float64), ys.astype(np.float64)


def limb_region(p_parent, p_child, d: float, dims: tuple[int, int]) -> np.ndarray:
    """Boolean ``(h, w)`` mask of the limb region; ``dims`` is ``(w, h)``."""
    if d <= 0:
        raise ValueError("limb width d must be positive")
    a = np.asarray(p_parent, dtype=np.float64)
    b = np.asarray(p_child, dtype=np.float64)
    xs, ys = pixel_centers(dims)
    axis = b - a
    length = float(np.hypot(*axis))
    if length >= d:
        u = axis / length
        rx, ry = xs - a[0], ys - a[1]
        t = rx * u[0] + ry * u[1]
        off = -rx * u[1] + ry * u[0]
        return (t >= 0) & (t <= length) & (np.abs(off) < d / 2)
    m = (a + b) / 2
    return ((xs >= m[0] - d / 2) & (xs < m[0] + d / 2)
            & (ys >= m[1] - d / 2) & (ys < m[1] + d / 2))


def default_width(dims: tuple[int, int]) -> float:
    return dims[0] / 16


def encode_maps(pose2d, orients3d, topo: LimbTopology | None = None, d: float | None = None,
                dims: tuple[int, int] = (64, 64)) -> MapSet:
    topo = topo or canonical_topology()
    d = default_width(dims) if d is None else d
    pose2d = np.asarray(pose2d, dtype=np.float64)
    orients3d = np.asarray(orients3d, dtype=np.float64)
    w, h = dims
    conf = np.zeros((topo.n_limbs, h, w))
    o2 = np.zeros((topo.n_limbs, 2, h, w))
    o3 = np.zeros((topo.n_limbs, 3, h, w))
    for i, (p, c) in enumerate(topo.limbs):
        mask = limb_region(pose2d[p], pose2d[c], d, dims)
        conf[i] = mask
        delta = pose2d[c] - pose2d[p]
        n2 = np.hypot(*delta)
        if n2 >= 1e-6:
            o2[i] = (delta / n2)[:, None, None] * mask
        o3[i] = orients3d[i][:, None, None] * mask
    return MapSet(conf, o2, o3)


def limb_visibility(pose2d, topo: LimbTopology | None = None, d: float | None = None,
                    dims: tuple[int, int] = (64, 64)) -> np.ndarray:
    topo = topo or canonical_topology()
    d = default_width(dims) if d is None else d
    pose2d = np.asarray(pose2d, dtype=np.float64)
    return np.array([limb_region(pose2d[p], pose2d[c], d, dims).any() for p, c in topo.limbs])


def write_mapset(path, maps: MapSet) -> None:
    """16-byte header (magic, w, h, limbs) then float32 LE in (limb, channel, row, col)."""
    n = maps.conf.shape[0]
    per_limb = np.concatenate([maps.conf[:, None], maps.orient2d, maps.orient3d], axis=1)
    with open(path, "wb") as fh:
        fh.write(MAPSET_MAGIC + struct.pack("<III", maps.width, maps.height, n))
        fh.write(per_limb.astype("<f4").tobytes(order="C"))


def read_mapset(path) -> MapSet:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAPSET_MAGIC:
        raise ValueError(f"{path}: not a MapSet file")
    w, h, n = struct.unpack("<III", raw[4:16])
    expect = 16 + 4 * n * 6 * h * w
    if len(raw) != expect:
        raise ValueError(f"{path}: expected {expect} bytes, found {len(raw)}")
    per_limb = np.frombuffer(raw[16:], dtype="<f4").reshape(n, 6, h, w)
    return MapSet(per_limb[:, 0].copy(), per_limb[:, 1:3].copy(), per_limb[:, 3:].copy())


def dump_debug_images(maps: MapSet, out_dir, names=None) -> list[Path]:
    """One PNG per channel: confidence as grayscale, orientations mapped from [-1, 1]."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = names or [f"limb{i:02d}" for i in range(maps.conf.shape[0])]
    written = []

    def save(arr, lo, name):
        img = np.clip((np.asarray(arr, dtype=np.float64) - lo) / (1 - lo), 0, 1)
        p = out_dir / f"{name}.png"
        Image.fromarray((img * 255).astype(np.uint8)).save(p)
        written.append(p)

    for i, nm in enumerate(names):
        save(maps.conf[i], 0.0, f"{nm}_conf")
        for k, ax in enumerate("xy"):
            save(maps.orient2d[i, k], -1.0, f"{nm}_o2d_{ax}")
        for k, ax in enumerate("xyz"):
            save(maps.orient3d[i, k], -1.0, f"{nm}_o3d_{ax}")
    return written
