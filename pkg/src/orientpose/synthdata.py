"""Synthetic stick-figure dataset: random skeletons, orthographic camera, renderer.

Image coordinates put pixel ``(row, col)`` at ``(x=col, y=row)``.  Map
coordinates use the same rule on the downsampled grid, so a point maps as
``map = (image - (stride - 1) / 2) / stride``.

Dataset file layout (little-endian)::

    header  "OPK1" u32 version u32 count u32 height u32 width u32 map_size
            u32 n_joints u32 n_limbs                           (32 bytes)
    record  image u8[h*w*3] | pose3d f32[17*3] | pose2d f32[17*2]
            | flags u8 (bit0 has_3d) | visibility u16 (bit i = limb i)
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mapcodec import MapSet, encode_maps, limb_region
from .skeleton import (LimbTopology, canonical_topology, default_lengths, fk_integrate,
                       orientations_from_pose)

DATASET_MAGIC = b"OPK1"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIII")

# rest direction per limb in camera axes (x right, y down, z away from camera)
REST_DIRECTIONS = np.array([
    [-1, 0, 0], [0, 1, 0], [0, 1, 0],
    [1, 0, 0], [0, 1, 0], [0, 1, 0],
    [0, -1, 0], [0, -1, 0], [0, -1, 0], [0, -1, 0],
    [1, 0, 0], [0, 1, 0], [0, 1, 0],
    [-1, 0, 0], [0, 1, 0], [0, 1, 0],
], dtype=np.float64)

CONE_DEGREES = np.array([10, 35, 35, 10, 35, 35, 15, 15, 20, 25, 10, 60, 60, 10, 60, 60],
                        dtype=np.float64)

PALETTE = np.array([
    [230, 25, 75], [245, 130, 48], [255, 225, 25], [60, 180, 75],
    [70, 240, 240], [0, 130, 200], [145, 30, 180], [240, 50, 230],
    [210, 245, 60], [250, 190, 212], [0, 128, 128], [220, 190, 255],
    [170, 110, 40], [255, 250, 200], [128, 0, 0], [170, 255, 195],
], dtype=np.float64)


class DatasetError(ValueError):
    pass


class DatasetHeaderError(DatasetError):
    pass


class DatasetVersionError(DatasetError):
    pass


class DatasetTruncatedError(DatasetError):
    def __init__(self, offset: int, expected: int):
        super().__init__(f"dataset truncated at byte offset {offset} (expected {expected} bytes)")
        self.offset = offset


@dataclass(frozen=True)
class Camera:
    scale: float                          # pixels per millimetre
    principal: tuple[float, float]

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("camera scale must be positive")


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 64
    map_size: int = 16
    limb_width: float = 1.5               # map pixels
    cam_scale: float = 0.028
    pelvis_xy: tuple[float, float] = (31.5, 30.0)
    has_3d_fraction: float = 0.5
    cone_scale: float = 1.0
    yaw_degrees: float = 45.0
    background: float = 60.0

    @property
    def stride(self) -> int:
        return self.image_size // self.map_size

    @property
    def camera(self) -> Camera:
        return Camera(self.cam_scale, self.pelvis_xy)

    @property
    def image_width(self) -> float:
        return self.limb_width * self.stride


@dataclass
class Sample:
    image: np.ndarray            # (h, w, 3) uint8
    pose3d: np.ndarray           # (17, 3) float32, mm, root at origin
    pose2d: np.ndarray           # (17, 2) float32, map pixels
    has_3d: bool
    visibility: np.ndarray       # (16,) bool


def _cap_direction(axis: np.ndarray, half_angle: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform direction on the spherical cap of ``half_angle`` around ``axis``."""
    cos_a = 1.0 - rng.random() * (1.0 - np.cos(half_angle))
    phi = rng.uniform(0, 2 * np.pi)
    sin_a = np.sqrt(max(0.0, 1.0 - cos_a * cos_a))
    helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    return cos_a * axis + sin_a * (np.cos(phi) * e1 + np.sin(phi) * e2)


def yaw_matrix(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def roll_matrix(angle: float) -> np.ndarray:
    """Rotation about the camera's optical axis (in-plane image rotation)."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def sample_orientations(rng: np.random.Generator, cone_scale: float = 1.0,
                        yaw_degrees: float = 0.0) -> np.ndarray:
    dirs = np.array([_cap_direction(REST_DIRECTIONS[i], np.deg2rad(CONE_DEGREES[i]) * cone_scale, rng)
                     for i in range(16)])
    if yaw_degrees:
        dirs = dirs @ yaw_matrix(np.deg2rad(rng.uniform(-yaw_degrees, yaw_degrees))).T
    return dirs


def sample_pose(rng: np.random.Generator, cone_scale: float = 1.0, yaw_degrees: float = 45.0,
                lengths=None, topo: LimbTopology | None = None) -> np.ndarray:
    """Random pose: per-limb cone around the rest direction, then a body yaw."""
    lengths = default_lengths() if lengths is None else lengths
    return fk_integrate(sample_orientations(rng, cone_scale, yaw_degrees), lengths, topo)


def rest_pose(lengths=None) -> np.ndarray:
    return fk_integrate(REST_DIRECTIONS, default_lengths() if lengths is None else lengths)


def project(pose3d, cam: Camera) -> np.ndarray:
    """Orthographic projection to image pixels: ``(x, y) * scale + principal``."""
    pose3d = np.asarray(pose3d, dtype=np.float64)
    return pose3d[..., :2] * cam.scale + np.asarray(cam.principal)


def image_to_map(points, stride: int) -> np.ndarray:
    return (np.asarray(points, dtype=np.float64) - (stride - 1) / 2) / stride


def map_to_image(points, stride: int) -> np.ndarray:
    return np.asarray(points, dtype=np.float64) * stride + (stride - 1) / 2


def limb_shade(orients3d) -> np.ndarray:
    """Brightness per limb from its depth direction: toward the camera is brighter."""
    return 0.6 - 0.4 * np.asarray(orients3d)[..., 2]


def render(pose2d_img, orients3d, rng: np.random.Generator, width: float, size: int = 64,
           topo: LimbTopology | None = None, background: float = 60.0,
           limbs=None) -> np.ndarray:
    """Filled limb rectangles in palette colours over uniform noise.

    Limbs are painted far-to-near.  ``limbs`` restricts drawing to a subset.
    """
    topo = topo or canonical_topology()
    pose2d_img = np.asarray(pose2d_img, dtype=np.float64)
    orients3d = np.asarray(orients3d, dtype=np.float64)
    img = rng.uniform(0, background, size=(size, size, 3))
    shade = limb_shade(orients3d)
    depth = [orients3d[i, 2] for i in range(topo.n_limbs)]
    order = [i for i in np.argsort(depth, kind="stable")[::-1]
             if limbs is None or i in set(limbs)]
    for i in order:
        p, c = topo.limbs[i]
        mask = limb_region(pose2d_img[p], pose2d_img[c], width, (size, size))
        img[mask] = PALETTE[i] * shade[i]
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


@dataclass
class Augment:
    scale: float = 1.0
    shift: tuple[float, float] = (0.0, 0.0)     # fraction of image size
    rotation: float = 0.0                       # degrees, in-plane
    flip: bool = False
    jitter: tuple[float, float, float] = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class AugmentRanges:
    scale: float = 0.25
    shift: float = 0.2
    rotation: float = 30.0
    flip_p: float = 0.5
    jitter: float = 0.2

    def sample(self, rng: np.random.Generator) -> Augment:
        return Augment(
            scale=float(rng.uniform(1 - self.scale, 1 + self.scale)),
            shift=tuple(rng.uniform(-self.shift, self.shift, size=2)),
            rotation=float(rng.uniform(-self.rotation, self.rotation)),
            flip=bool(rng.random() < self.flip_p),
            jitter=tuple(rng.uniform(1 - self.jitter, 1 + self.jitter, size=3)),
        )


def augment_pose(pose3d, aug: Augment, topo: LimbTopology | None = None) -> np.ndarray:
    topo = topo or canonical_topology()
    pose = np.asarray(pose3d, dtype=np.float64)
    if aug.flip:
        pose = pose[topo.mirror_joints()] * np.array([-1.0, 1.0, 1.0])
    if aug.rotation:
        pose = pose @ roll_matrix(np.deg2rad(aug.rotation)).T
    return pose


def render_pose(pose3d, cfg: SynthConfig, rng: np.random.Generator, aug: Augment | None = None,
                topo: LimbTopology | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Render ``pose3d``; returns ``(image, pose3d_used, pose2d_map)``."""
    topo = topo or canonical_topology()
    aug = aug or Augment()
    pose = augment_pose(pose3d, aug, topo)
    cam = Camera(cfg.cam_scale * aug.scale,
                 (cfg.pelvis_xy[0] + aug.shift[0] * cfg.image_size,
                  cfg.pelvis_xy[1] + aug.shift[1] * cfg.image_size))
    p2 = project(pose, cam)
    orients = orientations_from_pose(pose, topo).orients
    img = render(p2, orients, rng, cfg.image_width, cfg.image_size, topo, cfg.background)
    if aug.jitter != (1.0, 1.0, 1.0):
        img = np.clip(img * np.asarray(aug.jitter), 0, 255).astype(np.uint8)
    return img, pose, image_to_map(p2, cfg.stride)


def make_sample(rng: np.random.Generator, cfg: SynthConfig = SynthConfig(),
                topo: LimbTopology | None = None) -> Sample:
    pose = sample_pose(rng, cfg.cone_scale, cfg.yaw_degrees, topo=topo).astype(np.float32)
    has_3d = bool(rng.random() < cfg.has_3d_fraction)
    img, _, p2 = render_pose(pose, cfg, rng, topo=topo)
    vis = visibility(p2, cfg, topo)
    return Sample(img, pose, p2.astype(np.float32), has_3d, vis)


def visibility(pose2d_map, cfg: SynthConfig, topo: LimbTopology | None = None) -> np.ndarray:
    topo = topo or canonical_topology()
    dims = (cfg.map_size, cfg.map_size)
    return np.array([limb_region(pose2d_map[p], pose2d_map[c], cfg.limb_width, dims).any()
                     for p, c in topo.limbs])


def sample_maps(sample: Sample, cfg: SynthConfig, topo: LimbTopology | None = None) -> MapSet:
    orients = orientations_from_pose(sample.pose3d, topo).orients
    return encode_maps(sample.pose2d, orients, topo, cfg.limb_width, (cfg.map_size, cfg.map_size))


def generate_dataset(n: int, seed: int, cfg: SynthConfig = SynthConfig()) -> list[Sample]:
    return [make_sample(np.random.default_rng(int(seed) ^ i), cfg) for i in range(n)]


def record_size(height: int, width: int, n_joints: int = 17) -> int:
    return height * width * 3 + n_joints * 3 * 4 + n_joints * 2 * 4 + 1 + 2


def write_dataset(samples: list[Sample], path, map_size: int = 16) -> None:
    if not samples:
        raise ValueError("write_dataset: no samples")
    h, w = samples[0].image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(samples), h, w, map_size, 17, 16))
        for s in samples:
            if s.image.shape != (h, w, 3):
                raise ValueError("all images must share one size")
            fh.write(np.ascontiguousarray(s.image, dtype=np.uint8).tobytes())
            fh.write(np.asarray(s.pose3d, dtype="<f4").tobytes())
            fh.write(np.asarray(s.pose2d, dtype="<f4").tobytes())
            bits = int(sum(1 << i for i, v in enumerate(s.visibility) if v))
            fh.write(struct.pack("<BH", int(bool(s.has_3d)), bits))


def read_header(raw: bytes) -> dict:
    if len(raw) < _HEADER.size:
        raise DatasetTruncatedError(len(raw), _HEADER.size)
    magic, version, count, h, w, map_size, nj, nl = _HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC or nj != 17 or nl != 16:
        raise DatasetHeaderError(f"bad dataset header (magic {magic!r}, joints {nj}, limbs {nl})")
    if version != DATASET_VERSION:
        raise DatasetVersionError(f"dataset version {version}, reader supports {DATASET_VERSION}")
    return {"count": count, "height": h, "width": w, "map_size": map_size}


def expected_file_size(count: int, height: int, width: int) -> int:
    return _HEADER.size + count * record_size(height, width)


def read_dataset(path) -> list[Sample]:
    raw = Path(path).read_bytes()
    hdr = read_header(raw)
    h, w, n = hdr["height"], hdr["width"], hdr["count"]
    rec = record_size(h, w)
    total = expected_file_size(n, h, w)
    if len(raw) < total:
        raise DatasetTruncatedError(len(raw), total)
    out = []
    off = _HEADER.size
    for _ in range(n):
        img = np.frombuffer(raw, np.uint8, h * w * 3, off).reshape(h, w, 3).copy()
        o = off + h * w * 3
        p3 = np.frombuffer(raw, "<f4", 51, o).reshape(17, 3).astype(np.float32)
        p2 = np.frombuffer(raw, "<f4", 34, o + 204).reshape(17, 2).astype(np.float32)
        flags, bits = struct.unpack_from("<BH", raw, o + 204 + 136)
        vis = np.array([(bits >> i) & 1 for i in range(16)], dtype=bool)
        out.append(Sample(img, p3, p2, bool(flags & 1), vis))
        off += rec
    return out


@dataclass
class Batch:
    images: np.ndarray       # (N, 3, H, W) float, scaled to [0, 1]
    maps: np.ndarray         # (N, 96, h, w)
    pose3d: np.ndarray       # (N, 17, 3)
    has_3d: np.ndarray       # (N,)
    visibility: np.ndarray = field(default=None)  # (N, 16)


def to_batch(samples: list[Sample], cfg: SynthConfig, dtype=np.float32) -> Batch:
    images = np.stack([s.image for s in samples]).transpose(0, 3, 1, 2).astype(dtype) / 255.0
    maps = np.stack([sample_maps(s, cfg).to_array() for s in samples]).astype(dtype)
    return Batch(images, maps, np.stack([s.pose3d for s in samples]).astype(np.float64),
                 np.array([s.has_3d for s in samples]), np.stack([s.visibility for s in samples]))
