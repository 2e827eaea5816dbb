"""Seeded generators of incomplete or corrupted inputs.

All generators take a square ``(a, a, C)`` image and a ``numpy.random.Generator``
(PCG64 via ``numpy.random.default_rng``) and never modify pixels outside the
region they report.  Pixel ``(row, col)`` has its centre at ``(x=col, y=row)``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

KINDS = ("none", "translation", "occlusion", "erase_rect", "erase_circle", "erase_edge",
         "bbox_noise")
EDGES = ("left", "right", "top", "bottom")


class Perturbed(NamedTuple):
    image: np.ndarray
    mask: np.ndarray     # (a, a) pixels replaced by the perturbation
    params: dict


@dataclass(frozen=True)
class BBox:
    center: tuple[float, float]
    size: float

    def __post_init__(self):
        if not self.size > 0:
            raise ValueError("bounding box size must be positive")


@dataclass(frozen=True)
class PerturbSpec:
    kind: str = "none"
    tau: float = 0.0
    count: tuple[int, int] = (1, 8)
    size: tuple[float, float] = (0.1, 0.4)
    sigma_c: float = 0.0
    sigma_s: float = 0.0
    seed: int = 0
    fill: float = 0.0
    label: str = field(default="", compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown perturbation {self.kind!r}")
        if not 0 <= self.tau <= 1:
            raise ValueError("tau must lie in [0, 1]")
        if self.sigma_c < 0 or self.sigma_s < 0:
            raise ValueError("noise levels must be non-negative")

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        if self.kind == "translation":
            return f"translation{round(self.tau * 100)}"
        if self.kind == "bbox_noise":
            return f"bbox({self.sigma_c:g},{self.sigma_s:g})"
        return self.kind

    def to_dict(self) -> dict:
        d = asdict(self)
        d["count"], d["size"] = list(self.count), list(self.size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PerturbSpec":
        d = dict(d)
        for k in ("count", "size"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def item_rng(seed: int, index: int) -> np.random.Generator:
    """Per-item generator derived as ``seed XOR index``."""
    return np.random.default_rng(int(seed) ^ int(index))


def _side(image: np.ndarray) -> int:
    h, w = image.shape[:2]
    if h != w:
        raise ValueError(f"expected a square image, got {h}x{w}")
    return h


def _grid(a: int):
    ys, xs = np.mgrid[0:a, 0:a]
    return xs.astype(np.float64), ys.astype(np.float64)


def _apply_mask(image, mask, fill) -> np.ndarray:
    out = image.copy()
    out[mask] = fill
    return out


def shift_image(image: np.ndarray, dx: int, dy: int, fill=0) -> tuple[np.ndarray, np.ndarray]:
    """Move the crop window by ``(dx, dy)`` pixels; content moves the other way."""
    a = image.shape[0]
    out = np.full_like(image, fill)
    exposed = np.ones(image.shape[:2], dtype=bool)
    src_y = slice(max(0, dy), min(a, a + dy))
    dst_y = slice(max(0, -dy), min(a, a - dy))
    src_x = slice(max(0, dx), min(image.shape[1], image.shape[1] + dx))
    dst_x = slice(max(0, -dx), min(image.shape[1], image.shape[1] - dx))
    out[dst_y, dst_x] = image[src_y, src_x]
    exposed[dst_y, dst_x] = False
    return out, exposed


def translate(image: np.ndarray, tau: float, rng: np.random.Generator, fill=0) -> Perturbed:
    """Shift the crop centre by ``(x, y) * a`` with ``x, y ~ U[-tau, tau]``.

    Offsets are truncated toward zero to whole pixels, so ``|offset| <= tau * a``.
    ``params["offset"]`` is the window shift; subtract it from 2D keypoints.
    """
    a = _side(image)
    xy = rng.uniform(-tau, tau, size=2)
    dx, dy = (int(v) for v in np.fix(xy * a))
    out, exposed = shift_image(image, dx, dy, fill)
    return Perturbed(out, exposed, {"offset": (dx, dy), "draw": tuple(xy)})


def occlude(image: np.ndarray, rng: np.random.Generator, count=(1, 8), size=(0.1, 0.4)) -> Perturbed:
    """Paste a random number of textured rectangles/ellipses.

    ``size`` bounds each occluder's half-extent as a fraction of the side.
    """
    a = _side(image)
    xs, ys = _grid(a)
    out = image.copy()
    mask = np.zeros((a, a), dtype=bool)
    n = int(rng.integers(count[0], count[1] + 1))
    shapes = []
    for _ in range(n):
        cx, cy = rng.uniform(0, a, size=2)
        rx, ry = rng.uniform(size[0], size[1], size=2) * a
        ellipse = bool(rng.random() < 0.5)
        if ellipse:
            m = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1
        else:
            m = (np.abs(xs - cx) <= rx) & (np.abs(ys - cy) <= ry)
        color = rng.uniform(0, 255, size=image.shape[2:])
        noise = rng.normal(0, 20, size=(int(m.sum()),) + image.shape[2:])
        out[m] = np.clip(color + noise, 0, 255).astype(image.dtype)
        mask |= m
        shapes.append({"center": (float(cx), float(cy)), "radii": (float(rx), float(ry)),
                       "ellipse": ellipse})
    return Perturbed(out, mask, {"count": n, "shapes": shapes})


def rect_erase_mask(p1, p2, width: float, a: int) -> np.ndarray:
    """Pixels of the rectangle whose two width-sides have midpoints ``p1`` and ``p2``."""
    xs, ys = _grid(a)
    p1 = np.asarray(p1, dtype=np.float64)
    axis = np.asarray(p2, dtype=np.float64) - p1
    length = float(np.hypot(*axis))
    rx, ry = xs - p1[0], ys - p1[1]
    if length == 0:
        return (rx == 0) & (ry == 0)
    u = axis / length
    t = rx * u[0] + ry * u[1]
    off = -rx * u[1] + ry * u[0]
    return (t >= 0) & (t <= length) & (np.abs(off) <= width / 2)


def erase_rect(image: np.ndarray, rng: np.random.Generator, fill=0) -> Perturbed:
    a = _side(image)
    p1 = rng.uniform(0, a, size=2)
    p2 = rng.uniform(0, a, size=2)
    width = float(rng.uniform(0, a))
    mask = rect_erase_mask(p1, p2, width, a)
    return Perturbed(_apply_mask(image, mask, fill), mask,
                     {"p1": tuple(p1), "p2": tuple(p2), "width": width})


def circle_mask(center, radius: float, a: int) -> np.ndarray:
    xs, ys = _grid(a)
    return (xs - center[0]) ** 2 + (ys - center[1]) ** 2 <= radius ** 2


def erase_circle(image: np.ndarray, rng: np.random.Generator, fill=0) -> Perturbed:
    a = _side(image)
    center = rng.uniform(0, a, size=2)
    radius = float(rng.uniform(a / 5, 2 * a / 5))
    mask = circle_mask(center, radius, a)
    return Perturbed(_apply_mask(image, mask, fill), mask,
                     {"center": tuple(center), "radius": radius})


def edge_mask(edge: str, width: float, a: int) -> np.ndarray:
    xs, ys = _grid(a)
    if edge == "left":
        return xs < width
    if edge == "right":
        return xs >= a - width
    if edge == "top":
        return ys < width
    if edge == "bottom":
        return ys >= a - width
    raise ValueError(f"unknown edge {edge!r}")


def erase_edge(image: np.ndarray, rng: np.random.Generator, fill=0) -> Perturbed:
    a = _side(image)
    edge = EDGES[int(rng.integers(4))]
    width = float(rng.uniform(0, a / 2))
    mask = edge_mask(edge, width, a)
    return Perturbed(_apply_mask(image, mask, fill), mask, {"edge": edge, "width": width})


def bbox_noise(box: BBox, sigma_c: float, sigma_s: float, rng: np.random.Generator) -> BBox:
    """``C <- C + S*N(0, sigma_c^2 I)``, ``S <- S + S*N(0, sigma_s^2)``, size kept >= 1 px."""
    if sigma_c < 0 or sigma_s < 0:
        raise ValueError("noise levels must be non-negative")
    s = box.size
    c = np.asarray(box.center, dtype=np.float64) + s * rng.normal(0.0, 1.0, size=2) * sigma_c
    new_s = s + s * float(rng.normal(0.0, 1.0)) * sigma_s
    return BBox((float(c[0]), float(c[1])), max(1.0, new_s))


def crop_resize(image: np.ndarray, box: BBox, out_size: int, fill=0) -> np.ndarray:
    """Nearest-neighbour crop of the square ``box`` resampled to ``out_size``."""
    k = np.arange(out_size)
    src = box.center[0] - box.size / 2 + (k + 0.5) * box.size / out_size
    cols = np.floor(src + 0.5).astype(int)
    src = box.center[1] - box.size / 2 + (k + 0.5) * box.size / out_size
    rows = np.floor(src + 0.5).astype(int)
    h, w = image.shape[:2]
    out = np.full((out_size, out_size) + image.shape[2:], fill, dtype=image.dtype)
    rv = (rows >= 0) & (rows < h)
    cv = (cols >= 0) & (cols < w)
    out[np.ix_(rv, cv)] = image[np.ix_(rows[rv], cols[cv])]
    return out


def box_transform(box: BBox, out_size: int):
    """Map image-pixel points into the resampled crop of ``box``."""
    scale = out_size / box.size
    origin = np.array(box.center) - box.size / 2

    def f(points):
        return (np.asarray(points, dtype=np.float64) - origin) * scale - 0.5

    return f


def apply(spec: PerturbSpec, image: np.ndarray, rng: np.random.Generator,
          points=None) -> tuple[np.ndarray, np.ndarray | None, dict]:
    """Apply ``spec`` to an image and carry 2D ``points`` (x, y) along."""
    pts = None if points is None else np.asarray(points, dtype=np.float64)
    if spec.kind == "none":
        return image.copy(), pts, {}
    if spec.kind == "translation":
        r = translate(image, spec.tau, rng, spec.fill)
        if pts is not None:
            pts = pts - np.array(r.params["offset"], dtype=np.float64)
        return r.image, pts, r.params
    if spec.kind == "occlusion":
        r = occlude(image, rng, spec.count, spec.size)
    elif spec.kind == "erase_rect":
        r = erase_rect(image, rng, spec.fill)
    elif spec.kind == "erase_circle":
        r = erase_circle(image, rng, spec.fill)
    elif spec.kind == "erase_edge":
        r = erase_edge(image, rng, spec.fill)
    else:
        a = _side(image)
        box = BBox(((a - 1) / 2, (a - 1) / 2), float(a))
        noisy = bbox_noise(box, spec.sigma_c, spec.sigma_s, rng)
        out = crop_resize(image, noisy, a, spec.fill)
        if pts is not None:
            pts = box_transform(noisy, a)(pts)
        return out, pts, {"box": noisy}
    return r.image, pts, r.params
