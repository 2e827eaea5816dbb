"""17-joint / 16-limb human skeleton and forward kinematics.

Poses are ``(..., 17, 3)`` arrays in millimetres, orientation sets are
``(..., 16, 3)`` arrays of unit (or all-zero) parent->child directions.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import grad as G

DEGENERATE_MM = 1e-9


@dataclass(frozen=True)
class LimbTopology:
    joints: tuple[str, ...]
    limbs: tuple[tuple[int, int], ...]
    root_index: int = 0

    def __post_init__(self):
        if len(self.joints) != 17 or len(self.limbs) != 16:
            raise ValueError("topology must have 17 joints and 16 limbs")
        seen = {self.root_index}
        children = [c for _, c in self.limbs]
        if sorted(children + [self.root_index]) != list(range(len(self.joints))):
            raise ValueError("every non-root joint must be the child of exactly one limb")
        for p, c in self.limbs:
            if p not in seen:
                raise ValueError(f"limb {p}->{c} listed before its parent joint is placed")
            seen.add(c)

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def n_limbs(self) -> int:
        return len(self.limbs)

    @property
    def limb_names(self) -> tuple[str, ...]:
        return tuple(f"{self.joints[p]}->{self.joints[c]}" for p, c in self.limbs)

    def limb_path(self, joint: int) -> list[int]:
        """Limb indices on the path from the root to ``joint``, root first."""
        by_child = {c: i for i, (_, c) in enumerate(self.limbs)}
        path = []
        while joint != self.root_index:
            i = by_child[joint]
            path.append(i)
            joint = self.limbs[i][0]
        return path[::-1]

    def depth(self, joint: int) -> int:
        return len(self.limb_path(joint))

    def mirror_joints(self) -> np.ndarray:
        """Permutation swapping left/right joints (by ``l_``/``r_`` name prefix)."""
        index = {n: i for i, n in enumerate(self.joints)}
        perm = []
        for n in self.joints:
            if n.startswith("l_"):
                perm.append(index["r_" + n[2:]])
            elif n.startswith("r_"):
                perm.append(index["l_" + n[2:]])
            else:
                perm.append(index[n])
        return np.array(perm)

    def mirror_limbs(self) -> np.ndarray:
        jp = self.mirror_joints()
        index = {lb: i for i, lb in enumerate(self.limbs)}
        return np.array([index[(int(jp[p]), int(jp[c]))] for p, c in self.limbs])


def check_lengths(lengths) -> np.ndarray:
    lengths = np.asarray(lengths, dtype=np.float64)
    if lengths.shape != (16,) or not np.all(np.isfinite(lengths)) or np.any(lengths <= 0):
        raise ValueError("limb lengths must be 16 positive finite values")
    return lengths


def _config_path() -> Path:
    return Path(str(resources.files("orientpose") / "data" / "skeleton.json"))


def load_skeleton_config(path=None) -> tuple[LimbTopology, np.ndarray]:
    cfg = json.loads(Path(path or _config_path()).read_text())
    topo = LimbTopology(tuple(cfg["joints"]), tuple(tuple(lb) for lb in cfg["limbs"]),
                        int(cfg.get("root", 0)))
    return topo, check_lengths(cfg["lengths_mm"])


def save_skeleton_config(path, topo: LimbTopology, lengths) -> None:
    doc = {"joints": list(topo.joints), "limbs": [list(lb) for lb in topo.limbs],
           "root": topo.root_index, "lengths_mm": [float(x) for x in check_lengths(lengths)]}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


_CANONICAL, _DEFAULT_LENGTHS = load_skeleton_config()


def canonical_topology() -> LimbTopology:
    return _CANONICAL


def default_lengths() -> np.ndarray:
    return _DEFAULT_LENGTHS.copy()


def fk_integrate(orients, lengths, topo: LimbTopology | None = None) -> np.ndarray:
    """Place joints root-outward: child = parent + length * direction, root at 0."""
    topo = topo or _CANONICAL
    orients = np.asarray(orients, dtype=np.float64)
    lengths = np.asarray(lengths, dtype=np.float64)
    if not (np.all(np.isfinite(orients)) and np.all(np.isfinite(lengths))):
        raise ValueError("fk_integrate: non-finite input")
    if orients.shape[-2:] != (topo.n_limbs, 3):
        raise ValueError(f"fk_integrate: expected (..., 16, 3) orientations, got {orients.shape}")
    pose = np.zeros(orients.shape[:-2] + (topo.n_joints, 3))
    for i, (p, c) in enumerate(topo.limbs):
        pose[..., c, :] = pose[..., p, :] + lengths[i] * orients[..., i, :]
    return pose


def fk_integrate_tensor(orients: G.Tensor, lengths, topo: LimbTopology | None = None) -> G.Tensor:
    """Differentiable FK on an ``(N, 16, 3)`` tensor; returns ``(N, 17, 3)``."""
    topo = topo or _CANONICAL
    n = orients.shape[0]
    scale = np.broadcast_to(np.asarray(lengths, dtype=orients.dtype)[None, :, None], orients.shape)
    steps = orients * scale
    joints: list[G.Tensor | None] = [None] * topo.n_joints
    joints[topo.root_index] = G.Tensor(np.zeros((n, 3), dtype=orients.dtype))
    for i, (p, c) in enumerate(topo.limbs):
        joints[c] = joints[p] + steps[:, i, :]
    return G.stack(joints, axis=1)


class LimbDecomposition(NamedTuple):
    orients: np.ndarray
    lengths: np.ndarray
    degenerate: np.ndarray


def orientations_from_pose(pose, topo: LimbTopology | None = None) -> LimbDecomposition:
    """Unit limb directions and lengths of ``pose``; degenerate limbs give zeros."""
    topo = topo or _CANONICAL
    pose = np.asarray(pose, dtype=np.float64)
    if not np.all(np.isfinite(pose)):
        raise ValueError("orientations_from_pose: non-finite pose")
    par = np.array([p for p, _ in topo.limbs])
    chi = np.array([c for _, c in topo.limbs])
    delta = pose[..., chi, :] - pose[..., par, :]
    lengths = np.linalg.norm(delta, axis=-1)
    degenerate = lengths < DEGENERATE_MM
    safe = np.where(degenerate, 1.0, lengths)
    orients = np.where(degenerate[..., None], 0.0, delta / safe[..., None])
    return LimbDecomposition(orients, np.where(degenerate, 0.0, lengths), degenerate)


def root_center(pose) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    return pose - pose[..., _CANONICAL.root_index: _CANONICAL.root_index + 1, :]
