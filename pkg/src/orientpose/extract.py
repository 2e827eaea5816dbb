"""Map -> orientation -> pose decoding by confidence-weighted voting."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grad as G
from .mapcodec import N_LIMBS, MapSet
from .skeleton import LimbTopology, default_lengths, fk_integrate_tensor

NORM_EPS = 1e-6
SCORE_EPS = 1e-6


@dataclass
class InitialEstimate:
    orients: object     # (..., 16, 3) normalized votes
    raw_votes: object   # (..., 16, 3)
    scores: object      # (..., 16)
    pose: object        # (..., 17, 3)

    def detach(self) -> "InitialEstimate":
        def d(x):
            return x.detach() if isinstance(x, G.Tensor) else x
        return InitialEstimate(d(self.orients), d(self.raw_votes), d(self.scores), d(self.pose))

    def numpy(self) -> "InitialEstimate":
        def d(x):
            return x.data if isinstance(x, G.Tensor) else np.asarray(x)
        return InitialEstimate(d(self.orients), d(self.raw_votes), d(self.scores), d(self.pose))


def _t(x) -> G.Tensor:
    return x if isinstance(x, G.Tensor) else G.Tensor(np.asarray(x, dtype=np.float64))


def vote(conf, orient3d) -> G.Tensor:
    """Mean over all pixels of ``conf * orient3d``.

    conf: ``(..., H, W)``; orient3d: ``(..., 3, H, W)``; result ``(..., 3)``.
    """
    conf, orient3d = _t(conf), _t(orient3d)
    if orient3d.shape[:-3] != conf.shape[:-2] or orient3d.shape[-2:] != conf.shape[-2:]:
        raise ValueError(f"vote: dimension mismatch {conf.shape} vs {orient3d.shape}")
    h, w = conf.shape[-2:]
    c = G.broadcast(conf.reshape(conf.shape[:-2] + (1, h, w)), orient3d.shape)
    return (c * orient3d).sum(axis=(-2, -1)) * (1.0 / (h * w))


def normalize_orientation(raw, eps: float = NORM_EPS) -> G.Tensor:
    """``raw / |raw|`` along the last axis, or the zero vector when ``|raw| <= eps``."""
    raw = _t(raw)
    sq = (raw * raw).sum(axis=-1, keepdims=True)
    live = (np.sqrt(sq.data) > eps).astype(raw.dtype)
    G._log_kink(live)
    # pad dead rows before the root so the zero branch has a finite derivative
    safe = G.sqrt(sq + (1.0 - live))
    unit = raw / G.broadcast(safe, raw.shape)
    return unit * np.broadcast_to(live, raw.shape)


def confidence_score(conf, eps: float = SCORE_EPS) -> G.Tensor:
    """``sum(c^2) / (sum(c) + eps)`` over the last two axes."""
    conf = _t(conf)
    return (conf * conf).sum(axis=(-2, -1)) / (conf.sum(axis=(-2, -1)) + eps)


def split_maps(maps: G.Tensor) -> tuple[G.Tensor, G.Tensor, G.Tensor]:
    """``(N, 96, H, W)`` -> conf ``(N,16,H,W)``, o2d ``(N,16,2,H,W)``, o3d ``(N,16,3,H,W)``."""
    n, ch, h, w = maps.shape
    if ch != 6 * N_LIMBS:
        raise ValueError(f"expected {6 * N_LIMBS} channels, got {ch}")
    conf = maps[:, :N_LIMBS]
    o2 = maps[:, N_LIMBS:3 * N_LIMBS].reshape(n, N_LIMBS, 2, h, w)
    o3 = maps[:, 3 * N_LIMBS:].reshape(n, N_LIMBS, 3, h, w)
    return conf, o2, o3


def decode_tensor(maps: G.Tensor, lengths=None, topo: LimbTopology | None = None) -> InitialEstimate:
    """Differentiable decode of a batch of stacked maps."""
    lengths = default_lengths() if lengths is None else lengths
    conf, _, o3 = split_maps(maps)
    raw = vote(conf, o3)
    v = normalize_orientation(raw)
    s = confidence_score(conf)
    return InitialEstimate(v, raw, s, fk_integrate_tensor(v, lengths, topo))


def decode_pose(maps: MapSet, lengths=None, topo: LimbTopology | None = None) -> InitialEstimate:
    """Decode a single MapSet into numpy orientations, votes, scores and pose."""
    arr = G.Tensor(maps.to_array()[None].astype(np.float64))
    est = decode_tensor(arr, lengths, topo).numpy()
    return InitialEstimate(est.orients[0], est.raw_votes[0], est.scores[0], est.pose[0])
