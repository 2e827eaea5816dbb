"""Training objectives for map prediction, pose regression and complementation."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import grad as G
from .extract import split_maps

BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class LossConfig:
    lambda_conf: float = 0.1
    lambda_o2d: float = 1.0
    lambda_o3d: float = 1.0
    stages: int = 2
    use_pose_loss: bool = True
    pose_scale: float = 1.0     # loss units per millimetre for the pose terms

    def __post_init__(self):
        if min(self.lambda_conf, self.lambda_o2d, self.lambda_o3d) < 0:
            raise ValueError("loss weights must be non-negative")
        if not self.pose_scale > 0:
            raise ValueError("pose_scale must be positive")


def _t(x):
    return x if isinstance(x, G.Tensor) else G.Tensor(np.asarray(x, dtype=np.float64))


def _check(a, b, name):
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def bce_map_loss(pred_conf, gt_conf, per_sample: bool = False) -> G.Tensor:
    pred, gt = _t(pred_conf), _t(gt_conf)
    _check(pred, gt, "bce_map_loss")
    p = G.clip(pred, BCE_CLAMP, 1 - BCE_CLAMP)
    ll = gt * G.log(p) + (1.0 - gt) * G.log(1.0 - p)
    return -_reduce(ll, per_sample)


def mse_map_loss(pred_orient, gt_orient, per_sample: bool = False) -> G.Tensor:
    pred, gt = _t(pred_orient), _t(gt_orient)
    _check(pred, gt, "mse_map_loss")
    return _reduce(G.square(pred - gt), per_sample)


def l1_pose_loss(pred, gt, per_sample: bool = False) -> G.Tensor:
    pred, gt = _t(pred), _t(gt)
    _check(pred, gt, "l1_pose_loss")
    return _reduce(G.abs_(pred - gt), per_sample)


def _reduce(x: G.Tensor, per_sample: bool) -> G.Tensor:
    if per_sample:
        return x.mean(axis=tuple(range(1, x.ndim)))
    return x.mean()


def pose_term(pose, gt_pose, has_3d, cfg: LossConfig = LossConfig()) -> G.Tensor:
    """Indicator-masked L1 pose loss in ``cfg.pose_scale`` units."""
    k = cfg.pose_scale
    pred = _t(pose) * k if k != 1.0 else _t(pose)
    gt = np.asarray(gt_pose, dtype=np.float64) * k
    return _masked_mean(l1_pose_loss(pred, gt, per_sample=True), np.asarray(has_3d, dtype=bool))


def _masked_mean(per_sample: G.Tensor, has_3d: np.ndarray) -> G.Tensor:
    # 1/N * sum(indicator * loss): rows without 3D labels get exactly zero gradient
    return (per_sample * has_3d.astype(per_sample.dtype)).sum() * (1.0 / len(has_3d))


def total_loss(stage_preds, init_pose, comp_pose, gt_maps, gt_pose, has_3d,
               cfg: LossConfig = LossConfig()) -> tuple[G.Tensor, dict[str, float]]:
    """Sum over stages of weighted map losses plus 3D pose terms.

    ``stage_preds``: list of ``(N, 96, H, W)`` tensors; ``gt_maps``: ``(N, 96, H, W)``;
    ``has_3d``: ``(N,)`` booleans.  ``init_pose``/``comp_pose`` may be ``None``
    to drop that term.  Returns the loss and a breakdown keyed ``"<term>/<stage>"``.
    """
    if len(stage_preds) != cfg.stages:
        raise ValueError(f"expected {cfg.stages} stage predictions, got {len(stage_preds)}")
    has_3d = np.asarray(has_3d, dtype=bool)
    g_conf, g_o2, g_o3 = split_maps(_t(gt_maps))
    terms: list[G.Tensor] = []
    parts: dict[str, float] = {}
    for t, pred in enumerate(stage_preds, 1):
        conf, o2, o3 = split_maps(pred)
        l_cm = bce_map_loss(conf, g_conf)
        l_2d = mse_map_loss(o2, g_o2)
        l_3d = _masked_mean(mse_map_loss(o3, g_o3, per_sample=True), has_3d)
        parts[f"cm/{t}"] = l_cm.item()
        parts[f"om2d/{t}"] = l_2d.item()
        parts[f"om3d/{t}"] = l_3d.item()
        terms += [l_cm * cfg.lambda_conf, l_2d * cfg.lambda_o2d, l_3d * cfg.lambda_o3d]
    for name, pose in (("p3d", init_pose), ("cp3d", comp_pose)):
        if pose is None:
            continue
        term = pose_term(pose, gt_pose, has_3d, cfg)
        parts[name] = term.item() / cfg.pose_scale      # reported in mm
        if name == "cp3d" or cfg.use_pose_loss:
            terms.append(term)
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    parts["total"] = total.item()
    return total, parts


def write_loss_rows(fh, step: int, parts: dict[str, float], epoch: int | None = None) -> None:
    """Append ``(epoch, step, stage, term, value)`` rows to an open CSV handle."""
    w = csv.writer(fh)
    for key, value in parts.items():
        term, _, stage = key.partition("/")
        w.writerow([epoch if epoch is not None else "", step, stage or "all", term, f"{value:.8g}"])
