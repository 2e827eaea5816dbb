"""Pose error metrics: MPJPE, Procrustes-aligned MPJPE, PCK and AUC."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

PCK_THRESHOLD = 150.0
AUC_THRESHOLDS = np.linspace(0.0, 150.0, 31)


def _root_center(pose: np.ndarray, root: int = 0) -> np.ndarray:
    return pose - pose[..., root:root + 1, :]


def joint_errors(pred, gt) -> np.ndarray:
    """Per-joint Euclidean distance after root-centering both poses."""
    pred = _root_center(np.asarray(pred, dtype=np.float64))
    gt = _root_center(np.asarray(gt, dtype=np.float64))
    return np.linalg.norm(pred - gt, axis=-1)


def mpjpe(pred, gt) -> float:
    return float(joint_errors(pred, gt).mean())


def procrustes_align(pred, gt, strict: bool = True) -> np.ndarray:
    """Similarity transform of ``pred`` (J, 3) that best matches ``gt`` in least squares.

    With ``strict`` a rank < 2 configuration raises.  Otherwise a prediction
    collapsed to one point maps to the centroid of ``gt`` (the best any
    similarity can do) and collinear input uses the closed form as is.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mu_p, mu_g = pred.mean(0), gt.mean(0)
    x, y = pred - mu_p, gt - mu_g
    if strict:
        if np.linalg.matrix_rank(x, tol=1e-9 * max(1.0, np.abs(x).max())) < 2 or \
                np.linalg.matrix_rank(y, tol=1e-9 * max(1.0, np.abs(y).max())) < 2:
            raise ValueError("procrustes_align: degenerate (rank < 2) configuration")
    elif not np.abs(x).max() > 1e-9:
        return np.broadcast_to(mu_g, gt.shape).copy()
    u, sig, vt = np.linalg.svd(x.T @ y)
    sign = np.sign(np.linalg.det(u @ vt))
    d = np.array([1.0, 1.0, sign if sign != 0 else 1.0])
    rot = (u * d) @ vt                      # x @ rot ~ y
    scale = float((sig * d).sum() / (x ** 2).sum())
    return scale * x @ rot + mu_g


def pa_mpjpe(pred, gt, strict: bool = True) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.ndim == 2:
        return float(np.linalg.norm(procrustes_align(pred, gt, strict) - gt, axis=-1).mean())
    return float(np.mean([pa_mpjpe(p, g, strict) for p, g in zip(pred, gt)]))


def pck_curve(errors, thresholds=AUC_THRESHOLDS) -> np.ndarray:
    errors = np.asarray(errors, dtype=np.float64).reshape(-1)
    if errors.size == 0:
        raise ValueError("pck: no joints to evaluate")
    return np.array([(errors < t).mean() for t in thresholds])


def pck_auc(preds, gts, thresholds=AUC_THRESHOLDS) -> tuple[float, float]:
    """Pooled PCK at 150 mm (strict) and the mean PCK over ``thresholds``."""
    errors = joint_errors(preds, gts)
    pck150 = float(pck_curve(errors, [PCK_THRESHOLD])[0])
    return pck150, float(pck_curve(errors, thresholds).mean())


@dataclass
class EvalReport:
    mpjpe: float
    pa_mpjpe: float
    pck150: float
    auc: float
    per_joint: list[float] = field(default_factory=list)

    def row(self) -> dict:
        d = asdict(self)
        d.pop("per_joint")
        return d


def evaluate(preds, gts) -> EvalReport:
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    if preds.ndim == 2:
        preds, gts = preds[None], gts[None]
    errs = joint_errors(preds, gts)
    pck, auc = pck_auc(preds, gts)
    return EvalReport(float(errs.mean()), pa_mpjpe(preds, gts, strict=False), pck, auc,
                      [float(x) for x in errs.mean(0)])


def write_report_csv(path, rows: list[tuple[str, str, EvalReport]]) -> None:
    """One row per (condition, stage) with the four summary metrics."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["condition", "stage", "mpjpe", "pa_mpjpe", "pck150", "auc"])
        for cond, stage, rep in rows:
            w.writerow([cond, stage, f"{rep.mpjpe:.4f}", f"{rep.pa_mpjpe:.4f}",
                        f"{rep.pck150:.4f}", f"{rep.auc:.4f}"])


def format_table(rows: list[tuple[str, str, EvalReport]], metric: str = "mpjpe") -> str:
    """Plain-text table: stages as rows, conditions as columns."""
    conds = list(dict.fromkeys(c for c, _, _ in rows))
    stages = list(dict.fromkeys(s for _, s, _ in rows))
    val = {(c, s): getattr(r, metric) for c, s, r in rows}
    width = max(10, *(len(c) + 2 for c in conds))
    digits = 3 if metric in ("pck150", "auc") else 1
    lines = [f"{metric:<16}" + "".join(f"{c:>{width}}" for c in conds)]
    for s in stages:
        cells = "".join(f"{val[(c, s)]:>{width}.{digits}f}" if (c, s) in val else " " * width
                        for c in conds)
        lines.append(f"{s:<16}" + cells)
    return "\n".join(lines)


def read_report_csv(path) -> list[dict]:
    with open(Path(path), newline="") as fh:
        return list(csv.DictReader(fh))
