"""Reconstruction and segmentation quality metrics.

PSNR and SSIM grade intensity reconstructions, the Dice coefficient
grades label masks.  SSIM is computed per axial slice (7x7 uniform
window, unbiased local covariance, border cropped to the window radius)
and averaged over slices.  All functions are pure and symmetric in their
two volume arguments where the metric itself is.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import ContractError, ShapeError
from .datagen import Volume

PSNR_CAP_DB = 100.0

CSV_COLUMNS = [
    "case_id",
    "model",
    "strategy",
    "trained_through_task",
    "eval_target",
    "psnr",
    "ssim",
    "dice_c1",
    "dice_c2",
    "dice_c3",
]


@dataclass
class MetricsRow:
    """One evaluation: a model/strategy scored on one target after some task."""

    case_id: str
    model: str
    strategy: str
    trained_through_task: int
    eval_target: str
    psnr: float | None = None
    ssim: float | None = None
    dice: list[float] | None = None  # classes 1..3


def _as_array(v) -> np.ndarray:
    return v.data if isinstance(v, Volume) else np.asarray(v)


def psnr(pred, ref, data_range: float = 1.0) -> float:
    """10 log10(range^2 / MSE) in dB, capped at 100 when MSE underflows."""
    p = _as_array(pred)
    r = _as_array(ref)
    if p.shape != r.shape:
        raise ShapeError(f"psnr shape mismatch: {p.shape} vs {r.shape}")
    if data_range <= 0:
        raise ContractError(f"data_range must be positive, got {data_range}")
    mse = float(np.mean((p.astype(np.float64) - r.astype(np.float64)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(data_range**2 / mse))


def _ssim_2d(x: np.ndarray, y: np.ndarray, win: int, c1: float, c2: float) -> float:
    ux = uniform_filter(x, win)
    uy = uniform_filter(y, win)
    uxx = uniform_filter(x * x, win)
    uyy = uniform_filter(y * y, win)
    uxy = uniform_filter(x * y, win)
    np_win = win * win
    norm = np_win / (np_win - 1)  # unbiased local covariance
    vx = norm * (uxx - ux * ux)
    vy = norm * (uyy - uy * uy)
    vxy = norm * (uxy - ux * uy)
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux**2 + uy**2 + c1) * (vx + vy + c2))
    pad = win // 2
    return float(s[pad:-pad, pad:-pad].mean())


def ssim(pred, ref, data_range: float = 1.0) -> float:
    """Mean over axial slices of the 2D structural similarity index."""
    p = _as_array(pred).astype(np.float64)
    r = _as_array(ref).astype(np.float64)
    if p.shape != r.shape:
        raise ShapeError(f"ssim shape mismatch: {p.shape} vs {r.shape}")
    win = 7
    if p.ndim == 2:
        p = p[:, :, None]
        r = r[:, :, None]
    if p.ndim != 3:
        raise ContractError(f"ssim expects a 3D volume or 2D slice, got shape {p.shape}")
    if p.shape[0] < win or p.shape[1] < win:
        raise ContractError(
            f"ssim needs at least {win} voxels per in-plane axis, got {p.shape[:2]}"
        )
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    vals = [_ssim_2d(p[:, :, k], r[:, :, k], win, c1, c2) for k in range(p.shape[2])]
    return float(np.mean(vals))


def dice(pred_labels, gt_labels, c: int) -> float:
    """2|P∩G| / (|P|+|G|) for voxels labelled c; 1.0 when both sets are empty."""
    p = _as_array(pred_labels)
    g = _as_array(gt_labels)
    if p.shape != g.shape:
        raise ShapeError(f"dice shape mismatch: {p.shape} vs {g.shape}")
    pm = p == c
    gm = g == c
    denom = int(pm.sum()) + int(gm.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((pm & gm).sum()) / denom


def labels_from_probs(probs: np.ndarray) -> np.ndarray:
    """Argmax class assignment; ties resolve to the lowest class index."""
    return np.argmax(probs, axis=-1)


def aggregate(rows: list[MetricsRow]) -> list[MetricsRow]:
    """Mean per (model, strategy, trained_through_task, eval_target) across cases."""
    if not rows:
        raise ContractError("aggregate needs at least one row")
    groups: dict[tuple, list[MetricsRow]] = {}
    for row in rows:
        key = (row.model, row.strategy, row.trained_through_task, row.eval_target)
        groups.setdefault(key, []).append(row)

    out = []
    for (model, strategy, task, target), members in groups.items():
        psnrs = [m.psnr for m in members if m.psnr is not None]
        ssims = [m.ssim for m in members if m.ssim is not None]
        dices = [m.dice for m in members if m.dice is not None]
        out.append(
            MetricsRow(
                case_id="mean",
                model=model,
                strategy=strategy,
                trained_through_task=task,
                eval_target=target,
                psnr=float(np.mean(psnrs)) if psnrs else None,
                ssim=float(np.mean(ssims)) if ssims else None,
                dice=list(np.mean(dices, axis=0)) if dices else None,
            )
        )
    return out


def _fmt(v: float | None) -> str:
    return "" if v is None else f"{v:.6f}"


def write_metrics_csv(rows: list[MetricsRow], path) -> None:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            d = r.dice if r.dice is not None else [None, None, None]
            w.writerow(
                [
                    r.case_id,
                    r.model,
                    r.strategy,
                    r.trained_through_task,
                    r.eval_target,
                    _fmt(r.psnr),
                    _fmt(r.ssim),
                    _fmt(d[0]),
                    _fmt(d[1]),
                    _fmt(d[2]),
                ]
            )


def read_metrics_csv(path) -> list[MetricsRow]:
    rows = []
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            dice_vals = [rec["dice_c1"], rec["dice_c2"], rec["dice_c3"]]
            rows.append(
                MetricsRow(
                    case_id=rec["case_id"],
                    model=rec["model"],
                    strategy=rec["strategy"],
                    trained_through_task=int(rec["trained_through_task"]),
                    eval_target=rec["eval_target"],
                    psnr=float(rec["psnr"]) if rec["psnr"] else None,
                    ssim=float(rec["ssim"]) if rec["ssim"] else None,
                    dice=[float(v) for v in dice_vals] if dice_vals[0] else None,
                )
            )
    return rows
