"""Experiment orchestration: the two continual-learning scenarios.

Domain expansion trains one spatiotemporal field per case on four frames
of the beating phantom in sequence, evaluating every frame seen so far
after each task.  Signal expansion trains a spatial field on the
intensity image, then grows the output head and trains the aligned label
mask.  Both run the full architecture-by-strategy matrix, emit one
metrics row per evaluation, and are deterministic end to end: identical
configs produce byte-identical CSV and SVG outputs.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .continual import (
    DistillConfig,
    LossKind,
    Strategy,
    Task,
    TaskKind,
    continual_fit,
)
from .datagen import GridSpec, Volume, VolumeKind, make_grid, phantom
from .errors import ConfigError, ContractError
from .fieldmodels import Arch, FieldModel, Head, ModelConfig, build_model, predict
from .metrics import MetricsRow, aggregate, dice, psnr, ssim, write_metrics_csv
from .training import TrainConfig, default_lr

# Desk-scale batch size: calibrated so the full default matrix of either
# experiment finishes within its runtime budget on one CPU core while the
# fits still reach their quality thresholds.
DESK_BATCH = 1024

N_LABEL_CLASSES = 4  # background + three structures


class Experiment(Enum):
    DOMAIN_EXPANSION = "domain"
    SIGNAL_EXPANSION = "signal"


ALL_MODELS = [Arch.PE_RELU, Arch.SIREN, Arch.FINER, Arch.DINER]
ALL_STRATEGIES = [Strategy.BASELINE, Strategy.DISTILLATION]


@dataclass
class ExperimentConfig:
    experiment: Experiment
    dims: tuple[int, int, int] = (32, 32, 8)
    frames: int = 4
    cases: int = 8
    case_seed_base: int = 0
    models: list = field(default_factory=lambda: list(ALL_MODELS))
    strategies: list = field(default_factory=lambda: list(ALL_STRATEGIES))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(batch_coords=DESK_BATCH))
    distill: DistillConfig = field(default_factory=DistillConfig)
    lr: float | None = None  # None: per-architecture default
    out_dir: Path | None = None

    def __post_init__(self):
        if not self.models or not self.strategies:
            raise ConfigError("models and strategies must be non-empty")
        if self.frames < 1:
            raise ConfigError("need at least one frame")


def _model_seed(case_seed: int, arch: Arch) -> int:
    return case_seed * len(ALL_MODELS) + ALL_MODELS.index(arch)


def _run_dir(cfg: ExperimentConfig, case_id: str, arch: Arch, strategy: Strategy):
    if cfg.out_dir is None:
        return None
    return Path(cfg.out_dir) / case_id / arch.value / strategy.value


def _predicted_volume(model: FieldModel, grid: GridSpec, channel: int = 0) -> Volume:
    pred = predict(model, make_grid(grid))
    data = np.clip(pred[:, channel].reshape(grid.dims), 0.0, 1.0).astype(np.float32)
    return Volume(grid.dims, VolumeKind.INTENSITY, data)


def _predicted_labels(model: FieldModel, grid: GridSpec, class_range: tuple[int, int]) -> Volume:
    pred = predict(model, make_grid(grid))
    probs = pred[:, class_range[0] : class_range[1]]
    labels = np.argmax(probs, axis=1).astype(np.uint8).reshape(grid.dims)
    return Volume(grid.dims, VolumeKind.LABELS, labels)


def run_domain_expansion(cfg: ExperimentConfig) -> list[MetricsRow]:
    """4D field, one task per time frame, evaluated on all frames seen so far."""
    nx, ny, nz = cfg.dims
    t_values = np.linspace(-1.0, 1.0, cfg.frames)
    rows: list[MetricsRow] = []

    for case in range(cfg.cases):
        case_seed = cfg.case_seed_base + case
        case_id = f"case{case_seed:03d}"
        frames = [phantom(nx, ny, nz, float(t), case_seed)[0] for t in t_values]
        for arch in cfg.models:
            tasks = [
                Task(
                    id=s + 1,
                    kind=TaskKind.DOMAIN_FRAME,
                    grid=GridSpec(nx, ny, nz, t=float(t_values[s])),
                    target=frames[s],
                    loss_kind=LossKind.HUBER,
                    channel_range=(0, 1),
                )
                for s in range(cfg.frames)
            ]
            seed = _model_seed(case_seed, arch)
            train = replace(cfg.train, lr=cfg.lr or default_lr(arch), seed=seed)
            for strategy in cfg.strategies:
                config = ModelConfig(arch=arch, in_dim=4, out_channels=1, seed=seed)
                grid = tasks[0].grid if arch is Arch.DINER else None
                model = build_model(config, grid)

                def evaluate(model, task, _rows=rows, _tasks=tasks, _frames=frames,
                             _case=case_id, _arch=arch, _strategy=strategy):
                    for k in range(task.id):
                        pred = _predicted_volume(model, _tasks[k].grid)
                        _rows.append(
                            MetricsRow(
                                case_id=_case,
                                model=_arch.value,
                                strategy=_strategy.value,
                                trained_through_task=task.id,
                                eval_target=f"frame{k + 1}",
                                psnr=psnr(pred, _frames[k]),
                                ssim=ssim(pred, _frames[k]),
                            )
                        )

                continual_fit(
                    model,
                    tasks,
                    strategy,
                    train,
                    cfg.distill,
                    out_dir=_run_dir(cfg, case_id, arch, strategy),
                    on_task_end=evaluate,
                )
    return rows


def run_signal_expansion(cfg: ExperimentConfig) -> list[MetricsRow]:
    """3D field: fit the image, then grow the head and fit the label mask."""
    nx, ny, nz = cfg.dims
    rows: list[MetricsRow] = []

    for case in range(cfg.cases):
        case_seed = cfg.case_seed_base + case
        case_id = f"case{case_seed:03d}"
        intensity, labels = phantom(nx, ny, nz, t=-1.0, case_seed=case_seed)
        grid = GridSpec(nx, ny, nz)
        for arch in cfg.models:
            tasks = [
                Task(
                    id=1,
                    kind=TaskKind.SIGNAL_LAYER,
                    grid=grid,
                    target=intensity,
                    loss_kind=LossKind.HUBER,
                    channel_range=(0, 1),
                ),
                Task(
                    id=2,
                    kind=TaskKind.SIGNAL_LAYER,
                    grid=grid,
                    target=labels,
                    loss_kind=LossKind.CROSS_ENTROPY,
                    channel_range=(1, 1 + N_LABEL_CLASSES),
                ),
            ]
            seed = _model_seed(case_seed, arch)
            train = replace(cfg.train, lr=cfg.lr or default_lr(arch), seed=seed)
            for strategy in cfg.strategies:
                config = ModelConfig(arch=arch, in_dim=3, out_channels=1, seed=seed)
                model = build_model(config, grid if arch is Arch.DINER else None)

                def evaluate(model, task, _rows=rows, _case=case_id, _arch=arch,
                             _strategy=strategy):
                    pred = _predicted_volume(model, grid)
                    _rows.append(
                        MetricsRow(
                            case_id=_case,
                            model=_arch.value,
                            strategy=_strategy.value,
                            trained_through_task=task.id,
                            eval_target="image",
                            psnr=psnr(pred, intensity),
                            ssim=ssim(pred, intensity),
                        )
                    )
                    if task.id >= 2:
                        pred_labels = _predicted_labels(
                            model, grid, (1, 1 + N_LABEL_CLASSES)
                        )
                        _rows.append(
                            MetricsRow(
                                case_id=_case,
                                model=_arch.value,
                                strategy=_strategy.value,
                                trained_through_task=task.id,
                                eval_target="mask",
                                dice=[dice(pred_labels, labels, c) for c in (1, 2, 3)],
                            )
                        )

                continual_fit(
                    model,
                    tasks,
                    strategy,
                    train,
                    cfg.distill,
                    out_dir=_run_dir(cfg, case_id, arch, strategy),
                    on_task_end=evaluate,
                )
    return rows


def run_experiment(cfg: ExperimentConfig) -> list[MetricsRow]:
    """Run the configured experiment; write metrics.csv and scatters if out_dir set."""
    if cfg.experiment is Experiment.DOMAIN_EXPANSION:
        rows = run_domain_expansion(cfg)
    else:
        rows = run_signal_expansion(cfg)
    if cfg.out_dir is not None:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(rows, out / "metrics.csv")
        if cfg.experiment is Experiment.DOMAIN_EXPANSION:
            render_scatter(rows, "psnr", out / "scatter_psnr.svg")
            render_scatter(rows, "ssim", out / "scatter_ssim.svg")
    return rows


# ---------------------------------------------------------------------------
# stability-vs-plasticity scatter

_MODEL_COLORS = {
    "pe-relu": "#1f77b4",
    "siren": "#d62728",
    "finer": "#2ca02c",
    "diner": "#9467bd",
}
_FALLBACK_COLORS = ["#8c564b", "#e377c2", "#7f7f7f", "#bcbd22"]


def _marker(x: float, y: float, strategy: str, color: str) -> str:
    # strategies get distinct shapes: circles vs squares
    if strategy == "baseline":
        return f'<circle cx="{x:.2f}" cy="{y:.2f}" r="6" fill="{color}" stroke="black"/>'
    half = 5.5
    return (
        f'<rect x="{x - half:.2f}" y="{y - half:.2f}" width="{2 * half:.1f}" '
        f'height="{2 * half:.1f}" fill="{color}" stroke="black"/>'
    )


def render_scatter(rows: list[MetricsRow], metric: str, path) -> None:
    """First-task quality (x) vs last-task quality (y) after the final task.

    One marker per (model, strategy); markers near the top right retain
    the first task well while still fitting the last one.
    """
    metric = metric.lower()
    if metric not in ("psnr", "ssim"):
        raise ContractError(f"metric must be psnr or ssim, got {metric!r}")

    frame_rows = [r for r in rows if re.fullmatch(r"frame\d+", r.eval_target)]
    if not frame_rows:
        raise ContractError("no frame evaluations to plot (missing rows: frame1, last frame)")
    final_task = max(r.trained_through_task for r in frame_rows)
    first_target = "frame1"
    last_target = f"frame{final_task}"

    means = aggregate([r for r in frame_rows if r.trained_through_task == final_task])
    combos = sorted({(r.model, r.strategy) for r in frame_rows})
    lookup = {(r.model, r.strategy, r.eval_target): getattr(r, metric) for r in means}

    points = []
    missing = []
    for model, strategy in combos:
        x = lookup.get((model, strategy, first_target))
        y = lookup.get((model, strategy, last_target))
        if x is None or y is None:
            missing.append(f"{model}/{strategy} after task {final_task}")
            continue
        points.append((model, strategy, x, y))
    if missing:
        raise ContractError(f"missing first/last-frame rows for: {', '.join(missing)}")

    width, height = 640, 480
    margin = dict(left=70, right=170, top=40, bottom=55)
    plot_w = width - margin["left"] - margin["right"]
    plot_h = height - margin["top"] - margin["bottom"]

    vals_x = [p[2] for p in points]
    vals_y = [p[3] for p in points]
    lo = min(vals_x + vals_y)
    hi = max(vals_x + vals_y)
    pad = 0.05 * (hi - lo) if hi > lo else 0.5
    lo, hi = lo - pad, hi + pad

    def sx(v):
        return margin["left"] + (v - lo) / (hi - lo) * plot_w

    def sy(v):
        return margin["top"] + plot_h - (v - lo) / (hi - lo) * plot_h

    unit = "dB" if metric == "psnr" else "unitless"
    label = metric.upper()
    models_in_plot = []
    for model, _, _, _ in points:
        if model not in models_in_plot:
            models_in_plot.append(model)
    colors = {}
    for i, model in enumerate(models_in_plot):
        colors[model] = _MODEL_COLORS.get(model, _FALLBACK_COLORS[i % len(_FALLBACK_COLORS)])

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{margin["left"]}" y="{margin["top"]}" width="{plot_w}" '
        f'height="{plot_h}" fill="none" stroke="black"/>',
        f'<text x="{margin["left"] + plot_w / 2:.1f}" y="{height - 12}" '
        f'text-anchor="middle" font-size="14">first frame {label} ({unit})</text>',
        f'<text x="18" y="{margin["top"] + plot_h / 2:.1f}" text-anchor="middle" '
        f'font-size="14" transform="rotate(-90 18 {margin["top"] + plot_h / 2:.1f})">'
        f"last frame {label} ({unit})</text>",
    ]
    # axis ticks at the data corners
    for frac in (0.0, 0.5, 1.0):
        v = lo + frac * (hi - lo)
        parts.append(
            f'<text x="{sx(v):.1f}" y="{margin["top"] + plot_h + 18}" '
            f'text-anchor="middle" font-size="11">{v:.2f}</text>'
        )
        parts.append(
            f'<text x="{margin["left"] - 8}" y="{sy(v) + 4:.1f}" '
            f'text-anchor="end" font-size="11">{v:.2f}</text>'
        )
    for model, strategy, x, y in points:
        parts.append(_marker(sx(x), sy(y), strategy, colors[model]))

    ly = margin["top"] + 10
    lx = width - margin["right"] + 15
    for model in models_in_plot:
        parts.append(f'<rect x="{lx}" y="{ly - 9}" width="12" height="12" fill="{colors[model]}"/>')
        parts.append(f'<text x="{lx + 18}" y="{ly + 2}" font-size="12">{model}</text>')
        ly += 20
    ly += 6
    for strategy in sorted({p[1] for p in points}):
        parts.append(_marker(lx + 6, ly - 3, strategy, "#555555"))
        parts.append(f'<text x="{lx + 18}" y="{ly + 2}" font-size="12">{strategy}</text>')
        ly += 20

    parts.append("</svg>")
    Path(path).write_text("\n".join(parts), encoding="utf-8")
