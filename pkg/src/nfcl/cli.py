"""Command-line interface.

Subcommands: ``phantom`` (write synthetic volumes), ``fit`` (fit one
volume and save a checkpoint), ``continual`` (run an experiment matrix),
``eval`` (score a prediction against a reference), ``report`` (render the
stability-vs-plasticity scatter).  A JSON config file can supply any flag
(flags win).  Exit codes: 0 success, 1 usage error, 2 data/format error,
3 training diverged.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .continual import DistillConfig, LossKind, Strategy, Task, TaskKind
from .datagen import GridSpec, VolumeKind, load_volume, phantom, save_volume
from .errors import NfclError, TrainingDivergedError
from .fieldmodels import Arch, Head, ModelConfig, build_model, predict, save_checkpoint
from .harness import DESK_BATCH, Experiment, ExperimentConfig, run_experiment
from .metrics import dice, psnr, read_metrics_csv, ssim
from .harness import render_scatter
from .training import TrainConfig, default_lr, fit_task

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3


class UsageError(Exception):
    pass


def _parse_dims(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise UsageError(f"dims must look like 32x32x8, got {text!r}")
    try:
        nx, ny, nz = (int(p) for p in parts)
    except ValueError as e:
        raise UsageError(f"dims must be integers: {text!r}") from e
    return nx, ny, nz


def _parse_models(text: str) -> list[Arch]:
    out = []
    for name in text.split(","):
        name = name.strip()
        try:
            out.append(Arch(name))
        except ValueError as e:
            raise UsageError(
                f"unknown model {name!r} (choose from pe-relu, siren, finer, diner)"
            ) from e
    return out


def _parse_strategies(text: str) -> list[Strategy]:
    out = []
    for name in text.split(","):
        name = name.strip()
        try:
            out.append(Strategy(name))
        except ValueError as e:
            raise UsageError(
                f"unknown strategy {name!r} (choose from baseline, distillation)"
            ) from e
    return out


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nfcl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    common = {"--config": dict(type=str, default=None, help="JSON file mirroring flags")}

    p = sub.add_parser("phantom", help="write synthetic phantom volumes")
    p.add_argument("--dims", type=str, default=None)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--cases", type=int, default=None)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--config", **common["--config"])

    p = sub.add_parser("fit", help="fit one model to one volume")
    p.add_argument("--model", type=str, default=None)
    p.add_argument("--volume", type=str, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--config", **common["--config"])

    p = sub.add_parser("continual", help="run a continual-learning experiment matrix")
    p.add_argument("--experiment", type=str, default=None, choices=[None, "domain", "signal"])
    p.add_argument("--models", type=str, default=None)
    p.add_argument("--strategies", type=str, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--n-distil", type=int, default=None)
    p.add_argument("--cases", type=int, default=None)
    p.add_argument("--dims", type=str, default=None)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--config", **common["--config"])

    p = sub.add_parser("eval", help="score a prediction against a reference")
    p.add_argument("--pred", type=str, default=None)
    p.add_argument("--ref", type=str, default=None)
    p.add_argument("--labels", action="store_true")
    p.add_argument("--config", **common["--config"])

    p = sub.add_parser("report", help="render the first-vs-last-frame scatter")
    p.add_argument("--metrics", type=str, default=None)
    p.add_argument("--metric", type=str, default=None, choices=[None, "psnr", "ssim"])
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--config", **common["--config"])

    return parser


def _merge_config(args: argparse.Namespace) -> dict:
    """Flags override the JSON config file; missing values fall to defaults."""
    merged = vars(args).copy()
    if merged.get("config"):
        path = Path(merged["config"])
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {path} is not valid JSON: {e}") from e
        if not isinstance(file_cfg, dict):
            raise UsageError(f"config file {path} must hold a JSON object")
        for key, value in file_cfg.items():
            key = key.replace("-", "_")
            if key == "lambda":
                key = "lam"
            if key in merged and merged[key] in (None, False):
                merged[key] = value
    return merged


def _require(cfg: dict, key: str, flag: str):
    if cfg.get(key) is None:
        raise UsageError(f"missing required argument {flag}")
    return cfg[key]


def _cmd_phantom(cfg: dict) -> int:
    dims = _parse_dims(cfg.get("dims") or "32x32x8")
    frames = cfg.get("frames") if cfg.get("frames") is not None else 4
    cases = cfg.get("cases") if cfg.get("cases") is not None else 8
    out = Path(_require(cfg, "out", "--out"))
    out.mkdir(parents=True, exist_ok=True)
    t_values = np.linspace(-1.0, 1.0, frames) if frames > 1 else np.array([-1.0])
    for case in range(cases):
        for k, t in enumerate(t_values):
            intensity, labels = phantom(*dims, t=float(t), case_seed=case)
            save_volume(intensity, out / f"case{case:03d}_frame{k + 1}_image.nfv")
            save_volume(labels, out / f"case{case:03d}_frame{k + 1}_labels.nfv")
    print(f"wrote {cases * len(t_values) * 2} volumes to {out}")
    return EXIT_OK


def _cmd_fit(cfg: dict) -> int:
    arch = _parse_models(_require(cfg, "model", "--model"))[0]
    volume = load_volume(_require(cfg, "volume", "--volume"))
    out_path = _require(cfg, "out", "--out")
    iters = cfg.get("iters") if cfg.get("iters") is not None else 500
    seed = cfg.get("seed") if cfg.get("seed") is not None else 0
    lr = cfg.get("lr") if cfg.get("lr") is not None else default_lr(arch)
    batch = cfg.get("batch") if cfg.get("batch") is not None else 4096

    grid = GridSpec(*volume.dims)
    if volume.kind is VolumeKind.LABELS:
        config = ModelConfig(arch=arch, in_dim=3, out_channels=4, head=Head.SOFTMAX, seed=seed)
        task = Task(1, TaskKind.SIGNAL_LAYER, grid, volume, LossKind.CROSS_ENTROPY, (0, 4))
    else:
        config = ModelConfig(arch=arch, in_dim=3, out_channels=1, seed=seed)
        task = Task(1, TaskKind.SIGNAL_LAYER, grid, volume, LossKind.HUBER, (0, 1))

    model = build_model(config, grid if arch is Arch.DINER else None)
    train = TrainConfig(iterations=iters, lr=lr, batch_coords=batch, seed=seed)
    trace = fit_task(model, task, train)
    save_checkpoint(model, out_path)
    final = trace.loss_total[-1] if len(trace) else float("nan")
    print(f"final_loss={final:.6g}")
    if volume.kind is VolumeKind.INTENSITY:
        pred = np.clip(
            predict(model, task.coords())[:, 0].reshape(volume.dims), 0.0, 1.0
        ).astype(np.float32)
        print(f"psnr={psnr(pred, volume):.4f}")
    print(f"checkpoint={out_path}")
    return EXIT_OK


def _cmd_continual(cfg: dict) -> int:
    experiment = Experiment(_require(cfg, "experiment", "--experiment"))
    out = Path(_require(cfg, "out", "--out"))
    dims = _parse_dims(cfg.get("dims") or "32x32x8")
    train = TrainConfig(
        iterations=cfg.get("iters") if cfg.get("iters") is not None else 500,
        batch_coords=cfg.get("batch") if cfg.get("batch") is not None else DESK_BATCH,
    )
    distill = DistillConfig(
        lam=cfg.get("lam") if cfg.get("lam") is not None else 1.0,
        n_distil=cfg.get("n_distil"),
    )
    config = ExperimentConfig(
        experiment=experiment,
        dims=dims,
        frames=cfg.get("frames") if cfg.get("frames") is not None else 4,
        cases=cfg.get("cases") if cfg.get("cases") is not None else 8,
        case_seed_base=cfg.get("seed") if cfg.get("seed") is not None else 0,
        models=_parse_models(cfg.get("models") or "pe-relu,siren,finer,diner"),
        strategies=_parse_strategies(cfg.get("strategies") or "baseline,distillation"),
        train=train,
        distill=distill,
        lr=cfg.get("lr"),
        out_dir=out,
    )
    rows = run_experiment(config)
    print(f"wrote {len(rows)} metric rows to {out / 'metrics.csv'}")
    return EXIT_OK


def _cmd_eval(cfg: dict) -> int:
    pred = load_volume(_require(cfg, "pred", "--pred"))
    ref = load_volume(_require(cfg, "ref", "--ref"))
    if cfg.get("labels"):
        for c in (1, 2, 3):
            print(f"dice_c{c}={dice(pred, ref, c):.6f}")
    else:
        print(f"psnr={psnr(pred, ref):.6f}")
        print(f"ssim={ssim(pred, ref):.6f}")
    return EXIT_OK


def _cmd_report(cfg: dict) -> int:
    rows = read_metrics_csv(_require(cfg, "metrics", "--metrics"))
    metric = _require(cfg, "metric", "--metric")
    out = _require(cfg, "out", "--out")
    render_scatter(rows, metric, out)
    print(f"wrote {out}")
    return EXIT_OK


_COMMANDS = {
    "phantom": _cmd_phantom,
    "fit": _cmd_fit,
    "continual": _cmd_continual,
    "eval": _cmd_eval,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    try:
        cfg = _merge_config(args)
        return _COMMANDS[args.command](cfg)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (NfclError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
