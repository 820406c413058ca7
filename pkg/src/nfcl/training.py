"""Fitting losses, Adam, and the single-task training loop.

Each iteration draws a batch of coordinate/target pairs uniformly without
replacement (reshuffling once the grid is exhausted), evaluates the
fitting loss on the channels the task supervises, optionally adds an
extra loss term supplied by a hook, backpropagates, and applies one Adam
step.  Sampling is a pure function of (seed, task id, iteration), so runs
replay exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import cross_entropy_loss, huber_loss  # re-export: the two fitting losses
from .errors import ConfigError, TrainingDivergedError
from .fieldmodels import Arch, FieldModel, PreparedInputs, forward_prepared, prepare_inputs

__all__ = [
    "TrainConfig",
    "AdamState",
    "FitTrace",
    "huber_loss",
    "cross_entropy_loss",
    "adam_step",
    "fit_task",
    "default_lr",
]


def default_lr(arch: Arch) -> float:
    """0.01 for the lookup-table model, 0.001 for the MLP-only models."""
    return 0.01 if arch is Arch.DINER else 0.001


@dataclass
class TrainConfig:
    iterations: int = 500
    lr: float = 0.001
    batch_coords: int = 4096
    huber_delta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch_coords < 1:
            raise ConfigError("batch_coords must be >= 1")


@dataclass
class AdamState:
    """First/second moment estimates, kept congruent with the parameters.

    When a parameter grows (output-head or lookup-table expansion appends
    rows), ``resize`` zero-pads the moments so pre-existing slots keep
    their optimizer memory.  A per-parameter scratch buffer avoids
    re-allocating temporaries every step.
    """

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    _scratch: dict = field(default_factory=dict, repr=False)

    @classmethod
    def create(cls, params: dc.ParamSet) -> "AdamState":
        state = cls()
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
            state._scratch[name] = np.empty_like(p.data)
        return state

    def resize(self, params: dc.ParamSet) -> None:
        for name, p in params.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
                self._scratch[name] = np.empty_like(p.data)
                continue
            old = self.m[name]
            if old.shape == p.data.shape:
                continue
            for moments in (self.m, self.v):
                padded = np.zeros_like(p.data)
                padded[tuple(slice(0, s) for s in moments[name].shape)] = moments[name]
                moments[name] = padded
            self._scratch[name] = np.empty_like(p.data)


def adam_step(params: dc.ParamSet, grads: dc.GradSet, state: AdamState, lr: float) -> None:
    """One standard Adam update with bias correction."""
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        sc = state._scratch.get(name)
        if sc is None or sc.shape != p.data.shape or sc.dtype != p.data.dtype:
            sc = state._scratch[name] = np.empty_like(p.data)
        m *= state.beta1
        np.multiply(g, 1.0 - state.beta1, out=sc)
        m += sc
        v *= state.beta2
        np.multiply(g, g, out=sc)
        sc *= 1.0 - state.beta2
        v += sc
        np.divide(v, bc2, out=sc)
        np.sqrt(sc, out=sc)
        sc += state.eps
        np.divide(m, sc, out=sc)
        sc *= lr / bc1
        p.data -= sc


@dataclass
class FitTrace:
    """Per-iteration losses of one task fit."""

    task_id: int
    loss_fit: list = field(default_factory=list)
    loss_distil: list = field(default_factory=list)  # weighted contribution
    loss_total: list = field(default_factory=list)

    def append(self, fit: float, distil: float) -> None:
        self.loss_fit.append(fit)
        self.loss_distil.append(distil)
        self.loss_total.append(fit + distil)

    def __len__(self) -> int:
        return len(self.loss_fit)

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("iteration,loss_fit,loss_distil,loss_total\n")
            for i, (lf, ld, lt) in enumerate(
                zip(self.loss_fit, self.loss_distil, self.loss_total)
            ):
                f.write(f"{i},{lf:.8g},{ld:.8g},{lt:.8g}\n")


class _EpochSampler:
    """Disjoint batches within an epoch; reshuffles when the grid is spent."""

    def __init__(self, n: int, batch: int, rng: np.random.Generator):
        self.n = n
        self.batch = min(batch, n)  # full grid per iteration when smaller
        self.rng = rng
        self._perm = None
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._perm is None or self._pos + self.batch > self.n:
            self._perm = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._perm[self._pos : self._pos + self.batch]
        self._pos += self.batch
        return idx


def _channel_slice(out: dc.Tensor, channel_range: tuple[int, int], width: int) -> dc.Tensor:
    start, stop = channel_range
    if start == 0 and stop == width:
        return out
    return dc.slice_cols(out, start, stop)


def fit_task(
    model: FieldModel,
    task,
    cfg: TrainConfig,
    extra_loss=None,
    adam_state: AdamState | None = None,
) -> FitTrace:
    """Run cfg.iterations optimization steps of the task's fitting loss.

    ``task`` provides coords(), target_rows(), channel_range, loss_kind
    and id (see continual.Task).  ``extra_loss`` is an optional
    distillation hook with sample() -> PreparedInputs and
    loss(outputs) -> weighted scalar node; its batch rides along in the
    same forward/backward pass as the fitting batch.  A non-finite total
    loss raises TrainingDivergedError with the iteration index.
    """
    from .continual import LossKind  # local import to avoid a module cycle

    trace = FitTrace(task_id=task.id)
    if cfg.iterations == 0:
        return trace

    coords = task.coords()
    targets = np.asarray(task.target_rows(), dtype=dc.get_default_dtype())
    prepared = prepare_inputs(model, coords)
    if adam_state is None:
        adam_state = AdamState.create(model.params)

    sampler = _EpochSampler(
        len(coords), cfg.batch_coords, np.random.default_rng([cfg.seed, task.id])
    )
    out_width = model.config.out_channels

    for i in range(cfg.iterations):
        idx = sampler.next()
        fit_prep = prepared.take(idx)
        if extra_loss is None:
            out_fit = forward_prepared(model, fit_prep)
            hook_node = None
        else:
            extra_prep = extra_loss.sample()
            out_all = forward_prepared(
                model, PreparedInputs.concat(fit_prep, extra_prep)
            )
            n_fit = fit_prep.count
            out_fit = dc.slice_rows(out_all, 0, n_fit)
            hook_node = extra_loss.loss(
                dc.slice_rows(out_all, n_fit, n_fit + extra_prep.count)
            )

        pred = _channel_slice(out_fit, task.channel_range, out_width)
        target = dc.constant(targets[idx])
        if task.loss_kind is LossKind.HUBER:
            fit_node = dc.huber_loss(pred, target, cfg.huber_delta)
        else:
            fit_node = dc.cross_entropy_loss(pred, target)

        distil_val = 0.0
        total = fit_node
        if hook_node is not None:
            distil_val = hook_node.item()
            total = dc.add(fit_node, hook_node)

        fit_val = fit_node.item()
        if not np.isfinite(fit_val + distil_val):
            raise TrainingDivergedError(i)

        grads = dc.backward(total, model.params)
        adam_step(model.params, grads, adam_state, cfg.lr)
        trace.append(fit_val, distil_val)

    return trace
