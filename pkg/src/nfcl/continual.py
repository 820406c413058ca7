"""Memory-free continual training with self-distillation.

A model learns an ordered sequence of tasks while only the newest task's
data is available.  Under the distillation strategy the model's own
frozen copy from before the current task serves as a teacher: each
iteration samples coordinates uniformly from the previously learned
domains, and the student is penalized for drifting from the teacher's
outputs there.  The combined objective is

    total = fit + lambda * distil

where lambda trades plasticity (fitting the new task) against stability
(retaining the old ones).  The baseline strategy minimizes the fitting
loss alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .datagen import GridSpec, Volume, VolumeKind, make_grid
from .errors import ContractError, TrainingDivergedError
from .fieldmodels import (
    Arch,
    FieldModel,
    Head,
    expand_hash_table,
    expand_output_head,
    predict,
    prepare_inputs,
    save_checkpoint,
)
from .training import AdamState, FitTrace, TrainConfig, fit_task


class TaskKind(Enum):
    DOMAIN_FRAME = "domain_frame"
    SIGNAL_LAYER = "signal_layer"


class LossKind(Enum):
    HUBER = "huber"
    CROSS_ENTROPY = "cross_entropy"


class Strategy(Enum):
    BASELINE = "baseline"
    DISTILLATION = "distillation"


@dataclass
class Task:
    """One unit of a continual sequence: a domain, a target, a loss.

    channel_range is the half-open [start, stop) of output channels this
    task supervises.  Label targets are expanded one-hot over
    stop - start classes.
    """

    id: int
    kind: TaskKind
    grid: GridSpec
    target: Volume
    loss_kind: LossKind
    channel_range: tuple[int, int]

    def __post_init__(self):
        self._coords = None
        self._target_rows = None

    def coords(self) -> np.ndarray:
        if self._coords is None:
            self._coords = make_grid(self.grid)
        return self._coords

    def target_rows(self) -> np.ndarray:
        if self._target_rows is None:
            flat = self.target.flat()
            if self.target.kind is VolumeKind.LABELS:
                n_classes = self.channel_range[1] - self.channel_range[0]
                onehot = np.zeros((flat.shape[0], n_classes), dtype=np.float64)
                onehot[np.arange(flat.shape[0]), flat[:, 0].astype(np.int64)] = 1.0
                self._target_rows = onehot
            else:
                self._target_rows = flat.astype(np.float64)
        return self._target_rows


@dataclass
class DistillConfig:
    lam: float = 1.0
    n_distil: int | None = None  # None: match the fitting batch size
    rng_stream: int = 1

    def __post_init__(self):
        if self.lam < 0:
            raise ContractError("lambda must be >= 0")


@dataclass
class TeacherSnapshot:
    """Frozen deep copy of the model taken at a task boundary."""

    model: FieldModel


def snapshot_teacher(model: FieldModel) -> TeacherSnapshot:
    """Independent copy; subsequent student updates never touch it."""
    return TeacherSnapshot(model=model.copy())


def sample_distill_coords(prior_tasks: list[Task], n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n coordinates uniformly from the union of prior task grids.

    Sampling is without replacement (capped at the union size), so
    n == union size returns exactly the full union.  Coordinates stay
    grid-aligned, which keeps lookup-table models queryable and makes the
    strategies comparable across architectures.
    """
    if not prior_tasks:
        raise ContractError("sample_distill_coords needs at least one prior task")
    pool = _distill_pool(prior_tasks)
    n_eff = min(n, len(pool))
    idx = rng.choice(len(pool), size=n_eff, replace=False)
    return pool[idx]


def _distill_pool(prior_tasks: list[Task]) -> np.ndarray:
    pool = np.vstack([t.coords() for t in prior_tasks])
    return np.unique(pool, axis=0)


def distill_targets(teacher: TeacherSnapshot, coords: np.ndarray) -> np.ndarray:
    """Teacher outputs on the given coordinates, over the channels it has."""
    return predict(teacher.model, coords)


class _DistillTerm:
    """Per-iteration distillation term against the frozen teacher.

    The coordinate pool and the teacher's outputs on it are fixed for the
    whole task, so both are computed once; each iteration draws a fresh
    subset whose coordinates ride along in the student's fitting batch
    (one combined forward/backward pass).  Intensity channels are
    distilled with the Huber loss, class channels with cross-entropy
    against the teacher's soft probabilities.
    """

    def __init__(
        self,
        model: FieldModel,
        teacher: TeacherSnapshot,
        prior_tasks: list[Task],
        cfg: TrainConfig,
        dcfg: DistillConfig,
        task_id: int,
    ):
        self._pool = _distill_pool(prior_tasks)
        dtype = dc.get_default_dtype()
        self._teacher_out = distill_targets(teacher, self._pool).astype(dtype)
        self._prepared = prepare_inputs(model, self._pool)
        self._rng = np.random.default_rng([dcfg.rng_stream, task_id])
        n = dcfg.n_distil if dcfg.n_distil is not None else cfg.batch_coords
        self._n = min(n, len(self._pool))
        self._k_lin = teacher.model.config.linear_channels
        self._c_teacher = teacher.model.config.out_channels
        self._delta = cfg.huber_delta
        self._lam = dcfg.lam
        self._idx = None

    def sample(self):
        self._idx = self._rng.choice(len(self._pool), size=self._n, replace=False)
        return self._prepared.take(self._idx)

    def loss(self, out: dc.Tensor) -> dc.Tensor:
        targets = self._teacher_out[self._idx]
        terms = []
        if self._k_lin > 0:
            pred = dc.slice_cols(out, 0, self._k_lin)
            target = dc.constant(targets[:, : self._k_lin])
            terms.append(dc.huber_loss(pred, target, self._delta))
        if self._c_teacher > self._k_lin:
            pred = dc.slice_cols(out, self._k_lin, self._c_teacher)
            target = dc.constant(targets[:, self._k_lin : self._c_teacher])
            terms.append(dc.cross_entropy_loss(pred, target))
        node = terms[0]
        for extra in terms[1:]:
            node = dc.add(node, extra)
        return dc.scale(node, self._lam)


def continual_fit(
    model: FieldModel,
    tasks: list[Task],
    strategy: Strategy,
    cfg: TrainConfig,
    dcfg: DistillConfig | None = None,
    out_dir=None,
    on_task_end=None,
) -> list[FitTrace]:
    """Train an ordered task sequence, expanding the model as it goes.

    Signal-layer tasks that supervise channels beyond the current output
    width trigger output-head expansion; domain frames with coordinates a
    lookup-table model has not seen trigger table expansion.  Each task
    starts from a fresh optimizer state: second moments calibrated to one
    task's gradient scale suppress progress on the next task's objective
    (most visibly when a label head is added after an intensity fit).
    Under the distillation strategy a teacher snapshot is taken at each
    task boundary; with lambda == 0 the distillation machinery is skipped
    entirely, making the run bit-identical to the baseline.

    When out_dir is given, writes trace_task{s}.csv and ckpt_task{s}.bin
    per task.  on_task_end(model, task) runs after each task completes.
    """
    if dcfg is None:
        dcfg = DistillConfig()
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    traces = []
    for pos, task in enumerate(tasks):
        prior = tasks[:pos]
        distilling = strategy is Strategy.DISTILLATION and prior and dcfg.lam > 0
        teacher = snapshot_teacher(model) if distilling else None

        if task.kind is TaskKind.SIGNAL_LAYER and task.channel_range[1] > model.config.out_channels:
            extra = task.channel_range[1] - model.config.out_channels
            expand_output_head(model, extra, Head.SOFTMAX)
        if model.config.arch is Arch.DINER:
            coords = task.coords()
            missing = ~model.coord_map.contains(coords)
            if missing.any():
                rng_exp = np.random.default_rng([cfg.seed, task.id, 0x5EED])
                expand_hash_table(model, coords[missing], rng_exp)
        state = AdamState.create(model.params)

        hook = None
        if distilling:
            hook = _DistillTerm(model, teacher, prior, cfg, dcfg, task.id)

        try:
            trace = fit_task(model, task, cfg, extra_loss=hook, adam_state=state)
        except TrainingDivergedError as e:
            raise TrainingDivergedError(e.iteration, f"task {task.id}: {e}") from e
        traces.append(trace)

        if out_dir is not None:
            trace.to_csv(out_dir / f"trace_task{task.id}.csv")
            save_checkpoint(model, out_dir / f"ckpt_task{task.id}.bin")
        if on_task_end is not None:
            on_task_end(model, task)

    return traces
