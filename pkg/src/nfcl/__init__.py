"""Continual learning for neural fields.

Coordinate networks (positional-encoding ReLU, scaled-sine,
variable-frequency-sine, and lookup-table architectures) trained on
incrementally arriving signals, with memory-free self-distillation to
mitigate catastrophic forgetting, plus the metrics, synthetic phantom,
and experiment harness to study the effect.
"""

from . import diffcore
from .continual import (
    DistillConfig,
    LossKind,
    Strategy,
    Task,
    TaskKind,
    TeacherSnapshot,
    continual_fit,
    distill_targets,
    sample_distill_coords,
    snapshot_teacher,
)
from .datagen import (
    GridSpec,
    Volume,
    VolumeKind,
    load_volume,
    make_grid,
    normalize_case,
    normalize_intensity,
    phantom,
    save_volume,
)
from .fieldmodels import (
    Arch,
    FieldModel,
    Head,
    ModelConfig,
    build_model,
    encode_pe,
    expand_hash_table,
    expand_output_head,
    forward,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from .harness import (
    Experiment,
    ExperimentConfig,
    render_scatter,
    run_domain_expansion,
    run_experiment,
    run_signal_expansion,
)
from .metrics import (
    MetricsRow,
    aggregate,
    dice,
    psnr,
    read_metrics_csv,
    ssim,
    write_metrics_csv,
)
from .training import (
    AdamState,
    FitTrace,
    TrainConfig,
    adam_step,
    cross_entropy_loss,
    default_lr,
    fit_task,
    huber_loss,
)

__version__ = "0.1.0"
