"""Transformer sleep staging with shuffled-patch position-prediction pretraining."""

from .dsp import (
    TokenSequence,
    instance_normalize,
    resample_fourier,
    signal_to_patches,
    tokenize,
)
from .errors import (
    CheckpointVersionError,
    CorruptionError,
    FormatError,
    NumericalError,
    ValidationError,
)
from .metrics import (
    MetricsReport,
    accuracy,
    balanced_accuracy,
    cohens_kappa,
    compute_report,
    confusion,
    f1_scores,
)
from .model import (
    ModelConfig,
    ModelParams,
    StageBatch,
    count_parameters,
    encode,
    forward_pretext,
    forward_stage,
    init_params,
    loss_and_gradients,
    sinusoidal_pe,
)
from .pretext import PretextBatch, make_pretext_batch, pretext_accuracy, pretext_loss
from .records import (
    EpochRecord,
    SleepStage,
    SplitSpec,
    SubjectSet,
    read_esr,
    split_subjectwise,
    subsample_subjects,
    synthesize_corpus,
    write_esr,
)
from .trainer import (
    AdamState,
    Checkpoint,
    TrainConfig,
    adam_step,
    class_weights,
    evaluate_stager,
    finetune,
    head_swap,
    load_checkpoint,
    pretrain,
    pretext_eval,
    save_checkpoint,
    weighted_ce,
)

__version__ = "0.1.0"
