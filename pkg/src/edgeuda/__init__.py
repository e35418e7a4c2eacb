"""Edge-guided unsupervised domain adaptation on synthetic phantoms.

A semantic contour network, adapted across domains through edge-map
adversarial alignment, conditions an edge-aware segmentation network that is
itself adapted through feature-level adversarial alignment and target
self-entropy minimization.  Everything runs on a small float64 reverse-mode
autodiff core; no framework required.
"""

__version__ = "0.1.0"

from .checkpoint import CheckpointError, load_arrays, save_arrays
from .edgelabel import CannyConfig, canny, edge_labels_for_batch, render_label_intensity
from .losses import (
    LossWeights,
    adversarial_generator_literal,
    adversarial_generator_term,
    composite_objectives,
    disc_bce,
    edge_ce,
    one_hot,
    seg_ce,
    self_entropy,
)
from .metrics import MetricsReport, dice, evaluate, hausdorff, mean_prediction_entropy
from .nets import (
    ArchSpec,
    NetworkParams,
    contour_forward,
    decoder_forward,
    edge_disc_forward,
    encoder_forward,
    feat_disc_forward,
    init_all,
)
from .pgm import PgmError, read_pgm, write_pgm
from .synthdata import (
    ModalityModel,
    Phantom,
    Sample,
    SampleBatch,
    SOURCE_MODALITY,
    TARGET_MODALITY,
    augment,
    eval_samples,
    generate_phantom,
    load_pgm_dataset,
    normalize_intensity,
    render,
    sample_at,
    save_pgm_dataset,
    training_batches,
    unpaired_batches,
)
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    conv2d,
    frozen,
    linear,
    sgd_momentum_step,
    softmax_channels,
    zero_grads,
)
from .trainer import (
    ARM_ORDER,
    ArmOutcome,
    ModelBundle,
    NumericalAbort,
    TrainConfig,
    apply_arm,
    infer,
    run_benchmark,
    run_experiment,
    train_step,
)

__all__ = [name for name in dir() if not name.startswith("_")]
