"""Train a small convolutional image classifier and probe how little pixel
change it takes to relabel its inputs.

The toolkit covers the full loop: a reverse-mode autodiff engine, model
training and checkpointing, the iterative sign-gradient relabelling attack,
distortion metrics, robustness experiments (pair sweep, transformations,
cross-model transfer, single-big-step control), image synthesis from noise,
and feature-space impostor detection with an RBF SVM.
"""

from .attack import (
    AttackConfig,
    AttackResult,
    PgmFormatError,
    TraceEntry,
    difference_image,
    gaussian_start_image,
    read_pgm,
    relabel,
    result_to_json,
    single_step_control,
    synthesize_from_noise,
    trace_to_csv,
    write_pgm,
)
from .autodiff import ShapeError, Tape, Tensor, backward, finite_difference_gradient
from .cli import main
from .data import (
    Dataset,
    IdxFormatError,
    LabeledImage,
    SHAPE_CLASS_NAMES,
    generate_shapes,
    load_idx,
)
from .detection import (
    ImpostorConfig,
    ImpostorReport,
    SvmModel,
    impostor_experiment,
    impostor_to_json,
    svm_decision,
    svm_predict,
    svm_train,
)
from .metrics import DistortionReport, distortion, probability_report
from .model import (
    Architecture,
    CheckpointError,
    Conv,
    Dense,
    Flatten,
    MaxPool,
    Model,
    Relu,
    Softmax,
    TrainConfig,
    TrainingMetadata,
    evaluate_accuracy,
    load_checkpoint,
    loss_and_input_gradient,
    penultimate_features,
    predict_batch,
    predict_probabilities,
    reference_architecture,
    save_checkpoint,
    train,
)
from .robustness import (
    NonStationarityReport,
    PairSweepReport,
    TransferReport,
    TransformReport,
    build_adversarial_pool,
    nonstationarity_experiment,
    pair_sweep,
    sweep_to_csv,
    sweep_to_json,
    transfer_check,
    transform_suite,
)

__version__ = "0.1.0"

__all__ = [
    "Architecture",
    "AttackConfig",
    "AttackResult",
    "CheckpointError",
    "Conv",
    "Dataset",
    "Dense",
    "DistortionReport",
    "Flatten",
    "IdxFormatError",
    "ImpostorConfig",
    "ImpostorReport",
    "LabeledImage",
    "MaxPool",
    "Model",
    "NonStationarityReport",
    "PairSweepReport",
    "PgmFormatError",
    "Relu",
    "SHAPE_CLASS_NAMES",
    "ShapeError",
    "Softmax",
    "SvmModel",
    "Tape",
    "Tensor",
    "TraceEntry",
    "TrainConfig",
    "TrainingMetadata",
    "TransferReport",
    "TransformReport",
    "backward",
    "build_adversarial_pool",
    "difference_image",
    "distortion",
    "evaluate_accuracy",
    "finite_difference_gradient",
    "gaussian_start_image",
    "generate_shapes",
    "impostor_experiment",
    "impostor_to_json",
    "load_checkpoint",
    "load_idx",
    "loss_and_input_gradient",
    "main",
    "nonstationarity_experiment",
    "pair_sweep",
    "penultimate_features",
    "predict_batch",
    "predict_probabilities",
    "probability_report",
    "read_pgm",
    "reference_architecture",
    "relabel",
    "result_to_json",
    "save_checkpoint",
    "single_step_control",
    "svm_decision",
    "svm_predict",
    "svm_train",
    "sweep_to_csv",
    "sweep_to_json",
    "synthesize_from_noise",
    "trace_to_csv",
    "train",
    "transfer_check",
    "transform_suite",
    "write_pgm",
]
