"""Convolutional networks trained with deep supervision."""
from .data import Dataset, augment, batches, load_idx, save_idx, synthetic_dataset
from .estimator import DeeplySupervisedClassifier, GradientProbe
from .evaluation import load_checkpoint, save_checkpoint, strip_branches, top_k_error
from .network import (
    Branch,
    Conv,
    Linear,
    NetworkSpec,
    ParameterStore,
    Pool,
    SoftmaxHead,
    backward,
    build,
    forward,
    init_params,
    mean_gradient_magnitude,
)
from .supervision import (
    AlphaSchedule,
    BranchTemplate,
    ProbeConfig,
    ProbeReport,
    alpha_at,
    attach_branch,
    combined_loss,
    probe_vanishing,
)
from .trainer import MetricsLog, OptimizerState, TrainingConfig, sgd_step, train

__version__ = "0.1.0"
