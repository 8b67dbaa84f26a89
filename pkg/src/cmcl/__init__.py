"""Multi-domain classifier training via constrained maximum cross-domain likelihood.

A desk-scale library and CLI that trains a shared feature extractor with
per-domain softmax heads and a global head through a three-stage alternating
loop: joint ERM with feature moment matching, per-domain head refits on frozen
features, and cross-domain likelihood maximization against frozen heads, while
an exponential-moving-average target copy of the extractor and global head is
maintained for evaluation.
"""

from . import autodiff
from .autodiff import (
    GradientCheckReport,
    Node,
    backward,
    batch_covariance,
    batch_mean,
    constant,
    gradient_check,
    log_softmax,
    matmul,
    parameter,
    relu,
    sq_frobenius_dist,
)
from .config import RunConfig, load_run_config, parse_run_config, preset_run_config
from .data import (
    BatchSampler,
    DomainDataset,
    ScenarioSpec,
    dataset_read,
    dataset_write,
    gen_rotated_gaussians,
    gen_spurious_feature,
    generate_scenario,
    split_train_val,
)
from .errors import (
    CmclError,
    ConfigError,
    ContractError,
    DivergenceError,
    FormatError,
    InsufficientSamplesError,
    NumericError,
    ProbeError,
    ShapeError,
    VersionError,
)
from .experiment import RunResult, erm_degenerate, load_run_result, run_benchmark, run_training
from .losses import (
    DomainBatch,
    kl_categorical,
    kl_decomposition_check,
    loss_cdl,
    loss_ce,
    loss_cemm,
    loss_cov,
    loss_dsc,
    loss_mean,
    loss_mm,
    posterior_alignment_diag,
)
from .model import (
    CmclModel,
    EmaState,
    FeatureExtractor,
    SoftmaxClassifier,
    average_classifiers,
    checkpoint_load,
    checkpoint_save,
    ema_update,
    extract_features,
    posterior,
    top1_accuracy,
)
from .optim import AdamW, MomentumSgd, OptimizerSpec, make_optimizer
from .trainer import (
    METRICS_HEADER,
    MetricsRow,
    ModelConfig,
    TrainConfig,
    TrainResult,
    stage_a_step,
    stage_b_step,
    stage_c_step,
    train,
)
from .verification import run_gradcheck_suite

__version__ = "0.1.0"
