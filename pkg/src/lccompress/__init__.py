"""Model compression as constrained optimization, solved by alternating learning and compression steps."""

from .compression import (
    CompressionScheme,
    LowRankParams,
    QuantParams,
    SignParams,
    SparseParams,
    TernaryParams,
    decompress,
    distortion,
    kmeans_1d,
    oracle_lowrank,
    oracle_quant,
    oracle_sign_loss,
    oracle_support_loss,
    project,
    storage_cost,
)
from .errors import ConfigError, FormatError, LCError, NumericError, SizeLimitError, UnsupportedVersionError
from .lc import (
    LCConfig,
    LCState,
    MetricsRecord,
    StuckAtDCWarning,
    al_value,
    c_step,
    dc_run,
    idc_run,
    l_step_fixed,
    l_step_sgd,
    lc_run,
    multiplier_update,
    qp_value,
    retrain_after_prune,
    validate_schedule,
)
from .model import LossTask, WeightVector, grad_check, lipschitz_bound, loss_eval, loss_grad, train_reference
from .schedules import LearnRateSchedule

__version__ = "0.1.0"
