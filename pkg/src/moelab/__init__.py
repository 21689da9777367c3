"""Training and analysis toolkit for small mixture-of-experts language models.

The routing layer supports two selection rules side by side: classic top-k
(fixed expert count per token) and a confidence-threshold rule that keeps the
smallest set of experts whose router probability mass reaches a threshold p,
so easy tokens use fewer experts than hard ones. Everything runs on a small
reverse-mode autodiff engine over numpy arrays — no framework dependency —
which keeps runs bit-reproducible and easy to verify against finite
differences.
"""

from .tensor import (
    NumericError,
    ShapeError,
    Tensor,
    constant,
    default_dtype,
    no_grad,
    set_default_dtype,
    using_dtype,
)
from .routing import (
    RouterDecision,
    RouterParams,
    RoutingPolicy,
    route,
    select,
    select_batch,
    select_top_k,
    select_top_p,
)
from .moe import ExpertBank, LayerRouting, count_activated, moe_forward, swiglu_ffn
from .losses import (
    DEFAULT_ALPHA,
    DEFAULT_BETA,
    LossBreakdown,
    balance_loss,
    combine,
    entropy_loss,
)
from .model import (
    ModelConfig,
    ModelState,
    ParamCounts,
    count_parameters,
    forward,
    init_model,
    param_counts,
)
from .data import Corpus, CorpusError, ingest_corpus, iter_eval_windows, sample_batch
from .checkpoint import (
    Checkpoint,
    CheckpointError,
    ChecksumError,
    load_checkpoint,
    save_checkpoint,
)
from .training import (
    TrainConfig,
    TrainingError,
    TrainResult,
    lr_at,
    load_model_state,
    read_metrics,
    resume,
    train,
)
from .analysis import (
    EvalRun,
    RoutingStats,
    SweepReport,
    collect_stats,
    emit_report,
    evaluate,
    layer_profile,
    layer_trend,
    sweep_p,
    token_profile,
)
from .config import ConfigError, RunConfig, load_config, parse_config, render_config

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "ChecksumError",
    "ConfigError",
    "Corpus",
    "CorpusError",
    "DEFAULT_ALPHA",
    "DEFAULT_BETA",
    "EvalRun",
    "ExpertBank",
    "LayerRouting",
    "LossBreakdown",
    "ModelConfig",
    "ModelState",
    "NumericError",
    "ParamCounts",
    "RouterDecision",
    "RouterParams",
    "RoutingPolicy",
    "RoutingStats",
    "RunConfig",
    "ShapeError",
    "SweepReport",
    "Tensor",
    "TrainConfig",
    "TrainResult",
    "TrainingError",
    "balance_loss",
    "collect_stats",
    "combine",
    "constant",
    "count_activated",
    "count_parameters",
    "default_dtype",
    "emit_report",
    "entropy_loss",
    "evaluate",
    "forward",
    "ingest_corpus",
    "init_model",
    "iter_eval_windows",
    "layer_profile",
    "layer_trend",
    "load_checkpoint",
    "load_config",
    "load_model_state",
    "lr_at",
    "moe_forward",
    "no_grad",
    "param_counts",
    "parse_config",
    "read_metrics",
    "render_config",
    "resume",
    "route",
    "sample_batch",
    "save_checkpoint",
    "select",
    "select_batch",
    "select_top_k",
    "select_top_p",
    "set_default_dtype",
    "swiglu_ffn",
    "sweep_p",
    "token_profile",
    "train",
    "using_dtype",
]
