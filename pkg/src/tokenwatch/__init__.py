"""Token-level uncertainty introspection for autoregressive policies.

Converts per-token probability/logit records into uncertainty features,
trains step- and episode-level help-trigger classifiers, calibrates
conformal baselines, and evaluates everything fold-wise.
"""

__version__ = "0.1.0"

from tokenwatch.checkpoint import load_checkpoint, save_checkpoint
from tokenwatch.conformal import CpConfig, CpThreshold, calibrate, cp_decide, step_score
from tokenwatch.errors import ConfigError, ValidationError
from tokenwatch.evaluation import (
    MethodUnderTest,
    MetricsReport,
    cp_factory,
    cp_method,
    cross_validate,
    evaluate_strong,
    evaluate_weak,
    render_report,
    report_from_json,
    report_to_json,
    strong_transformer_factory,
    timing_metrics,
    transformer_method,
    weak_transformer_factory,
)
from tokenwatch.features import (
    FeatureMatrix,
    NormStats,
    TokenDistribution,
    TokenFeatures,
    digamma,
    step_feature_matrix,
    step_perplexity,
    token_entropy,
    token_features,
    token_neg_log_prob,
)
from tokenwatch.models import (
    EpisodeClassifier,
    EpisodeClassifierConfig,
    StepClassifier,
    StepClassifierConfig,
    TrainConfig,
    forward_episode,
    forward_step,
    grad_check,
    init_episode_classifier,
    init_step_classifier,
    lse_pool,
)
from tokenwatch.monitor import (
    MonitorMethod,
    MonitorSession,
    method_from_classifier,
    method_from_cp,
    serve_stdio,
    serve_tcp,
)
from tokenwatch.service import create_app
from tokenwatch.store import (
    EpisodeRecord,
    HelpDecision,
    StepRecord,
    SynthConfig,
    read_episodes,
    write_episodes,
    split_train_val,
    synthesize_dataset,
)
from tokenwatch.training import FeatureTable, train_strong, train_weak

__all__ = [
    "ConfigError",
    "CpConfig",
    "CpThreshold",
    "EpisodeClassifier",
    "EpisodeClassifierConfig",
    "EpisodeRecord",
    "FeatureMatrix",
    "FeatureTable",
    "HelpDecision",
    "MethodUnderTest",
    "MetricsReport",
    "MonitorMethod",
    "MonitorSession",
    "NormStats",
    "StepClassifier",
    "StepClassifierConfig",
    "StepRecord",
    "SynthConfig",
    "TokenDistribution",
    "TokenFeatures",
    "TrainConfig",
    "ValidationError",
    "calibrate",
    "cp_decide",
    "cp_factory",
    "cp_method",
    "create_app",
    "cross_validate",
    "digamma",
    "evaluate_strong",
    "evaluate_weak",
    "forward_episode",
    "forward_step",
    "grad_check",
    "init_episode_classifier",
    "init_step_classifier",
    "load_checkpoint",
    "lse_pool",
    "method_from_classifier",
    "method_from_cp",
    "read_episodes",
    "render_report",
    "report_from_json",
    "report_to_json",
    "save_checkpoint",
    "serve_stdio",
    "serve_tcp",
    "split_train_val",
    "step_feature_matrix",
    "step_perplexity",
    "step_score",
    "strong_transformer_factory",
    "synthesize_dataset",
    "timing_metrics",
    "token_entropy",
    "token_features",
    "token_neg_log_prob",
    "train_strong",
    "train_weak",
    "transformer_method",
    "weak_transformer_factory",
    "write_episodes",
]
