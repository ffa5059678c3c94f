"""Split conformal calibration of help-trigger thresholds.

Strong regime: calibrate on the scores of steps labeled "needs help" so
that at most a beta fraction of such steps fall below the threshold.
Weak regime: calibrate on per-failure-episode maximum scores so that at
least a 1-beta fraction of failure episodes receive at least one trigger.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .errors import ConfigError, ValidationError
from .features import token_entropy, step_perplexity
from .store import EpisodeRecord, HelpDecision, StepRecord

SCORE_KINDS = ("entropy", "perplexity")
REGIMES = ("strong", "weak")
AGGREGATES = ("mean", "max")


@dataclass
class CpConfig:
    score: str = "entropy"
    regime: str = "strong"
    beta: float = 0.2
    aggregate: str = "mean"

    def validate(self) -> None:
        if self.score not in SCORE_KINDS:
            raise ConfigError(f"score must be one of {SCORE_KINDS}")
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}")
        if not 0.0 < self.beta < 1.0:
            raise ConfigError("beta must lie in (0, 1)")
        if self.aggregate not in AGGREGATES:
            raise ConfigError(f"aggregate must be one of {AGGREGATES}")


@dataclass
class CpThreshold:
    tau: float
    n_calibration: int
    config: CpConfig = field(default_factory=CpConfig)


def step_score(step: StepRecord, kind: str, aggregate: str = "mean") -> float:
    """Scalar nonconformity score for one step."""
    if not step.tokens:
        raise ValidationError("cannot score a step with no tokens")
    if kind == "entropy":
        entropies = [token_entropy(tok) for tok in step.tokens]
        if aggregate == "mean":
            return float(np.mean(entropies))
        if aggregate == "max":
            return float(np.max(entropies))
        raise ConfigError(f"aggregate must be one of {AGGREGATES}")
    if kind == "perplexity":
        return step_perplexity(step)
    raise ConfigError(f"score must be one of {SCORE_KINDS}")


def _quantile_index(n: int, beta: float) -> int:
    """1-based index into the ascending score list."""
    return max(1, math.floor((n + 1) * beta))


def _calibrate(scores: Sequence[float], cfg: CpConfig) -> CpThreshold:
    arr = np.asarray(sorted(scores), dtype=np.float64)
    if arr.size == 0:
        raise ValidationError("empty calibration score set")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("calibration scores must be finite")
    k = _quantile_index(arr.size, cfg.beta)
    return CpThreshold(
        tau=float(arr[k - 1]), n_calibration=int(arr.size), config=cfg
    )


def calibrate_strong(steps: Sequence[StepRecord], cfg: CpConfig) -> CpThreshold:
    """Threshold from the scores of needs-help steps only."""
    cfg.validate()
    scores = [
        step_score(s, cfg.score, cfg.aggregate)
        for s in steps
        if s.strong_label == 1
    ]
    if not scores:
        raise ValidationError(
            "strong calibration requires at least one step with strong_label=1"
        )
    return _calibrate(scores, cfg)


def calibrate_weak(
    episodes: Sequence[EpisodeRecord], cfg: CpConfig
) -> CpThreshold:
    """Threshold from per-failure-episode maximum scores."""
    cfg.validate()
    maxima: List[float] = []
    for ep in episodes:
        if ep.weak_label != 1:
            continue
        maxima.append(
            max(step_score(s, cfg.score, cfg.aggregate) for s in ep.steps)
        )
    if not maxima:
        raise ValidationError(
            "weak calibration requires at least one failure episode"
        )
    return _calibrate(maxima, cfg)


def calibrate(
    episodes: Sequence[EpisodeRecord], cfg: CpConfig
) -> CpThreshold:
    """Dispatch on the configured regime."""
    cfg.validate()
    if cfg.regime == "strong":
        steps = [s for ep in episodes for s in ep.steps]
        return calibrate_strong(steps, cfg)
    return calibrate_weak(episodes, cfg)


def cp_decide(score: float, threshold: CpThreshold) -> HelpDecision:
    """Trigger iff score >= tau; ties trigger."""
    if not math.isfinite(score):
        raise ValidationError(f"nonconformity score must be finite, got {score}")
    return HelpDecision(help=score >= threshold.tau, score=float(score))


def threshold_to_json(threshold: CpThreshold) -> str:
    obj = {
        "tau": threshold.tau,
        "n_calibration": threshold.n_calibration,
        "config": {
            "score": threshold.config.score,
            "regime": threshold.config.regime,
            "beta": threshold.config.beta,
            "aggregate": threshold.config.aggregate,
        },
    }
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def threshold_from_json(text: str) -> CpThreshold:
    try:
        obj = json.loads(text)
        cfg = CpConfig(**obj["config"])
        threshold = CpThreshold(
            tau=float(obj["tau"]),
            n_calibration=int(obj["n_calibration"]),
            config=cfg,
        )
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise ValidationError(f"malformed threshold record: {exc}") from exc
    cfg.validate()
    if threshold.n_calibration < 1:
        raise ValidationError("n_calibration must be at least 1")
    return threshold
