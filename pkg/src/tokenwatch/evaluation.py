"""Fold-wise evaluation of help-trigger methods.

Conventions fixed here: positive step class = needs help; positive
episode class = failure; step indices are 1-based in all reported timing
numbers; TTFH averages only failure episodes that received at least one
trigger, with never-triggered failures counted separately; per-fold
standard deviations are population deviations and a single sample
reports std 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .conformal import CpConfig, CpThreshold, calibrate, cp_decide, step_score
from .errors import ConfigError, ValidationError
from .features import step_feature_matrix
from .models import (
    Classifier,
    EpisodeClassifier,
    EpisodeClassifierConfig,
    StepClassifierConfig,
    TrainConfig,
    forward_episode,
    forward_step,
)
from .store import (
    EpisodeRecord,
    HelpDecision,
    StepRecord,
    partition_by_fold,
    split_folds,
    split_train_val,
)
from .training import FeatureTable, train_strong, train_weak

StepDecider = Callable[[StepRecord], HelpDecision]
EpisodeProb = Callable[[EpisodeRecord], float]


@dataclass
class MethodUnderTest:
    """A named step-decision rule, optionally with an episode probability."""

    name: str
    decide_step: StepDecider
    episode_prob: Optional[EpisodeProb] = None
    cp_threshold: Optional[CpThreshold] = None


def confusion_metrics(tp: int, fp: int, fn: int, tn: int) -> Dict[str, float]:
    total = tp + fp + fn + tn
    accuracy = (tp + tn) / total if total else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = (
        2 * precision * recall / (precision + recall)
        if precision + recall > 0
        else 0.0
    )
    return {
        "tp": tp,
        "fp": fp,
        "fn": fn,
        "tn": tn,
        "accuracy": accuracy,
        "precision": precision,
        "recall": recall,
        "f1": f1,
    }


def _episode_triggers(
    method: MethodUnderTest, ep: EpisodeRecord
) -> List[bool]:
    return [bool(method.decide_step(step).help) for step in ep.steps]


def evaluate_strong(
    method: MethodUnderTest, episodes: Sequence[EpisodeRecord]
) -> Dict[str, float]:
    """Per-step confusion against strong labels; positive = needs help."""
    tp = fp = fn = tn = 0
    for ep in episodes:
        for step in ep.steps:
            if step.strong_label is None:
                raise ValidationError(
                    f"episode {ep.episode_id!r}, step {step.step_index}: "
                    "strong_label required for strong evaluation"
                )
            pred = bool(method.decide_step(step).help)
            actual = step.strong_label == 1
            if pred and actual:
                tp += 1
            elif pred and not actual:
                fp += 1
            elif not pred and actual:
                fn += 1
            else:
                tn += 1
    return confusion_metrics(tp, fp, fn, tn)


def evaluate_weak(
    method: MethodUnderTest, episodes: Sequence[EpisodeRecord]
) -> Dict[str, float]:
    """Per-episode confusion; positive = failure.

    Episode prediction uses the method's episode probability when it has
    one, otherwise the >= 1 trigger rule over its step decisions."""
    tp = fp = fn = tn = 0
    for ep in episodes:
        if method.episode_prob is not None:
            pred = method.episode_prob(ep) >= 0.5
        else:
            pred = any(_episode_triggers(method, ep))
        actual = ep.weak_label == 1
        if pred and actual:
            tp += 1
        elif pred and not actual:
            fp += 1
        elif not pred and actual:
            fn += 1
        else:
            tn += 1
    return confusion_metrics(tp, fp, fn, tn)


def timing_metrics(
    method: MethodUnderTest, episodes: Sequence[EpisodeRecord]
) -> Dict[str, float]:
    """Trigger timing and frequency, split by episode outcome."""
    ttfh: List[int] = []
    missed_failures = 0
    counts = {0: [], 1: []}
    rates = {0: [], 1: []}
    for ep in episodes:
        flags = _episode_triggers(method, ep)
        n_triggers = sum(flags)
        counts[ep.weak_label].append(n_triggers)
        rates[ep.weak_label].append(n_triggers / len(flags))
        if ep.weak_label == 1:
            if n_triggers:
                ttfh.append(flags.index(True) + 1)
            else:
                missed_failures += 1
    out = {
        # None, not NaN: reports must stay valid canonical JSON
        "ttfh_mean": float(np.mean(ttfh)) if ttfh else None,
        "ttfh_std": float(np.std(ttfh)) if ttfh else None,
        "n_first_help": len(ttfh),
        "missed_failures": missed_failures,
        "trigger_count_success": float(np.mean(counts[0])) if counts[0] else 0.0,
        "trigger_count_failure": float(np.mean(counts[1])) if counts[1] else 0.0,
        "trigger_rate_success": float(np.mean(rates[0])) if rates[0] else 0.0,
        "trigger_rate_failure": float(np.mean(rates[1])) if rates[1] else 0.0,
    }
    return out


@dataclass
class MetricsReport:
    method: str
    dataset_id: str
    k: int
    seed: int
    folds: List[dict] = field(default_factory=list)
    aggregate: Dict[str, dict] = field(default_factory=dict)


_AGGREGATE_SECTIONS = ("strong", "weak", "timing")


def _aggregate_folds(folds: Sequence[dict]) -> Dict[str, dict]:
    """mean and population std per metric across folds; NaNs skipped."""
    out: Dict[str, dict] = {}
    for section in _AGGREGATE_SECTIONS:
        rows = [f[section] for f in folds if section in f]
        if not rows:
            continue
        keys = rows[0].keys()
        agg = {}
        for key in keys:
            vals = [
                float(r[key])
                for r in rows
                if r.get(key) is not None and not math.isnan(float(r[key]))
            ]
            if vals:
                agg[key] = {
                    "mean": float(np.mean(vals)),
                    "std": float(np.std(vals)),
                }
            else:
                agg[key] = {"mean": None, "std": None}
        out[section] = agg
    return out


MethodFactory = Callable[[Sequence[EpisodeRecord], int], MethodUnderTest]


def cross_validate(
    episodes: Sequence[EpisodeRecord],
    method_factory: MethodFactory,
    k: int,
    seed: int,
    dataset_id: str = "dataset",
    evaluate_strong_labels: bool = True,
) -> MetricsReport:
    """Train/calibrate on k-1 folds, evaluate on the held-out fold."""
    split = split_folds(episodes, k, seed)
    folds: List[dict] = []
    method_name = "method"
    for fold in range(k):
        train_eps, test_eps = partition_by_fold(episodes, split, fold)
        try:
            method = method_factory(train_eps, fold)
        except (ValidationError, ConfigError) as exc:
            raise type(exc)(f"fold {fold}: {exc}") from exc
        method_name = method.name
        entry: dict = {"fold": fold}
        if evaluate_strong_labels:
            entry["strong"] = evaluate_strong(method, test_eps)
        entry["weak"] = evaluate_weak(method, test_eps)
        entry["timing"] = timing_metrics(method, test_eps)
        if method.cp_threshold is not None:
            thr = method.cp_threshold
            entry["cp_threshold"] = {
                "tau": thr.tau,
                "n_calibration": thr.n_calibration,
                "config": {
                    "score": thr.config.score,
                    "regime": thr.config.regime,
                    "beta": thr.config.beta,
                    "aggregate": thr.config.aggregate,
                },
            }
        folds.append(entry)
    return MetricsReport(
        method=method_name,
        dataset_id=dataset_id,
        k=k,
        seed=seed,
        folds=folds,
        aggregate=_aggregate_folds(folds),
    )


def report_to_json(report: MetricsReport) -> str:
    obj = {
        "method": report.method,
        "dataset_id": report.dataset_id,
        "k": report.k,
        "seed": report.seed,
        "folds": report.folds,
        "aggregate": report.aggregate,
    }
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False)


def report_from_json(text: str) -> MetricsReport:
    try:
        obj = json.loads(text)
        return MetricsReport(
            method=obj["method"],
            dataset_id=obj["dataset_id"],
            k=int(obj["k"]),
            seed=int(obj["seed"]),
            folds=list(obj["folds"]),
            aggregate=dict(obj["aggregate"]),
        )
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise ValidationError(f"malformed report: {exc}") from exc


def _fmt_cell(stats: dict) -> str:
    mean, std = stats.get("mean"), stats.get("std")
    if mean is None or math.isnan(mean):
        return "n/a"
    return f"{mean:.4f} +- {std:.4f}"


def render_report(report: MetricsReport, fmt: str = "text") -> str:
    """Report as canonical JSON or an aligned mean +- std table."""
    if fmt == "json":
        return report_to_json(report)
    if fmt != "text":
        raise ConfigError(f"unknown report format {fmt!r}")
    lines = [
        f"method: {report.method}",
        f"dataset: {report.dataset_id}  folds: {report.k}  seed: {report.seed}",
    ]
    header = f"{'metric':<28}{'mean +- std':>24}"
    lines.append(header)
    lines.append("-" * len(header))
    for section in _AGGREGATE_SECTIONS:
        stats = report.aggregate.get(section)
        if not stats:
            continue
        for key in stats:
            label = f"{section}.{key}"
            lines.append(f"{label:<28}{_fmt_cell(stats[key]):>24}")
    return "\n".join(lines) + "\n"


def transformer_method(
    model: Classifier, threshold: float = 0.5, name: Optional[str] = None
) -> MethodUnderTest:
    """Wrap a trained classifier as a step-decision method.

    The episode model also exposes its pooled probability, which weak
    evaluation then uses instead of the >= 1 trigger rule."""
    cfg = model.config
    # The harness walks the same steps once per metric family; the records
    # are alive for the whole evaluation, so id-keyed memoization is safe.
    cache: Dict[int, HelpDecision] = {}

    def decide(step: StepRecord) -> HelpDecision:
        hit = cache.get(id(step))
        if hit is not None:
            return hit
        fm = step_feature_matrix(step, cfg.max_tokens, norm=model.norm)
        _, score = forward_step(model, fm)
        decision = HelpDecision(
            help=score >= threshold, score=score, step_index=step.step_index
        )
        cache[id(step)] = decision
        return decision

    episode_prob: Optional[EpisodeProb] = None
    if isinstance(model, EpisodeClassifier):

        def episode_prob(ep: EpisodeRecord) -> float:
            fms = [
                step_feature_matrix(s, cfg.max_tokens, norm=model.norm)
                for s in ep.steps
            ]
            _, yhat = forward_episode(model, fms)
            return yhat

    return MethodUnderTest(
        name=name or f"transformer-{model.kind}",
        decide_step=decide,
        episode_prob=episode_prob,
    )


def cp_method(threshold: CpThreshold, name: Optional[str] = None) -> MethodUnderTest:
    """Wrap a calibrated conformal threshold as a step-decision method."""
    cfg = threshold.config

    def decide(step: StepRecord) -> HelpDecision:
        decision = cp_decide(step_score(step, cfg.score, cfg.aggregate), threshold)
        decision.step_index = step.step_index
        return decision

    return MethodUnderTest(
        name=name or f"cp-{cfg.score}-{cfg.regime}",
        decide_step=decide,
        cp_threshold=threshold,
    )


def strong_transformer_factory(
    model_cfg: StepClassifierConfig,
    train_cfg: TrainConfig,
    threshold: float = 0.5,
    table: Optional[FeatureTable] = None,
) -> MethodFactory:
    """Per-fold factory: fit a step classifier on the training folds.

    A prebuilt feature table spanning the full dataset may be shared
    across folds; it holds raw features only, and normalization is
    always refit from the fold's own training episodes."""

    def factory(train_eps: Sequence[EpisodeRecord], fold: int) -> MethodUnderTest:
        tr, val = split_train_val(train_eps, train_cfg.val_fraction, train_cfg.seed)
        model = train_strong(tr, val, model_cfg, train_cfg, table=table)
        return transformer_method(model, threshold, name="transformer-strong")

    return factory


def weak_transformer_factory(
    model_cfg: EpisodeClassifierConfig,
    train_cfg: TrainConfig,
    threshold: float = 0.5,
    table: Optional[FeatureTable] = None,
) -> MethodFactory:
    """Per-fold factory: fit the episode-supervised classifier."""

    def factory(train_eps: Sequence[EpisodeRecord], fold: int) -> MethodUnderTest:
        tr, val = split_train_val(train_eps, train_cfg.val_fraction, train_cfg.seed)
        model = train_weak(tr, val, model_cfg, train_cfg, table=table)
        return transformer_method(model, threshold, name="transformer-weak")

    return factory


def cp_factory(cp_cfg: CpConfig) -> MethodFactory:
    """Per-fold factory: calibrate a conformal threshold on the folds."""

    def factory(train_eps: Sequence[EpisodeRecord], fold: int) -> MethodUnderTest:
        return cp_method(calibrate(train_eps, cp_cfg))

    return factory
