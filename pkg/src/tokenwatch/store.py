"""Rollout data model, newline-delimited JSON storage, synthetic generator,
and episode-grouped fold splitting.

One episode per line on disk; see EPISODE_SCHEMA_DOC for the exact field
layout.  The synthetic generator produces a two-regime changepoint process:
token distributions stay sharp until a per-episode onset step, after which
they flatten, so step labels correlate with elevated uncertainty.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, ValidationError
from .features import TokenDistribution

EPISODE_SCHEMA_DOC = (
    '{"episode_id": str, "weak_label": 0|1, "source": "logged"|"synthetic", '
    '"steps": [{"step_index": int, "strong_label": 0|1|null, "meta": {str: str}, '
    '"tokens": [{"kind": "full"|"topk_tail", "vocab_size": int, "probs": [f64], '
    '"logits": [f64], "chosen_index": int, "tail_mass": f64?}]}]}'
)

# Lognormal sharpness jitter around the regime concentration, split into a
# factor shared by all tokens of a step and an independent per-token factor.
# The shared factor keeps step-level feature means dispersed, so the two
# regimes overlap in a thin band of borderline steps instead of separating
# cleanly; the band is what makes trigger-timing comparisons nontrivial.
SHARPNESS_STEP_SIGMA = 0.40
SHARPNESS_TOKEN_SIGMA = 0.15


@dataclass
class StepRecord:
    """One inference step: an ordered token sequence plus optional label."""

    step_index: int
    tokens: List[TokenDistribution]
    strong_label: Optional[int] = None
    meta: Dict[str, str] = field(default_factory=dict)


@dataclass
class EpisodeRecord:
    """An ordered list of steps with a mandatory episode outcome label."""

    episode_id: str
    steps: List[StepRecord]
    weak_label: int
    source: str = "logged"


@dataclass
class HelpDecision:
    """A per-step trigger decision with its driving score."""

    help: bool
    score: float
    step_index: Optional[int] = None
    degraded: bool = False


@dataclass
class SynthConfig:
    """Generator settings; the defaults are the desk-scale reference set."""

    vocab_size: int = 32
    top_k: int = 10
    episodes_total: int = 400
    failure_fraction: float = 0.4
    steps_range: Tuple[int, int] = (10, 40)
    tokens_range: Tuple[int, int] = (5, 24)
    nominal_concentration: float = 8.0
    degraded_concentration: float = 1.5
    onset_range: Tuple[float, float] = (0.2, 0.8)
    seed: int = 13

    def validate(self) -> None:
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be at least 2")
        if not 1 <= self.top_k <= self.vocab_size:
            raise ConfigError("top_k must be in [1, vocab_size]")
        if self.episodes_total < 1:
            raise ConfigError("episodes_total must be positive")
        if not 0.0 <= self.failure_fraction < 1.0:
            raise ConfigError("failure_fraction must be in [0, 1)")
        for name, rng in (
            ("steps_range", self.steps_range),
            ("tokens_range", self.tokens_range),
        ):
            lo, hi = rng
            if lo < 1 or hi < lo:
                raise ConfigError(f"{name} must satisfy 1 <= min <= max, got {rng}")
        lo, hi = self.onset_range
        if not (0.0 <= lo <= hi < 1.0):
            raise ConfigError(f"onset_range must lie within [0, 1), got {self.onset_range}")
        if self.nominal_concentration <= 0 or self.degraded_concentration <= 0:
            raise ConfigError("concentrations must be positive")
        if self.degraded_concentration >= self.nominal_concentration:
            raise ConfigError(
                "degraded_concentration must be below nominal_concentration"
            )


@dataclass
class FoldSplit:
    """Episode-grouped fold assignment, stratified by weak label."""

    k: int
    assignments: Dict[str, int]

    def fold_episode_ids(self, fold: int) -> List[str]:
        return [eid for eid, f in self.assignments.items() if f == fold]


def _validate_step(step: StepRecord, where: str) -> None:
    if not step.tokens:
        raise ValidationError(f"{where}: step has no tokens")
    if step.strong_label is not None and step.strong_label not in (0, 1):
        raise ValidationError(
            f"{where}: strong_label must be 0, 1 or null, got {step.strong_label}"
        )
    for j, tok in enumerate(step.tokens):
        try:
            tok.validate()
        except ValidationError as exc:
            raise ValidationError(f"{where}, token {j}: {exc}") from exc


def validate_episode(ep: EpisodeRecord, where: str = "") -> None:
    prefix = where or f"episode {ep.episode_id!r}"
    if ep.weak_label not in (0, 1):
        raise ValidationError(f"{prefix}: weak_label must be 0 or 1, got {ep.weak_label}")
    if ep.source not in ("logged", "synthetic"):
        raise ValidationError(f"{prefix}: unknown source {ep.source!r}")
    if not ep.steps:
        raise ValidationError(f"{prefix}: episode has no steps")
    for i, step in enumerate(ep.steps):
        if step.step_index != i:
            raise ValidationError(
                f"{prefix}: step_index must increase from 0, found "
                f"{step.step_index} at position {i}"
            )
        _validate_step(step, f"{prefix}, step {i}")


def token_to_obj(tok: TokenDistribution) -> dict:
    obj = {
        "kind": tok.kind,
        "vocab_size": tok.vocab_size,
        "probs": [float(p) for p in tok.probs],
        "logits": [float(v) for v in tok.logits],
        "chosen_index": tok.chosen_index,
    }
    if tok.kind == "topk_tail":
        obj["tail_mass"] = float(tok.tail_mass)
    return obj


def token_from_obj(obj: dict, where: str = "token") -> TokenDistribution:
    try:
        return TokenDistribution(
            kind=obj["kind"],
            probs=obj["probs"],
            logits=obj["logits"],
            chosen_index=obj["chosen_index"],
            vocab_size=obj["vocab_size"],
            tail_mass=obj.get("tail_mass"),
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{where}: malformed token record ({exc})") from exc


def episode_to_obj(ep: EpisodeRecord) -> dict:
    return {
        "episode_id": ep.episode_id,
        "weak_label": ep.weak_label,
        "source": ep.source,
        "steps": [
            {
                "step_index": s.step_index,
                "strong_label": s.strong_label,
                "meta": dict(s.meta),
                "tokens": [token_to_obj(t) for t in s.tokens],
            }
            for s in ep.steps
        ],
    }


def episode_from_obj(obj: dict, where: str) -> EpisodeRecord:
    try:
        steps = [
            StepRecord(
                step_index=s["step_index"],
                tokens=[
                    token_from_obj(t, f"{where}, step {i}") for t in s["tokens"]
                ],
                strong_label=s.get("strong_label"),
                meta=dict(s.get("meta") or {}),
            )
            for i, s in enumerate(obj["steps"])
        ]
        ep = EpisodeRecord(
            episode_id=obj["episode_id"],
            steps=steps,
            weak_label=obj["weak_label"],
            source=obj.get("source", "logged"),
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{where}: malformed episode record ({exc})") from exc
    validate_episode(ep, where)
    return ep


def write_episodes(episodes: Sequence[EpisodeRecord], path: Union[str, Path]) -> None:
    """Write one canonical JSON object per line; floats keep full precision."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for ep in episodes:
            fh.write(json.dumps(episode_to_obj(ep), separators=(",", ":")))
            fh.write("\n")


def read_episodes(path: Union[str, Path]) -> List[EpisodeRecord]:
    """Parse and fully validate a dataset file, citing line numbers on error."""
    path = Path(path)
    episodes: List[EpisodeRecord] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"line {lineno}: invalid JSON ({exc})") from exc
            episodes.append(episode_from_obj(obj, f"line {lineno}"))
    return episodes


def synthesize_dataset(cfg: SynthConfig) -> List[EpisodeRecord]:
    """Deterministic two-regime synthetic rollouts.

    Failure episodes switch from the nominal to the degraded concentration
    at a sampled onset step; the strong label marks exactly the degraded
    steps, so the weak label equals "any step degraded".
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_fail = int(round(cfg.episodes_total * cfg.failure_fraction))
    fail_flags = np.zeros(cfg.episodes_total, dtype=bool)
    fail_flags[:n_fail] = True
    rng.shuffle(fail_flags)

    episodes: List[EpisodeRecord] = []
    for idx in range(cfg.episodes_total):
        is_failure = bool(fail_flags[idx])
        n_steps = int(rng.integers(cfg.steps_range[0], cfg.steps_range[1] + 1))
        if is_failure:
            frac = rng.uniform(cfg.onset_range[0], cfg.onset_range[1])
            onset = min(n_steps - 1, int(frac * n_steps))
        else:
            onset = n_steps  # never reached
        steps: List[StepRecord] = []
        for t in range(n_steps):
            degraded = t >= onset
            kappa = (
                cfg.degraded_concentration if degraded else cfg.nominal_concentration
            )
            n_tokens = int(rng.integers(cfg.tokens_range[0], cfg.tokens_range[1] + 1))
            step_factor = math.exp(SHARPNESS_STEP_SIGMA * rng.standard_normal())
            tokens: List[TokenDistribution] = []
            for _ in range(n_tokens):
                sharp = (
                    kappa
                    * step_factor
                    * math.exp(SHARPNESS_TOKEN_SIGMA * rng.standard_normal())
                )
                logits = sharp * rng.standard_normal(cfg.vocab_size)
                shifted = logits - logits.max()
                probs = np.exp(shifted)
                probs /= probs.sum()
                tokens.append(
                    TokenDistribution(
                        kind="full",
                        probs=probs,
                        logits=logits,
                        chosen_index=int(np.argmax(probs)),
                        vocab_size=cfg.vocab_size,
                    )
                )
            steps.append(
                StepRecord(
                    step_index=t,
                    tokens=tokens,
                    strong_label=1 if degraded else 0,
                )
            )
        episodes.append(
            EpisodeRecord(
                episode_id=f"synth-{idx:05d}",
                steps=steps,
                weak_label=1 if is_failure else 0,
                source="synthetic",
            )
        )
    return episodes


def split_folds(
    episodes: Sequence[EpisodeRecord], k: int, seed: int
) -> FoldSplit:
    """Shuffled episode-grouped folds, stratified by weak label.

    Each stratum is dealt round-robin, with the second stratum starting
    where the first left off so total fold sizes also differ by at most 1.
    """
    if k < 2:
        raise ConfigError(f"fold count must be at least 2, got {k}")
    if k > len(episodes):
        raise ConfigError(
            f"fold count {k} exceeds episode count {len(episodes)}"
        )
    rng = np.random.default_rng(seed)
    assignments: Dict[str, int] = {}
    offset = 0
    for label in (1, 0):
        ids = [ep.episode_id for ep in episodes if ep.weak_label == label]
        order = rng.permutation(len(ids))
        for j, pos in enumerate(order):
            assignments[ids[pos]] = (offset + j) % k
        offset += len(ids)
    # Preserve input order in the mapping for stable serialization.
    ordered = {ep.episode_id: assignments[ep.episode_id] for ep in episodes}
    return FoldSplit(k=k, assignments=ordered)


def partition_by_fold(
    episodes: Sequence[EpisodeRecord], split: FoldSplit, fold: int
) -> Tuple[List[EpisodeRecord], List[EpisodeRecord]]:
    """(train, test) episode lists for one fold."""
    train = [ep for ep in episodes if split.assignments[ep.episode_id] != fold]
    test = [ep for ep in episodes if split.assignments[ep.episode_id] == fold]
    return train, test


def split_train_val(
    episodes: Sequence[EpisodeRecord], val_fraction: float, seed: int
) -> Tuple[List[EpisodeRecord], List[EpisodeRecord]]:
    """Stratified train/validation split at episode granularity."""
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError("val_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    by_id = {ep.episode_id: ep for ep in episodes}
    val_ids = set()
    for label in (1, 0):
        ids = [ep.episode_id for ep in episodes if ep.weak_label == label]
        order = rng.permutation(len(ids))
        n_val = max(1, int(round(len(ids) * val_fraction))) if ids else 0
        val_ids.update(ids[pos] for pos in order[:n_val])
    train = [ep for ep in episodes if ep.episode_id not in val_ids]
    val = [ep for ep in episodes if ep.episode_id in val_ids]
    if not train:
        raise ConfigError("val_fraction leaves no training episodes")
    return train, val
