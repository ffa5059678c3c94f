"""Uncertainty kernels over a single token's predictive distribution.

Every operation here is a pure function: entropy and negative
log-probability come straight from the stored probabilities, while the
aleatoric/epistemic pair is derived from a Dirichlet evidence model built
on the top-K logits.  Natural logarithms throughout, so perplexity is
exactly exp(mean negative log-likelihood).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, LengthOverflowError, ValidationError

if TYPE_CHECKING:
    from .store import StepRecord

PROB_SUM_TOL = 1e-6

# How many of the largest logits feed the Dirichlet evidence model.  Small
# values keep records compact; the epistemic score saturates quickly in K.
DEFAULT_TOP_K = 10

FEATURE_CHANNELS = ("entropy", "neg_log_prob", "au", "eu")
N_CHANNELS = len(FEATURE_CHANNELS)


@dataclass
class TokenDistribution:
    """One decoded token's distribution record.

    ``kind`` is "full" (probs cover the whole vocabulary) or "topk_tail"
    (probs cover the K listed tokens, ``tail_mass`` the rest).  ``logits``
    are raw pre-softmax values aligned index-for-index with ``probs``.
    """

    kind: str
    probs: np.ndarray
    logits: np.ndarray
    chosen_index: int
    vocab_size: int
    tail_mass: Optional[float] = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.logits = np.asarray(self.logits, dtype=np.float64)

    def validate(self) -> None:
        """Raise ValidationError on the first violated invariant."""
        if self.kind not in ("full", "topk_tail"):
            raise ValidationError(f"unknown distribution kind {self.kind!r}")
        if self.vocab_size < 1:
            raise ValidationError(f"vocab_size must be positive, got {self.vocab_size}")
        if self.probs.ndim != 1 or self.logits.ndim != 1:
            raise ValidationError("probs and logits must be one-dimensional")
        if len(self.logits) not in (0, len(self.probs)):
            raise ValidationError(
                f"logits length {len(self.logits)} does not align with "
                f"probs length {len(self.probs)}"
            )
        if np.any(self.probs < 0.0) or np.any(self.probs > 1.0):
            raise ValidationError("probabilities must lie in [0, 1]")
        total = float(self.probs.sum())
        if self.kind == "full":
            if len(self.probs) != self.vocab_size:
                raise ValidationError(
                    f"full record has {len(self.probs)} probs for vocab_size "
                    f"{self.vocab_size}"
                )
            if abs(total - 1.0) > PROB_SUM_TOL:
                raise ValidationError(
                    f"full distribution sums to {total!r}, expected 1 within "
                    f"{PROB_SUM_TOL}"
                )
        else:
            if self.tail_mass is None:
                raise ValidationError("topk_tail record is missing tail_mass")
            if self.tail_mass < 0.0:
                raise ValidationError(f"tail_mass must be >= 0, got {self.tail_mass}")
            if len(self.probs) > self.vocab_size:
                raise ValidationError(
                    f"topk_tail record lists {len(self.probs)} probs, more than "
                    f"vocab_size {self.vocab_size}"
                )
            if abs(total + self.tail_mass - 1.0) > PROB_SUM_TOL:
                raise ValidationError(
                    f"topk_tail probs + tail_mass sums to "
                    f"{total + self.tail_mass!r}, expected 1 within {PROB_SUM_TOL}"
                )
        if not 0 <= self.chosen_index < len(self.probs):
            raise ValidationError(
                f"chosen_index {self.chosen_index} out of range for "
                f"{len(self.probs)} probs"
            )
        if self.probs[self.chosen_index] <= 0.0:
            raise ValidationError("chosen token has zero probability")


@dataclass
class TokenFeatures:
    """The four per-token uncertainty features, all finite."""

    entropy: float
    neg_log_prob: float
    au: float
    eu: float

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.entropy, self.neg_log_prob, self.au, self.eu], dtype=np.float64
        )


@dataclass
class NormStats:
    """Per-channel standardization statistics (train-fold only)."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(N_CHANNELS)
        self.std = np.asarray(self.std, dtype=np.float64).reshape(N_CHANNELS)
        if np.any(self.std <= 0.0):
            raise ConfigError("normalization std must be positive per channel")


@dataclass
class FeatureMatrix:
    """Channels-by-positions feature block with a validity mask.

    ``values`` has shape (4, N); columns past the real token count are
    exactly zero and carry mask=False.
    """

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)

    @property
    def n_tokens(self) -> int:
        return int(self.mask.sum())

    @property
    def width(self) -> int:
        return int(self.values.shape[1])


def _check_normalization(dist: TokenDistribution) -> None:
    total = float(dist.probs.sum())
    if dist.kind == "full":
        if abs(total - 1.0) > PROB_SUM_TOL:
            raise ValidationError(
                f"distribution sums to {total!r}, expected 1 within {PROB_SUM_TOL}"
            )
    elif dist.kind == "topk_tail":
        tail = dist.tail_mass
        if tail is None or tail < 0.0:
            raise ValidationError("topk_tail record needs a nonnegative tail_mass")
        if abs(total + tail - 1.0) > PROB_SUM_TOL:
            raise ValidationError(
                f"probs + tail_mass sums to {total + tail!r}, expected 1 within "
                f"{PROB_SUM_TOL}"
            )
    else:
        raise ValidationError(f"unknown distribution kind {dist.kind!r}")


def token_entropy(dist: TokenDistribution) -> float:
    """Shannon entropy in nats, with the 0*ln(0) := 0 convention.

    For topk_tail records the unlisted mass is treated as uniform over the
    V-K missing tokens, contributing -tail_mass*ln(tail_mass/(V-K)).
    """
    _check_normalization(dist)
    p = dist.probs
    nz = p > 0.0
    h = -float(np.sum(p[nz] * np.log(p[nz])))
    if dist.kind == "topk_tail" and dist.tail_mass > 0.0:
        remaining = dist.vocab_size - len(p)
        if remaining <= 0:
            raise ValidationError(
                "topk_tail record has positive tail_mass but no unlisted tokens"
            )
        h -= dist.tail_mass * math.log(dist.tail_mass / remaining)
    return h


def token_neg_log_prob(dist: TokenDistribution) -> float:
    """Negative natural log of the chosen token's probability."""
    if not 0 <= dist.chosen_index < len(dist.probs):
        raise ValidationError(
            f"chosen_index {dist.chosen_index} out of range for "
            f"{len(dist.probs)} probs"
        )
    p = float(dist.probs[dist.chosen_index])
    if p <= 0.0:
        raise ValidationError("chosen token has zero probability")
    return -math.log(p)


def softplus(x: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """Numerically stable ln(1 + e^x)."""
    arr = np.asarray(x, dtype=np.float64)
    out = np.maximum(arr, 0.0) + np.log1p(np.exp(-np.abs(arr)))
    return float(out) if np.isscalar(x) or arr.ndim == 0 else out


def evidence_from_logits(
    logits: Sequence[float], k: int
) -> tuple[np.ndarray, float]:
    """Dirichlet evidence from the K largest logits.

    Returns (alpha, alpha_0) where alpha[j] = softplus of the j-th largest
    logit (descending) and alpha_0 is the total evidence mass.
    """
    arr = np.asarray(logits, dtype=np.float64)
    if k <= 0 or k > len(arr):
        raise ConfigError(f"top-k must be in [1, {len(arr)}], got {k}")
    top = np.sort(arr)[::-1][:k]
    alpha = softplus(top)
    return alpha, float(alpha.sum())


_EULER_GAMMA = 0.5772156649015328606

# psi(x) ~ ln x - 1/(2x) - sum B_2n/(2n x^2n); coefficients for the
# subtracted tail 1/(12x^2) - 1/(120x^4) + ..., truncation < 2e-13 at x=6.
_ASYMPTOTIC_COEFFS = (
    1.0 / 12.0,
    1.0 / 120.0,
    1.0 / 252.0,
    1.0 / 240.0,
    1.0 / 132.0,
    691.0 / 32760.0,
    1.0 / 12.0,
)

_RECURRENCE_CUTOFF = 6.0


def digamma(x: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """Digamma psi(x) for x > 0, scalar or elementwise over an array.

    Upward recurrence psi(x) = psi(x+1) - 1/x shifts the argument to at
    least 6, then an asymptotic series finishes; absolute error stays
    below 1e-10 across [1e-3, 1e6].
    """
    arr = np.asarray(x, dtype=np.float64)
    scalar = np.isscalar(x) or arr.ndim == 0
    arr = np.atleast_1d(arr).copy()
    if np.any(~np.isfinite(arr)) or np.any(arr <= 0.0):
        raise ValueError("digamma requires finite x > 0")
    acc = np.zeros_like(arr)
    below = arr < _RECURRENCE_CUTOFF
    while np.any(below):
        acc[below] -= 1.0 / arr[below]
        arr[below] += 1.0
        below = arr < _RECURRENCE_CUTOFF
    # Horner over r = 1/x^2 produces the alternating-sign tail
    # 1/(12x^2) - 1/(120x^4) + 1/(252x^6) - ...
    r = 1.0 / (arr * arr)
    tail = np.zeros_like(arr)
    for c in reversed(_ASYMPTOTIC_COEFFS):
        tail = r * (c - tail)
    result = acc + np.log(arr) - 0.5 / arr - tail
    return float(result[0]) if scalar else result


def aleatoric_uncertainty(alpha: Union[Sequence[float], np.ndarray]) -> float:
    """Expected data ambiguity under the Dirichlet evidence model.

    -sum_k (alpha_k/alpha_0) * (psi(alpha_k + 1) - psi(alpha_0 + 1)).
    """
    a = np.asarray(alpha, dtype=np.float64)
    if a.size == 0:
        raise ConfigError("evidence vector must be nonempty")
    if np.any(a <= 0.0):
        raise ValueError("aleatoric uncertainty requires strictly positive evidence")
    a0 = float(a.sum())
    return -float(np.sum((a / a0) * (digamma(a + 1.0) - digamma(a0 + 1.0))))


def epistemic_uncertainty(alpha: Union[Sequence[float], np.ndarray]) -> float:
    """Model knowledge gap: K / sum(alpha_k + 1), in (0, 1] for alpha >= 0."""
    a = np.asarray(alpha, dtype=np.float64)
    if a.size == 0:
        raise ConfigError("evidence vector must be nonempty")
    if np.any(a < 0.0):
        raise ValueError("epistemic uncertainty requires nonnegative evidence")
    return float(len(a) / float(np.sum(a + 1.0)))


def token_features(dist: TokenDistribution, top_k: int = DEFAULT_TOP_K) -> TokenFeatures:
    """All four uncertainty features for one token.

    The evidence width is clamped to the number of stored logits, so
    records carrying fewer than ``top_k`` logits still produce features.
    """
    if len(dist.logits) == 0:
        raise ValidationError("record has no logits; evidence features need them")
    k = min(top_k, len(dist.logits))
    alpha, _ = evidence_from_logits(dist.logits, k)
    return TokenFeatures(
        entropy=token_entropy(dist),
        neg_log_prob=token_neg_log_prob(dist),
        au=aleatoric_uncertainty(alpha),
        eu=epistemic_uncertainty(alpha),
    )


def step_perplexity(step: "StepRecord") -> float:
    """exp of the mean per-token negative log-likelihood (natural logs)."""
    if not step.tokens:
        raise ValidationError("perplexity of an empty step is undefined")
    nll = [token_neg_log_prob(tok) for tok in step.tokens]
    return math.exp(sum(nll) / len(nll))


def step_feature_matrix(
    step: "StepRecord",
    max_tokens: int,
    norm: Optional[NormStats] = None,
    top_k: int = DEFAULT_TOP_K,
) -> FeatureMatrix:
    """Stack per-token features into a (4, max_tokens) padded block.

    Rows follow FEATURE_CHANNELS order; real tokens occupy the leading
    columns in decoding order.  Standardization (when ``norm`` is given)
    applies to real columns only, so padding stays exactly zero.
    """
    n = len(step.tokens)
    if n > max_tokens:
        raise LengthOverflowError(n, max_tokens)
    values = np.zeros((N_CHANNELS, max_tokens), dtype=np.float64)
    mask = np.zeros(max_tokens, dtype=bool)
    for i, tok in enumerate(step.tokens):
        values[:, i] = token_features(tok, top_k).as_array()
    if norm is not None and n > 0:
        values[:, :n] = (values[:, :n] - norm.mean[:, None]) / norm.std[:, None]
    mask[:n] = True
    return FeatureMatrix(values=values, mask=mask)
