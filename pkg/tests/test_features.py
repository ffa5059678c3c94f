"""Unit tests for the uncertainty feature kernels.

Reference values were computed independently with mpmath at 50 decimal
digits and with exact rational arithmetic where possible, then frozen here.
"""

import math

import numpy as np
import pytest

from tokenwatch.errors import ConfigError, LengthOverflowError, ValidationError
from tokenwatch.features import (
    DEFAULT_TOP_K,
    FEATURE_CHANNELS,
    FeatureMatrix,
    NormStats,
    TokenDistribution,
    aleatoric_uncertainty,
    digamma,
    epistemic_uncertainty,
    evidence_from_logits,
    softplus,
    step_feature_matrix,
    step_perplexity,
    token_entropy,
    token_features,
    token_neg_log_prob,
)
from tokenwatch.store import StepRecord

EULER_GAMMA = 0.57721566490153286


def full_dist(probs, logits=None, chosen=None):
    probs = np.asarray(probs, dtype=np.float64)
    if logits is None:
        safe = np.where(probs > 0, probs, 1e-300)
        logits = np.log(safe)
    if chosen is None:
        chosen = int(np.argmax(probs))
    return TokenDistribution(
        kind="full",
        probs=probs,
        logits=np.asarray(logits, dtype=np.float64),
        chosen_index=chosen,
        vocab_size=len(probs),
    )


class TestTokenEntropy:
    def test_uniform_attains_ln_v(self):
        d = full_dist([0.25, 0.25, 0.25, 0.25])
        assert token_entropy(d) == pytest.approx(math.log(4), abs=1e-12)

    def test_one_hot_is_zero(self):
        d = full_dist([1.0, 0.0, 0.0], logits=[50.0, 0.0, 0.0])
        assert token_entropy(d) == 0.0

    def test_skewed_oracle_value(self):
        d = full_dist([0.7, 0.2, 0.1])
        assert token_entropy(d) == pytest.approx(0.8018185525433372, abs=1e-12)

    def test_bounds_on_random_distributions(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            v = int(rng.integers(2, 64))
            g = rng.standard_normal(v)
            p = np.exp(g - g.max())
            p /= p.sum()
            h = token_entropy(full_dist(p, logits=g))
            assert 0.0 <= h <= math.log(v) + 1e-12

    def test_permutation_invariant(self):
        rng = np.random.default_rng(4)
        g = rng.standard_normal(12)
        p = np.exp(g - g.max())
        p /= p.sum()
        perm = rng.permutation(12)
        h1 = token_entropy(full_dist(p, logits=g))
        h2 = token_entropy(full_dist(p[perm], logits=g[perm]))
        assert h1 == pytest.approx(h2, abs=1e-12)

    def test_topk_tail_uniform_tail_matches_full(self):
        # When the true tail really is uniform, the top-k record's entropy
        # must reproduce the full-vocabulary entropy.
        v, k = 20, 6
        head = np.array([0.30, 0.20, 0.15, 0.10, 0.05, 0.04])
        tail_mass = 1.0 - head.sum()
        full_p = np.concatenate([head, np.full(v - k, tail_mass / (v - k))])
        d_full = full_dist(full_p)
        d_topk = TokenDistribution(
            kind="topk_tail",
            probs=head,
            logits=np.log(head),
            chosen_index=0,
            vocab_size=v,
            tail_mass=tail_mass,
        )
        assert token_entropy(d_topk) == pytest.approx(
            token_entropy(d_full), abs=1e-9
        )

    def test_bad_normalization_names_sum(self):
        d = full_dist([0.5, 0.2, 0.1])
        d.probs = np.array([0.5, 0.2, 0.1])
        with pytest.raises(ValidationError, match=r"sums to 0\.79"):
            token_entropy(d)


class TestNegLogProb:
    def test_certainty(self):
        d = full_dist([1.0, 0.0], logits=[40.0, 0.0])
        assert token_neg_log_prob(d) == 0.0

    def test_inverse_e(self):
        p = math.exp(-1)
        d = full_dist([p, 1 - p], chosen=0)
        assert token_neg_log_prob(d) == pytest.approx(1.0, abs=1e-12)

    def test_quarter(self):
        d = full_dist([0.25, 0.75], chosen=0)
        assert token_neg_log_prob(d) == pytest.approx(
            1.3862943611198906, abs=1e-12
        )

    def test_zero_chosen_probability_rejected(self):
        d = full_dist([0.0, 1.0], logits=[-40.0, 4.0], chosen=0)
        with pytest.raises(ValidationError):
            token_neg_log_prob(d)


class TestEvidence:
    def test_softplus_zero_is_ln2(self):
        alpha, alpha0 = evidence_from_logits(np.array([0.0, 0.0]), 2)
        assert alpha == pytest.approx([math.log(2)] * 2, abs=1e-12)
        assert alpha0 == pytest.approx(2 * math.log(2), abs=1e-12)

    def test_extreme_logits(self):
        alpha, _ = evidence_from_logits(np.array([10.0, -10.0]), 2)
        assert alpha[0] == pytest.approx(10.000045398899218, abs=1e-12)
        assert alpha[1] == pytest.approx(4.5398899216870535e-05, rel=1e-10)

    def test_selects_k_largest_descending(self):
        alpha, alpha0 = evidence_from_logits(np.array([1.0, 3.0, 2.0]), 2)
        assert alpha == pytest.approx(
            [3.0485873515737420, 2.1269280110429727], abs=1e-12
        )
        assert alpha0 == pytest.approx(sum(alpha), abs=1e-12)

    def test_k_out_of_range(self):
        with pytest.raises(ConfigError):
            evidence_from_logits(np.array([1.0, 2.0]), 0)
        with pytest.raises(ConfigError):
            evidence_from_logits(np.array([1.0, 2.0]), 3)

    def test_softplus_stable_at_extremes(self):
        out = softplus(np.array([-800.0, 0.0, 800.0]))
        assert out[0] == 0.0
        assert out[1] == pytest.approx(math.log(2), abs=1e-15)
        assert out[2] == 800.0


class TestDigamma:
    def test_at_one(self):
        assert digamma(1.0) == pytest.approx(-EULER_GAMMA, abs=1e-10)

    def test_at_two(self):
        assert digamma(2.0) == pytest.approx(1 - EULER_GAMMA, abs=1e-10)

    def test_at_five_harmonic(self):
        assert digamma(5.0) == pytest.approx(25 / 12 - EULER_GAMMA, abs=1e-10)

    def test_recurrence_grid(self):
        x = np.linspace(0.5, 100.0, 1000)
        resid = np.abs(digamma(x + 1.0) - digamma(x) - 1.0 / x)
        assert resid.max() <= 1e-10

    def test_vectorized_matches_scalar(self):
        xs = np.array([1e-3, 0.31, 1.0, 5.9, 6.0, 42.0, 1e6])
        vec = digamma(xs)
        for i, x in enumerate(xs):
            assert vec[i] == digamma(float(x))

    def test_domain_errors(self):
        for bad in (0.0, -1.0, math.nan, math.inf):
            with pytest.raises(ValueError):
                digamma(bad)

    def test_small_argument_against_reflection_of_recurrence(self):
        # psi(x) = psi(x+1) - 1/x lets tiny arguments be checked against a
        # value in the asymptotic regime built up independently.
        x = 1e-3
        assert digamma(x) == pytest.approx(digamma(x + 1.0) - 1.0 / x, abs=1e-9)


class TestDirichletUncertainty:
    def test_au_symmetric_pair(self):
        assert aleatoric_uncertainty(np.array([1.0, 1.0])) == pytest.approx(
            0.5, abs=1e-12
        )

    def test_au_exact_rational(self):
        assert aleatoric_uncertainty(np.array([3.0, 1.0])) == pytest.approx(
            11 / 24, abs=1e-12
        )

    def test_au_limit_ln_k(self):
        alpha = np.full(4, 1e4)
        assert aleatoric_uncertainty(alpha) == pytest.approx(
            math.log(4), abs=1e-3
        )

    def test_au_nonnegative_and_permutation_invariant(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            alpha = rng.uniform(0.05, 20.0, size=int(rng.integers(2, 12)))
            au = aleatoric_uncertainty(alpha)
            assert au >= 0.0
            assert aleatoric_uncertainty(alpha[::-1].copy()) == pytest.approx(
                au, abs=1e-12
            )

    def test_au_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            aleatoric_uncertainty(np.array([1.0, 0.0]))

    def test_eu_direct_arithmetic(self):
        assert epistemic_uncertainty(np.array([1.0, 1.0])) == 0.5
        assert epistemic_uncertainty(np.array([99.0, 99.0])) == pytest.approx(
            0.01, abs=1e-15
        )

    def test_eu_zero_evidence_is_one(self):
        assert epistemic_uncertainty(np.array([0.0, 0.0, 0.0])) == 1.0

    def test_eu_strictly_decreasing_in_evidence(self):
        alpha = np.array([2.0, 3.0, 4.0])
        base = epistemic_uncertainty(alpha)
        for i in range(3):
            bumped = alpha.copy()
            bumped[i] += 0.5
            assert epistemic_uncertainty(bumped) < base

    def test_eu_empty_rejected(self):
        with pytest.raises(ConfigError):
            epistemic_uncertainty(np.array([]))


class TestStepPerplexity:
    def make_step(self, chosen_probs):
        tokens = []
        for p in chosen_probs:
            tokens.append(full_dist([p, 1 - p], chosen=0))
        return StepRecord(step_index=0, tokens=tokens)

    def test_certain_tokens(self):
        assert step_perplexity(self.make_step([1.0, 1.0, 1.0])) == pytest.approx(
            1.0, abs=1e-12
        )

    def test_halves(self):
        assert step_perplexity(self.make_step([0.5, 0.5])) == pytest.approx(
            2.0, abs=1e-12
        )

    def test_geometric_mean(self):
        assert step_perplexity(self.make_step([0.5, 0.125])) == pytest.approx(
            4.0, abs=1e-12
        )

    def test_empty_step_rejected(self):
        with pytest.raises(ValidationError):
            step_perplexity(StepRecord(step_index=0, tokens=[]))


class TestFeatureMatrix:
    def test_channel_order(self):
        assert FEATURE_CHANNELS == ("entropy", "neg_log_prob", "au", "eu")

    def test_one_hot_column(self):
        d = full_dist([1.0, 0.0, 0.0], logits=[50.0, -5.0, -5.0])
        step = StepRecord(step_index=0, tokens=[d])
        fm = step_feature_matrix(step, 1)
        assert fm.values.shape == (4, 1)
        assert fm.mask.tolist() == [True]
        assert fm.values[0, 0] == 0.0
        assert fm.values[1, 0] == 0.0
        alpha, _ = evidence_from_logits(np.array([50.0, -5.0, -5.0]), 3)
        assert fm.values[2, 0] == pytest.approx(
            aleatoric_uncertainty(alpha), abs=1e-12
        )
        assert fm.values[3, 0] == pytest.approx(
            epistemic_uncertainty(alpha), abs=1e-12
        )

    def test_padding_contract(self):
        rng = np.random.default_rng(6)
        tokens = []
        for _ in range(2):
            g = rng.standard_normal(8)
            p = np.exp(g - g.max())
            p /= p.sum()
            tokens.append(full_dist(p, logits=g))
        fm = step_feature_matrix(StepRecord(step_index=0, tokens=tokens), 4)
        assert fm.mask.tolist() == [True, True, False, False]
        assert np.all(fm.values[:, 2:] == 0.0)

    def test_padding_zero_even_with_normalization(self):
        rng = np.random.default_rng(7)
        g = rng.standard_normal(8)
        p = np.exp(g - g.max())
        p /= p.sum()
        step = StepRecord(step_index=0, tokens=[full_dist(p, logits=g)])
        norm = NormStats(
            mean=np.array([5.0, 5.0, 5.0, 5.0]),
            std=np.array([2.0, 2.0, 2.0, 2.0]),
        )
        fm = step_feature_matrix(step, 3, norm=norm)
        raw = step_feature_matrix(step, 3)
        assert np.all(fm.values[:, 1:] == 0.0)
        assert fm.values[:, 0] == pytest.approx(
            (raw.values[:, 0] - 5.0) / 2.0, abs=1e-12
        )

    def test_overflow_error_carries_lengths(self):
        rng = np.random.default_rng(8)
        tokens = []
        for _ in range(3):
            g = rng.standard_normal(8)
            p = np.exp(g - g.max())
            p /= p.sum()
            tokens.append(full_dist(p, logits=g))
        with pytest.raises(LengthOverflowError) as exc_info:
            step_feature_matrix(StepRecord(step_index=0, tokens=tokens), 2)
        assert exc_info.value.n_tokens == 3
        assert exc_info.value.max_tokens == 2

    def test_deterministic_recomputation(self):
        rng = np.random.default_rng(9)
        g = rng.standard_normal(16)
        p = np.exp(g - g.max())
        p /= p.sum()
        step = StepRecord(step_index=0, tokens=[full_dist(p, logits=g)] * 3)
        a = step_feature_matrix(step, 5)
        b = step_feature_matrix(step, 5)
        assert np.array_equal(a.values, b.values)
        assert np.array_equal(a.mask, b.mask)

    def test_token_features_requires_logits(self):
        d = full_dist([0.5, 0.5])
        d.logits = np.array([])
        with pytest.raises(ValidationError):
            token_features(d, DEFAULT_TOP_K)

    def test_top_k_clamped_to_available_logits(self):
        d = full_dist([0.6, 0.4])
        feats = token_features(d, top_k=10)
        alpha, _ = evidence_from_logits(d.logits, 2)
        assert feats.eu == pytest.approx(
            epistemic_uncertainty(alpha), abs=1e-12
        )


class TestTokenDistributionValidation:
    def test_probs_must_sum_to_one(self):
        d = full_dist([0.6, 0.6])
        with pytest.raises(ValidationError):
            d.validate()

    def test_negative_prob_rejected(self):
        d = full_dist([1.2, -0.2])
        with pytest.raises(ValidationError):
            d.validate()

    def test_chosen_index_range(self):
        d = full_dist([0.5, 0.5])
        d.chosen_index = 2
        with pytest.raises(ValidationError):
            d.validate()

    def test_unknown_kind(self):
        d = full_dist([0.5, 0.5])
        d.kind = "sparse"
        with pytest.raises(ValidationError):
            d.validate()

    def test_topk_requires_tail_mass(self):
        d = TokenDistribution(
            kind="topk_tail",
            probs=[0.5, 0.3],
            logits=[1.0, 0.5],
            chosen_index=0,
            vocab_size=10,
            tail_mass=None,
        )
        with pytest.raises(ValidationError):
            d.validate()

    def test_topk_tail_mass_consistency(self):
        d = TokenDistribution(
            kind="topk_tail",
            probs=[0.5, 0.3],
            logits=[1.0, 0.5],
            chosen_index=0,
            vocab_size=10,
            tail_mass=0.2,
        )
        d.validate()

    def test_full_kind_vocab_size_matches(self):
        d = full_dist([0.5, 0.5])
        d.vocab_size = 3
        with pytest.raises(ValidationError):
            d.validate()
