"""Tests for the classifiers: architecture contracts, pooling, gradient
verification, training behavior, and checkpoint round-trips."""

import math

import numpy as np
import pytest
import torch

from tokenwatch.checkpoint import load_checkpoint, save_checkpoint
from tokenwatch.errors import ConfigError, ValidationError
from tokenwatch.features import FeatureMatrix
from tokenwatch.models import (
    EpisodeClassifierConfig,
    StepClassifierConfig,
    TrainConfig,
    forward_episode,
    forward_step,
    grad_check,
    init_episode_classifier,
    init_step_classifier,
    lse_pool,
    parameter_count,
    sinusoidal_encoding,
    stable_sigmoid,
)
from tokenwatch.store import EpisodeRecord, StepRecord, SynthConfig, synthesize_dataset
from tokenwatch.training import (
    FeatureTable,
    compute_norm_stats,
    max_token_count,
    step_tensors,
    train_strong,
    train_weak,
)

N = 24


def random_fm(rng, n_tokens, width=N):
    values = np.zeros((4, width))
    values[:, :n_tokens] = rng.standard_normal((4, n_tokens))
    mask = np.zeros(width, dtype=bool)
    mask[:n_tokens] = True
    return FeatureMatrix(values=values, mask=mask)


@pytest.fixture(scope="module")
def step_model():
    return init_step_classifier(StepClassifierConfig(), seed=11)


@pytest.fixture(scope="module")
def episode_model():
    return init_episode_classifier(
        EpisodeClassifierConfig(ff_encoder_hidden=256), seed=11
    )


class TestInit:
    def test_default_parameter_count_in_band(self, step_model):
        count = parameter_count(step_model)
        assert 2e5 <= count <= 5e5
        assert count == 283585

    def test_same_seed_identical(self):
        a = init_step_classifier(StepClassifierConfig(), seed=4)
        b = init_step_classifier(StepClassifierConfig(), seed=4)
        for pa, pb in zip(a.net.parameters(), b.net.parameters()):
            assert torch.equal(pa, pb)

    def test_different_seed_differs(self):
        a = init_step_classifier(StepClassifierConfig(), seed=4)
        b = init_step_classifier(StepClassifierConfig(), seed=5)
        assert any(
            not torch.equal(pa, pb)
            for pa, pb in zip(a.net.parameters(), b.net.parameters())
        )

    def test_divisibility_enforced(self):
        with pytest.raises(ConfigError):
            init_step_classifier(StepClassifierConfig(d_h=6, n_head=4), seed=0)

    def test_episode_layer_count_restricted(self):
        with pytest.raises(ConfigError):
            init_episode_classifier(EpisodeClassifierConfig(n_layers=3), seed=0)

    def test_invalid_dropout(self):
        with pytest.raises(ConfigError):
            init_step_classifier(StepClassifierConfig(dropout=1.0), seed=0)

    def test_train_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(learning_rate=0.0).validate()
        with pytest.raises(ConfigError):
            TrainConfig(threshold=1.0).validate()
        with pytest.raises(ConfigError):
            TrainConfig(pos_weight=-1.0).validate()


class TestPositionalEncoding:
    def test_interleave_layout(self):
        pe = sinusoidal_encoding(8, 6)
        for pos in range(8):
            for i in range(3):
                angle = pos / 10000 ** (2 * i / 6)
                assert pe[pos, 2 * i].item() == pytest.approx(
                    math.sin(angle), abs=1e-12
                )
                assert pe[pos, 2 * i + 1].item() == pytest.approx(
                    math.cos(angle), abs=1e-12
                )

    def test_position_zero(self):
        pe = sinusoidal_encoding(4, 8)
        assert torch.all(pe[0, 0::2] == 0.0)
        assert torch.all(pe[0, 1::2] == 1.0)


class TestForwardStep:
    def test_padding_columns_ignored(self, step_model):
        rng = np.random.default_rng(0)
        fm = random_fm(rng, 5)
        perturbed = FeatureMatrix(values=fm.values.copy(), mask=fm.mask.copy())
        perturbed.values[:, 5:] = 1e6
        l1, _ = forward_step(step_model, fm)
        l2, _ = forward_step(step_model, perturbed)
        assert abs(l1 - l2) <= 1e-12

    def test_score_is_sigmoid_of_logit(self, step_model):
        rng = np.random.default_rng(1)
        fm = random_fm(rng, 7)
        logit, score = forward_step(step_model, fm)
        assert score == pytest.approx(1 / (1 + math.exp(-logit)), abs=1e-15)

    def test_width_mismatch_rejected(self, step_model):
        rng = np.random.default_rng(2)
        fm = random_fm(rng, 3, width=10)
        with pytest.raises(ValidationError):
            forward_step(step_model, fm)

    def test_token_order_matters(self, step_model):
        # Positional encodings are the only thing distinguishing order, so
        # one exhibited counterexample is the contract.
        rng = np.random.default_rng(3)
        fm = random_fm(rng, 6)
        swapped = FeatureMatrix(values=fm.values.copy(), mask=fm.mask.copy())
        swapped.values[:, [0, 5]] = swapped.values[:, [5, 0]]
        l1, _ = forward_step(step_model, fm)
        l2, _ = forward_step(step_model, swapped)
        assert abs(l1 - l2) > 1e-9

    def test_deterministic(self, step_model):
        rng = np.random.default_rng(4)
        fm = random_fm(rng, 9)
        assert forward_step(step_model, fm) == forward_step(step_model, fm)


class TestLsePool:
    def test_singleton(self):
        assert lse_pool([2.0], 6.0) == pytest.approx(2.0, abs=1e-15)

    def test_two_zeros(self):
        assert lse_pool([0.0, 0.0], 6.0) == pytest.approx(
            math.log(2) / 6, abs=1e-12
        )

    def test_converges_to_max(self):
        assert lse_pool([1.0, 5.0, 3.0], 100.0) == pytest.approx(
            5.0, abs=math.log(3) / 100
        )

    def test_bounds_random(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            t = int(rng.integers(1, 30))
            logits = rng.standard_normal(t) * 5
            beta = float(rng.uniform(0.5, 20))
            pooled = lse_pool(list(logits), beta)
            assert logits.max() - 1e-12 <= pooled
            assert pooled <= logits.max() + math.log(t) / beta + 1e-12

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            lse_pool([], 6.0)

    def test_nonpositive_beta_rejected(self):
        with pytest.raises(ConfigError):
            lse_pool([1.0], 0.0)

    def test_extreme_logits_stable(self):
        assert lse_pool([1000.0, -1000.0], 6.0) == pytest.approx(1000.0)

    def test_monotone_in_logits(self):
        base = [0.2, -1.0, 0.7]
        raised = [0.2, -1.0, 1.4]
        assert lse_pool(raised, 6.0) > lse_pool(base, 6.0)


class TestForwardEpisode:
    def test_singleton_episode(self, episode_model):
        rng = np.random.default_rng(6)
        fm = random_fm(rng, 4)
        logits, yhat = forward_episode(episode_model, [fm])
        expected_logit, expected_score = forward_step(episode_model, fm)
        assert logits[0] == pytest.approx(expected_logit, abs=1e-12)
        assert yhat == pytest.approx(expected_score, abs=1e-12)

    def test_pooled_probability_bounds(self, episode_model):
        rng = np.random.default_rng(7)
        fms = [random_fm(rng, int(rng.integers(1, N))) for _ in range(6)]
        logits, yhat = forward_episode(episode_model, fms)
        beta = episode_model.config.pool_beta
        lo = stable_sigmoid(max(logits))
        hi = stable_sigmoid(max(logits) + math.log(len(logits)) / beta)
        assert lo - 1e-12 <= yhat <= hi + 1e-12

    def test_empty_episode_rejected(self, episode_model):
        with pytest.raises(ValidationError):
            forward_episode(episode_model, [])


class TestGradCheck:
    def test_strong_loss(self, step_model):
        torch.manual_seed(3)
        values = torch.randn(6, 4, N, dtype=torch.float64)
        mask = torch.zeros(6, N, dtype=torch.bool)
        for i in range(6):
            mask[i, : 3 + 2 * i] = True
        y = torch.tensor([0.0, 1.0, 0.0, 1.0, 1.0, 0.0], dtype=torch.float64)
        err = grad_check(step_model, {"values": values, "mask": mask, "y": y})
        assert err <= 1e-4

    def test_weak_loss(self, episode_model):
        torch.manual_seed(4)
        episodes = []
        for t in (2, 3, 4):
            values = torch.randn(t, 4, N, dtype=torch.float64)
            mask = torch.zeros(t, N, dtype=torch.bool)
            mask[:, :6] = True
            episodes.append((values, mask))
        labels = torch.tensor([1.0, 0.0, 1.0], dtype=torch.float64)
        err = grad_check(episode_model, {"episodes": episodes, "labels": labels})
        assert err <= 1e-4

    def test_reports_nonnegative(self, step_model):
        torch.manual_seed(5)
        values = torch.randn(2, 4, N, dtype=torch.float64)
        mask = torch.ones(2, N, dtype=torch.bool)
        y = torch.tensor([1.0, 0.0], dtype=torch.float64)
        err = grad_check(
            step_model,
            {"values": values, "mask": mask, "y": y},
            entries_per_param=1,
        )
        assert err >= 0.0


def separable_dataset(n_episodes=30, seed=0):
    """Synthetic episodes from the stock generator (mild regime overlap)."""
    return synthesize_dataset(
        SynthConfig(
            vocab_size=16,
            top_k=8,
            episodes_total=n_episodes,
            failure_fraction=0.5,
            steps_range=(4, 8),
            tokens_range=(3, 6),
            seed=seed,
        )
    )


def entropy_threshold_dataset(n_episodes=24, seed=0):
    """Episodes labeled by construction: y_t = 1 iff the step's mean token
    entropy exceeds a fixed cut, so the channels separate the classes
    analytically."""
    from tokenwatch.features import TokenDistribution, token_entropy
    from tokenwatch.store import validate_episode

    rng = np.random.default_rng(seed)
    episodes = []
    for e in range(n_episodes):
        steps = []
        for t in range(6):
            sharp = math.exp(rng.uniform(math.log(0.8), math.log(12.0)))
            tokens = []
            for _ in range(4):
                g = rng.standard_normal(16)
                logits = sharp * g
                z = logits - logits.max()
                probs = np.exp(z)
                probs /= probs.sum()
                tokens.append(
                    TokenDistribution(
                        kind="full",
                        probs=probs,
                        logits=logits,
                        chosen_index=int(np.argmax(probs)),
                        vocab_size=16,
                    )
                )
            mean_ent = float(np.mean([token_entropy(tok) for tok in tokens]))
            steps.append(
                StepRecord(
                    step_index=t,
                    tokens=tokens,
                    strong_label=1 if mean_ent > 1.2 else 0,
                )
            )
        ep = EpisodeRecord(
            episode_id=f"sep-{e:03d}",
            steps=steps,
            weak_label=max(s.strong_label for s in steps),
            source="synthetic",
        )
        validate_episode(ep)
        episodes.append(ep)
    return episodes


class TestTraining:
    def test_strong_fits_separable_data(self):
        eps = entropy_threshold_dataset(40, seed=2)
        train, val = eps[:32], eps[32:]
        n = max_token_count(eps)
        cfg = StepClassifierConfig(
            ff_encoder_hidden=64, max_tokens=n, dropout=0.0
        )
        tcfg = TrainConfig(seed=7, max_epochs=50)
        model = train_strong(train, val, cfg, tcfg)
        table = FeatureTable(train, n)
        ids = [ep.episode_id for ep in train]
        values, mask, y = step_tensors(table, ids, model.norm)
        model.net.eval()
        with torch.no_grad():
            pred = (torch.sigmoid(model.net(values, mask)) >= 0.5).to(y.dtype)
        accuracy = (pred == y).to(torch.float64).mean().item()
        assert accuracy >= 0.99

    def test_strong_memorizes_single_example(self):
        import dataclasses

        eps = separable_dataset(6, seed=3)
        one = eps[0]
        copies = [
            dataclasses.replace(one, episode_id=f"copy-{i:03d}")
            for i in range(32)
        ]
        cfg = StepClassifierConfig(
            ff_encoder_hidden=64,
            max_tokens=max_token_count(eps),
            dropout=0.0,
        )
        tcfg = TrainConfig(seed=1, max_epochs=50, patience=50)
        model = train_strong(copies, copies[:1], cfg, tcfg)
        assert model.metadata["final_train_loss"] < 1e-3

    def test_strong_determinism(self):
        eps = separable_dataset(16, seed=4)
        train, val = eps[:12], eps[12:]
        n = max_token_count(eps)
        cfg = StepClassifierConfig(ff_encoder_hidden=64, max_tokens=n)
        tcfg = TrainConfig(seed=9, max_epochs=3, patience=3)
        a = train_strong(train, val, cfg, tcfg)
        b = train_strong(train, val, cfg, tcfg)
        for pa, pb in zip(a.net.parameters(), b.net.parameters()):
            assert torch.equal(pa, pb)

    def test_strong_requires_labels(self):
        eps = separable_dataset(8, seed=5)
        eps[0].steps[1].strong_label = None
        cfg = StepClassifierConfig(
            ff_encoder_hidden=64, max_tokens=max_token_count(eps)
        )
        with pytest.raises(ValidationError, match="step 1"):
            train_strong(eps[:4], eps[4:], cfg, TrainConfig(seed=0))

    def test_weak_all_success_converges_low(self):
        eps = synthesize_dataset(
            SynthConfig(
                vocab_size=16,
                top_k=8,
                episodes_total=16,
                failure_fraction=0.0,
                steps_range=(3, 5),
                tokens_range=(3, 5),
                seed=6,
            )
        )
        n = max_token_count(eps)
        cfg = EpisodeClassifierConfig(
            ff_encoder_hidden=64, max_tokens=n, dropout=0.0
        )
        tcfg = TrainConfig(seed=2, max_epochs=20, patience=20)
        model = train_weak(eps[:12], eps[12:], cfg, tcfg)
        for ep in eps[12:]:
            table = FeatureTable([ep], n)
            values, mask = table.episode_tensors(ep.episode_id, model.norm)
            model.net.eval()
            with torch.no_grad():
                logits = model.net(values, mask)
                pooled = lse_pool(logits, cfg.pool_beta)
                yhat = torch.sigmoid(pooled).item()
            assert yhat < 0.5

    def test_weak_determinism(self):
        eps = separable_dataset(16, seed=7)
        train, val = eps[:12], eps[12:]
        n = max_token_count(eps)
        cfg = EpisodeClassifierConfig(ff_encoder_hidden=64, max_tokens=n)
        tcfg = TrainConfig(seed=5, max_epochs=3, patience=3)
        a = train_weak(train, val, cfg, tcfg)
        b = train_weak(train, val, cfg, tcfg)
        for pa, pb in zip(a.net.parameters(), b.net.parameters()):
            assert torch.equal(pa, pb)

    def test_norm_stats_from_training_only(self):
        eps = separable_dataset(12, seed=8)
        train, val = eps[:8], eps[8:]
        n = max_token_count(eps)
        cfg = StepClassifierConfig(ff_encoder_hidden=64, max_tokens=n)
        tcfg = TrainConfig(seed=3, max_epochs=1, patience=1)
        model = train_strong(train, val, cfg, tcfg)
        expected = compute_norm_stats(train)
        assert model.norm.mean == pytest.approx(expected.mean, abs=1e-12)
        assert model.norm.std == pytest.approx(expected.std, abs=1e-12)


class TestCheckpoint:
    def test_round_trip_identical_outputs(self, step_model, tmp_path):
        rng = np.random.default_rng(10)
        fm = random_fm(rng, 8)
        path = tmp_path / "model.twc"
        step_model.metadata = {"seed": 11, "mode": "strong"}
        save_checkpoint(step_model, path)
        loaded = load_checkpoint(path)
        assert loaded.kind == "step"
        assert forward_step(loaded, fm) == forward_step(step_model, fm)

    def test_save_load_save_byte_stable(self, episode_model, tmp_path):
        p1 = tmp_path / "a.twc"
        p2 = tmp_path / "b.twc"
        save_checkpoint(episode_model, p1)
        save_checkpoint(load_checkpoint(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_norm_stats_survive(self, tmp_path):
        model = init_step_classifier(
            StepClassifierConfig(ff_encoder_hidden=64), seed=2
        )
        from tokenwatch.features import NormStats

        model.norm = NormStats(
            mean=np.array([0.1, 0.2, 0.3, 0.4]),
            std=np.array([1.0, 2.0, 3.0, 4.0]),
        )
        path = tmp_path / "n.twc"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert np.array_equal(loaded.norm.mean, model.norm.mean)
        assert np.array_equal(loaded.norm.std, model.norm.std)

    def test_truncated_file_rejected(self, step_model, tmp_path):
        path = tmp_path / "t.twc"
        save_checkpoint(step_model, path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 100])
        with pytest.raises(ValidationError, match="payload"):
            load_checkpoint(path)

    def test_version_mismatch_rejected(self, step_model, tmp_path):
        import json
        import struct

        path = tmp_path / "v.twc"
        save_checkpoint(step_model, path)
        raw = path.read_bytes()
        (blob_len,) = struct.unpack_from("<Q", raw)
        manifest = json.loads(raw[8 : 8 + blob_len])
        manifest["format_version"] = 99
        blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
        path.write_bytes(struct.pack("<Q", len(blob)) + blob + raw[8 + blob_len :])
        with pytest.raises(ValidationError, match="version"):
            load_checkpoint(path)

    def test_episode_kind_round_trips(self, episode_model, tmp_path):
        path = tmp_path / "e.twc"
        save_checkpoint(episode_model, path)
        loaded = load_checkpoint(path)
        assert loaded.kind == "episode"
        assert loaded.config.pool_beta == episode_model.config.pool_beta
