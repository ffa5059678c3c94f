"""Shared fixtures: the reference synthetic dataset is expensive enough
to generate that test modules share one copy per session."""

import pytest

from tokenwatch.store import SynthConfig, synthesize_dataset


@pytest.fixture(scope="session")
def s1_dataset():
    return synthesize_dataset(SynthConfig())


@pytest.fixture(scope="session")
def small_dataset():
    cfg = SynthConfig(
        vocab_size=8,
        top_k=4,
        episodes_total=12,
        failure_fraction=0.5,
        steps_range=(3, 6),
        tokens_range=(2, 5),
        seed=99,
    )
    return synthesize_dataset(cfg)
