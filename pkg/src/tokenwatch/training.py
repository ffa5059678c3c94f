"""Training loops for both classifiers.

Feature extraction is the expensive part of the pipeline, so raw
(unnormalized) feature matrices are computed once into a FeatureTable and
per-fold channel normalization is applied on the fly.  Normalization
statistics always come from training episodes only.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .errors import ConfigError, ValidationError
from .features import (
    DEFAULT_TOP_K,
    FeatureMatrix,
    NormStats,
    step_feature_matrix,
    token_features,
)
from .models import (
    DTYPE,
    EpisodeClassifier,
    EpisodeClassifierConfig,
    StepClassifier,
    StepClassifierConfig,
    TrainConfig,
    episode_loss,
    init_episode_classifier,
    init_step_classifier,
    step_loss,
)
from .store import EpisodeRecord


def max_token_count(episodes: Sequence[EpisodeRecord]) -> int:
    return max(len(s.tokens) for ep in episodes for s in ep.steps)


def compute_norm_stats(
    episodes: Sequence[EpisodeRecord], top_k: int = DEFAULT_TOP_K
) -> NormStats:
    """Per-channel mean and standard deviation over every real token."""
    rows = []
    for ep in episodes:
        for step in ep.steps:
            for tok in step.tokens:
                rows.append(token_features(tok, top_k).as_array())
    if not rows:
        raise ValidationError("cannot compute normalization from zero tokens")
    data = np.stack(rows)
    mean = data.mean(axis=0)
    std = data.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    return NormStats(mean=mean, std=std)


class FeatureTable:
    """Raw feature matrices for a dataset, keyed by episode id."""

    def __init__(
        self,
        episodes: Sequence[EpisodeRecord],
        max_tokens: int,
        top_k: int = DEFAULT_TOP_K,
    ):
        self.max_tokens = max_tokens
        self.top_k = top_k
        self.raw: Dict[str, List[FeatureMatrix]] = {}
        self.strong_labels: Dict[str, List[Optional[int]]] = {}
        self.weak_labels: Dict[str, int] = {}
        for ep in episodes:
            self.raw[ep.episode_id] = [
                step_feature_matrix(step, max_tokens, top_k=top_k)
                for step in ep.steps
            ]
            self.strong_labels[ep.episode_id] = [
                s.strong_label for s in ep.steps
            ]
            self.weak_labels[ep.episode_id] = ep.weak_label

    def episode_tensors(
        self, episode_id: str, norm: Optional[NormStats]
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """(T, 4, N) normalized values and (T, N) mask for one episode."""
        fms = self.raw[episode_id]
        values = np.stack([fm.values for fm in fms])
        mask = np.stack([fm.mask for fm in fms])
        if norm is not None:
            scaled = (values - norm.mean[None, :, None]) / norm.std[None, :, None]
            values = np.where(mask[:, None, :], scaled, 0.0)
        return (
            torch.from_numpy(np.ascontiguousarray(values)).to(DTYPE),
            torch.from_numpy(np.ascontiguousarray(mask)),
        )


def norm_stats_from_table(
    table: FeatureTable, episode_ids: Sequence[str]
) -> NormStats:
    """Channel statistics over the real tokens of the given episodes."""
    cols = []
    for eid in episode_ids:
        for fm in table.raw[eid]:
            cols.append(fm.values[:, fm.mask])
    if not cols:
        raise ValidationError("cannot compute normalization from zero tokens")
    data = np.concatenate(cols, axis=1)
    mean = data.mean(axis=1)
    std = data.std(axis=1)
    std = np.where(std < 1e-12, 1.0, std)
    return NormStats(mean=mean, std=std)


def step_tensors(
    table: FeatureTable,
    episode_ids: Sequence[str],
    norm: Optional[NormStats],
    require_labels: bool = True,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Stacked (S, 4, N) values, (S, N) mask, and (S,) labels."""
    all_values, all_masks, labels = [], [], []
    for eid in episode_ids:
        values, mask = table.episode_tensors(eid, norm)
        all_values.append(values)
        all_masks.append(mask)
        for idx, lab in enumerate(table.strong_labels[eid]):
            if lab is None:
                if require_labels:
                    raise ValidationError(
                        f"episode {eid!r}, step {idx}: strong_label missing"
                    )
                lab = 0
            labels.append(float(lab))
    return (
        torch.cat(all_values),
        torch.cat(all_masks),
        torch.tensor(labels, dtype=DTYPE),
    )


@dataclass
class _EarlyStop:
    patience: int
    best: float = float("inf")
    best_epoch: int = -1
    stale: int = 0

    def update(self, value: float, epoch: int) -> bool:
        """Record a validation loss; True when this is a new best."""
        if value < self.best - 1e-12:
            self.best = value
            self.best_epoch = epoch
            self.stale = 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


def _make_optimizer(net, train_cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        net.parameters(),
        lr=train_cfg.learning_rate,
        betas=(0.9, 0.999),
        eps=1e-8,
        weight_decay=train_cfg.weight_decay,
    )


def train_strong(
    train_episodes: Sequence[EpisodeRecord],
    val_episodes: Sequence[EpisodeRecord],
    cfg: StepClassifierConfig,
    train_cfg: TrainConfig,
    table: Optional[FeatureTable] = None,
) -> StepClassifier:
    """Step-level supervised training; returns the best-validation model."""
    cfg.validate()
    train_cfg.validate()
    if not train_episodes or not val_episodes:
        raise ConfigError("training and validation sets must be nonempty")
    for ep in train_episodes:
        for step in ep.steps:
            if step.strong_label is None:
                raise ValidationError(
                    f"episode {ep.episode_id!r}, step {step.step_index}: "
                    "strong_label required for strong training"
                )
    if table is None:
        table = FeatureTable(
            list(train_episodes) + list(val_episodes), cfg.max_tokens
        )
    train_ids = [ep.episode_id for ep in train_episodes]
    val_ids = [ep.episode_id for ep in val_episodes]
    norm = norm_stats_from_table(table, train_ids)
    tr_values, tr_mask, tr_y = step_tensors(table, train_ids, norm)
    va_values, va_mask, va_y = step_tensors(table, val_ids, norm)

    torch.manual_seed(train_cfg.seed)
    model = init_step_classifier(cfg, train_cfg.seed)
    net = model.net
    opt = _make_optimizer(net, train_cfg)
    stopper = _EarlyStop(train_cfg.patience)
    best_state = copy.deepcopy(net.state_dict())
    n = tr_values.shape[0]
    last_train_loss = float("nan")

    for epoch in range(train_cfg.max_epochs):
        net.train()
        order = torch.randperm(
            n, generator=torch.Generator().manual_seed(train_cfg.seed + epoch)
        )
        epoch_loss, batches = 0.0, 0
        for start in range(0, n, train_cfg.batch_steps):
            idx = order[start : start + train_cfg.batch_steps]
            opt.zero_grad()
            loss = step_loss(
                net,
                tr_values[idx],
                tr_mask[idx],
                tr_y[idx],
                train_cfg.pos_weight,
            )
            loss.backward()
            torch.nn.utils.clip_grad_norm_(net.parameters(), train_cfg.grad_clip)
            opt.step()
            epoch_loss += loss.item()
            batches += 1
        last_train_loss = epoch_loss / max(1, batches)

        net.eval()
        with torch.no_grad():
            val_loss = step_loss(
                net, va_values, va_mask, va_y, train_cfg.pos_weight
            ).item()
        if stopper.update(val_loss, epoch):
            best_state = copy.deepcopy(net.state_dict())
        if stopper.should_stop:
            break

    net.load_state_dict(best_state)
    net.eval()
    model.norm = norm
    model.metadata = {
        "seed": train_cfg.seed,
        "epochs_run": epoch + 1,
        "best_epoch": stopper.best_epoch,
        "best_val_loss": stopper.best,
        "final_train_loss": last_train_loss,
        "mode": "strong",
    }
    return model


def train_weak(
    train_episodes: Sequence[EpisodeRecord],
    val_episodes: Sequence[EpisodeRecord],
    cfg: EpisodeClassifierConfig,
    train_cfg: TrainConfig,
    table: Optional[FeatureTable] = None,
) -> EpisodeClassifier:
    """Episode-level MIL training; returns the best-validation model."""
    cfg.validate()
    train_cfg.validate()
    if not train_episodes or not val_episodes:
        raise ConfigError("training and validation sets must be nonempty")
    if table is None:
        table = FeatureTable(
            list(train_episodes) + list(val_episodes), cfg.max_tokens
        )
    train_ids = [ep.episode_id for ep in train_episodes]
    val_ids = [ep.episode_id for ep in val_episodes]
    norm = norm_stats_from_table(table, train_ids)
    tr_eps = [table.episode_tensors(eid, norm) for eid in train_ids]
    tr_y = torch.tensor(
        [float(table.weak_labels[eid]) for eid in train_ids], dtype=DTYPE
    )
    va_eps = [table.episode_tensors(eid, norm) for eid in val_ids]
    va_y = torch.tensor(
        [float(table.weak_labels[eid]) for eid in val_ids], dtype=DTYPE
    )

    torch.manual_seed(train_cfg.seed)
    model = init_episode_classifier(cfg, train_cfg.seed)
    net = model.net
    opt = _make_optimizer(net, train_cfg)
    stopper = _EarlyStop(train_cfg.patience)
    best_state = copy.deepcopy(net.state_dict())
    n = len(tr_eps)
    last_train_loss = float("nan")

    for epoch in range(train_cfg.max_epochs):
        net.train()
        order = torch.randperm(
            n, generator=torch.Generator().manual_seed(train_cfg.seed + epoch)
        )
        epoch_loss, batches = 0.0, 0
        for start in range(0, n, train_cfg.batch_episodes):
            idx = order[start : start + train_cfg.batch_episodes].tolist()
            opt.zero_grad()
            loss = episode_loss(
                net,
                [tr_eps[i] for i in idx],
                tr_y[idx],
                cfg.pool_beta,
                train_cfg.pos_weight,
            )
            loss.backward()
            torch.nn.utils.clip_grad_norm_(net.parameters(), train_cfg.grad_clip)
            opt.step()
            epoch_loss += loss.item()
            batches += 1
        last_train_loss = epoch_loss / max(1, batches)

        net.eval()
        with torch.no_grad():
            val_loss = episode_loss(
                net, va_eps, va_y, cfg.pool_beta, train_cfg.pos_weight
            ).item()
        if stopper.update(val_loss, epoch):
            best_state = copy.deepcopy(net.state_dict())
        if stopper.should_stop:
            break

    net.load_state_dict(best_state)
    net.eval()
    model.norm = norm
    model.metadata = {
        "seed": train_cfg.seed,
        "epochs_run": epoch + 1,
        "best_epoch": stopper.best_epoch,
        "best_val_loss": stopper.best,
        "final_train_loss": last_train_loss,
        "mode": "weak",
    }
    return model
