"""Step-level and episode-level help classifiers.

Both share one trunk: per-token linear projection to a hidden space,
sinusoidal positional encoding, a small self-attention encoder with
padding masks, masked attention pooling with a learned query, and a
two-layer head producing a scalar logit per step.  The episode model
aggregates step logits with log-sum-exp pooling.

Everything runs in float64 so gradient checks and byte-stable
checkpoints are exact.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ValidationError
from .features import FeatureMatrix, NormStats

DTYPE = torch.float64


@dataclass
class StepClassifierConfig:
    d_h: int = 64
    n_head: int = 4
    n_layers: int = 1
    ff_head_hidden: int = 32
    ff_encoder_hidden: int = 2048
    max_tokens: int = 24
    dropout: float = 0.1

    def validate(self) -> None:
        if self.d_h < 1 or self.n_head < 1 or self.d_h % self.n_head != 0:
            raise ConfigError(
                f"d_h ({self.d_h}) must be a positive multiple of n_head "
                f"({self.n_head})"
            )
        if self.n_layers < 1:
            raise ConfigError("n_layers must be at least 1")
        if self.max_tokens < 1:
            raise ConfigError("max_tokens must be at least 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.ff_head_hidden < 1 or self.ff_encoder_hidden < 1:
            raise ConfigError("feed-forward widths must be positive")


@dataclass
class EpisodeClassifierConfig(StepClassifierConfig):
    pool_beta: float = 6.0

    def validate(self) -> None:
        super().validate()
        if self.pool_beta <= 0:
            raise ConfigError("pool_beta must be positive")
        if self.n_layers not in (1, 2):
            raise ConfigError("episode classifier supports 1 or 2 encoder layers")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_steps: int = 32
    batch_episodes: int = 8
    max_epochs: int = 50
    patience: int = 8
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    seed: int = 0
    threshold: float = 0.5
    val_fraction: float = 0.15
    pos_weight: Optional[float] = None

    def validate(self) -> None:
        if self.pos_weight is not None and self.pos_weight <= 0:
            raise ConfigError("pos_weight must be positive when set")
        positives = (
            ("learning_rate", self.learning_rate),
            ("batch_steps", self.batch_steps),
            ("batch_episodes", self.batch_episodes),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("grad_clip", self.grad_clip),
        )
        for name, value in positives:
            if value <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must be in (0, 1)")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in (0, 1)")


def sinusoidal_encoding(n_positions: int, d_model: int) -> torch.Tensor:
    """Interleaved sin/cos table, shape (n_positions, d_model)."""
    pe = torch.zeros(n_positions, d_model, dtype=DTYPE)
    pos = torch.arange(n_positions, dtype=DTYPE).unsqueeze(1)
    idx = torch.arange(0, d_model, 2, dtype=DTYPE)
    div = torch.exp(-math.log(10000.0) * idx / d_model)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)
    return pe


class EncoderLayer(nn.Module):
    """Post-norm self-attention block with explicit padding masks."""

    def __init__(self, cfg: StepClassifierConfig):
        super().__init__()
        d, h = cfg.d_h, cfg.n_head
        self.n_head = h
        self.d_head = d // h
        self.q_proj = nn.Linear(d, d, dtype=DTYPE)
        # No key bias: a constant added to every key shifts each softmax row
        # uniformly and cancels, so the parameter would be unidentifiable.
        self.k_proj = nn.Linear(d, d, bias=False, dtype=DTYPE)
        self.v_proj = nn.Linear(d, d, dtype=DTYPE)
        self.out_proj = nn.Linear(d, d, dtype=DTYPE)
        self.ff1 = nn.Linear(d, cfg.ff_encoder_hidden, dtype=DTYPE)
        self.ff2 = nn.Linear(cfg.ff_encoder_hidden, d, dtype=DTYPE)
        self.norm1 = nn.LayerNorm(d, dtype=DTYPE)
        self.norm2 = nn.LayerNorm(d, dtype=DTYPE)
        self.attn_drop = nn.Dropout(cfg.dropout)
        self.resid_drop1 = nn.Dropout(cfg.dropout)
        self.ff_drop = nn.Dropout(cfg.dropout)
        self.resid_drop2 = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        # x: (B, N, d), mask: (B, N) True where a real token sits.
        b, n, d = x.shape
        heads = (b, n, self.n_head, self.d_head)
        q = self.q_proj(x).view(heads).transpose(1, 2)
        k = self.k_proj(x).view(heads).transpose(1, 2)
        v = self.v_proj(x).view(heads).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        key_mask = mask[:, None, None, :]
        scores = scores.masked_fill(~key_mask, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        attn = self.attn_drop(attn)
        ctx = (attn @ v).transpose(1, 2).reshape(b, n, d)
        x = self.norm1(x + self.resid_drop1(self.out_proj(ctx)))
        # GELU keeps the loss smooth, which finite-difference gradient
        # verification depends on.
        ff = self.ff2(self.ff_drop(nn.functional.gelu(self.ff1(x))))
        x = self.norm2(x + self.resid_drop2(ff))
        return x


class StepEncoderNet(nn.Module):
    """Feature matrix (B, 4, N) with mask (B, N) -> step logit (B,)."""

    def __init__(self, cfg: StepClassifierConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.proj = nn.Linear(4, cfg.d_h, dtype=DTYPE)
        self.embed_drop = nn.Dropout(cfg.dropout)
        self.layers = nn.ModuleList(
            EncoderLayer(cfg) for _ in range(cfg.n_layers)
        )
        self.pool_query = nn.Parameter(torch.zeros(cfg.d_h, dtype=DTYPE))
        self.head1 = nn.Linear(cfg.d_h, cfg.ff_head_hidden, dtype=DTYPE)
        self.head2 = nn.Linear(cfg.ff_head_hidden, 1, dtype=DTYPE)
        pe = sinusoidal_encoding(cfg.max_tokens, cfg.d_h)
        self.register_buffer("pos_encoding", pe)

    def forward(self, values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if values.shape[-1] != self.cfg.max_tokens:
            raise ValidationError(
                f"feature width {values.shape[-1]} does not match model width "
                f"{self.cfg.max_tokens}"
            )
        x = self.proj(values.transpose(1, 2))
        x = x + self.pos_encoding.unsqueeze(0)
        # Padding columns are zeroed so they contribute nothing downstream
        # even before attention masking.
        x = x * mask.unsqueeze(-1).to(DTYPE)
        x = self.embed_drop(x)
        for layer in self.layers:
            x = layer(x, mask)
        scores = (x @ self.pool_query) / math.sqrt(self.cfg.d_h)
        scores = scores.masked_fill(~mask, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        pooled = (weights.unsqueeze(-1) * x).sum(dim=1)
        hidden = nn.functional.gelu(self.head1(pooled))
        return self.head2(hidden).squeeze(-1)


@dataclass
class StepClassifier:
    """Strongly supervised per-step help-trigger model."""

    config: StepClassifierConfig
    net: StepEncoderNet
    norm: Optional[NormStats] = None
    metadata: Dict[str, object] = field(default_factory=dict)
    kind: str = "step"


@dataclass
class EpisodeClassifier:
    """Weakly supervised model: same trunk, log-sum-exp pooled episodes."""

    config: EpisodeClassifierConfig
    net: StepEncoderNet
    norm: Optional[NormStats] = None
    metadata: Dict[str, object] = field(default_factory=dict)
    kind: str = "episode"


Classifier = Union[StepClassifier, EpisodeClassifier]


def _init_parameters(net: StepEncoderNet, seed: int) -> None:
    """Scaled uniform fan-in init, deterministic in the seed."""
    gen = torch.Generator().manual_seed(seed)
    for module in net.modules():
        if isinstance(module, nn.Linear):
            bound = 1.0 / math.sqrt(module.in_features)
            with torch.no_grad():
                module.weight.uniform_(-bound, bound, generator=gen)
                if module.bias is not None:
                    module.bias.uniform_(-bound, bound, generator=gen)
        elif isinstance(module, nn.LayerNorm):
            with torch.no_grad():
                module.weight.fill_(1.0)
                module.bias.fill_(0.0)
    bound = 1.0 / math.sqrt(net.cfg.d_h)
    with torch.no_grad():
        net.pool_query.uniform_(-bound, bound, generator=gen)


def init_step_classifier(cfg: StepClassifierConfig, seed: int) -> StepClassifier:
    cfg.validate()
    net = StepEncoderNet(cfg)
    _init_parameters(net, seed)
    return StepClassifier(config=cfg, net=net)


def init_episode_classifier(
    cfg: EpisodeClassifierConfig, seed: int
) -> EpisodeClassifier:
    cfg.validate()
    net = StepEncoderNet(cfg)
    _init_parameters(net, seed)
    return EpisodeClassifier(config=cfg, net=net)


def parameter_count(model: Classifier) -> int:
    return sum(p.numel() for p in model.net.parameters())


def _as_tensors(fm: FeatureMatrix) -> Tuple[torch.Tensor, torch.Tensor]:
    values = torch.from_numpy(np.ascontiguousarray(fm.values)).to(DTYPE)
    mask = torch.from_numpy(np.ascontiguousarray(fm.mask))
    return values.unsqueeze(0), mask.unsqueeze(0)


def stable_sigmoid(logit: float) -> float:
    if logit >= 0:
        return 1.0 / (1.0 + math.exp(-logit))
    z = math.exp(logit)
    return z / (1.0 + z)


def forward_step(model: Classifier, fm: FeatureMatrix) -> Tuple[float, float]:
    """Scalar step logit and help score for one (already normalized) step."""
    values, mask = _as_tensors(fm)
    model.net.eval()
    with torch.no_grad():
        logit = model.net(values, mask)[0].item()
    return logit, stable_sigmoid(logit)


def lse_pool(
    step_logits: Union[Sequence[float], torch.Tensor], beta: float
) -> Union[float, torch.Tensor]:
    """(1/beta) * ln sum exp(beta * l), max-subtracted for stability."""
    if beta <= 0:
        raise ConfigError("pooling temperature must be positive")
    is_tensor = isinstance(step_logits, torch.Tensor)
    logits = (
        step_logits
        if is_tensor
        else torch.as_tensor(list(step_logits), dtype=DTYPE)
    )
    if logits.numel() == 0:
        raise ValidationError("cannot pool an empty logit list")
    pooled = torch.logsumexp(beta * logits, dim=-1) / beta
    return pooled if is_tensor else float(pooled)


def forward_episode(
    model: EpisodeClassifier, fms: Sequence[FeatureMatrix]
) -> Tuple[List[float], float]:
    """Per-step logits plus pooled episode failure probability."""
    if not fms:
        raise ValidationError("episode has no steps")
    pairs = [_as_tensors(fm) for fm in fms]
    values = torch.cat([v for v, _ in pairs])
    mask = torch.cat([m for _, m in pairs])
    model.net.eval()
    with torch.no_grad():
        logits = model.net(values, mask)
        pooled = lse_pool(logits, model.config.pool_beta)
        yhat = torch.sigmoid(pooled).item()
    return [float(v) for v in logits], yhat


def _bce(logits: torch.Tensor, y: torch.Tensor, pos_weight: Optional[float]):
    weight = (
        None
        if pos_weight is None
        else torch.tensor(pos_weight, dtype=DTYPE)
    )
    return nn.functional.binary_cross_entropy_with_logits(
        logits, y, pos_weight=weight
    )


def step_loss(
    net: StepEncoderNet,
    values: torch.Tensor,
    mask: torch.Tensor,
    y: torch.Tensor,
    pos_weight: Optional[float] = None,
) -> torch.Tensor:
    """Mean binary cross-entropy over step labels."""
    return _bce(net(values, mask), y, pos_weight)


def episode_loss(
    net: StepEncoderNet,
    episodes: Sequence[Tuple[torch.Tensor, torch.Tensor]],
    labels: torch.Tensor,
    beta: float,
    pos_weight: Optional[float] = None,
) -> torch.Tensor:
    """Mean binary cross-entropy over pooled episode logits."""
    pooled = []
    for values, mask in episodes:
        logits = net(values, mask)
        pooled.append(lse_pool(logits, beta))
    return _bce(torch.stack(pooled), labels, pos_weight)


def grad_check(
    model: Classifier,
    batch: dict,
    eps: float = 1e-5,
    entries_per_param: int = 3,
) -> float:
    """Worst |analytic - finite difference| relative error over sampled
    entries of every parameter tensor.  Runs the net in eval mode so the
    loss is a deterministic function of the parameters."""
    net = model.net
    net.eval()

    if model.kind == "step":
        values, mask, y = batch["values"], batch["mask"], batch["y"]

        def loss_fn() -> torch.Tensor:
            return step_loss(net, values, mask, y)

    else:
        episodes, labels = batch["episodes"], batch["labels"]
        beta = model.config.pool_beta

        def loss_fn() -> torch.Tensor:
            return episode_loss(net, episodes, labels, beta)

    net.zero_grad()
    loss_fn().backward()
    analytic = {
        name: p.grad.detach().clone()
        for name, p in net.named_parameters()
    }

    worst = 0.0
    with torch.no_grad():
        for name, p in net.named_parameters():
            flat = p.view(-1)
            n = flat.numel()
            if n <= entries_per_param or entries_per_param == 1:
                picks = list(range(min(n, max(1, entries_per_param))))
            else:
                picks = sorted(
                    {
                        int(i * (n - 1) / (entries_per_param - 1))
                        for i in range(entries_per_param)
                    }
                )
            grad_flat = analytic[name].view(-1)
            for idx in picks:
                orig = flat[idx].item()
                flat[idx] = orig + eps
                up = loss_fn().item()
                flat[idx] = orig - eps
                down = loss_fn().item()
                flat[idx] = orig
                numeric = (up - down) / (2 * eps)
                g = grad_flat[idx].item()
                err = abs(g - numeric) / max(1e-12, abs(g) + abs(numeric))
                worst = max(worst, err)
    net.zero_grad()
    return worst


def config_to_dict(cfg: Union[StepClassifierConfig, EpisodeClassifierConfig]) -> dict:
    return asdict(cfg)


def config_from_dict(kind: str, data: dict) -> StepClassifierConfig:
    cls = StepClassifierConfig if kind == "step" else EpisodeClassifierConfig
    cfg = cls(**data)
    cfg.validate()
    return cfg
