"""Per-client mixture-of-experts classifier with input-dependent attention.

Each client holds K experts (backbone + two-layer head) and K attention
networks that score a shared feature vector; the prediction is the
attention-weighted convex combination of the experts' class probabilities.
Expert parameters are shared with the federation, attention parameters stay
local.
"""

from __future__ import annotations

import copy
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import LossConfig, ModelConfig, OptimConfig
from .data import ClientDataset, augment_batch
from .seeding import derive_seed, numpy_rng

LOG_FLOOR = 1e-12


class NumericError(RuntimeError):
    def __init__(self, sample_index: int):
        super().__init__(f"non-finite loss at sample index {sample_index}")
        self.sample_index = sample_index


def _norm(channels: int) -> nn.Module:
    groups = next(g for g in (8, 4, 2, 1) if channels % g == 0)
    return nn.GroupNorm(groups, channels)


class ResidualBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.n1 = _norm(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.n2 = _norm(c_out)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False)

    def forward(self, x):
        out = F.relu(self.n1(self.conv1(x)))
        out = self.n2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


class ConvBackbone(nn.Module):
    """Residual convolutional feature extractor producing a d-dim vector."""

    def __init__(self, cfg: ModelConfig, channels: int):
        super().__init__()
        if cfg.backbone == "resnet18":
            widths, blocks_per_stage = [64, 128, 256, 512], [2, 2, 2, 2]
        else:
            n = max(1, cfg.backbone_blocks)
            w = cfg.backbone_width
            widths = [min(w * 2**i, 8 * w) for i in range(n)]
            blocks_per_stage = [1] * n
        self.stem = nn.Sequential(
            nn.Conv2d(channels, widths[0], 3, padding=1, bias=False),
            _norm(widths[0]), nn.ReLU())
        stages = []
        c_in = widths[0]
        for i, (width, reps) in enumerate(zip(widths, blocks_per_stage)):
            for j in range(reps):
                stride = 2 if (i > 0 and j == 0) else 1
                stages.append(ResidualBlock(c_in, width, stride))
                c_in = width
        self.stages = nn.Sequential(*stages)
        # per-sample norm after pooling: group-normalized maps pool to nearly
        # image-independent vectors otherwise, which stalls training
        self.pool_norm = nn.LayerNorm(c_in)
        self.proj = nn.Linear(c_in, cfg.feature_dim)

    def forward(self, x):
        h = self.stages(self.stem(x))
        h = F.adaptive_avg_pool2d(h, 1).flatten(1)
        return self.proj(self.pool_norm(h))


class ExpertHead(nn.Module):
    """Two-layer perceptron with ReLU mapping features to class logits."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.fc1 = nn.Linear(cfg.feature_dim, cfg.head_hidden)
        self.fc2 = nn.Linear(cfg.head_hidden, cfg.num_classes)

    def forward(self, feats):
        return self.fc2(F.relu(self.fc1(feats)))


class Expert(nn.Module):
    def __init__(self, cfg: ModelConfig, channels: int):
        super().__init__()
        self.backbone = ConvBackbone(cfg, channels)
        self.head = ExpertHead(cfg)

    def forward(self, x):
        return self.head(self.backbone(x))


class AttentionNet(nn.Module):
    """Two-layer perceptron scoring the shared features with one scalar logit."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.fc1 = nn.Linear(cfg.feature_dim, cfg.attention_hidden)
        self.fc2 = nn.Linear(cfg.attention_hidden, 1)

    def forward(self, feats):
        return self.fc2(F.relu(self.fc1(feats)))


class ClientModel(nn.Module):
    """K experts plus K attention networks over a shared feature extractor."""

    def __init__(self, cfg: ModelConfig, channels: int = 3, client_id: int = -1):
        super().__init__()
        if cfg.K < 1:
            raise ValueError(f"expert count must be >= 1, got {cfg.K}")
        if cfg.feature_dim < 1:
            raise ValueError(f"feature_dim must be >= 1, got {cfg.feature_dim}")
        self.cfg = cfg
        self.client_id = client_id
        self.experts = nn.ModuleList(Expert(cfg, channels) for _ in range(cfg.K))
        self.attention = nn.ModuleList(AttentionNet(cfg) for _ in range(cfg.K))
        self.shared_backbone = (ConvBackbone(cfg, channels)
                                if cfg.shared_features == "dedicated" else None)

    @property
    def K(self) -> int:
        return self.cfg.K

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Shared representation feeding the attention networks."""
        if self.shared_backbone is not None:
            return self.shared_backbone(x)
        return self.experts[0].backbone(x)

    def attention_weights(self, feats: torch.Tensor) -> torch.Tensor:
        if feats.shape[-1] != self.cfg.feature_dim:
            raise ValueError(
                f"feature dim {feats.shape[-1]} != configured {self.cfg.feature_dim}")
        logits = torch.cat([net(feats) for net in self.attention], dim=-1)
        return F.softmax(logits, dim=-1)

    def forward(self, x: torch.Tensor):
        """Return (mixture probabilities, attention weights, per-expert probabilities)."""
        feats = self.features(x)
        alpha = self.attention_weights(feats)
        expert_probs = torch.stack(
            [F.softmax(expert(x), dim=-1) for expert in self.experts], dim=1)
        mixed = (alpha.unsqueeze(-1) * expert_probs).sum(dim=1)
        return mixed, alpha, expert_probs

    def attention_l2(self) -> torch.Tensor:
        """Sum over experts of the squared l2 norm of attention parameters."""
        total = None
        for net in self.attention:
            for p in net.parameters():
                sq = (p**2).sum()
                total = sq if total is None else total + sq
        return total


def entropy(alpha: torch.Tensor) -> torch.Tensor:
    """Shannon entropy of attention weights, with 0*log0 = 0."""
    plogp = torch.where(alpha > 0, alpha * torch.log(alpha.clamp_min(LOG_FLOOR)),
                        torch.zeros_like(alpha))
    return -plogp.sum(dim=-1)


def init_client_model(cfg: ModelConfig, rng_seed: int, channels: int = 3,
                      client_id: int = -1) -> ClientModel:
    """Deterministically initialized client model; all experts independent."""
    torch.manual_seed(derive_seed(rng_seed, "init", client_id))
    return ClientModel(cfg, channels=channels, client_id=client_id)


def client_loss(model: ClientModel, images: torch.Tensor, labels: torch.Tensor,
                loss_cfg: LossConfig, reduction: str = "sum") -> torch.Tensor:
    """Cross-entropy on the mixture output plus attention regularizers.

    Per sample: CE(mixture, y) + beta * sum_k ||phi_k||^2 + gamma * H(alpha).
    ``reduction`` "sum" accumulates over the batch, "mean" divides by it.
    """
    if len(images) == 0:
        raise ValueError("empty batch")
    mixed, alpha, _ = model(images)
    picked = mixed.gather(1, labels.view(-1, 1)).squeeze(1)
    ce = -torch.log(picked.clamp_min(LOG_FLOOR))
    per_sample = ce + loss_cfg.gamma * entropy(alpha)
    if not torch.isfinite(per_sample).all():
        bad = int((~torch.isfinite(per_sample)).nonzero()[0])
        raise NumericError(bad)
    reg = model.attention_l2().to(per_sample.dtype)
    total = per_sample.sum() + loss_cfg.beta * reg * len(images)
    if reduction == "mean":
        return total / len(images)
    return total


def local_update(model: ClientModel, client_data: ClientDataset, epochs: int,
                 optim_cfg: OptimConfig, loss_cfg: LossConfig, seed: int,
                 defense_hook: Callable[[torch.Tensor], torch.Tensor] | None = None,
                 augment_data: bool = False) -> ClientModel:
    """Jointly train expert and attention parameters with momentum SGD.

    With a ``defense_hook``, each batch is passed through it before the
    gradient step (the hook purifies samples it flags). ``epochs=0`` returns
    the model unchanged.
    """
    if client_data.n_i == 0:
        raise ValueError("empty client dataset")
    if epochs == 0:
        return model
    opt = torch.optim.SGD(model.parameters(), lr=optim_cfg.lr,
                          momentum=optim_cfg.momentum)
    rng = numpy_rng(seed, "local_update", client_data.client_id)
    model.train()
    for _ in range(epochs):
        for images, labels in client_data.samples.batches(optim_cfg.batch_size, rng):
            if augment_data:
                images = augment_batch(images, rng)
            if defense_hook is not None:
                with torch.no_grad():
                    images = defense_hook(images)
            opt.zero_grad()
            loss = client_loss(model, images, labels, loss_cfg, reduction="mean")
            loss.backward()
            if optim_cfg.clip_norm > 0:
                nn.utils.clip_grad_norm_(model.parameters(), optim_cfg.clip_norm)
            opt.step()
    model.eval()
    return model


def clean_accuracy(model, dataset, batch_size: int = 64) -> float:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    correct = 0
    with torch.no_grad():
        for images, labels in dataset.batches(batch_size):
            out = model(images)
            probs = out[0] if isinstance(out, tuple) else out
            correct += int((probs.argmax(dim=1) == labels).sum())
    return correct / len(dataset)


def expert_state_dicts(model: ClientModel) -> list[dict]:
    return [copy.deepcopy(e.state_dict()) for e in model.experts]


def load_expert_state_dicts(model: ClientModel, states: list[dict]) -> None:
    for expert, state in zip(model.experts, states):
        expert.load_state_dict(state)
