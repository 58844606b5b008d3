"""Masked-autoencoder detector: reconstruction scoring and threshold calibration.

A small ViT-style autoencoder is trained on benign images only. The encoder
sees only visible patches; the decoder reconstructs every patch from the
encoded visibles plus mask tokens. At inference the mean per-patch
reconstruction error (averaged over a few deterministic mask draws) is the
detection score; scores above a quantile-calibrated threshold are flagged.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .config import MAEConfig
from .seeding import derive_seed, numpy_rng


def patchify(x: torch.Tensor, p: int) -> torch.Tensor:
    """Split [*,C,H,W] into non-overlapping patch vectors [*,P,p*p*C] in
    row-major grid order; exact inverse of :func:`unpatchify`."""
    *lead, c, h, w = x.shape
    if h % p or w % p:
        raise ValueError(f"image size {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    out = x.reshape(-1, c, gh, p, gw, p)
    out = out.permute(0, 2, 4, 1, 3, 5)  # [B, gh, gw, c, p, p]
    return out.reshape(*lead, gh * gw, c * p * p)


def unpatchify(patches: torch.Tensor, p: int, channels: int, height: int,
               width: int) -> torch.Tensor:
    *lead, num, dim = patches.shape
    gh, gw = height // p, width // p
    if num != gh * gw or dim != channels * p * p:
        raise ValueError("patch grid does not match target image shape")
    x = patches.reshape(-1, gh, gw, channels, p, p)
    x = x.permute(0, 3, 1, 4, 2, 5)  # [B, c, gh, p, gw, p]
    return x.reshape(*lead, channels, height, width)


def num_patches(height: int, width: int, p: int) -> int:
    return (height * width) // (p * p)


def sample_mask(P: int, ratio: float, rng: np.random.Generator) -> torch.Tensor:
    """Boolean mask over P patches with exactly ceil(ratio*P) True (masked)."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must be in (0,1), got {ratio}")
    n_masked = math.ceil(ratio * P)
    mask = torch.zeros(P, dtype=torch.bool)
    mask[rng.choice(P, size=n_masked, replace=False)] = True
    return mask


def sample_masks(n: int, P: int, ratio: float, rng: np.random.Generator) -> torch.Tensor:
    return torch.stack([sample_mask(P, ratio, rng) for _ in range(n)])


def _position_encoding(P: int, dim: int) -> torch.Tensor:
    """Fixed sinusoidal encoding over patch index, shared by encoder/decoder."""
    pos = torch.arange(P, dtype=torch.float32).unsqueeze(1)
    idx = torch.arange(dim, dtype=torch.float32)
    angle = pos / torch.pow(10000.0, (2.0 * (idx // 2)) / dim)
    enc = torch.zeros(P, dim)
    enc[:, 0::2] = torch.sin(angle[:, 0::2])
    enc[:, 1::2] = torch.cos(angle[:, 1::2])
    return enc


def _block(dim: int, heads: int) -> nn.TransformerEncoderLayer:
    return nn.TransformerEncoderLayer(dim, heads, dim_feedforward=4 * dim,
                                      dropout=0.0, activation="gelu",
                                      batch_first=True, norm_first=True)


class MAEModel(nn.Module):
    """Patch embedding, visible-patch encoder, full-sequence decoder."""

    def __init__(self, cfg: MAEConfig, image_size: int, channels: int):
        super().__init__()
        self.cfg = cfg
        self.image_size = image_size
        self.channels = channels
        self.patch_dim = cfg.patch_size**2 * channels
        self.P = num_patches(image_size, image_size, cfg.patch_size)
        self.embed = nn.Linear(self.patch_dim, cfg.dim)
        self.encoder = nn.ModuleList(_block(cfg.dim, cfg.heads)
                                     for _ in range(cfg.depth))
        self.decoder = nn.ModuleList(_block(cfg.dim, cfg.heads)
                                     for _ in range(cfg.decoder_depth))
        self.mask_token = nn.Parameter(torch.zeros(1, 1, cfg.dim))
        nn.init.normal_(self.mask_token, std=0.02)
        self.head = nn.Linear(cfg.dim, self.patch_dim)
        self.register_buffer("pos", _position_encoding(self.P, cfg.dim))

    def forward(self, x: torch.Tensor, mask: torch.Tensor,
                paste_visible: bool = False) -> torch.Tensor:
        """Reconstruct ``x`` given per-sample boolean patch masks [B,P]
        (True = masked). The encoder never receives masked-patch content.

        With ``paste_visible`` the visible patches of the output are copied
        from the input (the autoencoder knows them exactly); decoder outputs
        fill only the masked positions. Training supervises masked positions
        only, so scoring uses the pasted composition.
        """
        if mask.shape[-1] != self.P:
            raise ValueError(f"mask covers {mask.shape[-1]} patches, expected {self.P}")
        if mask.ndim == 1:
            mask = mask.unsqueeze(0).expand(x.shape[0], -1)
        patches = patchify(x, self.cfg.patch_size)
        n_masked = int(mask[0].sum())
        if not bool((mask.sum(dim=1) == n_masked).all()):
            raise ValueError("all masks in a batch must mask the same patch count")
        order = torch.argsort(mask.to(torch.uint8), dim=1, stable=True)
        visible_idx = order[:, :self.P - n_masked]
        visible = patches.gather(1, visible_idx.unsqueeze(-1).expand(-1, -1, self.patch_dim))
        tokens = self.embed(visible) + self.pos[visible_idx]
        for layer in self.encoder:
            tokens = layer(tokens)
        full = self.mask_token.expand(x.shape[0], self.P, -1).clone()
        full = full.scatter(1, visible_idx.unsqueeze(-1).expand(-1, -1, self.cfg.dim),
                            tokens)
        full = full + self.pos
        for layer in self.decoder:
            full = layer(full)
        recon = self.head(full)
        if paste_visible:
            recon = torch.where(mask.unsqueeze(-1), recon, patches)
        return unpatchify(recon, self.cfg.patch_size, self.channels,
                          self.image_size, self.image_size)


def mae_loss(x: torch.Tensor, x_hat: torch.Tensor, mask: torch.Tensor,
             patch_size: int) -> torch.Tensor:
    """Mean over masked patches of the per-patch total squared error."""
    err = ((patchify(x, patch_size) - patchify(x_hat, patch_size)) ** 2).sum(dim=-1)
    if mask.ndim == 1:
        mask = mask.unsqueeze(0).expand(err.shape[0], -1)
    count = mask.sum()
    if int(count) == 0:
        raise ValueError("empty mask set: no masked patches to score")
    return (err * mask).sum() / count


def train_mae(mae: MAEModel, dataset, epochs: int, lr: float, batch_size: int,
              seed: int, log=None, lr_schedule: str = "cosine") -> list[float]:
    """Train on benign samples only; returns the per-epoch mean loss history."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if epochs == 0:
        return []
    opt = torch.optim.Adam(mae.parameters(), lr=lr)
    scheduler = None
    if lr_schedule == "cosine":
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=epochs)
    rng = numpy_rng(seed, "mae", "train")
    history = []
    mae.train()
    for epoch in range(epochs):
        total, batches = 0.0, 0
        for images, _ in dataset.batches(batch_size, rng):
            masks = sample_masks(len(images), mae.P, mae.cfg.mask_ratio, rng)
            opt.zero_grad()
            loss = mae_loss(images, mae(images, masks), masks, mae.cfg.patch_size)
            loss.backward()
            opt.step()
            total += float(loss.detach())
            batches += 1
        if scheduler is not None:
            scheduler.step()
        history.append(total / batches)
        if log is not None:
            log(f"mae epoch {epoch + 1}/{epochs}: loss {history[-1]:.6f}")
    mae.eval()
    return history


def _all_patch_error(mae: MAEModel, images: torch.Tensor,
                     masks: torch.Tensor) -> torch.Tensor:
    """Per-sample mean over all P patches of the per-patch squared error.

    Visible patches are reproduced exactly (pasted), so the all-patch mean
    equals the masked-patch error diluted by the masking ratio.
    """
    with torch.no_grad():
        recon = mae(images, masks, paste_visible=True)
    err = ((patchify(images, mae.cfg.patch_size)
            - patchify(recon, mae.cfg.patch_size)) ** 2).sum(dim=-1)
    return err.mean(dim=-1)


def detection_scores(mae: MAEModel, images: torch.Tensor, n_draws: int, seed: int,
                     sample_ids=None, ratio: float | None = None,
                     masked: bool = True) -> np.ndarray:
    """Detection score per image: all-patch reconstruction error averaged over
    ``n_draws`` mask draws, each deterministic in (seed, sample_id, draw).

    With ``masked=False`` a single unmasked pass scores the plain
    reconstruction instead (comparison mode).
    """
    mae.eval()
    n = images.shape[0]
    ids = list(range(n)) if sample_ids is None else list(sample_ids)
    if not masked:
        masks = torch.zeros(n, mae.P, dtype=torch.bool)
        with torch.no_grad():
            recon = mae(images, masks)  # raw decoder output, nothing masked
        err = ((patchify(images, mae.cfg.patch_size)
                - patchify(recon, mae.cfg.patch_size)) ** 2).sum(dim=-1)
        return err.mean(dim=-1).numpy()
    ratio = mae.cfg.mask_ratio if ratio is None else ratio
    total = np.zeros(n, dtype=np.float64)
    for draw in range(n_draws):
        masks = torch.stack([
            sample_mask(mae.P, ratio, numpy_rng(seed, "detect", sid, draw))
            for sid in ids])
        total += _all_patch_error(mae, images, masks).numpy()
    return total / n_draws


def detection_score(mae: MAEModel, image: torch.Tensor, n_draws: int, seed: int,
                    sample_id=0, masked: bool = True) -> float:
    return float(detection_scores(mae, image.unsqueeze(0), n_draws, seed,
                                  [sample_id], masked=masked)[0])


@dataclass
class DetectorCalibration:
    """Quantile-calibrated flagging threshold over clean validation scores."""

    tau: float
    kappa: float
    scores: np.ndarray  # sorted calibration scores

    def flag(self, s: float) -> bool:
        return s > self.tau

    def tail(self) -> np.ndarray:
        return self.scores[self.scores > self.tau]

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({
            "tau": self.tau, "kappa": self.kappa,
            "scores": [float(s) for s in self.scores]}))

    @classmethod
    def from_json(cls, path: str | Path) -> "DetectorCalibration":
        data = json.loads(Path(path).read_text())
        return cls(tau=float(data["tau"]), kappa=float(data["kappa"]),
                   scores=np.asarray(data["scores"], dtype=np.float64))


def calibrate_threshold(clean_scores, kappa: float) -> DetectorCalibration:
    """Set the threshold at the (1-kappa) quantile of clean validation scores,
    so a kappa fraction of calibration samples sits strictly above it."""
    scores = np.sort(np.asarray(clean_scores, dtype=np.float64))
    if len(scores) < 20:
        raise ValueError(f"need at least 20 calibration scores, got {len(scores)}")
    if not 0.0 < kappa < 1.0:
        raise ValueError(f"kappa must be in (0,1), got {kappa}")
    tau = float(np.quantile(scores, 1.0 - kappa, method="linear"))
    return DetectorCalibration(tau=tau, kappa=kappa, scores=scores)
