"""Denoising diffusion purifier with adaptive purification depth.

A small U-Net noise predictor is trained on benign images with the standard
noise-matching objective under a linear variance schedule. At inference a
flagged input is forward-noised to an adaptively chosen timestep and then
denoised back step by step, which suppresses off-manifold perturbations
while preserving the image's coarse content.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import DiffusionConfig, PurifyConfig
from .detector import DetectorCalibration
from .seeding import numpy_rng, torch_generator


@dataclass
class NoiseSchedule:
    """Linear beta schedule with float64-accumulated alpha-bar products.

    Arrays are indexed by timestep t in 1..T; index 0 holds the conventions
    beta_0 = 0 and alpha_bar_0 = 1.
    """

    T: int
    betas: np.ndarray       # [T+1] float64
    alphas: np.ndarray      # [T+1] float64, alpha_t = 1 - beta_t
    alpha_bars: np.ndarray  # [T+1] float64, cumulative product

    def sigma2(self, t: int, mode: str = "beta") -> float:
        if mode == "beta":
            return float(self.betas[t])
        if mode == "posterior":
            return float(self.betas[t] * (1.0 - self.alpha_bars[t - 1])
                         / (1.0 - self.alpha_bars[t]))
        raise ValueError(f"unknown sigma mode: {mode}")


def build_schedule(T: int, beta1: float, betaT: float) -> NoiseSchedule:
    if not (0.0 < beta1 < betaT < 1.0):
        raise ValueError(f"need 0 < beta1 < betaT < 1, got {beta1}, {betaT}")
    if T < 2:
        raise ValueError(f"need T >= 2, got {T}")
    t = np.arange(T + 1, dtype=np.float64)
    betas = beta1 + (t - 1.0) / (T - 1.0) * (betaT - beta1)
    betas[0] = 0.0
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def sincos_time(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal timestep encoding: even components i carry
    sin(t / 10000^(2i/d)), odd components cos(t / 10000^((2i-1)/d))."""
    t = t.to(torch.float64).reshape(-1, 1)
    i = torch.arange(dim, dtype=torch.float64)
    exponent = torch.where(i % 2 == 0, 2.0 * i / dim, (2.0 * i - 1.0) / dim)
    angle = t / torch.pow(torch.tensor(10000.0, dtype=torch.float64), exponent)
    enc = torch.where(i % 2 == 0, torch.sin(angle), torch.cos(angle))
    return enc


class TimeEmbedding(nn.Module):
    """Sinusoidal encoding followed by a linear map, SiLU, and a perceptron."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.lin = nn.Linear(dim, dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        enc = sincos_time(t, self.dim).to(self.lin.weight.dtype)
        return self.mlp(F.silu(self.lin(enc)))


class DoubleConv(nn.Module):
    """Two conv / group-norm / SiLU stages with the time embedding injected
    as a per-channel shift at each normalization site."""

    def __init__(self, c_in: int, c_out: int, time_dim: int):
        super().__init__()
        groups = next(g for g in (8, 4, 2, 1) if c_out % g == 0)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.n1 = nn.GroupNorm(groups, c_out)
        self.t1 = nn.Linear(time_dim, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.n2 = nn.GroupNorm(groups, c_out)
        self.t2 = nn.Linear(time_dim, c_out)

    def forward(self, x, emb):
        h = F.silu(self.n1(self.conv1(x)) + self.t1(emb)[:, :, None, None])
        return F.silu(self.n2(self.conv2(h)) + self.t2(emb)[:, :, None, None])


class PurifierUNet(nn.Module):
    """Noise-prediction network: downsampling and upsampling double-conv
    stages joined by additive 1x1-aligned skips; output shape equals input
    shape. ``cfg.depth`` counts the x2 down (and up) stages."""

    def __init__(self, cfg: DiffusionConfig, channels: int = 3):
        super().__init__()
        depth, base = cfg.depth, cfg.base_channels
        time_dim = base * 2
        self.time_embed = TimeEmbedding(time_dim)
        widths = [min(base * 2**i, 8 * base) for i in range(depth + 1)]
        self.stem = DoubleConv(channels, widths[0], time_dim)
        self.down = nn.ModuleList(
            DoubleConv(widths[i], widths[i + 1], time_dim) for i in range(depth))
        self.bottleneck = DoubleConv(widths[depth], widths[depth], time_dim)
        self.up_align = nn.ModuleList(
            nn.Conv2d(widths[i + 1], widths[i], 1) for i in reversed(range(depth)))
        self.up = nn.ModuleList(
            DoubleConv(widths[i], widths[i], time_dim) for i in reversed(range(depth)))
        self.head = nn.Conv2d(widths[0], channels, 1)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        emb = self.time_embed(t)
        h = self.stem(x, emb)
        skips = []
        for block in self.down:
            skips.append(h)
            h = block(F.avg_pool2d(h, 2), emb)
        h = self.bottleneck(h, emb)
        for align, block in zip(self.up_align, self.up):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = align(h) + skips.pop()
            h = block(h, emb)
        return self.head(h)


def q_sample(x0: torch.Tensor, t: int | torch.Tensor, eps_noise: torch.Tensor,
             schedule: NoiseSchedule) -> torch.Tensor:
    """Forward noising: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    t_arr = np.asarray(t if not isinstance(t, torch.Tensor) else t.numpy())
    if np.any(t_arr < 0) or np.any(t_arr > schedule.T):
        raise ValueError(f"timestep out of range 0..{schedule.T}: {t_arr}")
    abar = torch.as_tensor(schedule.alpha_bars[t_arr], dtype=x0.dtype)
    while abar.ndim < x0.ndim:
        abar = abar.unsqueeze(-1)
    return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * eps_noise


def diffusion_loss(model: nn.Module, x0: torch.Tensor, t: torch.Tensor,
                   eps_noise: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Noise-matching objective: mean squared error between the drawn noise
    and the model's prediction at the noised input."""
    x_t = q_sample(x0, t, eps_noise, schedule)
    return ((eps_noise - model(x_t, t)) ** 2).mean()


def train_diffusion(model: nn.Module, dataset, schedule: NoiseSchedule, epochs: int,
                    lr: float, batch_size: int, seed: int, log=None) -> list[float]:
    """Train the noise predictor on benign data; per-epoch mean loss history."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if epochs == 0:
        return []
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = numpy_rng(seed, "diffusion", "order")
    gen = torch_generator(seed, "diffusion", "noise")
    history = []
    model.train()
    for epoch in range(epochs):
        total, batches = 0.0, 0
        for images, _ in dataset.batches(batch_size, rng):
            t = torch.as_tensor(rng.integers(1, schedule.T + 1, size=len(images)))
            eps = torch.randn(images.shape, generator=gen, dtype=images.dtype)
            opt.zero_grad()
            loss = diffusion_loss(model, images, t, eps, schedule)
            loss.backward()
            opt.step()
            total += float(loss.detach())
            batches += 1
        history.append(total / batches)
        if log is not None:
            log(f"diffusion epoch {epoch + 1}/{epochs}: loss {history[-1]:.6f}")
    model.eval()
    return history


def denoise_mean(model: nn.Module, x_t: torch.Tensor, t: int,
                 schedule: NoiseSchedule) -> torch.Tensor:
    """Posterior mean: (x_t - beta_t / sqrt(1-abar_t) * eps_hat) / sqrt(alpha_t)."""
    t_tensor = torch.full((x_t.shape[0],), t, dtype=torch.long)
    with torch.no_grad():
        eps_hat = model(x_t, t_tensor)
    beta = float(schedule.betas[t])
    alpha = float(schedule.alphas[t])
    abar = float(schedule.alpha_bars[t])
    return (x_t - beta / math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(alpha)


def denoise_step(model: nn.Module, x_t: torch.Tensor, t: int,
                 schedule: NoiseSchedule, gen: torch.Generator | None = None,
                 sigma_mode: str = "beta") -> torch.Tensor:
    """One reverse transition t -> t-1; deterministic (mean only) at t = 1."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"timestep out of range 1..{schedule.T}: {t}")
    mean = denoise_mean(model, x_t, t, schedule)
    if t == 1:
        return mean
    sigma = math.sqrt(schedule.sigma2(t, sigma_mode))
    z = torch.randn(x_t.shape, generator=gen, dtype=x_t.dtype)
    return mean + sigma * z


@dataclass
class PurifyPolicy:
    t_min: int
    t_max: int
    sigma_mode: str = "beta"


def adaptive_depth(s_det: float, calibration: DetectorCalibration,
                   policy: PurifyPolicy) -> int:
    """Map a detection score to a purification depth in [t_min, t_max].

    The score's rank within the calibration scores above the threshold is
    rescaled to [0,1]; the depth interpolates linearly and is monotone
    nondecreasing in the score.
    """
    if calibration is None:
        raise ValueError("detector is not calibrated")
    tail = calibration.tail()
    if len(tail) == 0:
        q = 1.0
    else:
        q = float(np.searchsorted(tail, s_det, side="right")) / len(tail)
    q = min(max(q, 0.0), 1.0)
    return int(round(policy.t_min + (policy.t_max - policy.t_min) * q))


def purify(model: nn.Module, x: torch.Tensor, t_star: int, schedule: NoiseSchedule,
           gen: torch.Generator, sigma_mode: str = "beta") -> torch.Tensor:
    """Forward-noise to t_star, denoise back to 0, clamp into [0,1].

    ``t_star = 0`` returns the input unchanged.
    """
    if t_star == 0:
        return x
    if not 1 <= t_star <= schedule.T:
        raise ValueError(f"purification depth out of range 1..{schedule.T}: {t_star}")
    eps = torch.randn(x.shape, generator=gen, dtype=x.dtype)
    x_t = q_sample(x, t_star, eps, schedule)
    for t in range(t_star, 0, -1):
        x_t = denoise_step(model, x_t, t, schedule, gen, sigma_mode)
    return x_t.clamp(0.0, 1.0)
