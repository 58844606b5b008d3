"""White-box projected gradient descent attacks in the linf and l2 threat models.

The attack is written against a ``loss_and_grad`` callable so it works for any
differentiable classifier (and for scalar toy problems in tests). Every output
satisfies the ball constraint and stays inside the [0,1] pixel box.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
import torch

from .config import AttackConfig

LossAndGrad = Callable[[torch.Tensor, torch.Tensor], tuple[torch.Tensor, torch.Tensor]]


class AttackNumericsError(RuntimeError):
    def __init__(self, iteration: int):
        super().__init__(f"non-finite gradient at attack iteration {iteration}")
        self.iteration = iteration


def _flat_l2(delta: torch.Tensor) -> torch.Tensor:
    return delta.reshape(delta.shape[0], -1).norm(dim=1)


def project(x_cand: torch.Tensor, x_center: torch.Tensor, norm: str,
            eps: float) -> torch.Tensor:
    """Nearest point of the eps-ball around ``x_center``, then clamped to [0,1].

    Idempotent: projecting twice equals projecting once.
    """
    if x_cand.shape != x_center.shape:
        raise ValueError("candidate/center shape mismatch")
    delta = x_cand - x_center
    if norm == "linf":
        delta = delta.clamp(-eps, eps)
    elif norm == "l2":
        norms = _flat_l2(delta)
        scale = torch.where(norms > eps, eps / norms.clamp_min(1e-12),
                            torch.ones_like(norms))
        delta = delta * scale.reshape(-1, *([1] * (delta.ndim - 1)))
    else:
        raise ValueError(f"unknown norm: {norm}")
    return (x_center + delta).clamp(0.0, 1.0)


def pgd(loss_and_grad: LossAndGrad, x: torch.Tensor, y: torch.Tensor,
        cfg: AttackConfig, rng: np.random.Generator | None = None) -> torch.Tensor:
    """Iterated gradient-ascent steps projected onto the eps-ball around ``x``.

    linf mode takes signed-gradient steps; l2 mode normalizes the gradient to
    unit l2 norm before stepping. ``x`` is expected batched ([B,...]) and in
    [0,1]; the returned tensor is detached.
    """
    x = x.detach()
    x_adv = x.clone()
    if cfg.random_start:
        if rng is None:
            raise ValueError("random_start requires an rng")
        if cfg.norm == "linf":
            noise = rng.uniform(-cfg.eps, cfg.eps, size=tuple(x.shape))
            x_adv = x + torch.as_tensor(noise, dtype=x.dtype)
        else:
            direction = torch.as_tensor(
                rng.standard_normal(size=tuple(x.shape)), dtype=x.dtype)
            direction = direction / _flat_l2(direction).clamp_min(1e-12).reshape(
                -1, *([1] * (x.ndim - 1)))
            radius = cfg.eps * rng.uniform(size=(x.shape[0],)) ** (1.0 / x[0].numel())
            x_adv = x + direction * torch.as_tensor(
                radius, dtype=x.dtype).reshape(-1, *([1] * (x.ndim - 1)))
        x_adv = project(x_adv, x, cfg.norm, cfg.eps)
    for it in range(cfg.steps):
        _, grad = loss_and_grad(x_adv, y)
        if not torch.isfinite(grad).all():
            raise AttackNumericsError(it)
        if cfg.norm == "linf":
            step = cfg.alpha * grad.sign()
        else:
            unit = grad / _flat_l2(grad).clamp_min(1e-12).reshape(
                -1, *([1] * (grad.ndim - 1)))
            step = cfg.alpha * unit
        x_adv = project(x_adv + step, x, cfg.norm, cfg.eps)
    return x_adv.detach()


def classifier_loss_and_grad(model) -> LossAndGrad:
    """Cross-entropy loss on the model's full (mixture) output, grad w.r.t. x."""

    def fn(x: torch.Tensor, y: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = x.detach().requires_grad_(True)
        out = model(x)
        probs = out[0] if isinstance(out, tuple) else out
        loss = torch.nn.functional.nll_loss(torch.log(probs.clamp_min(1e-12)), y,
                                            reduction="sum")
        (grad,) = torch.autograd.grad(loss, x)
        return loss.detach(), grad.detach()

    return fn


def evaluate_attack(model, dataset, cfg: AttackConfig,
                    rng: np.random.Generator | None = None,
                    batch_size: int = 64) -> float:
    """Adversarial accuracy: fraction of samples with f(x_adv) = y."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    loss_fn = classifier_loss_and_grad(model)
    correct = 0
    for images, labels in dataset.batches(batch_size):
        x_adv = pgd(loss_fn, images, labels, cfg, rng)
        with torch.no_grad():
            out = model(x_adv)
            probs = out[0] if isinstance(out, tuple) else out
        correct += int((probs.argmax(dim=1) == labels).sum())
    return correct / len(dataset)
