"""Inference-time defense: detect, conditionally purify, classify, trace.

Every classified sample produces exactly one DefenseTrace recording the
detection score, the flag decision, the purification depth and the stage
latencies, so defended predictions are auditable sample by sample.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .detector import DetectorCalibration, MAEModel, detection_scores
from .purifier import NoiseSchedule, PurifyPolicy, adaptive_depth, purify
from .seeding import sample_seed, torch_generator


class DefenseStageError(RuntimeError):
    def __init__(self, stage: str, sample_id, cause: Exception):
        super().__init__(f"defense stage '{stage}' failed on sample {sample_id}: {cause}")
        self.stage = stage
        self.sample_id = sample_id


@dataclass
class DefenseTrace:
    sample_id: int
    s_det: float
    flagged: bool
    t_star: int            # 0 when not purified
    y_pred: int
    alpha: list[float]
    latency_ms: dict = field(default_factory=dict)
    error_stage: str | None = None


@dataclass
class DefenseStack:
    """Everything the defended classifier needs at inference time."""

    model: object                  # personalized classifier (ClientModel)
    mae: MAEModel
    calibration: DetectorCalibration
    purifier: object
    schedule: NoiseSchedule
    policy: PurifyPolicy
    n_draws: int = 4
    masked_scoring: bool = True
    score_ratio: float | None = None  # None = the detector's training ratio
    master_seed: int = 0
    recheck: bool = False          # experimental second detection pass


def _purify_flagged(stack: DefenseStack, images: torch.Tensor, depths: list[int],
                    ids: list) -> torch.Tensor:
    """Purify a batch with per-sample depths and per-sample noise streams.

    Samples are grouped by depth for batched denoising; every noise draw
    comes from the sample's own generator, so each output depends only on
    (master_seed, sample_id), not on how the batch was grouped.
    """
    from .purifier import denoise_mean, q_sample

    out = images.clone()
    gens = [torch_generator(sample_seed(stack.master_seed, sid)) for sid in ids]
    depths_arr = np.asarray(depths)
    for t_star in np.unique(depths_arr):
        if t_star == 0:
            continue
        sel = np.flatnonzero(depths_arr == t_star).tolist()
        group = images[sel]
        shape = group[0:1].shape

        def draw() -> torch.Tensor:
            return torch.cat([torch.randn(shape, generator=gens[i], dtype=group.dtype)
                              for i in sel])

        x_t = q_sample(group, int(t_star), draw(), stack.schedule)
        for t in range(int(t_star), 0, -1):
            mean = denoise_mean(stack.purifier, x_t, t, stack.schedule)
            if t == 1:
                x_t = mean
            else:
                sigma = math.sqrt(stack.schedule.sigma2(t, stack.policy.sigma_mode))
                x_t = mean + sigma * draw()
        out[sel] = x_t.clamp(0.0, 1.0)
    return out


def defend_and_classify(x: torch.Tensor, sample_id, stack: DefenseStack,
                        ) -> tuple[int, DefenseTrace]:
    """Score, conditionally purify and classify one sample."""
    preds, traces = batch_defend_images(x.unsqueeze(0), [sample_id], stack)
    return preds[0], traces[0]


def batch_defend_images(images: torch.Tensor, ids: list,
                        stack: DefenseStack) -> tuple[list[int], list[DefenseTrace]]:
    n = len(images)
    t0 = time.perf_counter()
    try:
        scores = detection_scores(stack.mae, images, stack.n_draws,
                                  stack.master_seed, sample_ids=ids,
                                  ratio=stack.score_ratio,
                                  masked=stack.masked_scoring)
    except Exception as exc:  # noqa: BLE001
        raise DefenseStageError("detect", ids[0] if ids else None, exc) from exc
    detect_ms = (time.perf_counter() - t0) * 1000.0 / n

    flags = [stack.calibration.flag(float(s)) for s in scores]
    depths = [adaptive_depth(float(s), stack.calibration, stack.policy) if f else 0
              for s, f in zip(scores, flags)]

    t1 = time.perf_counter()
    try:
        finals = _purify_flagged(stack, images, depths, ids) if any(flags) else images
        if stack.recheck and any(flags):
            # experimental: one extra pass for samples still scoring above tau
            re_scores = detection_scores(stack.mae, finals, stack.n_draws,
                                         stack.master_seed,
                                         sample_ids=[f"re_{i}" for i in ids],
                                         ratio=stack.score_ratio,
                                         masked=stack.masked_scoring)
            re_depths = [adaptive_depth(float(s), stack.calibration, stack.policy)
                         if f and stack.calibration.flag(float(s)) else 0
                         for s, f in zip(re_scores, flags)]
            if any(re_depths):
                finals = _purify_flagged(stack, finals, re_depths,
                                         [f"re_{i}" for i in ids])
    except Exception as exc:  # noqa: BLE001
        bad = ids[next(i for i, f in enumerate(flags) if f)]
        raise DefenseStageError("purify", bad, exc) from exc
    n_flagged = max(1, sum(flags))
    purify_ms = (time.perf_counter() - t1) * 1000.0 / n_flagged

    t2 = time.perf_counter()
    try:
        with torch.no_grad():
            probs, alpha, _ = stack.model(finals)
    except Exception as exc:  # noqa: BLE001
        raise DefenseStageError("classify", ids[0] if ids else None, exc) from exc
    classify_ms = (time.perf_counter() - t2) * 1000.0 / n

    preds = probs.argmax(dim=1).tolist()
    traces = [DefenseTrace(
        sample_id=ids[i], s_det=float(scores[i]), flagged=flags[i],
        t_star=depths[i], y_pred=int(preds[i]),
        alpha=[float(a) for a in alpha[i]],
        latency_ms={"detect": detect_ms,
                    "purify": purify_ms if flags[i] else 0.0,
                    "classify": classify_ms})
        for i in range(n)]
    return preds, traces


@dataclass
class DefenseMetrics:
    acc_clean: float
    acc_adv: float | None
    flag_rate_clean: float
    flag_rate_adv: float | None
    mean_depth: float
    latency_ms: dict


def batch_defend(dataset, stack: DefenseStack, adversarial: torch.Tensor | None = None,
                 batch_size: int = 64) -> tuple[list[DefenseTrace], DefenseMetrics]:
    """Defended evaluation over a dataset, optionally with paired adversarial
    inputs (same labels, same order)."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    labels = dataset.labels
    all_traces: list[DefenseTrace] = []

    def run(images: torch.Tensor, tag: str):
        preds, traces = [], []
        for start in range(0, len(images), batch_size):
            chunk = images[start:start + batch_size]
            ids = [f"{tag}{start + i}" for i in range(len(chunk))]
            p, tr = batch_defend_images(chunk, ids, stack)
            preds.extend(p)
            traces.extend(tr)
        correct = float(np.mean([p == int(y) for p, y in zip(preds, labels)]))
        return correct, traces

    acc_clean, clean_traces = run(dataset.images, "c")
    all_traces.extend(clean_traces)
    acc_adv, flag_adv = None, None
    if adversarial is not None:
        if len(adversarial) != len(dataset):
            raise ValueError("adversarial batch must pair with the dataset")
        acc_adv, adv_traces = run(adversarial, "a")
        all_traces.extend(adv_traces)
        flag_adv = float(np.mean([t.flagged for t in adv_traces]))

    flagged = [t for t in all_traces if t.flagged]
    metrics = DefenseMetrics(
        acc_clean=acc_clean, acc_adv=acc_adv,
        flag_rate_clean=float(np.mean([t.flagged for t in clean_traces])),
        flag_rate_adv=flag_adv,
        mean_depth=float(np.mean([t.t_star for t in flagged])) if flagged else 0.0,
        latency_ms={
            stage: float(np.mean([t.latency_ms[stage] for t in all_traces]))
            for stage in ("detect", "purify", "classify")})
    return all_traces, metrics


def make_training_hook(stack: DefenseStack):
    """Defense hook for local training: purify samples whose score exceeds
    the calibrated threshold, pass the rest through unchanged."""

    counter = {"batch": 0}

    def hook(images: torch.Tensor) -> torch.Tensor:
        counter["batch"] += 1
        ids = [f"train{counter['batch']}_{i}" for i in range(len(images))]
        scores = detection_scores(stack.mae, images, stack.n_draws,
                                  stack.master_seed, sample_ids=ids,
                                  ratio=stack.score_ratio,
                                  masked=stack.masked_scoring)
        flags = [stack.calibration.flag(float(s)) for s in scores]
        if not any(flags):
            return images
        depths = [adaptive_depth(float(s), stack.calibration, stack.policy) if f else 0
                  for s, f in zip(scores, flags)]
        return _purify_flagged(stack, images, depths, ids)

    return hook
