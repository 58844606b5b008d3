"""Evaluation metrics: accuracy and rank-based AUROC."""

from __future__ import annotations

import numpy as np


def accuracy(preds, labels) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if len(preds) == 0:
        raise ValueError("empty input")
    if len(preds) != len(labels):
        raise ValueError("prediction/label length mismatch")
    return float(np.mean(preds == labels))


def auroc(clean_scores, adv_scores) -> float:
    """Probability that a random adversarial score exceeds a random clean
    score, counting ties as one half (rank / Mann-Whitney formulation)."""
    clean = np.asarray(clean_scores, dtype=np.float64)
    adv = np.asarray(adv_scores, dtype=np.float64)
    if len(clean) == 0 or len(adv) == 0:
        raise ValueError("empty input")
    merged = np.concatenate([clean, adv])
    order = np.argsort(merged, kind="stable")
    ranks = np.empty(len(merged), dtype=np.float64)
    # average ranks over tie groups
    sorted_vals = merged[order]
    i = 0
    while i < len(sorted_vals):
        j = i
        while j + 1 < len(sorted_vals) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum_adv = ranks[len(clean):].sum()
    u = rank_sum_adv - len(adv) * (len(adv) + 1) / 2.0
    return float(u / (len(clean) * len(adv)))
