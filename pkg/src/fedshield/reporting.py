"""CSV ledgers and plot emission for experiment runs.

All float formatting is fixed-width so that reruns with identical inputs
produce byte-identical files.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .pipeline import DefenseTrace

ROUNDS_FIELDS = ["round", "mean_local_loss", "clean_accuracy", "adv_accuracy",
                 "wall_time_s", "client_losses"]
RESULTS_FIELDS = ["method", "client", "dataset", "attack_norm", "attack_eps",
                  "attack_alpha", "attack_steps", "acc_clean", "acc_adv",
                  "config_hash", "seed"]
TRACES_FIELDS = ["sample_id", "split", "y_true", "y_pred", "correct", "s_det",
                 "flagged", "t_star", "detect_ms", "purify_ms", "classify_ms"]


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)


def append_round(path: str | Path, report) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(ROUNDS_FIELDS)
        writer.writerow([
            report.round, _fmt(float(np.mean(report.client_losses))),
            _fmt(report.clean_accuracy), _fmt(report.adv_accuracy),
            _fmt(report.wall_time_s),
            ";".join(_fmt(l) for l in report.client_losses)])


def write_results(path: str | Path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULTS_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})


def write_traces(path: str | Path, traces: list[tuple[str, int, DefenseTrace]]) -> None:
    """Rows of (split tag, true label, trace)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACES_FIELDS)
        writer.writeheader()
        for split, y_true, t in traces:
            writer.writerow({
                "sample_id": t.sample_id, "split": split, "y_true": y_true,
                "y_pred": t.y_pred, "correct": int(t.y_pred == y_true),
                "s_det": _fmt(t.s_det), "flagged": int(t.flagged),
                "t_star": t.t_star,
                "detect_ms": _fmt(t.latency_ms.get("detect", 0.0)),
                "purify_ms": _fmt(t.latency_ms.get("purify", 0.0)),
                "classify_ms": _fmt(t.latency_ms.get("classify", 0.0))})


def read_rounds(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing round ledger: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"empty round ledger: {path}")
    return rows


def emit_plots(run_dir: str | Path) -> list[Path]:
    """Write convergence curves and, when traces exist, detector score
    histograms. Re-emitting over the same ledgers is byte-idempotent."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(run_dir)
    plots_dir = run_dir / "plots"
    plots_dir.mkdir(parents=True, exist_ok=True)
    written = []

    rows = read_rounds(run_dir / "rounds.csv")
    rounds = [int(r["round"]) for r in rows]
    clean = [float(r["clean_accuracy"]) for r in rows]
    adv = [float(r["adv_accuracy"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(rounds, clean, marker="o", label="clean accuracy")
    ax.plot(rounds, adv, marker="s", label="adversarial accuracy")
    ax.set_xlabel("federated round")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.legend()
    ax.grid(alpha=0.3)
    out = plots_dir / "convergence.png"
    fig.savefig(out, dpi=100, metadata={"Software": None, "Date": None})
    plt.close(fig)
    written.append(out)

    traces_path = run_dir / "traces.csv"
    if traces_path.exists():
        with open(traces_path, newline="") as fh:
            trows = list(csv.DictReader(fh))
        by_split = {}
        for r in trows:
            by_split.setdefault(r["split"], []).append(float(r["s_det"]))
        if by_split:
            fig, ax = plt.subplots(figsize=(6, 4))
            for split, scores in sorted(by_split.items()):
                ax.hist(scores, bins=30, alpha=0.6, label=f"{split} (n={len(scores)})")
            ax.set_xlabel("detection score")
            ax.set_ylabel("count")
            ax.legend()
            out = plots_dir / "detector_scores.png"
            fig.savefig(out, dpi=100, metadata={"Software": None, "Date": None})
            plt.close(fig)
            written.append(out)
    return written
