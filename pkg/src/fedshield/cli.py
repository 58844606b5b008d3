"""Command-line harness: train the three phases, evaluate, sweep, plot.

One declarative config file drives every phase; all randomness descends from
the single master seed via named substreams, so ``--sequential`` runs are
bit-reproducible.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import artifacts, reporting
from .attack import evaluate_attack, pgd, classifier_loss_and_grad
from .config import ExperimentConfig, load_config, save_config
from .federation import prepare_data, run_training
from .metrics import auroc
from .moe import clean_accuracy
from .pipeline import DefenseStack, batch_defend
from .purifier import PurifyPolicy
from .seeding import numpy_rng

# Published full-scale reference results (not reproducible at desk scale);
# printed in report footers for context only.
REFERENCE_ROWS = [
    ("brain-MRI benchmark, adv-trained federated baseline", 98.33, 49.50),
    ("brain-MRI benchmark, detect+purify defense", 97.67, 87.33),
    ("CIFAR-10, detect+purify defense", 82.31, 69.13),
]


def _log(msg: str) -> None:
    print(f"[{time.strftime('%H:%M:%S')}] {msg}", flush=True)


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.out_dir is not None:
        cfg = dataclasses.replace(cfg, out_dir=args.out_dir)
    if args.sequential:
        cfg = dataclasses.replace(cfg, sequential=True)
    if cfg.sequential:
        torch.set_num_threads(1)
    return cfg.validate()


def cmd_train(args) -> int:
    cfg = _load(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    rounds_csv = out / "rounds.csv"
    if not args.resume and rounds_csv.exists():
        rounds_csv.unlink()

    reports_seen = set()

    def log_and_ledger(msg):
        _log(msg)

    result = run_training(cfg, out, resume=args.resume, log=log_and_ledger)
    for report in result.reports:
        if report.round not in reports_seen:
            reporting.append_round(rounds_csv, report)
            reports_seen.add(report.round)
    _log(f"training complete: {len(result.reports)} new rounds, "
         f"artifacts in {out}")
    return 0


def _build_stacks(cfg: ExperimentConfig, out: Path):
    purifier, schedule = artifacts.load_purifier(out)
    mae = artifacts.load_mae(out)
    calibration = artifacts.load_calibration(out)
    blob, clients = artifacts.load_federation(out)
    policy = PurifyPolicy(cfg.purify.t_min, cfg.purify.t_max, cfg.purify.sigma_mode)
    stacks = [DefenseStack(model=c, mae=mae, calibration=calibration,
                           purifier=purifier, schedule=schedule, policy=policy,
                           n_draws=cfg.detector.n_draws,
                           masked_scoring=cfg.detector.masked_scoring,
                           score_ratio=cfg.detector.score_mask_ratio,
                           master_seed=cfg.seed, recheck=cfg.purify.recheck)
              for c in clients]
    return stacks, clients


def evaluate_cells(cfg: ExperimentConfig, out: Path, log=_log):
    """The four evaluation cells per client: {undefended, defended} x
    {clean, adversarial}; returns (rows, traces, auroc)."""
    stacks, clients = _build_stacks(cfg, out)
    data = prepare_data(cfg)
    test = data.test
    n_clients = cfg.eval.eval_clients or len(clients)
    rows, trace_rows = [], []
    det_auroc = None
    base = {"dataset": cfg.dataset.name, "attack_norm": cfg.attack.norm,
            "attack_eps": cfg.attack.eps, "attack_alpha": cfg.attack.alpha,
            "attack_steps": cfg.attack.steps,
            "config_hash": cfg.content_hash(), "seed": cfg.seed}
    cells = {"undefended": {"clean": [], "adv": []},
             "defended": {"clean": [], "adv": []}}
    for stack in stacks[:n_clients]:
        client = stack.model
        cid = client.client_id
        clean_acc = clean_accuracy(client, test, cfg.eval.batch_size)
        adv_acc = evaluate_attack(client, test, cfg.attack,
                                  numpy_rng(cfg.seed, "eval", "attack", cid),
                                  cfg.eval.batch_size)
        rows.append(dict(base, method="undefended", client=cid,
                         acc_clean=clean_acc, acc_adv=adv_acc))
        cells["undefended"]["clean"].append(clean_acc)
        cells["undefended"]["adv"].append(adv_acc)
        log(f"client {cid} undefended: clean {clean_acc:.3f}, adv {adv_acc:.3f}")

        # regenerate the adversarial batch for the defended pass
        loss_fn = classifier_loss_and_grad(client)
        adv_images = []
        for images, labels in test.batches(cfg.eval.batch_size):
            adv_images.append(pgd(loss_fn, images, labels, cfg.attack,
                                  numpy_rng(cfg.seed, "eval", "attack", cid)))
        adv_images = torch.cat(adv_images)
        traces, metrics = batch_defend(test, stack, adversarial=adv_images,
                                       batch_size=cfg.eval.batch_size)
        rows.append(dict(base, method="defended", client=cid,
                         acc_clean=metrics.acc_clean, acc_adv=metrics.acc_adv))
        cells["defended"]["clean"].append(metrics.acc_clean)
        cells["defended"]["adv"].append(metrics.acc_adv)
        log(f"client {cid} defended:   clean {metrics.acc_clean:.3f}, "
            f"adv {metrics.acc_adv:.3f} "
            f"(flag rates {metrics.flag_rate_clean:.2f}/{metrics.flag_rate_adv:.2f})")
        labels = test.labels.tolist()
        n = len(labels)
        for t in traces:
            split = "clean" if str(t.sample_id).startswith("c") else "adv"
            idx = int(str(t.sample_id)[1:])
            trace_rows.append((f"{split}", labels[idx],
                               dataclasses.replace(t, sample_id=f"{cid}_{t.sample_id}")))
        if det_auroc is None:
            clean_scores = [t.s_det for t in traces[:n]]
            adv_scores = [t.s_det for t in traces[n:]]
            if adv_scores:
                det_auroc = auroc(clean_scores, adv_scores)

    for method in ("undefended", "defended"):
        rows.append(dict(base, method=method, client="mean",
                         acc_clean=float(np.mean(cells[method]["clean"])),
                         acc_adv=float(np.mean(cells[method]["adv"]))))
    return rows, trace_rows, det_auroc, cells


def cmd_evaluate(args) -> int:
    cfg = _load(args)
    out = Path(args.checkpoint_dir or cfg.out_dir)
    rows, trace_rows, det_auroc, cells = evaluate_cells(cfg, out)
    reporting.write_results(out / "results.csv", rows)
    reporting.write_traces(out / "traces.csv", trace_rows)
    artifacts.write_manifest(out, cfg, {"detector_auroc": det_auroc})

    lines = ["evaluation summary (mean over evaluated clients)"]
    for method in ("undefended", "defended"):
        lines.append(f"  {method:10s}: clean {np.mean(cells[method]['clean']):.4f}  "
                     f"adv {np.mean(cells[method]['adv']):.4f}")
    if det_auroc is not None:
        lines.append(f"  detector AUROC (clean vs adversarial): {det_auroc:.4f}")
    lines.append("reference full-scale results from the literature "
                 "(context only, not desk-reproducible):")
    for name, clean, adv in REFERENCE_ROWS:
        lines.append(f"  {name}: clean {clean:.2f}%, adv {adv:.2f}%")
    report = "\n".join(lines)
    (out / "report.txt").write_text(report + "\n")
    print(report)
    return 0


def cmd_attack_sweep(args) -> int:
    cfg = _load(args)
    out = Path(args.checkpoint_dir or cfg.out_dir)
    eps_values = [float(e) for e in args.eps.split(",")]
    stacks, _ = _build_stacks(cfg, out)
    stack = stacks[0]
    data = prepare_data(cfg)
    test = data.test
    rows = []
    for eps in eps_values:
        atk = dataclasses.replace(cfg.attack, eps=eps)
        adv_acc = evaluate_attack(stack.model, test, atk,
                                  numpy_rng(cfg.seed, "sweep", eps),
                                  cfg.eval.batch_size)
        loss_fn = classifier_loss_and_grad(stack.model)
        adv_images = torch.cat([
            pgd(loss_fn, images, labels, atk, numpy_rng(cfg.seed, "sweep", eps))
            for images, labels in test.batches(cfg.eval.batch_size)])
        _, metrics = batch_defend(test, stack, adversarial=adv_images,
                                  batch_size=cfg.eval.batch_size)
        rows.append({"method": "undefended", "client": stack.model.client_id,
                     "dataset": cfg.dataset.name, "attack_norm": atk.norm,
                     "attack_eps": eps, "attack_alpha": atk.alpha,
                     "attack_steps": atk.steps, "acc_clean": float("nan"),
                     "acc_adv": adv_acc, "config_hash": cfg.content_hash(),
                     "seed": cfg.seed})
        rows.append({"method": "defended", "client": stack.model.client_id,
                     "dataset": cfg.dataset.name, "attack_norm": atk.norm,
                     "attack_eps": eps, "attack_alpha": atk.alpha,
                     "attack_steps": atk.steps, "acc_clean": metrics.acc_clean,
                     "acc_adv": metrics.acc_adv, "config_hash": cfg.content_hash(),
                     "seed": cfg.seed})
        _log(f"eps {eps}: undefended adv {adv_acc:.3f}, defended adv "
             f"{metrics.acc_adv:.3f}")
    reporting.write_results(out / "sweep.csv", rows)
    return 0


def cmd_plot(args) -> int:
    run_dir = Path(args.run_dir)
    written = reporting.emit_plots(run_dir)
    for path in written:
        _log(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedshield",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="YAML/JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out-dir", default=None, help="override config out_dir")
        p.add_argument("--sequential", action="store_true",
                       help="bit-reproducible single-threaded mode")

    p_train = sub.add_parser("train", help="run training phases 1-3")
    common(p_train)
    p_train.add_argument("--resume", action="store_true",
                         help="skip phases with existing artifacts")
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("evaluate", help="evaluate the four defense cells")
    common(p_eval)
    p_eval.add_argument("--checkpoint-dir", default=None)
    p_eval.set_defaults(fn=cmd_evaluate)

    p_sweep = sub.add_parser("attack-sweep", help="sweep attack strength")
    common(p_sweep)
    p_sweep.add_argument("--checkpoint-dir", default=None)
    p_sweep.add_argument("--eps", default="0.005,0.01,0.015,0.03")
    p_sweep.set_defaults(fn=cmd_attack_sweep)

    p_plot = sub.add_parser("plot", help="emit convergence and score plots")
    p_plot.add_argument("--run-dir", required=True)
    p_plot.set_defaults(fn=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
