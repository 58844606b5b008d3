#!/usr/bin/env python3
"""Run the desk-scale directional experiment end to end and print the four
directional checks: attack effectiveness, defense gain, clean fidelity and
detector separation."""

import argparse
from pathlib import Path

from fedshield.cli import evaluate_cells, main as cli_main
from fedshield.config import load_config


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default="configs/directional.yaml")
    parser.add_argument("--out-dir", default=None)
    parser.add_argument("--resume", action="store_true")
    args = parser.parse_args()

    cfg = load_config(args.config)
    out = Path(args.out_dir or cfg.out_dir)
    train_args = ["train", "--config", args.config, "--out-dir", str(out)]
    if args.resume:
        train_args.append("--resume")
    cli_main(train_args)
    cli_main(["evaluate", "--config", args.config, "--out-dir", str(out),
              "--checkpoint-dir", str(out)])
    cli_main(["plot", "--run-dir", str(out)])

    import numpy as np
    rows, _, det_auroc, cells = evaluate_cells(cfg, out, log=lambda m: None)
    und_clean = float(np.mean(cells["undefended"]["clean"]))
    und_adv = float(np.mean(cells["undefended"]["adv"]))
    def_clean = float(np.mean(cells["defended"]["clean"]))
    def_adv = float(np.mean(cells["defended"]["adv"]))
    checks = [
        ("attack drops accuracy by >= 30 points", und_clean - und_adv >= 0.30),
        ("defense recovers >= 20 points", def_adv - und_adv >= 0.20),
        ("defended clean within 5 points", abs(def_clean - und_clean) <= 0.05),
        ("detector AUROC >= 0.75", det_auroc is not None and det_auroc >= 0.75),
    ]
    print(f"\nundefended clean {und_clean:.3f} adv {und_adv:.3f} | "
          f"defended clean {def_clean:.3f} adv {def_adv:.3f} | "
          f"AUROC {det_auroc:.3f}")
    for name, ok in checks:
        print(f"  [{'PASS' if ok else 'FAIL'}] {name}")


if __name__ == "__main__":
    main()
