#!/usr/bin/env python3
"""Write the synthetic two-class benchmark as a CIFAR-10-format archive."""

import argparse

from fedshield.synthetic import write_archive


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out_dir")
    parser.add_argument("--train", type=int, default=2000)
    parser.add_argument("--test", type=int, default=500)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    out = write_archive(args.out_dir, args.train, args.test, args.seed)
    print(f"wrote {args.train} train / {args.test} test samples to {out}")


if __name__ == "__main__":
    main()
