"""Command-line entry point: run and validate experiment configs, benchmark
the kernel backends. All experiment state lives in the config file."""

from __future__ import annotations

import argparse
import sys

from . import bench, runner


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="advlab",
        description="desk-scale adversarial training laboratory")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--seed-override", type=int, default=None,
                       help="run a single seed instead of the config's list")
    p_run.add_argument("--out-dir", default=None)
    p_run.add_argument("--probe-size", type=int, default=None)

    p_val = sub.add_parser("validate", help="check a config without running it")
    p_val.add_argument("config")

    p_bench = sub.add_parser("bench", help="time conv kernels on both backends")
    p_bench.add_argument("--batch", type=int, default=128)
    p_bench.add_argument("--repeat", type=int, default=5)

    args = parser.parse_args(argv)
    if args.cmd == "run":
        return runner.run(args.config, args.seed_override, args.out_dir,
                          args.probe_size)
    if args.cmd == "validate":
        problems = runner.validate(args.config)
        if problems:
            for p in problems:
                print(f"problem: {p}")
            return 1
        print("config ok")
        return 0
    bench.run_benchmark(batch=args.batch, repeat=args.repeat)
    return 0


if __name__ == "__main__":
    sys.exit(main())
