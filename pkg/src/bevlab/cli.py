"""Command-line entry point.

Verbs: gen, train, ablation, sweep-lambda, similarity, report, selftest.
Global flags: --config <path>, --seed <n>, --out <dir>, --jobs <n>.
Exit codes: 0 success, 1 hard failure, 2 partial sweep/ablation failure.
"""

import argparse
import sys

from . import harness
from .config import ConfigError, RunConfig


def build_parser():
    p = argparse.ArgumentParser(
        prog="bevlab",
        description="Cross-view supervision laboratory for BEV map construction.")
    p.add_argument("--config", metavar="PATH",
                   help="key-value config file (defaults apply when omitted)")
    p.add_argument("--seed", type=int, metavar="N",
                   help="override the run seed")
    p.add_argument("--out", default="out", metavar="DIR",
                   help="output directory (default: ./out)")
    p.add_argument("--jobs", type=int, default=1, metavar="N",
                   help="parallel training processes (default: 1)")
    sub = p.add_subparsers(dest="verb", required=True)
    sub.add_parser("gen", help="render the scene corpus")
    tr = sub.add_parser("train", help="train and evaluate one student run")
    tr.add_argument("--variant", choices=sorted(harness.VARIANTS),
                    help="override the config variant")
    sub.add_parser("ablation", help="all variants x seeds comparison table")
    sub.add_parser("sweep-lambda", help="alignment-weight sweep with plots")
    sub.add_parser("similarity", help="teacher-student feature similarity study")
    sub.add_parser("report", help="consolidated markdown report")
    sub.add_parser("selftest", help="quick oracle and property checks")
    return p


def _print_failures(failures):
    for name, err in failures:
        print(f"FAILED {name}: {err}", file=sys.stderr)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg = cfg.with_overrides(seed=args.seed)
        out = args.out

        if args.verb == "selftest":
            checks = harness.cmd_selftest(out)
            for name, ok, detail in checks:
                print(f"{'pass' if ok else 'FAIL'} {name}: {detail}")
            return 0 if all(ok for _, ok, _ in checks) else 1

        if args.verb == "gen":
            path, n_train, n_val = harness.cmd_gen(cfg, out)
            print(f"{path}: {n_train} train + {n_val} val scenes "
                  f"(dataset hash {cfg.dataset_hash()})")
            return 0

        if args.verb == "train":
            rec = harness.cmd_train(cfg, out, variant=args.variant)
            calls = rec.get("teacher_calls", "none (baseline)")
            print(f"{rec['run_dir']}: mAP standard {rec['map_standard']} "
                  f"extended {rec['map_extended']} "
                  f"({rec['wall_clock']}s, teacher calls {calls})")
            return 0

        if args.verb == "ablation":
            rows, failures = harness.cmd_ablation(cfg, out, jobs=args.jobs)
            for variant, n, mean, spread, delta in rows:
                print(f"{variant:13s} n={n} mAP {mean:.4f} "
                      f"spread {spread:.4f} delta {delta:+.4f}")
            _print_failures(failures)
            return 2 if failures else 0

        if args.verb == "sweep-lambda":
            rows, failures = harness.cmd_sweep_lambda(cfg, out, jobs=args.jobs)
            for lam, n, ms, me in rows:
                print(f"lambda {lam:<8g} n={n} mAP standard {ms:.4f} "
                      f"extended {me:.4f}")
            _print_failures(failures)
            return 2 if failures else 0

        if args.verb == "similarity":
            rows, failures = harness.cmd_similarity(cfg, out, jobs=args.jobs)
            for row in rows:
                print(f"{row[0]:13s} n={row[1]} cka median {row[2]:.4f} "
                      f"r2 median {row[6]:.4f}")
            _print_failures(failures)
            return 2 if failures else 0

        if args.verb == "report":
            path, missing = harness.cmd_report(cfg, out)
            print(path)
            for item in missing:
                print(f"missing: {item}", file=sys.stderr)
            return 0

        raise harness.HarnessError(f"unhandled verb {args.verb!r}")
    except (ConfigError, harness.HarnessError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
