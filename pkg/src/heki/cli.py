"""``heki`` command line: run experiments, limit studies and prior sampling."""

import argparse
import csv
import sys

import numpy as np

from heki.experiments import ConfigError, parse_config, run_experiment, run_limit_study
from heki.gaussian_field import Grid1D, HyperParams, fd_sample, kl_sample, spde_sample

SAMPLERS = {"spde": spde_sample, "kl": kl_sample, "fd": fd_sample}


def _h_list(text):
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals or any(v <= 0 for v in vals):
        raise argparse.ArgumentTypeError("h values must be positive")
    return vals


def build_parser():
    p = argparse.ArgumentParser(prog="heki", description="Hierarchical ensemble Kalman inversion experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the method comparison for each seed")
    r.add_argument("--config", required=True, help="JSON config file")
    r.add_argument("--seed-count", type=int, default=None, help="use seeds 0..N-1 instead of the config list")
    r.add_argument("--out", default=None, help="output directory (default: config out_dir)")
    r.add_argument("--fixed-truth-seed", type=int, default=None, help="draw the same truth field for every seed")

    lim = sub.add_parser("limits", help="discrete EKI vs continuous-time flow convergence study")
    lim.add_argument("--config", required=True)
    lim.add_argument("--h-list", type=_h_list, default=None, help="e.g. 0.1,0.05,0.025")
    lim.add_argument("--out", default=None)

    s = sub.add_parser("sample-prior", help="draw Matern prior samples to CSV")
    s.add_argument("--ell", type=float, required=True, help="lengthscale in grid cells")
    s.add_argument("--alpha", type=float, required=True)
    s.add_argument("--sigma", type=float, default=1.0)
    s.add_argument("--n-points", type=int, default=50)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--method", choices=sorted(SAMPLERS), default="spde")
    s.add_argument("--out", required=True)
    return p


def _cmd_run(args):
    cfg = parse_config(args.config)
    if args.fixed_truth_seed is not None:
        cfg.fixed_truth_seed = args.fixed_truth_seed
    if args.seed_count is not None and args.seed_count < 1:
        raise ConfigError("--seed-count: must be at least 1")
    res = run_experiment(cfg, out_dir=args.out, seed_count=args.seed_count)
    for name, stats in res.summary["methods"].items():
        err = stats["rel_error_mean"]
        ell = stats["ell_final_mean"]
        line = f"{name:32s} runs={stats['n_runs']:3d} rel_error={err if err is None else f'{err:.4f}'}"
        if ell is not None:
            line += f" ell_final={ell:.2f}"
        if "wins_vs_standard" in stats:
            line += f" wins_vs_standard={stats['wins_vs_standard']}/{stats['paired_runs']}"
        print(line)
    print(f"outputs written to {res.out_dir}")
    for f in res.failures:
        print(f"FAILED {f['method']} seed {f['seed']}: {f['error']}", file=sys.stderr)
    return 0 if res.ok else 1


def _cmd_limits(args):
    cfg = parse_config(args.config)
    res, report = run_limit_study(cfg, h_list=args.h_list, out_dir=args.out)
    for h, e in zip(report["h_list"], report["errors"]):
        print(f"h={h:<10g} error={e:.6e}")
    order = report["order"]
    print("order: absent (need at least two h values)" if order is None else f"order: {order:.4f}")
    print(f"outputs written to {args.out or cfg.out_dir}")
    return 0


def _cmd_sample(args):
    if args.count < 1 or args.n_points < 1:
        raise ConfigError("--count and --n-points must be positive")
    theta = HyperParams(sigma=args.sigma, alpha=args.alpha, ell=args.ell)
    grid = Grid1D(n_points=args.n_points)
    rng = np.random.default_rng(args.seed)
    samples = np.atleast_2d(SAMPLERS[args.method](theta, grid, rng, args.count))
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x"] + [f"sample_{i}" for i in range(args.count)])
        for i, x in enumerate(grid.x):
            w.writerow([format(x, ".17g")] + [format(v, ".17g") for v in samples[:, i]])
    print(f"wrote {args.count} sample(s) to {args.out}")
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    handler = {"run": _cmd_run, "limits": _cmd_limits, "sample-prior": _cmd_sample}[args.command]
    try:
        return handler(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"heki {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
