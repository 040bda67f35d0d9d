"""Command-line interface: `fif <subcommand> [flags]`."""

import argparse
from typing import List, Optional

from fif_flow import __version__
from fif_flow.pipeline import commands


def _int_list(raw: str) -> List[int]:
    return [int(v) for v in raw.replace(";", ",").split(",") if v.strip()]


def _float_list(raw: str) -> List[float]:
    return [float(v) for v in raw.replace(";", ",").split(",") if v.strip()]


def _str_list(raw: str) -> List[str]:
    return [v.strip() for v in raw.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fif", description="Free-form injective flow experiments")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="Train one model from an experiment config")
    train.add_argument("--config", required=True, help="Experiment INI file")
    train.add_argument("--seed", type=int, default=None, help="Override run.seed")
    train.add_argument("--out", default=None, help="Override run.out_dir")
    train.add_argument("--force", action="store_true", help="Overwrite an earlier run in the same directory")
    train.add_argument("--quiet", action="store_true", help="Suppress per-epoch progress")

    phase = sub.add_parser("phase-transition", help="Sweep beta with several runs per value")
    phase.add_argument("--config", required=True, help="Experiment INI file with a [sweep] section")
    phase.add_argument("--seed", type=int, default=None, help="Base seed; run r uses seed + r")
    phase.add_argument("--out", default=None, help="Override run.out_dir")
    phase.add_argument("--force", action="store_true", help="Overwrite earlier sweep outputs")
    phase.add_argument("--jobs", type=int, default=1, help="Worker processes (capped by FIF_NUM_THREADS)")

    variance = sub.add_parser("variance-study", help="Trace-estimator variance and gradient-distance curves")
    variance.add_argument("--d", type=int, default=8, help="Latent dimension / matrix size")
    variance.add_argument("--D", type=int, default=16, help="Data dimension of the gradient-distance pair")
    variance.add_argument("--kinds", type=_str_list, default=list(commands.ALL_KINDS), help="Comma-separated probe kinds")
    variance.add_argument("--K", type=_int_list, default=list(range(1, 9)), help="Comma-separated probe counts")
    variance.add_argument("--samples", type=int, default=100_000, help="Estimates per (kind, K)")
    variance.add_argument("--seed", type=int, default=0)
    variance.add_argument("--out", default=None)
    variance.add_argument("--force", action="store_true")

    bench = sub.add_parser("benchmark", help="Per-batch wall-clock of recon, FIF and CG objectives")
    bench.add_argument("--d", type=int, default=21)
    bench.add_argument("--D", type=int, default=43)
    bench.add_argument("--batch", type=int, default=256)
    bench.add_argument("--repeats", type=int, default=5)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--out", default=None)
    bench.add_argument("--force", action="store_true")

    arc = sub.add_parser("arc-study", help="Entropy of flat data projected onto curved arcs")
    arc.add_argument("--radii", type=_float_list, default=[0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0])
    arc.add_argument("--beta", type=float, default=1.0)
    arc.add_argument("--n", type=int, default=2000)
    arc.add_argument("--seed", type=int, default=0)
    arc.add_argument("--out", default=None)
    arc.add_argument("--force", action="store_true")
    return parser


def dispatch(args: argparse.Namespace) -> dict:
    if args.command == "train":
        return commands.cmd_train(args.config, seed=args.seed, out=args.out, force=args.force,
                                  verbose=False if args.quiet else None)
    if args.command == "phase-transition":
        return commands.cmd_phase_transition(args.config, seed=args.seed, out=args.out, force=args.force, jobs=args.jobs)
    if args.command == "variance-study":
        return commands.cmd_variance_study(d=args.d, D=args.D, kinds=args.kinds, K_list=args.K, samples=args.samples,
                                           seed=args.seed, out=args.out, force=args.force)
    if args.command == "benchmark":
        return commands.cmd_benchmark(d=args.d, D=args.D, batch=args.batch, repeats=args.repeats, seed=args.seed,
                                      out=args.out, force=args.force)
    return commands.cmd_arc_study(radii=args.radii, beta=args.beta, n=args.n, seed=args.seed, out=args.out,
                                  force=args.force)


def main(argv: Optional[List[str]] = None) -> int:
    """
    Parse arguments, run the command and return its exit code.

    Exit codes: 0 success, 2 configuration or data error, 3 numerical failure.
    """
    args = build_parser().parse_args(argv)
    result = dispatch(args)
    if not result.get('success'):
        print(f"[CLI] {args.command} failed: {result.get('error', 'unknown error')}")
        return int(result.get('exit_code', 1)) or 1
    return 0
