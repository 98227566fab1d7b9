"""Command-line interface.

Exit status is 0 on success, 1 for bad arguments, configs or input files,
and 2 when a computation fails numerically.
"""

from __future__ import annotations

import argparse
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from . import bench
from .imaging import (
    difference_image,
    learn_dictionary,
    read_dictionary,
    read_pgm,
    reconstruct_image,
    sample_patches,
    write_dictionary,
    write_pgm,
)
from .linalg import Dictionary, read_matrix, read_vector, write_matrix
from .probgen import ProblemSpec, generate, rel_mse
from .projections import DEFAULT_BETA, SparsitySet
from .solvers import SOLVERS, RecoveryProblem, SolverConfig, solve

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class NumericalError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{what} has non-finite entries")
    return arr


def cmd_gen(args):
    snr = None if args.snr is None or math.isinf(args.snr) else args.snr
    spec = ProblemSpec(args.m, args.n, args.s, snr, args.seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        D, x, y, eps = generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tag = f"m={spec.m} n={spec.n} s={spec.s} snr_db={snr} seed={spec.seed}"
    write_matrix(D.matrix, out / "matrix.txt", header=tag)
    write_matrix(x, out / "signal.txt", header=tag)
    write_matrix(y, out / "observed.txt", header=f"{tag} eps={eps!r}")
    (out / "meta.txt").write_text(f"# m n s eps seed\n{spec.m} {spec.n} {spec.s} {eps!r} {spec.seed}\n")
    print(f"wrote matrix.txt, signal.txt, observed.txt, meta.txt to {out} (eps={eps:.6g})")


def _solver_config(args):
    return SolverConfig(beta=args.beta, time_budget=args.budget, max_iters=args.max_iters)


def cmd_solve(args):
    Phi, _ = read_matrix(args.matrix_file)
    y = read_vector(args.y)
    D = Dictionary(Phi)
    problem = RecoveryProblem(D, y, SparsitySet(args.s, D.cols))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        trace = solve(args.solver, problem, _solver_config(args))
    x = _finite(trace.estimate, "estimate")
    final = trace.final
    print(f"solver={args.solver} terminated_by={trace.terminated_by} iterations={trace.iterations} "
          f"elapsed={final.elapsed:.4g}s residual_l2={final.residual_l2:.6g}")
    if args.truth:
        print(f"rel_mse={rel_mse(x, read_vector(args.truth)):.6g}")
    if args.out:
        write_matrix(x, args.out, header=f"solver={args.solver} s={args.s}")


def cmd_bench(args):
    cfg = bench.load_config(args.config)
    if cfg.suite == "tune-beta":
        raise UsageError("tune-beta configs go to the tune-beta command")
    records = bench.run_suite(cfg)
    out = args.out or cfg.output_path
    bench.emit_csv(records, out or sys.stdout)
    report = sys.stderr if not out else sys.stdout
    print("algorithm,m,n,s,snr_db,count,mean_rel_mse,median_rel_mse", file=report)
    for row in bench.summarize(records):
        print(f"{row.algorithm},{row.m},{row.n},{row.s},{row.snr_db_target:g},{row.count},"
              f"{row.mean_rel_mse:.6g},{row.median_rel_mse:.6g}", file=report)


def cmd_tune_beta(args):
    cfg = bench.load_config(args.config)
    if cfg.suite != "tune-beta":
        raise UsageError(f"expected suite = tune-beta, got {cfg.suite}")
    progress = None
    if args.verbose:
        progress = lambda b, v: print(f"beta={b:+.2f} mean_rel_mse={v:.6g}", file=sys.stderr)  # noqa: E731
    best, table = bench.tune_beta(cfg, progress)
    out = args.out or cfg.output_path
    if out:
        bench.emit_beta_table(table, out)
    print(f"best beta = {best:+.2f} (mean rel_mse {min(v for _, v in table):.6g}, {len(table)} evaluations)")


def _load_dictionary(args):
    if args.dict:
        return read_dictionary(args.dict)
    data, _ = read_matrix(args.matrix_file)
    return Dictionary(data)


def cmd_recon_image(args):
    img = read_pgm(args.image)
    D = _load_dictionary(args)
    if args.s > D.cols:
        raise UsageError(f"--s {args.s} exceeds the {D.cols} dictionary atoms")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        rec = reconstruct_image(img, D, solver=args.solver, cfg=_solver_config(args), s=args.s,
                                subtract_mean=not args.raw, workers=args.workers)
    _finite(rec.image.pixels, "reconstruction")
    write_pgm(rec.image, args.out)
    if args.diff:
        write_pgm(difference_image(img, rec.image), args.diff)
    print(f"solver={args.solver} patches={len(rec.per_patch_snr)} snr_db={rec.overall_snr_db:.4f} "
          f"precompute={rec.precompute_seconds:.3g}s wall={rec.wall_seconds:.3g}s")


def cmd_learn_dict(args):
    images = [read_pgm(p) for p in args.images]
    w = args.patch_width
    for path, img in zip(args.images, images):
        if img.height < w or img.width < w:
            raise UsageError(f"{path}: image smaller than a {w}x{w} patch")
    patches = sample_patches(images, w, args.patches, seed=args.seed)

    def report(it, err):
        print(f"iteration {it}: rel_error={err:.6g}")

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        learned = learn_dictionary(patches, args.atoms, args.s, iters=args.iters, seed=args.seed,
                                   coder_iters=args.coder_iters, beta=args.beta, callback=report)
    _finite(learned.dictionary.matrix, "dictionary")
    write_dictionary(learned.dictionary, args.out)
    print(f"wrote {args.out}: {args.atoms} atoms of {w}x{w}, rel_error={learned.rel_error:.6g}")


def build_parser():
    p = _Parser(prog="dmsparse", description="Difference Map sparse recovery toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def solver_opts(sp, budget):
        sp.add_argument("--solver", choices=sorted(SOLVERS), default="dm")
        sp.add_argument("--budget", type=float, default=budget, help="seconds per solve, after precompute")
        sp.add_argument("--beta", type=float, default=DEFAULT_BETA)
        sp.add_argument("--max-iters", type=int, default=1_000_000)

    g = sub.add_parser("gen", help="write a seeded random problem")
    g.add_argument("--m", type=int, default=400)
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--s", type=int, default=50)
    g.add_argument("--snr", type=float, default=None, help="target SNR in dB; omit for noise-free")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("solve", help="recover a sparse vector from a matrix and observations")
    s.add_argument("--matrix-file", required=True)
    s.add_argument("--y", required=True, help="observation vector file")
    s.add_argument("--s", type=int, required=True)
    s.add_argument("--truth", help="true signal, to report rel_mse")
    s.add_argument("--out", help="write the estimate here")
    solver_opts(s, 1.0)
    s.set_defaults(func=cmd_solve)

    b = sub.add_parser("bench", help="run a benchmark suite from a config file")
    b.add_argument("config")
    b.add_argument("--out", help="CSV path (overrides the config)")
    b.set_defaults(func=cmd_bench)

    t = sub.add_parser("tune-beta", help="grid-search the DM step size")
    t.add_argument("config")
    t.add_argument("--out", help="CSV path for the (beta, mean_rel_mse) table")
    t.add_argument("-v", "--verbose", action="store_true")
    t.set_defaults(func=cmd_tune_beta)

    r = sub.add_parser("recon-image", help="reconstruct a PGM image patch by patch")
    r.add_argument("--image", required=True)
    src = r.add_mutually_exclusive_group(required=True)
    src.add_argument("--dict", help="dictionary file with an atoms header")
    src.add_argument("--matrix-file", help="plain matrix file, atoms as columns")
    r.add_argument("--s", type=int, required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--diff", help="also write the difference image")
    r.add_argument("--raw", action="store_true", help="do not subtract patch means")
    r.add_argument("--workers", type=int, default=1)
    solver_opts(r, 0.1)
    r.set_defaults(func=cmd_recon_image)

    d = sub.add_parser("learn-dict", help="learn a patch dictionary from PGM images")
    d.add_argument("--images", nargs="+", required=True)
    d.add_argument("--patch-width", type=int, default=8)
    d.add_argument("--atoms", type=int, default=128)
    d.add_argument("--s", type=int, default=6)
    d.add_argument("--iters", type=int, default=20)
    d.add_argument("--patches", type=int, default=5000)
    d.add_argument("--coder-iters", type=int, default=60)
    d.add_argument("--beta", type=float, default=DEFAULT_BETA)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_learn_dict)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"dmsparse: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ValueError, LookupError, OSError) as exc:
        print(f"dmsparse: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
