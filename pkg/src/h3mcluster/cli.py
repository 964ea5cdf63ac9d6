"""Command-line interface.

Exit codes: 0 on success, 2 for usage or input validation errors, 3 for
numerical failures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from functools import partial

import numpy as np

from . import formats
from .gaussian import COV_FLOOR, CovarianceError
from .h3m_em import AssignmentGroup, em_h3m, shem_h3m
from .hierclust import (
    SHEM_SAMPLES_PER_COMPONENT,
    SWEEP_COLUMNS,
    SWEEP_K,
    SWEEP_NOISE,
    build_hierarchy,
    clustering_expected_ll,
    pair_bounds,
    rand_index,
    run_job,
    sweep_cells,
)
from .hmm import FitConfig, Sequence, baum_welch, sample_frames
from .vhem import VhemConfig, vhem_reduce

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


def _threads(value) -> int:
    if value is None:
        value = os.environ.get("H3M_THREADS") or os.cpu_count() or 1
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"invalid thread count {value!r}") from None
    if n < 1:
        raise UsageError("thread count must be >= 1")
    return n


def _write_json(path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(formats.dumps(doc, indent=1))
        fh.write("\n")


def _read_json(path):
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise formats.FormatError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None


def _fit_config(args) -> FitConfig:
    return FitConfig(
        max_iters=args.max_iters,
        tol=args.tol,
        cov_floor=args.cov_floor,
        covariance_type=getattr(args, "covariance_type", "full"),
        rng_seed=args.seed,
    )


def _vhem_config(args, K_r: int = 1) -> VhemConfig:
    return VhemConfig(
        K_r=K_r,
        N_virtual=args.N,
        tau=args.tau,
        max_iters=args.max_iters,
        tol=args.tol,
        restarts=args.restarts,
        rng_seed=args.seed,
        cov_floor=args.cov_floor,
    )


def cmd_fit_hmm(args) -> int:
    seqs = formats.read_sequences(args.input)
    start = time.perf_counter()
    model, trace = baum_welch(seqs, args.S, args.M, _fit_config(args), return_trace=True)
    seconds = time.perf_counter() - start
    formats.write_model(args.output, model)
    if args.report:
        _write_json(args.report, {
            "v": 1, "loglik_trace": trace, "iterations": len(trace) - 1, "seconds": seconds,
        })
    return EXIT_OK


def cmd_fit_h3m(args) -> int:
    seqs = formats.read_sequences(args.input)
    groups = None
    if args.groups:
        doc = _read_json(args.groups)
        if not isinstance(doc, list) or not all(isinstance(g, list) for g in doc):
            raise formats.FormatError(f"{args.groups}: expected a list of id lists")
        groups = [AssignmentGroup([str(m) for m in g]) for g in doc]
    start = time.perf_counter()
    model, resp, trace = em_h3m(seqs, groups, args.K, args.S, args.M, _fit_config(args),
                                return_trace=True)
    seconds = time.perf_counter() - start
    formats.write_model(args.output, model)
    if args.report:
        _write_json(args.report, {
            "v": 1, "loglik_trace": trace, "iterations": len(trace) - 1, "seconds": seconds,
            "ids": [s.id for s in seqs], "assignments": np.argmax(resp, axis=1),
        })
    return EXIT_OK


def cmd_reduce(args) -> int:
    base = formats.read_mixture(args.model)
    if args.K_r < 1:
        raise UsageError("--K-r must be >= 1")
    start = time.perf_counter()
    if args.method == "vhem":
        reduced, state, result = vhem_reduce(base, _vhem_config(args, args.K_r))
        report = {
            "v": 1, "method": "vhem", "lower_bound_trace": state.trace,
            "converged": result.converged, "zhat": state.zhat,
            "assignments": result.assignments,
        }
    else:
        N = args.N or SHEM_SAMPLES_PER_COMPONENT * base.K
        reduced, assign, trace = shem_h3m(base, args.K_r, N, args.tau, _fit_config(args),
                                          rng_seed=args.seed, return_trace=True)
        report = {"v": 1, "method": "shem", "loglik_trace": trace, "assignments": assign}
    report["seconds"] = time.perf_counter() - start
    formats.write_model(args.output, reduced)
    if args.report:
        _write_json(args.report, report)
    return EXIT_OK


def _read_labels(path, n=None):
    doc = _read_json(path)
    if isinstance(doc, dict):
        doc = doc.get("assignments", doc.get("labels"))
    if not isinstance(doc, list):
        raise formats.FormatError(f"{path}: expected a label list or an 'assignments' field")
    if n is not None and len(doc) != n:
        raise formats.FormatError(f"{path}: {len(doc)} labels for {n} items")
    return doc


def cmd_hierarchy(args) -> int:
    base = formats.read_mixture(args.models)
    inputs = list(base.components)
    labels = [str(x) for x in _read_labels(args.labels, len(inputs))] if args.labels else None
    hier = build_hierarchy(inputs, args.levels, _vhem_config(args))
    levels, rows = [], []
    for k, lvl in enumerate(hier.levels):
        lab = hier.labels(k)
        if not np.array_equal(np.unique(lvl.assignments), np.arange(lvl.model.K)):
            raise RuntimeError(f"level {k + 1} assignment map is not surjective")
        ell = clustering_expected_ll(inputs, lvl.model, lab, args.tau)
        levels.append({
            "level": k + 1, "K": lvl.model.K, "assignments": lvl.assignments,
            "input_labels": lab, "lower_bound": lvl.lower_bound, "repaired": lvl.repaired,
            "model": formats.model_to_dict(lvl.model),
        })
        rows.append({
            "v": 1, "method": "vhem", "level": k + 1, "K": lvl.model.K,
            "rand": rand_index(labels, lab) if labels is not None else None,
            "expected_ll": ell,
        })
    _write_json(args.output, {"v": 1, "sizes": hier.sizes, "levels": levels})
    if args.metrics:
        formats.write_table(args.metrics, rows, ("v", "method", "level", "K", "rand", "expected_ll"))
    return EXIT_OK


def cmd_synth_sweep(args) -> int:
    jobs = sweep_cells(args.K, args.noise, args.scenario, args.methods, args.trials, args.seed)
    vcfg = _vhem_config(args, 4)
    work = partial(run_job, vhem_config=vcfg)
    threads = _threads(args.threads)
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(work, jobs))
    else:
        rows = [work(job) for job in jobs]
    if args.no_timing:
        for row in rows:
            row["seconds"] = None
    formats.write_table(args.output, rows, SWEEP_COLUMNS)
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.metric == "rand":
        if not (args.labels_a and args.labels_b):
            raise UsageError("rand needs --labels-a and --labels-b")
        a = [str(x) for x in _read_labels(args.labels_a)]
        b = [str(x) for x in _read_labels(args.labels_b, len(a))]
        value = rand_index(a, b)
    else:
        if not (args.inputs and args.centers):
            raise UsageError("expected-ll needs --inputs and --centers")
        inputs = list(formats.read_mixture(args.inputs).components)
        centers = formats.read_mixture(args.centers)
        if args.assignments:
            assign = np.asarray(_read_labels(args.assignments, len(inputs)), dtype=int)
            value = clustering_expected_ll(inputs, centers, assign, args.tau)
        else:
            value = float(pair_bounds(inputs, centers, args.tau).max(axis=1).sum())
    print(formats.dumps({"metric": args.metric, "value": value}))
    return EXIT_OK


def cmd_sample(args) -> int:
    mix = formats.read_mixture(args.model)
    rng = np.random.default_rng(args.seed)
    if args.component is not None:
        if not 0 <= args.component < mix.K:
            raise UsageError(f"component must be in [0, {mix.K})")
        comp = np.full(args.n, args.component)
    else:
        comp = rng.choice(mix.K, size=args.n, p=mix.omega)
    frames = np.empty((args.n, args.T, mix.d))
    for k in np.unique(comp):
        idx = np.flatnonzero(comp == k)
        frames[idx] = sample_frames(mix.components[k], idx.size, args.T, rng)
    seqs = [Sequence(frames[n], id=f"s{n}") for n in range(args.n)]
    formats.write_sequences(args.output, seqs)
    return EXIT_OK


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _positive_float(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="h3m", description="Cluster hidden Markov models.")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master random seed")
    common.add_argument("--threads", type=int, default=None,
                        help="worker processes (default: $H3M_THREADS or CPU count)")
    common.add_argument("--max-iters", type=int, default=100)
    common.add_argument("--tol", type=_positive_float, default=1e-5,
                        help="relative change that stops the iterations")
    common.add_argument("--cov-floor", type=float, default=COV_FLOOR)

    vhem = argparse.ArgumentParser(add_help=False)
    vhem.add_argument("--N", type=_positive_int, default=None,
                      help="virtual (vhem) or real (shem) sample count")
    vhem.add_argument("--tau", type=_positive_int, default=10, help="virtual sequence length")
    vhem.add_argument("--restarts", type=_positive_int, default=3)

    p = sub.add_parser("fit-hmm", parents=[common], help="Baum-Welch fit of one HMM")
    p.add_argument("--input", required=True, help="sequences (.jsonl or .csv)")
    p.add_argument("-S", type=_positive_int, required=True)
    p.add_argument("-M", type=_positive_int, default=1)
    p.add_argument("--covariance-type", choices=("full", "diag"), default="full")
    p.add_argument("--output", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_fit_hmm)

    p = sub.add_parser("fit-h3m", parents=[common], help="EM fit of a mixture of HMMs")
    p.add_argument("--input", required=True)
    p.add_argument("-K", type=_positive_int, required=True)
    p.add_argument("-S", type=_positive_int, required=True)
    p.add_argument("-M", type=_positive_int, default=1)
    p.add_argument("--groups", help="JSON list of id lists sharing one assignment")
    p.add_argument("--covariance-type", choices=("full", "diag"), default="full")
    p.add_argument("--output", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_fit_h3m)

    p = sub.add_parser("reduce", parents=[common, vhem], help="cluster the components of a mixture")
    p.add_argument("--model", required=True)
    p.add_argument("--method", choices=("vhem", "shem"), default="vhem")
    p.add_argument("--K-r", dest="K_r", type=_positive_int, required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_reduce)

    p = sub.add_parser("hierarchy", parents=[common, vhem], help="multi-level clustering")
    p.add_argument("--models", required=True, help="mixture whose components are the inputs")
    p.add_argument("--levels", type=_positive_int, nargs="+", required=True)
    p.add_argument("--labels", help="ground-truth labels (JSON list) for the Rand index")
    p.add_argument("--output", required=True)
    p.add_argument("--metrics", help="CSV with one row per level")
    p.set_defaults(func=cmd_hierarchy)

    p = sub.add_parser("synth-sweep", parents=[common, vhem], help="synthetic benchmark sweep")
    p.add_argument("--K", type=_positive_int, nargs="+", default=list(SWEEP_K))
    p.add_argument("--noise", type=_positive_float, nargs="+", default=list(SWEEP_NOISE))
    p.add_argument("--scenario", choices=("means", "variances"), nargs="+", default=["means"])
    p.add_argument("--methods", choices=("vhem", "shem"), nargs="+", default=["vhem"])
    p.add_argument("--trials", type=_positive_int, default=10)
    p.add_argument("--no-timing", action="store_true",
                   help="leave the seconds column empty so the output is byte-reproducible")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_synth_sweep)

    p = sub.add_parser("eval", parents=[vhem], help="Rand index or expected log-likelihood")
    p.add_argument("metric", choices=("rand", "expected-ll"))
    p.add_argument("--labels-a")
    p.add_argument("--labels-b")
    p.add_argument("--inputs")
    p.add_argument("--centers")
    p.add_argument("--assignments")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", help="draw sequences from a model")
    p.add_argument("--model", required=True)
    p.add_argument("-n", type=_positive_int, default=10)
    p.add_argument("-T", type=_positive_int, default=100)
    p.add_argument("--component", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_sample)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CovarianceError, np.linalg.LinAlgError, FloatingPointError, RuntimeError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
