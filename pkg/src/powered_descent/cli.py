"""Command-line front end.

Subcommands: solve, gen, augment, bench, boxplot, export-training,
verify-weights.  Global flags: --seed, --config, --threads.  Exit codes:
0 success (solve: Converged), 2 solve finished without convergence
(MaxIter/Diverged), 1 I/O, parse, or validation errors.

Configuration precedence: explicit --set overrides > --config file >
built-in defaults.  The config file is JSON with a "constants" object
whose keys are ProblemConstants field names (values in the same units as
the dataclass fields).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds_mod
from .bench import BenchReport, quartile_stats, run_benchmark
from .dataset import Dataset, split_and_standardize
from .problem import (ConstraintCatalog, ProblemConstants, ProblemInstance,
                      instance_from_json, nominal_instance)
from .scvx import scvx
from .transformer import WeightsFormatError, load_weights
from .tscvx import tscvx
from .bench import make_predictor


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return 1


def _load_constants(args) -> ProblemConstants:
    overrides = {}
    if args.config:
        with open(args.config) as fh:
            doc = json.load(fh)
        overrides.update(doc.get("constants", {}))
    for item in args.set or []:
        key, _, val = item.partition("=")
        if not _:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key] = json.loads(val)
    valid = {f.name for f in dataclasses.fields(ProblemConstants)}
    unknown = set(overrides) - valid
    if unknown:
        raise ValueError(f"unknown constants: {sorted(unknown)}")
    return ProblemConstants(**overrides)


def _apply_threads(n: int | None) -> None:
    if not n:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(n)
    except ImportError:
        pass


def _load_nn_weights(args):
    if not (getattr(args, "solution_weights", None)
            and getattr(args, "constraint_weights", None)):
        return None
    return (load_weights(args.solution_weights),
            load_weights(args.constraint_weights))


# -- solve ------------------------------------------------------------------

def cmd_solve(args) -> int:
    try:
        if args.instance == "nominal":
            inst = nominal_instance(_load_constants(args))
        else:
            text = Path(args.instance).read_text()
            inst = instance_from_json(text)
    except FileNotFoundError as exc:
        return _fail(str(exc))
    except json.JSONDecodeError as exc:
        return _fail(f"{args.instance}: parse error at line {exc.lineno} "
                     f"column {exc.colno}: {exc.msg}")
    except (ValueError, KeyError) as exc:
        return _fail(f"{args.instance}: {exc}")

    trace_sink = None
    if args.trace:
        trace_dir = Path(args.trace)
        trace_dir.mkdir(parents=True, exist_ok=True)

        def trace_sink(k, prog):
            (trace_dir / f"subproblem_{k:03d}.txt").write_text(prog.to_text())

    if args.warm == "none":
        report = scvx(inst, trace_sink=trace_sink)
    else:
        try:
            if args.warm == "weights":
                weights = _load_nn_weights(args)
                if weights is None:
                    return _fail("--warm weights needs --solution-weights "
                                 "and --constraint-weights")
                pred = make_predictor("nn", Dataset([], ""), weights=weights)
            else:
                if not args.dataset:
                    return _fail(f"--warm {args.warm} needs --dataset")
                ds = Dataset.load(args.dataset)
                if ds.param_mean is None:
                    ds = split_and_standardize(ds, seed=args.seed)
                pred = make_predictor(args.warm, ds)
        except (OSError, ValueError, WeightsFormatError) as exc:
            return _fail(str(exc))
        report = tscvx(inst, pred, trace_sink=trace_sink)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "trajectory.csv").write_text(report.solution.to_csv())
    print(f"{report.status}: {report.n_iterations} iterations, "
          f"t_f={report.solution.sigma:.4f}, "
          f"final mass={report.solution.states[-1, 0]:.4f}")
    return 0 if report.converged else 2


# -- dataset pipeline -------------------------------------------------------

def cmd_gen(args) -> int:
    try:
        consts = _load_constants(args)
    except (OSError, ValueError) as exc:
        return _fail(str(exc))
    ds = ds_mod.generate(args.count, args.seed, consts=consts,
                         profile=args.profile, log=print)
    if not ds.samples:
        return _fail("no sample converged; nothing to write")
    ds = split_and_standardize(ds, ratio=args.ratio, seed=args.split_seed,
                               paper_split=args.paper_split)
    ds.save(args.out)
    print(f"wrote {len(ds.samples)} samples to {args.out}")
    return 0


def cmd_augment(args) -> int:
    try:
        ds = Dataset.load(args.input)
    except (OSError, ValueError, KeyError) as exc:
        return _fail(str(exc))
    consts = ProblemConstants()
    have = {(s.base_id, s.angle_deg) for s in ds.samples}
    next_id = max((s.id for s in ds.samples), default=-1) + 1
    added = 0
    for s in [s for s in ds.samples if s.angle_deg == 0.0]:
        for ang in ds_mod.ROTATION_ANGLES_DEG[1:]:
            if (s.base_id, float(ang)) in have:
                continue
            ds.samples.append(ds_mod.rotate_sample(s, ang, next_id, consts.N))
            next_id += 1
            added += 1
    ds.save(args.out)
    print(f"added {added} rotated samples; wrote {len(ds.samples)} "
          f"to {args.out}")
    return 0


def cmd_export_training(args) -> int:
    try:
        ds = Dataset.load(args.dataset)
    except (OSError, ValueError, KeyError) as exc:
        return _fail(str(exc))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds_mod.export_solution_csv(ds, out / "solution.csv")
    ds_mod.export_constraint_csv(ds, out / "constraint.csv")
    print(f"wrote {out / 'solution.csv'} and {out / 'constraint.csv'}")
    return 0


# -- benchmarks -------------------------------------------------------------

def cmd_bench(args) -> int:
    try:
        ds = Dataset.load(args.dataset)
    except (OSError, ValueError, KeyError) as exc:
        return _fail(str(exc))
    if ds.param_mean is None:
        return _fail("dataset has no split tags; regenerate with `gen` or "
                     "split it first")
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    weights = None
    if "nn" in methods:
        try:
            weights = _load_nn_weights(args)
        except (OSError, WeightsFormatError) as exc:
            print(f"warning: nn method skipped: {exc}", file=sys.stderr)
            methods = [m for m in methods if m != "nn"]
        if weights is None:
            methods = [m for m in methods if m != "nn"]
    report = run_benchmark(ds, methods, weights=weights,
                           solver_instances=args.solver_instances,
                           seed=args.seed,
                           warn=lambda m: print(f"warning: {m}",
                                                file=sys.stderr))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report.to_json_dict(), indent=2))
    csv_path = out.with_suffix(".csv")
    with open(csv_path, "w") as fh:
        fh.write("method,mean_ms,median_ms,std_ms,mse,mse_in,mse_ood,"
                 "tight_accuracy,peak_alloc_mb\n")
        for name, row in report.predictor_rows.items():
            t = row["inference_ms"]
            fh.write(f"{name},{t['mean']:.6g},{t['median']:.6g},"
                     f"{t['std']:.6g},{row['mse']:.6g},"
                     f"{row['mse_in_distribution']},{row['mse_ood']},"
                     f"{row['tight_accuracy']:.6g},"
                     f"{row['peak_alloc_mb']:.6g}\n")
    if report.baseline_accuracy is not None:
        print(f"all-zeros baseline accuracy: {report.baseline_accuracy:.4f}")
    if report.solver_rows:
        for tag in ("cold", "warm"):
            r = report.solver_rows[tag]
            print(f"{tag}: mean {r['iter_stats']['mean']:.2f} iters, "
                  f"{r['time_stats']['mean']:.3f} s")
    print(f"wrote {out} and {csv_path}")
    return 0


def cmd_boxplot(args) -> int:
    rows = []
    for path in args.reports:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            return _fail(f"{path}: {exc}")
        rep = BenchReport.from_json_dict(doc)
        for tag, r in rep.solver_rows.items():
            if isinstance(r, dict) and "time_s" in r:
                rows.append((f"{Path(path).stem}:{tag}",
                             quartile_stats(r["time_s"])))
        for name, r in rep.predictor_rows.items():
            rows.append((f"{Path(path).stem}:{name}",
                         quartile_stats(r["raw"]["inference_ms"])))
    if not rows:
        return _fail("no timing arrays found in the given reports")
    out = Path(args.out)
    with open(out, "w") as fh:
        fh.write("label,n,mean,std,median,q1,q3,whisker_lo,whisker_hi,"
                 "min,max\n")
        for label, s in rows:
            fh.write(f"{label},{s['n']},{s['mean']:.9g},{s['std']:.9g},"
                     f"{s['median']:.9g},{s['q1']:.9g},{s['q3']:.9g},"
                     f"{s['whisker_lo']:.9g},{s['whisker_hi']:.9g},"
                     f"{s['min']:.9g},{s['max']:.9g}\n")
    print(f"wrote {out}")
    return 0


# -- weights ----------------------------------------------------------------

def cmd_verify_weights(args) -> int:
    try:
        weights = load_weights(args.weights)
    except (OSError, WeightsFormatError) as exc:
        return _fail(str(exc))
    print(f"{args.weights}: {weights.input_width} -> {weights.output_width}, "
          f"embed {weights.embed_dim}, {weights.n_heads} heads, "
          f"{len(weights.layers)} layers, "
          f"{weights.n_parameters()} parameters, checksums OK")
    failures = 0
    for path in args.fixtures or []:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            return _fail(f"{path}: {exc}")
        fixtures = doc if isinstance(doc, list) else [doc]
        for i, fx in enumerate(fixtures):
            got = weights.forward(np.array(fx["input"], dtype=float))
            want = np.array(fx["logits"], dtype=float)
            tol = float(fx.get("tolerance", 1e-4))
            err = float(np.max(np.abs(got - want))) if want.size else 0.0
            ok = got.shape == want.shape and err <= tol
            print(f"{path}[{i}]: max |err| {err:.3e} "
                  f"(tol {tol:g}) {'OK' if ok else 'FAIL'}")
            failures += 0 if ok else 1
    if failures:
        return _fail(f"{failures} fixture(s) failed")
    return 0


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="pdg",
        description="6-DoF minimum-fuel powered descent guidance: "
                    "successive convexification with predicted "
                    "tight-constraint warm starts.")
    p.add_argument("--seed", type=int, default=0, help="global RNG seed")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one constants field (repeatable)")
    p.add_argument("--threads", type=int, help="cap numeric library threads")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("solve", help="solve one instance")
    sp.add_argument("instance", help="instance JSON file, or 'nominal'")
    sp.add_argument("--warm", choices=("none", "kdtree", "interp", "weights"),
                    default="none")
    sp.add_argument("--dataset", help="dataset file for lookup predictors")
    sp.add_argument("--solution-weights")
    sp.add_argument("--constraint-weights")
    sp.add_argument("--trace", help="directory for per-iteration "
                    "subproblem dumps")
    sp.add_argument("--out", default="solve-out")
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("gen", help="generate a labeled dataset")
    sp.add_argument("--count", type=int, required=True,
                    help="number of base draws before augmentation")
    sp.add_argument("--profile", choices=("desk", "paper"), default="desk")
    sp.add_argument("--ratio", type=float, default=0.8)
    sp.add_argument("--split-seed", type=int, default=0)
    sp.add_argument("--paper-split", action="store_true",
                    help="split after augmentation (leakage-prone, "
                    "for comparison)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("augment", help="add missing rotations to a dataset")
    sp.add_argument("input")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_augment)

    sp = sub.add_parser("bench", help="benchmark predictors and solvers")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--methods", default="kdtree,interp")
    sp.add_argument("--solver-instances", type=int, default=0,
                    help="also run paired cold/warm solves on this many "
                    "dataset instances")
    sp.add_argument("--solution-weights")
    sp.add_argument("--constraint-weights")
    sp.add_argument("--out", default="bench.json")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("boxplot", help="quartile/whisker CSV from reports")
    sp.add_argument("reports", nargs="+")
    sp.add_argument("--out", default="boxplot.csv")
    sp.set_defaults(func=cmd_boxplot)

    sp = sub.add_parser("export-training",
                        help="CSV exports for the offline trainer")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out-dir", default="training-csv")
    sp.set_defaults(func=cmd_export_training)

    sp = sub.add_parser("verify-weights",
                        help="validate a weights file and parity fixtures")
    sp.add_argument("weights")
    sp.add_argument("--fixtures", nargs="*")
    sp.set_defaults(func=cmd_verify_weights)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _apply_threads(args.threads)
    np.random.seed(args.seed % 2 ** 32)
    try:
        return args.func(args)
    except ValueError as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
