"""Command-line entry point: ``quasinormal <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure, 5 external-process failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import pfg
from .config import parse_config
from .errors import QuasiNormalError

log = logging.getLogger("quasinormal")


def _out(args, default):
    return Path(args.out or default)


def _rows_csv(path, header, rows):
    from .experiment import write_csv

    write_csv(path, header, rows)


def cmd_synth(args, config):
    from .experiment import case_id
    from .synth import atlas_phantom, population, save_case, synth_case

    spec = config.phantom_spec()
    out = _out(args, "synth")
    if args.kind == "atlas":
        pfg.write_grid(out / "atlas.pfg", atlas_phantom(spec))
    elif args.kind == "population":
        d = config["data"]
        for i, img in enumerate(population(spec, d["population"], d["population_seed"])):
            pfg.write_grid(out / f"pop_{i:04d}.pfg", img)
    elif args.seed is not None:
        save_case(synth_case(args.seed, spec), out)
    else:
        for seed in config.seeds():
            save_case(synth_case(seed, spec), out / case_id(seed))
    log.info("wrote %s", out)


def cmd_build_basis(args, config):
    from .pca import build_basis, save_basis

    _, images = pfg.read_stack(args.images)
    k = args.k or config.modes(images[0].ndim, len(images))
    basis = build_basis(images, k, rescale=config["basis"]["rescale"])
    save_basis(basis, _out(args, "basis"))
    log.info("basis: %d modes from %d images, sigma_1 = %.4g",
             basis.k, len(images), basis.singular_values[0])


def cmd_impute(args, config):
    from .pca import impute_population

    paths, images = pfg.read_stack(args.images)
    _, masks = pfg.read_stack(args.masks)
    filled = impute_population(images, masks, fallback=config["basis"]["impute_fallback"])
    out = _out(args, "imputed")
    for p, img in zip(paths, filled):
        pfg.write_grid(out / (Path(p).stem + ".pfg"), img)


def cmd_decompose(args, config):
    from .decomp import DecompProblem, decompose
    from .pca import load_basis

    basis = load_basis(args.basis)
    image = pfg.read_grid(args.image)
    s = config["solver"]
    problem = DecompProblem(basis, image, s["gamma"], s["variant"], config.solver_params())
    res = decompose(problem, args.steps)
    out = _out(args, "decomposition")
    pfg.write_grid(out / "quasi_normal.pfg", res.quasi_normal)
    pfg.write_grid(out / "abnormal.pfg", res.abnormal)
    _rows_csv(out / "alpha.csv", ("mode", "alpha"),
              [(i, float(a)) for i, a in enumerate(res.alpha)])
    _rows_csv(out / "trace.csv", ("iteration", "objective"),
              [(i + 1, float(e)) for i, e in enumerate(res.energy_trace)])
    log.info("%d iterations, converged=%s", res.iterations, res.converged)


def cmd_rpca(args, config):
    from .rpca import default_lambda, rpca

    paths, images = pfg.read_stack(args.images)
    D = np.column_stack([im.flat() for im in images])
    lam = config["evaluate"]["lambda"] or default_lambda(D.shape)
    t0 = time.perf_counter()
    res = rpca(D, lam)
    wall = time.perf_counter() - t0
    out = _out(args, "rpca")
    for j, (p, im) in enumerate(zip(paths, images)):
        name = Path(p).stem + ".pfg"
        pfg.write_grid(out / "lowrank" / name, im.from_flat(res.low_rank[:, j], im.dims, im.spacing))
        pfg.write_grid(out / "sparse" / name, im.from_flat(res.sparse[:, j], im.dims, im.spacing))
    _rows_csv(out / "rpca_report.csv",
              ("iterations", "residual", "rank_est", "peak_bytes", "wall_seconds"),
              [(res.iterations, res.residual, res.rank_est, res.peak_bytes, wall)])
    log.info("rpca: %d iterations, rank %d, residual %.3g", res.iterations, res.rank_est,
             res.residual)


def _registrar(config):
    from .experiment import _registrar as make

    return make(config)


def cmd_register(args, config):
    moving = pfg.read_grid(args.moving)
    fixed = pfg.read_grid(args.fixed)
    mask = pfg.read_grid(args.mask) if args.mask else None
    field = _registrar(config)(moving, fixed, config.reg_params(mask))
    pfg.write_field(args.out or "field.pfg", field)


def cmd_pipeline(args, config):
    from .pca import load_basis
    from .registration import atlas_pipeline

    atlas = pfg.read_grid(args.atlas)
    image = pfg.read_grid(args.image)
    basis = load_basis(args.basis)
    res = atlas_pipeline(
        atlas, image, basis, config["solver"]["gamma"], args.steps,
        config["registration"]["alternations"], config.reg_params(),
        config.solver_params(), registrar=_registrar(config),
    )
    out = _out(args, "pipeline")
    pfg.write_field(out / "field.pfg", res.field)
    pfg.write_grid(out / "quasi_normal.pfg", res.quasi_normal)
    pfg.write_grid(out / "abnormal_atlas.pfg", res.abnormal_atlas)
    _rows_csv(out / "pipeline_report.csv",
              ("alternation", "objective", "solver_iterations", "converged", "residual",
               "wall_seconds"),
              [(r["alternation"], r["objective"], r["solver_iterations"],
                int(bool(r["converged"])), r["residual"], r["wall_seconds"])
               for r in res.per_iter])


def cmd_evaluate(args, config):
    from .experiment import ERRORS_HEADER, REGIONS
    from .synth import deformation_error, load_case, region_partition

    case = load_case(args.case)
    regions = region_partition(case.tumor_mask, config["evaluate"]["near_mm"])
    ref = pfg.read_field(args.reference) if args.reference else case.gt_field
    cid = Path(args.case).name
    rows = []
    fields = []
    for item in args.field:
        method, sep, path = item.partition("=")
        fields.append((method, path) if sep else (Path(item).stem, item))
    for method, path in sorted(fields):
        rep = deformation_error(pfg.read_field(path), ref, regions, cid, method)
        rows += [(cid, method, r, rep.mean_error_mm[r], rep.weighted) for r in REGIONS]
    _rows_csv(args.out or "errors.csv", ERRORS_HEADER, rows)


def cmd_crossval(args, config):
    from .experiment import crossval

    res = crossval(config, Path(args.experiment), threads=args.threads)
    out = args.out or Path(args.experiment) / "cv.csv"
    rows = [(r["fold"], r["param"], r["train_weighted"], r["test_weighted"],
             " ".join(str(i) for i in r["test_cases"])) for r in res.fold_reports]
    _rows_csv(out, ("fold", "gamma", "train_weighted", "test_weighted", "test_cases"), rows)
    log.info("selected gamma %g", res.best_param)


def cmd_run(args, config):
    from .experiment import run_experiment

    run_experiment(config, _out(args, "experiment"), threads=args.threads, only=args.only)


def cmd_report(args, config):
    from .experiment import report

    sys.stdout.write(report(args.manifest, args.csv))


def _global_flags(suppress):
    # subcommand copies must not overwrite flags given before the subcommand
    def default(v):
        return argparse.SUPPRESS if suppress else v

    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=default(None), help="INI configuration file")
    p.add_argument("--seed", type=int, default=default(None),
                   help="case seed (first seed for multi-case runs)")
    p.add_argument("--out", default=default(None), help="output path")
    p.add_argument("--threads", type=int, default=default(1))
    p.add_argument("--quiet", action="store_true", default=default(False))
    p.add_argument("--set", action="append", default=default([]), metavar="SECTION.KEY=VALUE",
                   help="override a configuration value (repeatable)")
    return p


def build_parser():
    common = _global_flags(suppress=True)
    ap = argparse.ArgumentParser(prog="quasinormal", description=__doc__.splitlines()[0],
                                 parents=[_global_flags(suppress=False)])
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help, parents=[common])
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "write synthetic phantoms")
    p.add_argument("--kind", choices=("case", "population", "atlas"), default="case")

    p = add("build-basis", cmd_build_basis, "PCA basis from a directory of normal images")
    p.add_argument("--images", required=True)
    p.add_argument("--k", type=int, default=0)

    p = add("impute", cmd_impute, "fill masked voxels of a population")
    p.add_argument("--images", required=True)
    p.add_argument("--masks", required=True)

    p = add("decompose", cmd_decompose, "split one image into quasi-normal and abnormal parts")
    p.add_argument("--basis", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--steps", type=int, default=0, help="regularization steps")
    for key, conv in (("gamma", float), ("variant", str), ("max_iter", int), ("tol", float),
                      ("tau", float), ("sigma", float), ("theta", float)):
        p.add_argument("--" + key.replace("_", "-"), dest="solver_" + key, type=conv)

    p = add("rpca", cmd_rpca, "low-rank + sparse split of an image directory")
    p.add_argument("--images", required=True)

    p = add("register", cmd_register, "register a moving image to a fixed image")
    p.add_argument("--moving", required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--mask")

    p = add("pipeline", cmd_pipeline, "alternating decompose/register atlas pipeline")
    p.add_argument("--atlas", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--basis", required=True)
    p.add_argument("--steps", type=int, default=0)

    p = add("evaluate", cmd_evaluate, "per-region deformation errors of fields")
    p.add_argument("--case", required=True, help="case directory")
    p.add_argument("--field", action="append", required=True, metavar="[METHOD=]PATH")
    p.add_argument("--reference", help="reference field; default is the case's synthetic field")

    p = add("crossval", cmd_crossval, "cross-validated gamma selection over an experiment")
    p.add_argument("--experiment", required=True)

    p = add("run", cmd_run, "full experiment: synth, basis, pipeline, evaluate")
    p.add_argument("--only", choices=("synth", "basis", "pipeline", "evaluate"))

    p = add("report", cmd_report, "summarize a finished experiment")
    p.add_argument("--manifest", required=True)
    p.add_argument("--csv", help="summary CSV path (default: summary.csv beside the manifest)")
    return ap


def load_config(args):
    overrides = list(args.set)
    if args.seed is not None and args.command == "run":
        overrides.append(f"data.seed={args.seed}")
    for key in ("gamma", "variant", "max_iter", "tol", "tau", "sigma", "theta"):
        value = getattr(args, "solver_" + key, None)
        if value is not None:
            overrides.append(f"solver.{key}={value}")
    return parse_config(args.config, overrides)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(message)s",
    )
    try:
        config = load_config(args)
        args.func(args, config)
    except QuasiNormalError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except (ValueError, OSError) as exc:
        log.error("%s", exc)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
