"""End-to-end quasi-tumor experiment: synth -> basis -> per-case arms -> evaluate.

Everything written under the experiment directory is a deterministic function
of the configuration. Wall-clock times live in ``timings.json`` beside the
manifest so that ``manifest.json`` itself stays byte-reproducible.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, pfg
from .config import ARMS, RunConfig
from .decomp import SolverParams
from .errors import ManifestError, QuasiNormalError, StageError
from .grid import Grid
from .pca import build_basis, load_basis, save_basis
from .registration import alternate, atlas_pipeline, external_register, register
from .rpca import default_lambda, rpca
from .synth import (
    REGION_NAMES,
    atlas_phantom,
    deformation_error,
    load_case,
    population,
    region_partition,
    save_case,
    synth_case,
)

log = logging.getLogger(__name__)

STAGES = ("synth", "basis", "pipeline", "evaluate")
ERRORS_HEADER = ("case_id", "method_id", "region", "mean_error_mm", "weighted")
PIPELINE_HEADER = ("case_id", "method_id", "alternation", "objective", "solver_iterations",
                   "converged", "residual", "wall_seconds")
REGIONS = tuple(REGION_NAMES.values())


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _fmt(x):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "NA"
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    _atomic_write(path, buf.getvalue())


def case_id(seed):
    return f"case_{seed:04d}"


class Layout:
    def __init__(self, root):
        self.root = Path(root)

    def __getattr__(self, name):
        raise AttributeError(name)

    @property
    def atlas(self):
        return self.root / "atlas.pfg"

    @property
    def population(self):
        return self.root / "population"

    @property
    def cases(self):
        return self.root / "cases"

    @property
    def basis(self):
        return self.root / "basis"

    def field(self, cid, arm):
        return self.root / "fields" / cid / f"{arm}.pfg"

    def quasi(self, cid, arm):
        return self.root / "quasi" / cid / f"{arm}.pfg"

    @property
    def errors(self):
        return self.root / "errors.csv"

    @property
    def pipeline_report(self):
        return self.root / "pipeline_report.csv"

    @property
    def manifest(self):
        return self.root / "manifest.json"

    @property
    def timings(self):
        return self.root / "timings.json"


def _registrar(config: RunConfig):
    template = config["external"]["command_template"]
    if not template:
        return register

    def run(moving: Grid, fixed: Grid, params):
        if params.mask is not None:
            raise QuasiNormalError("the external registrar does not take a mask")
        with tempfile.TemporaryDirectory() as tmp:
            mp, fp = Path(tmp) / "moving.pfg", Path(tmp) / "fixed.pfg"
            pfg.write_grid(mp, moving)
            pfg.write_grid(fp, fixed)
            return external_register(mp, fp, template)

    return run


def lrs_decomposer(population_matrix, lam):
    """RPCA of the normal columns plus the case; the case's sparse column is the abnormal part."""

    def run(image):
        D = np.column_stack([population_matrix, image.flat()])
        res = rpca(D, lam if lam > 0 else default_lambda(D.shape))
        S = Grid.from_flat(res.sparse[:, -1], image.dims, image.spacing)
        info = dict(objective=float("nan"), iterations=res.iterations,
                    converged=res.converged, peak_bytes=res.peak_bytes)
        return S, info

    return run


def run_arm(arm, case, atlas, basis, pop_matrix, config: RunConfig):
    """Register the atlas to one case with one method; returns (field, quasi, rows, peak)."""
    reg = config.reg_params()
    registrar = _registrar(config)
    alternations = config["registration"]["alternations"]
    if arm == "direct":
        return registrar(atlas, case.tumor_image, reg), case.tumor_image, [], 0
    if arm == "masked":
        return registrar(atlas, case.tumor_image, config.reg_params(case.tumor_mask)), \
            case.tumor_image, [], 0
    if arm == "rpca":
        peaks = []
        base = lrs_decomposer(pop_matrix, config["evaluate"]["lambda"])

        def dec(image):
            S, info = base(image)
            peaks.append(info["peak_bytes"])
            return S, info

        res = alternate(atlas, case.tumor_image, dec, alternations, reg, registrar)
        return res.field, res.quasi_normal, res.per_iter, max(peaks)
    if arm.startswith("pca"):
        steps = int(arm[3:])
        res = atlas_pipeline(
            atlas, case.tumor_image, basis, config["solver"]["gamma"], steps, alternations,
            reg, config.solver_params(), registrar=registrar,
        )
        peak = max(r.get("peak_bytes", 0) for r in res.per_iter)
        return res.field, res.quasi_normal, res.per_iter, peak
    raise ValueError(f"unknown arm {arm!r}")


# -- stages -------------------------------------------------------------------

def stage_synth(config: RunConfig, lay: Layout):
    spec = config.phantom_spec()
    pfg.write_grid(lay.atlas, atlas_phantom(spec))
    lay.population.mkdir(parents=True, exist_ok=True)
    d = config["data"]
    for i, img in enumerate(population(spec, d["population"], d["population_seed"])):
        pfg.write_grid(lay.population / f"pop_{i:04d}.pfg", img)
    for seed in config.seeds():
        save_case(synth_case(seed, spec), lay.cases / case_id(seed))
    return {}


def _population(lay):
    paths, images = pfg.read_stack(lay.population)
    return images


def stage_basis(config: RunConfig, lay: Layout):
    images = _population(lay)
    k = config.modes(images[0].ndim, len(images))
    basis = build_basis(images, k, rescale=config["basis"]["rescale"])
    save_basis(basis, lay.basis)
    m, n = images[0].size, len(images)
    return {"peak_bytes": {"basis": int(m * n * 8 * 2 + basis.nbytes())}}


def stage_pipeline(config: RunConfig, lay: Layout, threads=1):
    atlas = pfg.read_grid(lay.atlas)
    basis = load_basis(lay.basis)
    images = _population(lay)
    n_lrs = min(config["evaluate"]["rpca_population"], len(images))
    pop_matrix = np.column_stack([im.flat() for im in images[:n_lrs]])
    arms = [a for a in ARMS if a in config["evaluate"]["arms"]]
    reference = config["evaluate"]["reference"]

    def one_case(seed):
        cid = case_id(seed)
        case = load_case(lay.cases / cid)
        rows, peaks, walls = [], {}, {}
        if reference == "registered":
            ref = _registrar(config)(atlas, case.normal, config.reg_params())
        else:
            ref = case.gt_field
        pfg.write_field(lay.field(cid, "reference"), ref)
        for arm in arms:
            t0 = time.perf_counter()
            try:
                field, quasi, per_iter, peak = run_arm(arm, case, atlas, basis, pop_matrix, config)
            except QuasiNormalError as exc:
                raise StageError(f"{cid}/{arm}", exc) from exc
            walls[arm] = time.perf_counter() - t0
            peaks[arm] = int(peak)
            pfg.write_field(lay.field(cid, arm), field)
            pfg.write_grid(lay.quasi(cid, arm), quasi)
            for r in per_iter:
                rows.append((cid, arm, r["alternation"], r["objective"], r["solver_iterations"],
                             int(bool(r["converged"])), r["residual"], r["wall_seconds"]))
        return cid, rows, peaks, walls

    seeds = config.seeds()
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one_case, seeds))
    else:
        results = [one_case(s) for s in seeds]

    rows = [r for _, case_rows, _, _ in results for r in case_rows]
    # holds wall times, so the manifest lists it under "not_digested" without a digest
    write_csv(lay.pipeline_report, PIPELINE_HEADER, rows)
    peak = {arm: max(p[arm] for _, _, p, _ in results) for arm in arms}
    walls = {arm: [w[arm] for _, _, _, w in results] for arm in arms}
    return {"peak_bytes": peak, "_walls": walls}


def stage_evaluate(config: RunConfig, lay: Layout):
    arms = [a for a in ARMS if a in config["evaluate"]["arms"]]
    rows = []
    for seed in config.seeds():
        cid = case_id(seed)
        case = load_case(lay.cases / cid)
        regions = region_partition(case.tumor_mask, config["evaluate"]["near_mm"])
        ref = pfg.read_field(lay.field(cid, "reference"))
        for arm in sorted(arms):
            rep = deformation_error(pfg.read_field(lay.field(cid, arm)), ref, regions, cid, arm)
            for region in REGIONS:
                rows.append((cid, arm, region, rep.mean_error_mm[region], rep.weighted))
    write_csv(lay.errors, ERRORS_HEADER, rows)
    return {}


def _stage_files(lay: Layout, stage, config):
    """(inputs, outputs) path lists of a stage, relative to the experiment root."""
    cases = [lay.cases / case_id(s) for s in config.seeds()]
    arms = [a for a in ARMS if a in config["evaluate"]["arms"]]

    def files(dirs):
        out = []
        for d in dirs:
            d = Path(d)
            if d.is_dir():
                out += sorted(p for p in d.rglob("*") if p.is_file())
            elif d.exists():
                out.append(d)
        return out

    case_files = files(cases)
    fields = [lay.field(case_id(s), a) for s in config.seeds() for a in arms + ["reference"]]
    quasi = [lay.quasi(case_id(s), a) for s in config.seeds() for a in arms]
    table = {
        "synth": ([], [lay.atlas] + files([lay.population]) + case_files),
        "basis": (files([lay.population]), files([lay.basis])),
        "pipeline": ([lay.atlas] + files([lay.basis, lay.population]) + case_files,
                     fields + quasi),
        "evaluate": (case_files + fields, [lay.errors]),
    }
    return table[stage]


def _digests(paths, root):
    return {str(Path(p).relative_to(root)): sha256(p) for p in paths if Path(p).exists()}


def run_experiment(config: RunConfig, out_dir, threads=1, only=None):
    """Run all stages (or just ``only``) and write manifest.json + timings.json."""
    lay = Layout(out_dir)
    lay.root.mkdir(parents=True, exist_ok=True)
    stages = STAGES if only is None else (only,)
    manifest = _load_manifest(lay) if only is not None else None
    if manifest is None:
        manifest = {
            "tool": "quasinormal",
            "version": __version__,
            "config": config.to_text(),
            "seeds": config.seeds(),
            "stages": {},
            "not_digested": ["pipeline_report.csv", "timings.json"],
            "failed_stage": None,
        }
    timings = _load_json(lay.timings) if only is not None else {}
    timings = timings or {"stages": {}, "arms": {}}
    runners = {
        "synth": lambda: stage_synth(config, lay),
        "basis": lambda: stage_basis(config, lay),
        "pipeline": lambda: stage_pipeline(config, lay, threads),
        "evaluate": lambda: stage_evaluate(config, lay),
    }
    for stage in stages:
        log.info("stage %s", stage)
        t0 = time.perf_counter()
        try:
            extra = runners[stage]()
        except Exception as exc:
            manifest["failed_stage"] = stage
            _write_manifest(lay, manifest, timings)
            if isinstance(exc, QuasiNormalError):
                raise
            raise StageError(f"stage {stage}", exc) from exc
        timings["stages"][stage] = time.perf_counter() - t0
        walls = extra.pop("_walls", None)
        if walls:
            timings["arms"] = walls
        inputs, outputs = _stage_files(lay, stage, config)
        manifest["stages"][stage] = {
            "inputs": _digests(inputs, lay.root),
            "outputs": _digests(outputs, lay.root),
            **extra,
        }
    manifest["failed_stage"] = None
    _write_manifest(lay, manifest, timings)
    return manifest


def _load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, ValueError):
        return None


def _load_manifest(lay):
    return _load_json(lay.manifest)


def _write_manifest(lay, manifest, timings):
    _atomic_write(lay.manifest, json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    _atomic_write(lay.timings, json.dumps(timings, indent=1, sort_keys=True) + "\n")


# -- report -------------------------------------------------------------------

def verify_manifest(manifest_path):
    path = Path(manifest_path)
    manifest = _load_json(path)
    if manifest is None:
        raise ManifestError(f"{path}: unreadable manifest", path)
    root = path.parent
    for stage, info in manifest.get("stages", {}).items():
        for kind in ("inputs", "outputs"):
            for rel, digest in info.get(kind, {}).items():
                f = root / rel
                if not f.exists():
                    raise ManifestError(f"{rel}: missing ({stage} {kind})", rel)
                if sha256(f) != digest:
                    raise ManifestError(f"{rel}: digest mismatch ({stage} {kind})", rel)
    return manifest


def report(manifest_path, out_csv=None):
    """Per-method per-region mean and sd over cases, plus a cost table."""
    manifest = verify_manifest(manifest_path)
    root = Path(manifest_path).parent
    with open(root / "errors.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    values = {}
    for r in rows:
        key = (r["method_id"], r["region"])
        v = float("nan") if r["mean_error_mm"] == "NA" else float(r["mean_error_mm"])
        values.setdefault(key, []).append(v)
        wkey = (r["method_id"], "weighted")
        if r["region"] == REGIONS[0]:
            w = float("nan") if r["weighted"] == "NA" else float(r["weighted"])
            values.setdefault(wkey, []).append(w)
    summary = []
    for (method, region), vs in sorted(values.items()):
        arr = np.asarray(vs, dtype=float)
        arr = arr[~np.isnan(arr)]
        mean = float(arr.mean()) if arr.size else float("nan")
        sd = float(arr.std(ddof=1)) if arr.size > 1 else None
        summary.append((method, region, arr.size, mean, sd))
    out_csv = Path(out_csv) if out_csv else root / "summary.csv"
    write_csv(out_csv, ("method_id", "region", "n", "mean_error_mm", "sd"), summary)

    timings = _load_json(root / "timings.json") or {}
    peaks = manifest.get("stages", {}).get("pipeline", {}).get("peak_bytes", {})
    walls = timings.get("arms", {})
    lines = ["method     region    n   mean[mm]   sd"]
    for method, region, n, mean, sd in summary:
        lines.append(f"{method:<10} {region:<9} {n:<3} {mean:9.4f}  {_fmt(sd)}")
    lines.append("")
    lines.append("arm        wall[s]/case  peak_bytes")
    for arm in sorted(peaks):
        w = walls.get(arm) or []
        mw = float(np.mean(w)) if w else float("nan")
        lines.append(f"{arm:<10} {mw:12.3f}  {peaks[arm]}")
    return "\n".join(lines) + "\n"


# -- cross-validation -----------------------------------------------------------

def crossval(config: RunConfig, experiment_dir, threads=1):
    """Fold-wise gamma selection for the configured PCA arm over an experiment's cases.

    Needs the synth and basis stages; the reference field of each case is
    taken from the pipeline stage when present and recomputed otherwise.
    """
    from .synth import cross_validate

    lay = Layout(experiment_dir)
    atlas = pfg.read_grid(lay.atlas)
    basis = load_basis(lay.basis)
    arm = config["evaluate"]["crossval_arm"]
    steps = int(arm[3:])
    cids = sorted(p.name for p in lay.cases.iterdir() if p.is_dir())
    near = config["evaluate"]["near_mm"]

    def prepare(cid):
        case = load_case(lay.cases / cid)
        ref_path = lay.field(cid, "reference")
        if ref_path.exists():
            ref = pfg.read_field(ref_path)
        elif config["evaluate"]["reference"] == "registered":
            ref = _registrar(config)(atlas, case.normal, config.reg_params())
        else:
            ref = case.gt_field
        return cid, case, ref, region_partition(case.tumor_mask, near)

    prepared = [prepare(c) for c in cids]
    grid = sorted(config["evaluate"]["gamma_grid"])

    def evaluate_one(item):
        (cid, case, ref, regions), gamma = item
        res = atlas_pipeline(
            atlas, case.tumor_image, basis, gamma, steps,
            config["registration"]["alternations"], config.reg_params(),
            config.solver_params(), registrar=_registrar(config),
        )
        return deformation_error(res.field, ref, regions, cid, arm)

    jobs = [(p, g) for p in prepared for g in grid]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            reports = list(pool.map(evaluate_one, jobs))
    else:
        reports = [evaluate_one(j) for j in jobs]
    table = dict(zip([(p[0], g) for p, g in jobs], reports))
    return cross_validate(
        cids, lambda cid, g: table[cid, g], grid, config["evaluate"]["folds"]
    )
