"""Seeded quasi-tumor phantoms and registration-error scoring.

A phantom is a stack of nested smooth ellipses (scalp, gray matter, a wavy
white-matter core, two ventricles). Normal population images jitter the
shape and intensity parameters; a test case additionally warps its phantom by
a smooth random deformation, pushes tissue away from a tumor center, and pastes
a ring-enhancing tumor into the warped image.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import pfg
from .errors import DimensionMismatch, ParseFailure, SpecInvalid
from .grid import Grid, VectorField
from .registration import compose, warp

TUMOR, NEAR, FAR = 1, 2, 3
REGION_NAMES = {TUMOR: "tumor", NEAR: "near", FAR: "far"}
REGION_WEIGHTS = {"tumor": 4.0, "near": 1.0, "far": 1.0}
NEAR_MM = 10.0


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (48, 48)
    spacing: tuple = (1.0, 1.0)
    max_disp: float = 3.0  # mm, cap for the random warp and the mass effect
    tumor_radius: tuple = (0.1, 0.16)  # fraction of the smallest extent
    rim_intensity: float = 1.3  # enhancing rim; the core is 0.2
    tumor_contrast: float = 1.0
    mass_effect: float = 0.4  # peak push as a fraction of the tumor radius
    noise: float = 0.01
    max_bumps: int = 5

    def validate(self):
        if len(self.dims) not in (2, 3) or len(self.spacing) != len(self.dims):
            raise SpecInvalid(f"dims {self.dims} / spacing {self.spacing} unsupported")
        if any(n < 32 for n in self.dims):
            raise SpecInvalid(f"phantoms need at least 32 voxels per axis, got {self.dims}")
        if any(s <= 0 for s in self.spacing) or self.max_disp < 0 or self.noise < 0:
            raise SpecInvalid("spacing must be positive; max_disp and noise nonnegative")
        lo, hi = self.tumor_radius
        if not 0 < lo <= hi < 0.5:
            raise SpecInvalid(f"tumor_radius {self.tumor_radius} out of range")
        if not 1 <= self.max_bumps:
            raise SpecInvalid("max_bumps must be >= 1")


@dataclass(eq=False)
class CaseBundle:
    normal: Grid
    tumor_mask: Grid
    tumor_image: Grid
    gt_field: VectorField
    seed: int
    base: Grid = None  # un-warped phantom, warp(base, gt_field) ~ normal
    meta: dict = field(default_factory=dict)


@dataclass
class ErrorReport:
    mean_error_mm: dict
    weighted: float
    case_id: str = ""
    method_id: str = ""


# -- phantom geometry ---------------------------------------------------------

def _coords(dims):
    """Normalized coordinates in [-1, 1] per axis."""
    return np.stack(
        np.meshgrid(*[np.linspace(-1.0, 1.0, n) for n in dims], indexing="ij")
    )


def _step(d, width):
    return 0.5 * (1.0 + np.tanh(d / width))


def _ellipse(X, center, radii, half_extent, width=0.7, wobble=None):
    r = np.sqrt(sum(((X[c] - center[c]) / radii[c]) ** 2 for c in range(len(radii))))
    if wobble is not None:
        amp, freq, phase = wobble
        theta = np.arctan2(X[1] - center[1], X[0] - center[0])
        r = r / (1.0 + amp * np.cos(freq * theta + phase))
    # signed distance in voxels, approximately
    d = (1.0 - r) * min(radii) * half_extent
    return _step(d, width)


def _phantom_params(ndim, rng=None):
    j = (lambda scale, size=None: rng.normal(0.0, scale, size)) if rng is not None else (
        lambda scale, size=None: np.zeros(size) if size is not None else 0.0
    )
    head = np.array([0.86, 0.94, 0.86][:ndim]) * (1 + j(0.02, ndim))
    return dict(
        head=head,
        brain=head * 0.9 * (1 + j(0.015, ndim)),
        wm=head * np.array([0.58, 0.62, 0.58][:ndim]) * (1 + j(0.04, ndim)),
        wm_wobble=(0.1 + j(0.025), 7.0, 0.4 * float(j(1.0))),
        vent_offset=np.array([0.16, 0.06, 0.0][:ndim]) + j(0.02, ndim),
        vent_radii=np.array([0.09, 0.2, 0.09][:ndim]) * (1 + j(0.12, ndim)),
        intensities=np.array([0.35, 0.55, 0.85, 0.15]) + j(0.025, 4),
    )


def base_phantom(dims, spacing=None, rng=None, noise=0.0) -> Grid:
    """Brain-like phantom; ``rng=None`` gives the zero-jitter atlas."""
    dims = tuple(int(n) for n in dims)
    X = _coords(dims)
    half = min(dims) / 2.0
    p = _phantom_params(len(dims), rng)
    zero = np.zeros(len(dims))
    i_skull, i_gm, i_wm, i_vent = p["intensities"]
    head = _ellipse(X, zero, p["head"], half)
    brain = _ellipse(X, zero, p["brain"], half)
    wm = _ellipse(X, zero, p["wm"], half, wobble=p["wm_wobble"])
    img = i_skull * head + (i_gm - i_skull) * brain + (i_wm - i_gm) * wm
    for side in (-1.0, 1.0):
        c = p["vent_offset"].copy()
        c[0] *= side
        vent = _ellipse(X, c, p["vent_radii"], half)
        img = img + (i_vent - i_wm) * vent * wm
    if noise > 0 and rng is not None:
        img = img + rng.normal(0.0, noise, dims)
    return Grid(img, spacing)


def atlas_phantom(spec: PhantomSpec = PhantomSpec()) -> Grid:
    spec.validate()
    return base_phantom(spec.dims, spec.spacing)


def population(spec: PhantomSpec, n: int, seed: int = 10_000):
    """``n`` normal phantoms already in atlas space (seeded individually)."""
    spec.validate()
    return [
        base_phantom(spec.dims, spec.spacing, np.random.default_rng(seed + i), spec.noise)
        for i in range(n)
    ]


def _smooth_field(rng, spec: PhantomSpec):
    dims = spec.dims
    d = len(dims)
    idx = np.indices(dims, dtype=np.float64)
    pos = np.stack([idx[c] * spec.spacing[c] for c in range(d)])
    extent = np.array([n * s for n, s in zip(dims, spec.spacing)])
    u = np.zeros((d,) + tuple(dims))
    for _ in range(int(rng.integers(1, spec.max_bumps + 1))):
        center = extent * rng.uniform(0.25, 0.75, d)
        width = min(extent) * rng.uniform(0.15, 0.3)
        direction = rng.normal(size=d)
        direction /= np.linalg.norm(direction)
        r2 = sum((pos[c] - center[c]) ** 2 for c in range(d))
        g = np.exp(-0.5 * r2 / width**2)
        for c in range(d):
            u[c] += direction[c] * g
    peak = np.sqrt(np.sum(u**2, axis=0)).max()
    if peak > 0:
        u *= spec.max_disp * rng.uniform(0.5, 1.0) / peak
    return u, pos


def _mass_effect(pos, center, radius, amplitude):
    """Pull-back field of tissue pushed radially away from ``center``."""
    d = pos.shape[0]
    diff = np.stack([pos[c] - center[c] for c in range(d)])
    r = np.sqrt(np.sum(diff**2, axis=0))
    q = r / radius
    mag = amplitude * q * np.exp(0.5 * (1.0 - q * q))
    taper = np.clip((2.0 - q) / 0.5, 0.0, 1.0)
    mag = mag * taper
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(r > 0, diff / np.where(r > 0, r, 1.0), 0.0)
    return -mag * unit


def synth_case(seed: int, spec: PhantomSpec = PhantomSpec()) -> CaseBundle:
    """Deterministic quasi-tumor test case."""
    spec.validate()
    rng = np.random.default_rng(seed)
    dims = tuple(spec.dims)
    d = len(dims)
    base = base_phantom(dims, spec.spacing, rng)
    u_smooth, pos = _smooth_field(rng, spec)

    # tumor placed inside the brain, away from the scalp
    extent = np.array([n * s for n, s in zip(dims, spec.spacing)])
    mid = extent / 2.0
    radius = min(extent) * rng.uniform(*spec.tumor_radius)
    offset = rng.normal(size=d)
    offset /= np.linalg.norm(offset)
    center = mid + offset * rng.uniform(0.1, 0.45) * (min(extent) / 2.0 - radius)
    axes = radius * (1.0 + rng.uniform(-0.1, 0.1, d))
    amplitude = min(spec.mass_effect * radius, spec.max_disp)
    u_mass = _mass_effect(pos, center, radius, amplitude)

    gt = compose(VectorField(u_smooth, spec.spacing), VectorField(u_mass, spec.spacing))
    clean = warp(base, gt)
    noisy = clean.data + (rng.normal(0.0, spec.noise, dims) if spec.noise > 0 else 0.0)
    normal = clean.like(noisy)

    r_eff = np.sqrt(sum(((pos[c] - center[c]) / axes[c]) ** 2 for c in range(d)))
    mask = (r_eff <= 1.0).astype(np.float64)
    rim = 0.5 + 0.5 * np.tanh((r_eff - 0.6) / 0.08)
    appearance = 0.2 + (spec.rim_intensity - 0.2) * rng.uniform(0.9, 1.0) * rim
    contrast = spec.tumor_contrast * rng.uniform(0.75, 1.0)
    weight = np.clip((1.0 - r_eff) * min(axes) / min(spec.spacing) + 0.5, 0.0, 1.0) * mask
    tumor = normal.data + contrast * weight * (appearance - normal.data)
    tumor = np.where(mask > 0, tumor, normal.data)

    meta = dict(
        seed=int(seed),
        spec=asdict(spec),
        tumor_center_mm=[float(c) for c in center],
        tumor_radius_mm=float(radius),
        tumor_contrast=float(contrast),
        mass_effect_mm=float(amplitude),
    )
    return CaseBundle(
        normal=normal,
        tumor_mask=normal.like(mask),
        tumor_image=normal.like(tumor),
        gt_field=gt,
        seed=int(seed),
        base=base,
        meta=meta,
    )


def save_case(case: CaseBundle, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pfg.write_grid(directory / "normal.pfg", case.normal)
    pfg.write_grid(directory / "tumor_mask.pfg", case.tumor_mask)
    pfg.write_grid(directory / "tumor_image.pfg", case.tumor_image)
    pfg.write_field(directory / "gt_field.pfg", case.gt_field)
    if case.base is not None:
        pfg.write_grid(directory / "base.pfg", case.base)
    (directory / "case.meta").write_text(json.dumps(case.meta, indent=1, sort_keys=True) + "\n")


def load_case(directory) -> CaseBundle:
    directory = Path(directory)
    try:
        meta = json.loads((directory / "case.meta").read_text())
    except (OSError, ValueError) as exc:
        raise ParseFailure(f"{directory}/case.meta: {exc}") from None
    base = directory / "base.pfg"
    return CaseBundle(
        normal=pfg.read_grid(directory / "normal.pfg"),
        tumor_mask=pfg.read_grid(directory / "tumor_mask.pfg"),
        tumor_image=pfg.read_grid(directory / "tumor_image.pfg"),
        gt_field=pfg.read_field(directory / "gt_field.pfg"),
        seed=int(meta.get("seed", -1)),
        base=pfg.read_grid(base) if base.exists() else None,
        meta=meta,
    )


def disk_anomaly_case(seed: int, basis, background: Grid, amplitude=0.5, radius=(3.0, 5.0)):
    """Disk anomaly on the basis-spanned part of ``background``.

    Returns ``(image, truth, mask)``: ``truth`` is the projection of
    ``background`` onto the basis (exactly representable normal appearance)
    and ``image = truth + amplitude * mask``. The disk center lies where
    ``truth > 0.3`` and at least six voxels from the border.
    """
    from .pca import project, reconstruct

    rng = np.random.default_rng(seed)
    truth = reconstruct(basis, project(basis, background))
    inner = tuple(slice(6, n - 6) for n in truth.dims)
    candidates = np.argwhere(truth.data[inner] > 0.3) + 6
    if len(candidates) == 0:
        raise SpecInvalid("background has no interior tissue for the disk")
    center = candidates[rng.integers(len(candidates))]
    r = rng.uniform(*radius)
    idx = np.indices(truth.dims)
    dist2 = sum(((idx[c] - center[c]) * truth.spacing[c]) ** 2 for c in range(truth.ndim))
    mask = (dist2 <= r * r).astype(np.float64)
    return truth.like(truth.data + amplitude * mask), truth, truth.like(mask)


# -- scoring ------------------------------------------------------------------

def region_partition(tumor_mask: Grid, near_mm: float = NEAR_MM) -> Grid:
    """Label voxels TUMOR (mask), NEAR (within ``near_mm`` of it) or FAR."""
    if not near_mm > 0:
        raise ValueError("near_mm must be positive")
    inside = tumor_mask.data > 0.5
    labels = np.full(tumor_mask.dims, FAR, dtype=np.float64)
    if inside.any():
        dist = ndimage.distance_transform_edt(~inside, sampling=tumor_mask.spacing)
        labels[(dist <= near_mm) & ~inside] = NEAR
        labels[inside] = TUMOR
    return tumor_mask.like(labels)


def weighted_error(errors: dict) -> float:
    """Tumor, near and far errors weighted 4, 1, 1; NaN if a region is missing."""
    total = sum(REGION_WEIGHTS.values())
    return sum(REGION_WEIGHTS[k] * errors[k] for k in REGION_WEIGHTS) / total


def deformation_error(field: VectorField, gt: VectorField, regions: Grid,
                      case_id="", method_id="") -> ErrorReport:
    """Per-region mean Euclidean discrepancy (mm) between two fields."""
    if field.dims != gt.dims or field.dims != regions.dims:
        raise DimensionMismatch("field, ground truth and regions must share dims")
    err = np.sqrt(np.sum((field.data - gt.data) ** 2, axis=0))
    means = {}
    for label, name in REGION_NAMES.items():
        sel = regions.data == label
        means[name] = float(err[sel].mean()) if sel.any() else float("nan")
    return ErrorReport(means, weighted_error(means), case_id, method_id)


def dice(a: Grid, b: Grid) -> float:
    if a.dims != b.dims:
        raise DimensionMismatch(f"dims {a.dims} vs {b.dims}")
    A = a.data > 0.5
    B = b.data > 0.5
    total = A.sum() + B.sum()
    if total == 0:
        return 1.0
    return 2.0 * float(np.logical_and(A, B).sum()) / float(total)


@dataclass
class CrossValResult:
    best_param: float
    fold_reports: list


def cross_validate(cases, evaluate, param_grid, folds: int) -> CrossValResult:
    """Pick the parameter with the smallest mean weighted training error per fold.

    ``evaluate(case, param) -> ErrorReport``. Case ``i`` belongs to fold
    ``i % folds``. Each (case, param) pair is evaluated once.
    """
    cases = list(cases)
    grid = sorted(float(g) for g in param_grid)
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if len(cases) < folds:
        raise ValueError(f"{len(cases)} cases cannot fill {folds} folds")
    if not grid:
        raise ValueError("empty parameter grid")
    table = {}
    for i, case in enumerate(cases):
        for g in grid:
            try:
                table[i, g] = evaluate(case, g)
            except Exception as exc:
                from .errors import StageError

                raise StageError(f"case {i} param {g}", exc) from exc
    fold_reports = []
    for f in range(folds):
        train = [i for i in range(len(cases)) if i % folds != f]
        test = [i for i in range(len(cases)) if i % folds == f]
        scores = {g: float(np.mean([table[i, g].weighted for i in train])) for g in grid}
        best = min(grid, key=lambda g: (scores[g], g))
        fold_reports.append(
            dict(
                fold=f,
                param=best,
                train_weighted=scores[best],
                test_cases=test,
                test_reports=[table[i, best] for i in test],
                test_weighted=float(np.mean([table[i, best].weighted for i in test])),
            )
        )
    counts = Counter(r["param"] for r in fold_reports)
    top = max(counts.values())
    best_param = min(g for g, c in counts.items() if c == top)
    return CrossValResult(best_param, fold_reports)
