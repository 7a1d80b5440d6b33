"""Dense demons-style registration and the register/decompose alternation.

Fields follow the pull-back convention: ``warp(moving, u)(x) = moving(x + u(x))``
with ``u`` in mm, so a field returned by ``register(moving, fixed)`` maps
fixed-space coordinates to moving-space samples.
"""
from __future__ import annotations

import shlex
import subprocess
import tempfile
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import pfg
from .errors import (
    DimensionMismatch,
    NonFinite,
    ParseFailure,
    ProcessFailure,
    StageError,
)
from .grid import Grid, VectorField

SSD = "ssd"
NCC = "ncc"
NCC_RADIUS = 2
DENOM_FLOOR = 1e-5
MIN_LEVEL_SIZE = 8


@dataclass(frozen=True, eq=False)
class RegParams:
    levels: int = 3
    iters_per_level: int = 100
    smoothing_sigma: float = 2.0
    similarity: str = NCC
    step: float = 1.0
    mask: Grid | None = None

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.iters_per_level < 0:
            raise ValueError("iters_per_level must be >= 0")
        if self.smoothing_sigma < 0:
            raise ValueError("smoothing_sigma must be >= 0")
        if self.similarity not in (SSD, NCC):
            raise ValueError(f"unknown similarity {self.similarity!r}")


def _check_pair(a: Grid, b: Grid, what):
    if a.dims != b.dims:
        raise DimensionMismatch(f"{what}: dims {a.dims} vs {b.dims}")
    if not np.allclose(a.spacing, b.spacing):
        raise DimensionMismatch(f"{what}: spacing {a.spacing} vs {b.spacing}")


def _warp_array(arr, disp, spacing):
    if not disp.any():
        return arr.copy()
    coords = np.indices(arr.shape, dtype=np.float64)
    for c in range(arr.ndim):
        coords[c] += disp[c] / spacing[c]
    return ndimage.map_coordinates(arr, coords, order=1, mode="nearest")


def warp(image: Grid, field: VectorField) -> Grid:
    """Sample ``image`` at ``x + field(x)`` with linear interpolation."""
    if image.dims != field.dims:
        raise DimensionMismatch(f"image dims {image.dims} vs field dims {field.dims}")
    return image.like(_warp_array(image.data, field.data, image.spacing))


def invert_field(field: VectorField, iters=30) -> VectorField:
    """Fixed-point inverse ``v(y) = -u(y + v(y))`` of a pull-back field."""
    u = field.data
    v = -u.copy()
    for _ in range(iters):
        v = -np.stack([_warp_array(u[c], v, field.spacing) for c in range(u.shape[0])])
    return VectorField(v, field.spacing)


def compose(outer: VectorField, inner: VectorField) -> VectorField:
    """Field of ``x -> x + inner(x) + outer(x + inner(x))``."""
    moved = np.stack(
        [_warp_array(outer.data[c], inner.data, inner.spacing) for c in range(inner.ndim)]
    )
    return VectorField(inner.data + moved, inner.spacing)


def _box(a, size):
    return ndimage.uniform_filter(a, size=size, mode="nearest")


def similarity_force(warped, fixed, spacing, similarity=NCC, mask=None):
    """Per-voxel force (d, *dims) pushing ``warped`` toward ``fixed``.

    SSD uses the classic demons update, which moves at most half a voxel.
    NCC is the gradient of the local (window radius 2) correlation
    coefficient; its scale is set by the caller. Voxels with ``mask == 1``
    get zero force.
    """
    grad_m = np.stack(np.gradient(warped, *spacing)) if warped.ndim > 1 else np.gradient(
        warped, spacing[0]
    )[None]
    if similarity == SSD:
        diff = fixed - warped
        h2 = min(spacing) ** 2
        denom = np.sum(grad_m**2, axis=0) + diff**2 / h2
        np.maximum(denom, DENOM_FLOOR, out=denom)
        force = grad_m * (diff / denom)
    else:
        size = 2 * NCC_RADIUS + 1
        mf = _box(fixed, size)
        mm = _box(warped, size)
        sff = _box(fixed * fixed, size) - mf * mf
        smm = _box(warped * warped, size) - mm * mm
        sfm = _box(fixed * warped, size) - mf * mm
        # flat windows carry no correlation signal
        valid = (sff > DENOM_FLOOR) & (smm > DENOM_FLOOR)
        sff = np.where(valid, sff, 1.0)
        smm = np.where(valid, smm, 1.0)
        ft = fixed - mf
        mt = warped - mm
        coef = np.where(valid, 2.0 * sfm / (sff * smm) * (ft - sfm / smm * mt), 0.0)
        force = grad_m * coef
    if mask is not None:
        force = force * (1.0 - (mask > 0.5))
    return force


def _level_shape(shape, factor):
    return tuple(max(2, int(round((n - 1) / factor)) + 1) for n in shape)


def _resample(arr, shape, smooth=0.0):
    if smooth > 0:
        arr = ndimage.gaussian_filter(arr, smooth, mode="nearest")
    if arr.shape == tuple(shape):
        return arr.copy()
    axes = [np.linspace(0.0, s - 1.0, t) for s, t in zip(arr.shape, shape)]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    return ndimage.map_coordinates(arr, coords, order=1, mode="nearest")


def _level_spacing(spacing, full, shape):
    return tuple(
        s * (n - 1) / (m - 1) if m > 1 else s for s, n, m in zip(spacing, full, shape)
    )


def register(moving: Grid, fixed: Grid, params: RegParams = RegParams()) -> VectorField:
    """Multiresolution demons registration; returns ``u`` with ``warp(moving, u) ~ fixed``."""
    _check_pair(moving, fixed, "register")
    if params.mask is not None and params.mask.dims != fixed.dims:
        raise DimensionMismatch("mask dims differ from the fixed image")
    full = fixed.dims
    levels = params.levels
    while levels > 1 and min(_level_shape(full, 2 ** (levels - 1))) < MIN_LEVEL_SIZE:
        levels -= 1
    disp = None
    for lev in range(levels - 1, -1, -1):
        factor = 2**lev
        shape = _level_shape(full, factor)
        spacing = _level_spacing(fixed.spacing, full, shape)
        smooth = 0.5 * factor if factor > 1 else 0.0
        F = _resample(fixed.data, shape, smooth)
        M = _resample(moving.data, shape, smooth)
        mask = None
        if params.mask is not None:
            mask = (_resample(params.mask.data, shape) > 1e-6).astype(np.float64)
        if disp is None:
            disp = np.zeros((len(shape),) + shape)
        else:
            disp = np.stack([_resample(c, shape) for c in disp])
        disp = _run_level(M, F, disp, spacing, mask, params)
    if not np.all(np.isfinite(disp)):
        raise NonFinite("registration diverged")
    return VectorField(disp, fixed.spacing)


def _half_voxel_force(F, spacing):
    """Peak NCC force between ``F`` and ``F`` shifted half a voxel along one axis."""
    peak = 0.0
    for c in range(F.ndim):
        d = np.zeros((F.ndim,) + F.shape)
        d[c] = 0.5 * spacing[c]
        f = similarity_force(_warp_array(F, d, spacing), F, spacing, NCC)
        peak = max(peak, float(np.sqrt(np.sum(f**2, axis=0)).max()))
    return peak


def _run_level(M, F, disp, spacing, mask, params):
    h = min(spacing)
    sigma_vox = [params.smoothing_sigma / s for s in spacing]
    scale = None
    if params.similarity == NCC:
        peak = _half_voxel_force(F, spacing)
        if peak <= 1e-12:
            return disp
        # a half-voxel misalignment of the fixed image moves half a voxel
        scale = 0.5 * h / peak
    for _ in range(params.iters_per_level):
        warped = _warp_array(M, disp, spacing)
        force = similarity_force(warped, F, spacing, params.similarity, mask)
        if params.similarity == NCC:
            update = force * scale
            norm = np.sqrt(np.sum(update**2, axis=0))
            np.maximum(norm / (0.5 * h), 1.0, out=norm)
            update /= norm
        else:
            update = force
        if not update.any():
            break
        disp = disp + params.step * update
        if params.smoothing_sigma > 0:
            disp = np.stack(
                [ndimage.gaussian_filter(c, sigma_vox, mode="nearest") for c in disp]
            )
        if not np.all(np.isfinite(disp)):
            raise NonFinite("registration diverged")
    return disp


@dataclass(eq=False)
class PipelineResult:
    field: VectorField
    quasi_normal: Grid
    abnormal_atlas: Grid
    per_iter: list = field(default_factory=list)


def alternate(atlas: Grid, pathological: Grid, decompose_fn, alternations=6,
              reg_params: RegParams = RegParams(), registrar=None):
    """Alternate atlas registration with decomposition of the atlas-space image.

    ``decompose_fn(image_in_atlas_space)`` returns ``(abnormal, info)``. Each
    round registers the atlas to the current quasi-normal estimate (the
    pathological image itself in round 1), pulls the pathological image into
    atlas space with the inverse field, and decomposes it; the abnormal part
    pushed back to image space gives the next quasi-normal estimate. The
    returned field is the last registration.
    """
    _check_pair(atlas, pathological, "pipeline")
    registrar = registrar or register
    if alternations < 1:
        raise ValueError("alternations must be >= 1")
    per_iter = []
    quasi = pathological
    phi = S_atlas = None
    for a in range(1, alternations + 1):
        t0 = time.perf_counter()
        try:
            phi = registrar(atlas, quasi, reg_params)
            resid = warp(atlas, phi).data - quasi.data
            x_atlas = warp(pathological, invert_field(phi))
            S_atlas, info = decompose_fn(x_atlas)
            S_img = warp(S_atlas, phi)
            quasi = pathological.like(pathological.data - S_img.data)
        except Exception as exc:
            raise StageError(f"alternation {a}", exc) from exc
        per_iter.append(
            dict(
                alternation=a,
                objective=info.get("objective", float("nan")),
                solver_iterations=info.get("iterations", 0),
                converged=info.get("converged", True),
                residual=float(np.sqrt(np.mean(resid**2))),
                wall_seconds=time.perf_counter() - t0,
                peak_bytes=info.get("peak_bytes", 0),
            )
        )
    return PipelineResult(phi, quasi, S_atlas, per_iter)


def pca_decomposer(basis, gamma, reg_steps, solver=None, variant="rof"):
    from .decomp import DecompProblem, SolverParams, decompose

    solver = solver or SolverParams()

    def run(image):
        res = decompose(DecompProblem(basis, image, gamma, variant, solver), reg_steps)
        info = dict(
            objective=float(res.energy_trace[-1]) if len(res.energy_trace) else 0.0,
            iterations=res.iterations,
            converged=res.converged,
            peak_bytes=res.peak_bytes,
        )
        return res.abnormal, info

    return run


def atlas_pipeline(atlas: Grid, pathological: Grid, basis, gamma: float,
                   reg_steps: int = 0, alternations: int = 6,
                   reg_params: RegParams = RegParams(), solver=None,
                   registrar=None) -> PipelineResult:
    """PCA-model register/decompose loop; the basis is a one-time precomputation."""
    basis.check_image(pathological)
    return alternate(
        atlas, pathological, pca_decomposer(basis, gamma, reg_steps, solver),
        alternations, reg_params, registrar,
    )


def external_register(moving_path, fixed_path, command_template, timeout=None) -> VectorField:
    """Run an external registration command and read the field it writes.

    ``command_template`` must contain ``{moving}``, ``{fixed}`` and ``{out}``.
    """
    for key in ("{moving}", "{fixed}", "{out}"):
        if key not in command_template:
            raise ValueError(f"command template lacks {key}")
    with tempfile.TemporaryDirectory() as tmp:
        out = Path(tmp) / "field.pfg"
        cmd = command_template.format(
            moving=shlex.quote(str(moving_path)),
            fixed=shlex.quote(str(fixed_path)),
            out=shlex.quote(str(out)),
        )
        try:
            proc = subprocess.run(
                shlex.split(cmd), capture_output=True, text=True, timeout=timeout
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise ProcessFailure(f"{cmd}: {exc}") from None
        if proc.returncode != 0:
            raise ProcessFailure(
                f"{cmd} exited with {proc.returncode}: {proc.stderr.strip()[-500:]}",
                proc.returncode,
            )
        if not out.exists():
            raise ParseFailure(f"{cmd} did not write {out}")
        return pfg.read_field(out)


def masked(params: RegParams, mask: Grid) -> RegParams:
    return replace(params, mask=mask)
