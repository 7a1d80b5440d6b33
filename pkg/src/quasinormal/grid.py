"""Scalar and vector grids plus the discrete gradient/divergence pair.

Arrays are indexed ``[x, y(, z)]`` so that axis ``c`` is spatial axis ``c``;
flattening in Fortran order gives the x-fastest layout used on disk.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NonFinite


def _as_spacing(spacing, ndim):
    if spacing is None:
        return (1.0,) * ndim
    if np.isscalar(spacing):
        return (float(spacing),) * ndim
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != ndim:
        raise DimensionMismatch(f"spacing has {len(spacing)} entries for a {ndim}-d grid")
    return spacing


@dataclass(frozen=True, eq=False)
class Grid:
    """A d-dimensional scalar image with per-axis spacing in mm."""

    data: np.ndarray
    spacing: tuple = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim not in (1, 2, 3):
            raise DimensionMismatch(f"grids must be 1-3 dimensional, got {data.ndim}")
        if data.size == 0:
            raise DimensionMismatch("empty grid")
        if not np.all(np.isfinite(data)):
            raise NonFinite("grid contains NaN or Inf")
        spacing = _as_spacing(self.spacing, data.ndim)
        if any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def flat(self):
        """Values in x-fastest order."""
        return self.data.ravel(order="F")

    @classmethod
    def from_flat(cls, values, dims, spacing=None):
        values = np.asarray(values, dtype=np.float64)
        if values.size != int(np.prod(dims)):
            raise DimensionMismatch(f"{values.size} values do not fill dims {tuple(dims)}")
        return cls(values.reshape(tuple(dims), order="F"), spacing)

    def like(self, data):
        """New grid on the same lattice."""
        return Grid(data, self.spacing)

    def check_same_lattice(self, other, what="grid"):
        if self.dims != other.dims:
            raise DimensionMismatch(f"{what} dims {other.dims} != {self.dims}")
        if not np.allclose(self.spacing, other.spacing):
            raise DimensionMismatch(f"{what} spacing {other.spacing} != {self.spacing}")


@dataclass(frozen=True, eq=False)
class VectorField:
    """d components over a grid, stored as an array of shape ``(d, *dims)``."""

    data: np.ndarray
    spacing: tuple = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim < 2 or data.shape[0] != data.ndim - 1:
            raise DimensionMismatch(f"vector field shape {data.shape} is not (d, *dims)")
        if not np.all(np.isfinite(data)):
            raise NonFinite("vector field contains NaN or Inf")
        spacing = _as_spacing(self.spacing, data.ndim - 1)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self):
        return self.data.shape[1:]

    @property
    def ndim(self):
        return self.data.shape[0]

    def component(self, c):
        return Grid(self.data[c], self.spacing)

    def magnitude(self):
        return np.sqrt(np.sum(self.data**2, axis=0))

    @classmethod
    def zeros(cls, dims, spacing=None):
        dims = tuple(dims)
        return cls(np.zeros((len(dims),) + dims), spacing)


# Deformation fields share the vector layout; displacements are in mm.
DeformationField = VectorField


def grad_array(u, spacing):
    """Forward differences with a zero difference at the last index of each axis."""
    out = np.zeros((u.ndim,) + u.shape)
    for c in range(u.ndim):
        d = np.diff(u, axis=c) / spacing[c]
        idx = [c] + [slice(None)] * u.ndim
        idx[c + 1] = slice(0, u.shape[c] - 1)
        out[tuple(idx)] = d
    return out


def div_array(p, spacing):
    """Backward-difference divergence, the negative adjoint of ``grad_array``."""
    ndim = p.shape[0]
    out = np.zeros(p.shape[1:])
    for c in range(ndim):
        n = p.shape[c + 1]
        pc = p[c] / spacing[c]
        lead = [slice(None)] * ndim
        if n == 1:
            continue
        # out_i += p_i for i <= n-2 ; out_i -= p_{i-1} for 1 <= i <= n-1
        lead[c] = slice(0, n - 1)
        out[tuple(lead)] += pc[tuple(lead)]
        dst = [slice(None)] * ndim
        dst[c] = slice(1, n)
        out[tuple(dst)] -= pc[tuple(lead)]
    return out


def tv_array(u, spacing):
    g = grad_array(u, spacing)
    return float(np.sum(np.sqrt(np.sum(g * g, axis=0))))


def forward_gradient(u: Grid) -> VectorField:
    return VectorField(grad_array(u.data, u.spacing), u.spacing)


def divergence(p: VectorField) -> Grid:
    return Grid(div_array(p.data, p.spacing), p.spacing)


def isotropic_tv(s: Grid) -> float:
    """Sum over voxels of the Euclidean norm of the forward gradient."""
    return tv_array(s.data, s.spacing)


def gradient_norm_bound(ndim, spacing):
    """Upper bound on the squared operator norm of the forward gradient."""
    return 4.0 * ndim / min(spacing) ** 2
