"""PCA appearance model of atlas-aligned normal images."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import pfg
from .errors import AllMasked, DimensionMismatch, ParseFailure, RankDeficient
from .grid import Grid

FORMAT_VERSION = 1
SIGN_CONVENTION = "max-abs-positive"
RANK_RTOL = 1e-10

# mode-count presets keyed by image dimensionality
DEFAULT_MODES = {2: 150, 3: 50}


@dataclass(frozen=True, eq=False)
class PcaBasis:
    mean: Grid
    modes: np.ndarray  # (m, k), columns orthonormal, voxels in x-fastest order
    singular_values: np.ndarray
    source_count: int

    @property
    def k(self):
        return self.modes.shape[1]

    @property
    def dims(self):
        return self.mean.dims

    @property
    def spacing(self):
        return self.mean.spacing

    def mode(self, l) -> Grid:
        return Grid.from_flat(self.modes[:, l], self.dims, self.spacing)

    def check_image(self, image: Grid):
        if image.dims != self.dims:
            raise DimensionMismatch(f"image dims {image.dims} != basis dims {self.dims}")

    def nbytes(self):
        return self.modes.nbytes + self.mean.data.nbytes + self.singular_values.nbytes


def _stack_matrix(images):
    images = list(images)
    if not images:
        raise DimensionMismatch("empty image stack")
    dims = images[0].dims
    for i, im in enumerate(images):
        if im.dims != dims:
            raise DimensionMismatch(f"image {i} has dims {im.dims}, expected {dims}")
    return np.stack([im.flat() for im in images], axis=1), dims, images[0].spacing


def _fix_signs(modes):
    idx = np.argmax(np.abs(modes), axis=0)
    signs = np.sign(modes[idx, np.arange(modes.shape[1])])
    signs[signs == 0] = 1.0
    return modes * signs


def build_basis(images, k: int, rescale=False) -> PcaBasis:
    """Mean image and top-``k`` left singular vectors of the centered stack.

    The singular vectors come from the n-by-n Gram matrix, followed by a thin
    SVD of the k projected columns to restore orthonormality to working
    precision. Raises RankDeficient when ``k`` exceeds the numerical rank.
    """
    X, dims, spacing = _stack_matrix(images)
    m, n = X.shape
    if n < 2:
        raise DimensionMismatch("need at least two images")
    if k < 1 or k > n - 1:
        raise RankDeficient(f"k={k} outside [1, n-1={n - 1}]")
    if rescale:
        lo = X.min(axis=0)
        span = X.max(axis=0) - lo
        span[span == 0] = 1.0
        X = (X - lo) / span
    mean = X.mean(axis=1)
    Xc = X - mean[:, None]
    gram = Xc.T @ Xc
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1]
    V = evecs[:, order[:k]]
    U, sv, _ = np.linalg.svd(Xc @ V, full_matrices=False)
    sigma1 = np.sqrt(max(evals[order[0]], 0.0))
    mean_grid = Grid.from_flat(mean, dims, spacing)
    if sigma1 == 0.0 or sv[-1] < RANK_RTOL * sigma1:
        rank = int(np.sum(sv >= RANK_RTOL * sigma1)) if sigma1 > 0 else 0
        exc = RankDeficient(f"k={k} exceeds numerical rank {rank}")
        exc.mean, exc.rank = mean_grid, rank
        raise exc
    return PcaBasis(
        mean=mean_grid,
        modes=_fix_signs(U),
        singular_values=sv,
        source_count=n,
    )


def project(basis: PcaBasis, image: Grid) -> np.ndarray:
    """Least-squares coefficients of ``image - mean`` in the basis."""
    basis.check_image(image)
    return basis.modes.T @ (image.flat() - basis.mean.flat())


def reconstruct(basis: PcaBasis, alpha) -> Grid:
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (basis.k,):
        raise DimensionMismatch(f"{alpha.size} coefficients for a {basis.k}-mode basis")
    flat = basis.mean.flat() + basis.modes @ alpha
    return Grid.from_flat(flat, basis.dims, basis.spacing)


def impute_population(images, masks, fallback="global-mean"):
    """Replace masked voxels by the mean over images unmasked there.

    ``fallback`` handles voxels masked in every image: ``"global-mean"`` uses
    the mean of all unmasked voxels in the stack, ``"error"`` raises AllMasked.
    """
    X, dims, spacing = _stack_matrix(images)
    W, mdims, _ = _stack_matrix(masks)
    if mdims != dims or W.shape != X.shape:
        raise DimensionMismatch("images and masks disagree in shape")
    masked = W > 0.5
    keep = ~masked
    counts = keep.sum(axis=1)
    sums = np.where(keep, X, 0.0).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        fill = sums / counts
    dead = counts == 0
    if np.any(dead & masked.any(axis=1)):
        if fallback == "error":
            v = int(np.flatnonzero(dead)[0])
            raise AllMasked(np.unravel_index(v, dims, order="F"))
        if not keep.any():
            raise AllMasked("all")
        fill[dead] = X[keep].mean()
    out = np.where(masked, fill[:, None], X)
    return [Grid.from_flat(out[:, j], dims, spacing) for j in range(out.shape[1])]


def save_basis(basis: PcaBasis, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pfg.write_grid(directory / "mean.pfg", basis.mean)
    modes = np.stack(
        [basis.modes[:, l].reshape(basis.dims, order="F") for l in range(basis.k)]
    )
    pfg.write_array(directory / "modes.pfg", modes, basis.spacing)
    meta = {
        "format_version": FORMAT_VERSION,
        "k": basis.k,
        "n": basis.source_count,
        "singular_values": [float(s) for s in basis.singular_values],
        "sign_convention": SIGN_CONVENTION,
    }
    (directory / "meta").write_text(json.dumps(meta, indent=1) + "\n")


def load_basis(directory) -> PcaBasis:
    directory = Path(directory)
    try:
        meta = json.loads((directory / "meta").read_text())
    except (OSError, ValueError) as exc:
        raise ParseFailure(f"{directory}/meta: {exc}") from None
    mean = pfg.read_grid(directory / "mean.pfg")
    arr, _ = pfg.read_array(directory / "modes.pfg")
    if arr.shape[0] != meta["k"] or arr.shape[1:] != mean.dims:
        raise ParseFailure(f"{directory}: modes.pfg disagrees with meta/mean")
    modes = np.stack([a.ravel(order="F") for a in arr], axis=1)
    # float32 storage: re-orthonormalize so downstream projectors stay exact
    q, r = np.linalg.qr(modes)
    modes = q * np.sign(np.diag(r))
    return PcaBasis(
        mean=mean,
        modes=modes,
        singular_values=np.asarray(meta["singular_values"], dtype=np.float64),
        source_count=int(meta["n"]),
    )
