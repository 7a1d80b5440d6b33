"""Atlas registration of pathological images via a PCA + total-variation quasi-normal model."""

__version__ = "0.1.0"

from .errors import QuasiNormalError  # noqa: E402,F401
from .grid import Grid, VectorField, DeformationField  # noqa: E402,F401
