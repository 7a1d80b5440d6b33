"""Seeded problem factories shared by tests and the oracle scripts."""
import numpy as np

from quasinormal.decomp import DecompProblem
from quasinormal.grid import Grid
from quasinormal.pca import build_basis

ORACLE_SEEDS = tuple(range(10))
ORACLE_GAMMA = 2.0


def small_rof_problem(seed, gamma=ORACLE_GAMMA, solver=None):
    """8x8 image, 2-mode basis from three random images."""
    rng = np.random.default_rng(seed)
    pop = [Grid(rng.normal(size=(8, 8))) for _ in range(3)]
    basis = build_basis(pop, 2)
    image = Grid(rng.normal(size=(8, 8)))
    kw = {} if solver is None else {"solver": solver}
    return DecompProblem(basis, image, gamma, **kw)
