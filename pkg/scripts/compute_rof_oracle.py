"""Long-run reference objectives for the seeded 8x8 ROF problems.

Runs the same PDHG scheme with halved step sizes for 10^6 iterations and
freezes the final objective into tests/data/rof_oracle.json.
"""
import argparse
import json
import math
import sys
import time
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))

from problems import ORACLE_SEEDS, small_rof_problem  # noqa: E402
from quasinormal.decomp import SolverParams, decompose_rof  # noqa: E402


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--iters", type=int, default=10**6)
    ap.add_argument("--out", default=str(ROOT / "tests" / "data" / "rof_oracle.json"))
    args = ap.parse_args()
    h = 0.5 / math.sqrt(8.0)
    params = SolverParams(max_iter=args.iters, tol=0.0, tau=h, sigma=h)
    out = {"iterations": args.iters, "tau": h, "sigma": h, "objectives": {}}
    for seed in ORACLE_SEEDS:
        t0 = time.time()
        res = decompose_rof(small_rof_problem(seed, solver=params))
        out["objectives"][str(seed)] = float(res.energy_trace[-1])
        print(f"seed {seed}: {res.energy_trace[-1]!r} after {res.iterations} its "
              f"({time.time() - t0:.0f}s)", flush=True)
    Path(args.out).write_text(json.dumps(out, indent=1) + "\n")


if __name__ == "__main__":
    main()
