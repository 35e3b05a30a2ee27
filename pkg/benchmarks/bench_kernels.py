"""Compare the compiled and interpreted MCMC sweep kernels.

Runs the same chain under both backends (the interpreted one in a child
process with SEPUQ_DISABLE_NUMBA=1), checks that the sampled traces are
identical and prints time per sweep.  A full FEM solve on the same mesh is
timed for reference.

    python benchmarks/bench_kernels.py [--n1 10] [--n2 10] [--obs 9] [--sweeps 2000]
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

CHILD = r"""
import json, sys, time
import numpy as np
from sepuq import _kernels
from sepuq.gp import GPBank, GPHyper
from sepuq.mcmc import ChainState, McmcConfig, Target, step
from sepuq.pgd import ThetaGrid

n1, n2, m, sweeps = map(int, sys.argv[1:5])
rng = np.random.default_rng(0)
grid = ThetaGrid()
tables = 1.0 + 0.2 * np.tanh(rng.normal(size=(n1, n2, 1)) * grid.points)
gps = GPBank.fit(grid.points, tables, GPHyper())
V = rng.normal(size=(n1, m))
y = np.prod(tables[:, :, 10], axis=1) @ V + 0.01 * rng.normal(size=m)
state = ChainState.initial(Target(gps, y, V, 0.01))
step(state, np.random.default_rng(1), 1)  # compile outside the timed region
t = time.perf_counter()
trace, _, _ = step(state, np.random.default_rng(2), sweeps)
elapsed = time.perf_counter() - t
print(json.dumps({"backend": _kernels.BACKEND, "seconds_per_sweep": elapsed / sweeps,
                  "trace": trace.tolist()}))
"""


def run(backend: str, args) -> dict:
    env = dict(os.environ, SEPUQ_DISABLE_NUMBA="1" if backend == "python" else "0")
    out = subprocess.run([sys.executable, "-c", CHILD, str(args.n1), str(args.n2),
                          str(args.obs), str(args.sweeps)],
                         env=env, check=True, capture_output=True, text=True)
    return json.loads(out.stdout)


def fem_seconds(n: int) -> float:
    from sepuq.mesh import build_mesh, fem_solve
    mesh = build_mesh(n, n)
    kap = np.exp(0.1 * np.sin(3 * mesh.coords[:, 0]))
    fem_solve(mesh, kap)
    t = time.perf_counter()
    fem_solve(mesh, kap)
    return time.perf_counter() - t


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n1", type=int, default=10)
    ap.add_argument("--n2", type=int, default=10)
    ap.add_argument("--obs", type=int, default=9)
    ap.add_argument("--sweeps", type=int, default=2000)
    ap.add_argument("--mesh", type=int, default=50)
    args = ap.parse_args()

    fast, slow = run("numba", args), run("python", args)
    same = np.array_equal(np.array(fast["trace"]), np.array(slow["trace"]))
    fem = fem_seconds(args.mesh)
    print(f"N1={args.n1} N2={args.n2} M={args.obs}, {args.sweeps} sweeps")
    print(f"{'backend':<10}{'s/sweep':>14}")
    for r in (fast, slow):
        print(f"{r['backend']:<10}{r['seconds_per_sweep']:>14.3e}")
    print(f"speedup numba/python: {slow['seconds_per_sweep'] / fast['seconds_per_sweep']:.1f}x")
    print(f"FEM solve {args.mesh}x{args.mesh}: {fem:.3e} s "
          f"({fem / fast['seconds_per_sweep']:.0f} compiled sweeps)")
    print(f"identical traces: {same}")
    return 0 if same else 1


if __name__ == "__main__":
    sys.exit(main())
