"""Compiled vs numpy column-march kernel.

Times one implicit step of the default 25x50 channel for a single field and
for the 13-member batch used during dataset generation, and reports the
largest disagreement between the two kernels.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import sys
import timeit

import numpy as np

from heatflux_eks import _kernels
from heatflux_eks.physics import ColumnSolver, Mesh, PhysicalParams


def make_inputs(batch: int, seed: int = 0):
    mesh = Mesh()
    rng = np.random.default_rng(seed)
    fields = 300.0 + 50.0 * rng.random((batch, mesh.size))
    q = rng.uniform(0.0, 5000.0, batch)
    return mesh, fields, q


def bench(repeat: int) -> int:
    params = PhysicalParams()
    mesh = Mesh()
    pure = ColumnSolver(mesh, params, backend="numpy")
    if _kernels.compiled_march_columns is None:
        print("compiled kernel not built; only the numpy fallback is available")
        solvers = {"numpy": pure}
    else:
        solvers = {"numpy": pure, "cython": ColumnSolver(mesh, params, backend="cython")}

    print(f"{'batch':>6} {'kernel':>8} {'us/step':>10} {'us/field':>10}")
    for batch in (1, 13, 64):
        _, fields, q = make_inputs(batch)
        outs = {}
        for name, solver in solvers.items():
            n = max(10, repeat // batch)
            t = min(timeit.repeat(lambda: solver.step_batch(fields, q), number=n, repeat=5)) / n
            outs[name] = solver.step_batch(fields, q)
            print(f"{batch:>6} {name:>8} {t * 1e6:>10.1f} {t * 1e6 / batch:>10.2f}")
        if len(outs) == 2:
            diff = float(np.max(np.abs(outs["numpy"] - outs["cython"])))
            print(f"{batch:>6} max |numpy - cython| = {diff:.2e} K")
            if diff > 1e-9:
                print("kernels disagree", file=sys.stderr)
                return 1
    return 0


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=2000)
    return bench(p.parse_args(argv).repeat)


if __name__ == "__main__":
    sys.exit(main())
