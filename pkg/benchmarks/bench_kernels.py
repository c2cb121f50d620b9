"""Element-kernel timing: numba loops vs vectorised numpy.

    python benchmarks/bench_kernels.py [--sizes 32x8 64x16 128x32] [--repeat 5]

Runs both backends in one process (the dispatcher takes ``use_numba``), checks
that they agree, and prints best-of-N wall times. ``PIEZOQ_NUMBA=0`` disables
numba at import, in which case only the numpy column is meaningful.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from piezoq._accel import HAVE_NUMBA
from piezoq.fem import UnitCellSpec, build_mesh, solve_unit_cell
from piezoq.fem import kernels
from piezoq.fem.model import region_tables
from piezoq.materials import builtin_material


def best_time(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", nargs="+", default=["32x8", "64x16", "128x32"])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--solve", action="store_true", help="also time a full unit-cell eigensolve")
    args = ap.parse_args(argv)

    piezo = builtin_material("synthetic_6mm")
    metal = builtin_material("isotropic_test_metal")
    print(f"numba available: {HAVE_NUMBA}")
    print(f"{'mesh':>10} {'elements':>9} {'numpy [ms]':>11} {'numba [ms]':>11} {'speedup':>8} {'max rel diff':>13}")
    for size in args.sizes:
        nx, nz = (int(v) for v in size.split("x"))
        spec = UnitCellSpec(10e-6, 1e-6, 0.2e-6, 0.5, piezo, metal, mesh_nx=nx, mesh_nz_film=nz)
        mesh = build_mesh(spec)
        xy = mesh.element_coords()
        tables = region_tables(spec)

        t_np, ref = best_time(lambda: kernels.element_matrices(xy, mesh.region, *tables, use_numba=False),
                              args.repeat)
        if HAVE_NUMBA:
            kernels.element_matrices(xy[:1], mesh.region[:1], *tables, use_numba=True)  # compile
            t_nb, got = best_time(lambda: kernels.element_matrices(xy, mesh.region, *tables, use_numba=True),
                                  args.repeat)
            diff = max(float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), 1e-300))
                       for a, b in zip(ref, got))
            print(f"{size:>10} {len(mesh.elements):>9} {1e3 * t_np:>11.2f} {1e3 * t_nb:>11.2f} "
                  f"{t_np / t_nb:>8.1f} {diff:>13.2e}")
        else:
            print(f"{size:>10} {len(mesh.elements):>9} {1e3 * t_np:>11.2f} {'n/a':>11} {'n/a':>8} {'n/a':>13}")
        if args.solve:
            t_solve, _ = best_time(lambda: solve_unit_cell(spec, 10), 1)
            print(f"{'':>10} full solve: {t_solve:.2f} s")


if __name__ == "__main__":
    main()
