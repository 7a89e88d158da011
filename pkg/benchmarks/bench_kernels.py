"""Compare the numba and numpy element kernels on a real limiting mesh.

    python3 benchmarks/bench_kernels.py [--repeat N] [--refine K]

Prints the best wall time per kernel and backend, the speedup and the largest
difference between the two backends' outputs.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from slitspectra import kernels
from slitspectra.geometry import DomainSpec, SlitGeometry
from slitspectra.meshgen import SizeField, mesh_limiting, refine_uniform


def best_time(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--refine", type=int, default=1, help="uniform refinements of the default mesh")
    args = p.parse_args(argv)
    if kernels.NUMBA_KERNELS is None:
        raise SystemExit("numba backend unavailable (SLITSPECTRA_NUMBA=0 or numba missing)")

    mesh = mesh_limiting(DomainSpec(), SlitGeometry(), SizeField())
    for _ in range(args.refine):
        mesh = refine_uniform(mesh)
    coords = np.ascontiguousarray(mesh.vertices[mesh.triangles])
    pts = coords.mean(axis=1)
    lam = kernels.barycentric(coords, pts, "numpy")
    cases = {
        "p1 element matrices": lambda b: kernels.element_matrices(coords, 1, b),
        "p2 element matrices": lambda b: kernels.element_matrices(coords, 2, b),
        "barycentric coords": lambda b: kernels.barycentric(coords, pts, b),
        "p2 basis values": lambda b: kernels.p2_basis(lam, b),
    }
    print(f"{mesh.n_triangles} triangles, best of {args.repeat}")
    print(f"{'kernel':<22}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>10}{'max diff':>12}")
    for name, fn in cases.items():
        fn("numba")  # compile outside the timing
        out_np, out_nb = fn("numpy"), fn("numba")
        pairs = zip(out_np, out_nb) if isinstance(out_np, tuple) else [(out_np, out_nb)]
        diff = max(float(np.max(np.abs(a - b))) for a, b in pairs)
        t_np = best_time(lambda: fn("numpy"), args.repeat)
        t_nb = best_time(lambda: fn("numba"), args.repeat)
        print(f"{name:<22}{1e3 * t_np:>12.2f}{1e3 * t_nb:>12.2f}{t_np / t_nb:>10.1f}{diff:>12.1e}")


if __name__ == "__main__":
    main()
