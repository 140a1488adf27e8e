"""Compare the compiled kernels with the pure-numpy fallback.

Usage::

    python benchmarks/bench_kernels.py [--cells 32] [--m 2] [--repeat 5]

Prints the best-of-``repeat`` wall time per call for each kernel and the
speedup of the compiled backend, then times a few full ADMM iterations with
each backend selected.
"""

import argparse
import timeit

import numpy as np

from ebsdflow import energy, kernels, solver, synth
from ebsdflow.kernels import _numpy
from ebsdflow.orientation import get_group

try:
    from ebsdflow.kernels import _core
except ImportError:  # extension not built
    _core = None


def unit(rng, shape):
    q = rng.normal(size=shape + (4,))
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def make_case(cells, m, seed=0):
    rng = np.random.default_rng(seed)
    s = 2.0
    n = int(cells * s)
    return dict(
        i1s=unit(rng, (cells, cells, m, m)),
        img=unit(rng, (n + 1, n + 1)),
        u=rng.normal(scale=1.0, size=(cells + 1, cells + 1, 2)),
        z=rng.normal(scale=0.1, size=(cells, cells, 4, 2)),
        w=rng.normal(scale=0.1, size=(cells, cells, 2, 2)),
        s=s,
        m=m,
        sym=get_group("432").elements,
    )


def calls(mod, c):
    qh = _numpy.target_samples(c["img"], c["u"], c["s"], c["m"])
    return {
        "data_cells": lambda: mod.data_cells(c["i1s"], c["img"], c["u"], c["z"], c["s"], c["sym"]),
        "data_grad": lambda: mod.data_grad(c["i1s"], c["img"], c["u"], c["z"], c["s"], c["sym"]),
        "data_grad_pre": lambda: mod.data_grad_pre(c["i1s"], qh, c["z"], c["sym"]),
        "zreg_grad": lambda: mod.zreg_grad(c["z"], c["w"], c["m"]),
    }


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_kernels(cells, m, repeat):
    c = make_case(cells, m)
    py = calls(_numpy, c)
    cy = calls(_core, c) if _core is not None else {}
    print(f"kernels on {cells} x {cells} cells, m = {m}, 432 symmetry (best of {repeat})")
    print(f"{'kernel':<16}{'numpy [ms]':>12}{'cython [ms]':>13}{'speedup':>9}")
    for name, fn in py.items():
        tp = best(fn, repeat)
        if name in cy:
            tc = best(cy[name], repeat)
            print(f"{name:<16}{1e3 * tp:>12.2f}{1e3 * tc:>13.2f}{tp / tc:>9.1f}")
        else:
            print(f"{name:<16}{1e3 * tp:>12.2f}{'n/a':>13}{'':>9}")


def _use_backend(mod):
    for name in ("data_cells", "data_grad", "data_cells_pre", "data_grad_pre", "target_samples", "zreg_cells",
                 "zreg_grad"):
        setattr(kernels, name, getattr(mod, name))


def bench_admm(size, iterations):
    inst = synth.make_rotated_square(size)
    params = energy.EnergyParams(mu=16.0)
    cfg = solver.SolverConfig(params=params)
    print(f"\nADMM iterations on the {size} x {size} rotated square, s = 2")
    results = {}
    for label, mod in (("numpy", _numpy), ("cython", _core)):
        if mod is None:
            continue
        _use_backend(mod)
        en = energy.Energy(inst.I1, inst.I2, 2.0, params)
        st = solver.FlowState.zeros(en.A, en.B, 2.0)
        t = best(lambda: solver.admm_step(st, en, cfg), iterations)
        results[label] = t
        print(f"{label:<8}{1e3 * t:>10.1f} ms / iteration")
    if len(results) == 2:
        print(f"speedup {results['numpy'] / results['cython']:.1f}x")
    _use_backend(_core if _core is not None else _numpy)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cells", type=int, default=32)
    ap.add_argument("--m", type=int, default=2)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=64, help="image size for the ADMM timing")
    args = ap.parse_args()
    print(f"selected backend at import: {kernels.BACKEND}\n")
    bench_kernels(args.cells, args.m, args.repeat)
    bench_admm(args.size, args.repeat)


if __name__ == "__main__":
    main()
