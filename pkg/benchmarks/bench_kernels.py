"""Compare the compiled kernels with the numpy fallback.

Times each hot kernel at training shapes (batch 64, window 599) and one full
generator forward/backward pass, for both backends, then prints a table with
the speedup. Run with ``python benchmarks/bench_kernels.py [--repeat N]``.
"""
from __future__ import annotations

import argparse
import json
import timeit

import numpy as np

from aed.autodiff import engine as ad
from aed.autodiff import kernels
from aed.models import build_generator, generator_graph

B, W = 64, 599


def kernel_cases(dtype):
    rng = np.random.default_rng(0)
    x1 = rng.standard_normal((B, 1, W)).astype(dtype)
    x2 = rng.standard_normal((B, 40, W // 3)).astype(dtype)
    cols = kernels.im2col(x2, 5)
    dcols = rng.standard_normal(cols.shape).astype(dtype)
    h1 = rng.standard_normal((B, 30, W)).astype(dtype)
    pooled, idx = kernels.maxpool_fwd(h1, 3)
    dout = rng.standard_normal(pooled.shape).astype(dtype)
    return {
        "im2col k=7 C=1": lambda: kernels.im2col(x1, 7),
        "im2col k=5 C=40": lambda: kernels.im2col(x2, 5),
        "col2im k=5 C=40": lambda: kernels.col2im(dcols, 40, 5),
        "maxpool fwd p=3": lambda: kernels.maxpool_fwd(h1, 3),
        "maxpool bwd p=3": lambda: kernels.maxpool_bwd(dout, idx, W),
    }


def generator_step(dtype):
    precision = "f32" if dtype == np.float32 else "f64"
    g = build_generator(W, precision=precision, seed=0)
    x = np.random.default_rng(1).standard_normal((B, W)).astype(dtype)

    def step():
        nodes = g.bind(True)
        ad.backward(ad.sum_(generator_graph(g, ad.Node(x), nodes)))
    return step


def best_of(fn, repeat: int) -> float:
    fn()  # warm up
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def run(repeat: int, dtype) -> list[dict]:
    if not kernels.compiled_available():
        raise SystemExit("compiled kernels are not built; run `pip install -e .` first")
    rows = []
    results: dict[str, dict[str, float]] = {}
    for name in ("cython", "python"):
        kernels.use(name)
        cases = kernel_cases(dtype)
        cases["generator fwd+bwd"] = generator_step(dtype)
        results[name] = {k: best_of(fn, repeat) for k, fn in cases.items()}
    kernels.use("cython")
    for case in results["python"]:
        c, p = results["cython"][case], results["python"][case]
        rows.append({"case": case, "cython_ms": 1e3 * c, "python_ms": 1e3 * p, "speedup": p / c})
    return rows


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--precision", choices=("f32", "f64"), default="f32")
    ap.add_argument("--json", action="store_true", help="print JSON instead of a table")
    args = ap.parse_args(argv)
    dtype = np.float32 if args.precision == "f32" else np.float64
    rows = run(args.repeat, dtype)
    if args.json:
        print(json.dumps(rows, indent=2))
        return
    print(f"{'case':<20} {'cython ms':>10} {'python ms':>10} {'speedup':>8}   ({args.precision}, B={B}, W={W})")
    for r in rows:
        print(f"{r['case']:<20} {r['cython_ms']:>10.3f} {r['python_ms']:>10.3f} {r['speedup']:>7.2f}x")


if __name__ == "__main__":
    main()
