"""Compiled kernels against the NumPy fallback on packed sub-agent batches.

    python3 benchmarks/bench_kernels.py [--repeat N] [--json]

Both implementations are called through the same dispatch shims, so the
numbers include argument conversion.  Outputs are compared before timing.
"""

import argparse
import json
import sys
import timeit

import numpy as np

from ttkit import _backend
from ttkit.packing import dfs_flatten
from ttkit.trajectory import build_tree
from ttkit.workload import DEFAULT_GRID, LARGE_SCALE, generate_task

WORKLOADS = ["binary-deep", "subagents-8", "subagents-8x8", "subagents-8x128-on-2048"]


def cases(batch):
    a = batch.segment_arrays()
    rows = np.arange(0, batch.num_tokens, max(1, batch.num_tokens // 256))
    keys = batch.token_ids.astype(np.int64)
    bits = np.zeros_like(keys)
    return {
        "tree_mask": lambda impl: _backend.tree_mask(*a, impl=impl),
        "mask_rows": lambda impl: _backend.mask_rows(rows, *a, impl=impl),
        "predecessors": lambda impl: _backend.predecessors(*a, impl=impl),
        "common_prefix": lambda impl: _backend.common_prefix(keys, bits, keys, bits, impl=impl),
    }


def bench(repeat):
    if _backend.compiled_kernels is None:
        sys.exit("compiled extension not built; run `pip install -e . --no-build-isolation`")
    grid = {**DEFAULT_GRID, **LARGE_SCALE}
    out = []
    for name in WORKLOADS:
        batch = dfs_flatten(build_tree(generate_task(grid[name], 0).calls))
        for kernel, fn in cases(batch).items():
            ref, got = fn(_backend.python_kernels), fn(_backend.compiled_kernels)
            assert np.array_equal(np.asarray(ref), np.asarray(got)), (name, kernel)
            times = {}
            for label, impl in (("python", _backend.python_kernels), ("cython", _backend.compiled_kernels)):
                t = timeit.Timer(lambda: fn(impl))
                n, _ = t.autorange()
                times[label] = min(t.repeat(repeat, n)) / n
            out.append({"workload": name, "tokens": batch.num_tokens, "kernel": kernel,
                        "python_s": times["python"], "cython_s": times["cython"],
                        "speedup": times["python"] / times["cython"]})
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args()
    rows = bench(args.repeat)
    if args.json:
        print(json.dumps(rows, indent=2))
        return
    print(f"{'workload':<26}{'T':>7}  {'kernel':<14}{'python':>12}{'cython':>12}{'speedup':>9}")
    for r in rows:
        print(f"{r['workload']:<26}{r['tokens']:>7}  {r['kernel']:<14}"
              f"{r['python_s'] * 1e3:>10.3f}ms{r['cython_s'] * 1e3:>10.3f}ms{r['speedup']:>8.1f}x")


if __name__ == "__main__":
    main()
