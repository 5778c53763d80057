"""Time the compiled grouped matmul against the torch fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Shapes are the per-instance fusion layers of typical teacher configs
(batch, groups, group_in, group_out). Forward and forward+backward are
timed separately; the best of ``--repeat`` runs is reported.
"""
from __future__ import annotations

import argparse
import json
import time

import torch

from imed import kernels

SHAPES = [
    (32, 4, 16, 8),
    (32, 8, 8, 4),
    (64, 16, 64, 32),
    (32, 128, 4, 2),
    (256, 4, 64, 64),
]


def _best(fn, repeat: int) -> float:
    fn()  # warm up
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench(shape, repeat: int, dtype=torch.float32) -> dict:
    b, g, k, m = shape
    gen = torch.Generator().manual_seed(0)
    x = torch.randn(b, g, k, generator=gen, dtype=dtype)
    w = torch.randn(b, g, k, m, generator=gen, dtype=dtype)
    row = {"shape": list(shape), "dtype": str(dtype).replace("torch.", "")}
    impls = {"python": kernels.grouped_matmul_python}
    if kernels._grouped is not None:
        impls["compiled"] = kernels.grouped_matmul_compiled
    for name, fn in impls.items():
        row[f"{name}_fwd_us"] = 1e6 * _best(lambda: fn(x, w), repeat)
        xr, wr = x.clone().requires_grad_(), w.clone().requires_grad_()

        def fwd_bwd():
            fn(xr, wr).sum().backward()

        row[f"{name}_fwdbwd_us"] = 1e6 * _best(fwd_bwd, repeat)
    if "compiled" in impls:
        row["speedup_fwd"] = row["python_fwd_us"] / row["compiled_fwd_us"]
        row["speedup_fwdbwd"] = row["python_fwdbwd_us"] / row["compiled_fwdbwd_us"]
    return row


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--json", help="also write the rows to this file")
    args = parser.parse_args(argv)
    torch.set_num_threads(args.threads)

    rows = [bench(s, args.repeat) for s in SHAPES]
    print(f"active backend: {kernels.BACKEND}")
    header = f"{'shape (B,G,K,M)':<20}{'python fwd':>12}{'compiled fwd':>14}{'x':>7}{'python f+b':>12}{'compiled f+b':>14}{'x':>7}"
    print(header)
    for r in rows:
        shape = "x".join(map(str, r["shape"]))
        if "compiled_fwd_us" in r:
            print(
                f"{shape:<20}{r['python_fwd_us']:>10.1f}us{r['compiled_fwd_us']:>12.1f}us{r['speedup_fwd']:>6.2f}x"
                f"{r['python_fwdbwd_us']:>10.1f}us{r['compiled_fwdbwd_us']:>12.1f}us{r['speedup_fwdbwd']:>6.2f}x"
            )
        else:
            print(f"{shape:<20}{r['python_fwd_us']:>10.1f}us{'n/a':>14}{'':>7}{r['python_fwdbwd_us']:>10.1f}us{'n/a':>14}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
