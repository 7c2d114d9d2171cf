#!/usr/bin/env python3
"""Wall-clock shootout: dense vs top-k vs sparsemax vs entmax-1.5.

Times the identical attention code path the models run (scores,
normalizer, weighted values, and the reverse sweep) on pre-generated
inputs.  Absolute numbers are machine-specific; the point is the ratios:
top-k masking costs about as much as plain softmax, while the sort-based
simplex normalizers fall behind as the key length grows.
"""

import numpy as np

from sparseattn.bench import BenchShape, bench_suite, suite_to_csv

shapes = [BenchShape(batch=4, l_q=lk, l_k=lk, d=64, g=4, k=8)
          for lk in (64, 256)]
print("timing 2 shapes x 4 variants x forward/forward_backward "
      "(a minute or two)...\n")
reports = bench_suite(shapes, ["dense", "topk", "sparsemax", "entmax15"],
                      iters=30, warmup=5, seed=0)

print(f"{'variant':10s} {'l_K':>4s} {'mode':18s} {'median':>10s} {'tokens/s':>12s}")
for r in reports:
    print(f"{r.variant:10s} {r.shape.l_k:4d} {r.mode:18s} "
          f"{r.median_s * 1e3:8.2f}ms {r.tokens_per_s:12.0f}")

fb = {(r.shape.l_k, r.variant): r.median_s
      for r in reports if r.mode == "forward_backward"}
print("\nmedian time relative to dense (forward_backward):")
for lk in (64, 256):
    rel = {v: fb[(lk, v)] / fb[(lk, "dense")]
           for v in ("topk", "sparsemax", "entmax15")}
    print(f"  l_K={lk:4d}: " + "  ".join(f"{v} {r:4.2f}x" for v, r in rel.items()))

with open("bench_demo.csv", "w") as f:
    f.write(suite_to_csv(reports))
print("\nfull table written to bench_demo.csv")
