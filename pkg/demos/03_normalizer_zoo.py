#!/usr/bin/env python3
"""Four ways to turn scores into attention weights.

Dense softmax never produces zeros.  Top-k masking forces all but k
positions to exactly zero.  Sparsemax projects onto the simplex and finds
its own support size; entmax-1.5 sits between softmax and sparsemax.
The table prints each normalizer's output and support on the same row of
scores, swept over temperature to show how supports shrink as scores
sharpen.
"""

import numpy as np

from sparseattn import Tensor, entmax15_rows, softmax_rows, sparsemax_rows, topk_mask

np.set_printoptions(precision=3, suppress=True)

scores = np.array([2.2, 1.7, 1.1, 0.4, -0.3, -1.0])
print("scores:", scores, "\n")

for temp in (2.0, 1.0, 0.5):
    x = Tensor((scores / temp)[None, :])
    rows = {
        "softmax": softmax_rows(x).data[0],
        "topk k=2": softmax_rows(topk_mask(x, 2)).data[0],
        "sparsemax": sparsemax_rows(x).data[0],
        "entmax15": entmax15_rows(x).data[0],
    }
    print(f"temperature {temp}:")
    for name, p in rows.items():
        support = int((p > 0).sum())
        print(f"  {name:10s} support={support}  {p}")
    print()

print("softmax keeps every position in play; top-k pins the support to k;")
print("sparsemax and entmax-1.5 choose their support from the score gaps,")
print("with entmax-1.5 consistently at least as dense as sparsemax.")
