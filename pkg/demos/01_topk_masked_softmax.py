#!/usr/bin/env python3
"""Top-k masked softmax from the ground up.

Walks one score matrix through the three stages: per-row thresholds,
masking everything below the threshold to -inf, and row softmax.  Shows
that masked positions get probability exactly 0 (not epsilon), that ties
at the threshold all survive, and that structural -inf entries never
count toward the k.
"""

import numpy as np

from sparseattn import Tensor, row_thresholds, softmax_rows, topk_mask

np.set_printoptions(precision=4, suppress=True, linewidth=100)

scores = np.array([
    [1.0, 3.0, 2.0, -0.5, 0.2],
    [2.0, 2.0, 2.0, 0.0, -1.0],     # three-way tie at the threshold
    [-np.inf, 5.0, 4.0, 6.0, -np.inf],  # structurally masked entries
])
k = 2

print("scores:")
print(scores)

t = row_thresholds(scores, k)
print(f"\nper-row k-th largest finite value (k={k}):", t)

masked = topk_mask(Tensor(scores), k)
print("\nafter masking (everything below the threshold -> -inf):")
print(masked.data)

probs = softmax_rows(masked)
print("\nrow softmax of the masked scores:")
print(probs.data)

print("\nnonzeros per row:", (probs.data > 0).sum(axis=1).tolist())
print("row sums:        ", probs.data.sum(axis=1).tolist())
print("\nnote row 1: all three entries tied at the threshold survive, so a")
print("tied row keeps more than k positions; the comparison is score >= t_i.")

# masked probabilities are exactly zero, so sparsity is countable
assert (probs.data[0] == 0).sum() == 3
print("\nmasked probabilities are exact zeros, not tiny floats:")
print("probs[0] ==", probs.data[0].tolist())
