#!/usr/bin/env python3
"""The reverse-mode engine and the straight-through top-k gradient.

Builds a small attention loss, differentiates it with the graph engine,
and confirms against central finite differences.  Then probes the
Jacobian structure of top-k masked softmax numerically: gradients never
cross rows, and dropped score positions receive exactly zero.
"""

import numpy as np

import sparseattn.tensor as T
from sparseattn import Tensor, attend, backward, grad_check, topk_mask
from sparseattn.attention import topk_keep_mask

rng = np.random.default_rng(0)
np.set_printoptions(precision=5, suppress=True)

# --- a scalar loss through single-head top-k attention -------------------
q = rng.standard_normal((3, 4))
k = rng.standard_normal((6, 4))
v = rng.standard_normal((6, 4))
coeff = rng.standard_normal((3, 4))


def loss(qt):
    c, _ = attend(qt, Tensor(k), Tensor(v), variant="topk", k_top=2)
    return T.sum_all(T.mul(c, Tensor(coeff)))


def mask_pattern(q_arr):
    return topk_keep_mask((q_arr @ k.T) / 2.0, 2)


err = grad_check(loss, q, eps=1e-5, pattern_fn=mask_pattern)
print(f"max relative error vs central differences: {err:.2e}")

leaf = Tensor(q, requires_grad=True)
backward(loss(leaf))
print("\nanalytic dloss/dQ:")
print(leaf.grad)

# --- Jacobian structure of the masked softmax ----------------------------
p = rng.standard_normal((3, 5))
kept = topk_keep_mask(p, 2)
print("\nscore matrix rows keep these positions (k=2):")
print(kept.astype(int))

base = T.softmax_rows(topk_mask(Tensor(p), 2)).data
eps = 1e-6
bump = p.copy()
bump[1, 0] += eps          # position (1, 0) is kept or dropped per the mask
jac_10 = (T.softmax_rows(topk_mask(Tensor(bump), 2)).data - base) / eps
print("\nperturbing P[1,0]: rows other than 1 do not move")
print("max |dA| in rows 0 and 2:", np.abs(jac_10[[0, 2]]).max())

r, c = np.argwhere(~kept)[0]
bump = p.copy()
bump[r, c] += eps
jac_rc = (T.softmax_rows(topk_mask(Tensor(bump), 2)).data - base) / eps
print(f"perturbing the dropped position P[{r},{c}]: nothing moves at all")
print("max |dA| anywhere:", np.abs(jac_rc).max())
