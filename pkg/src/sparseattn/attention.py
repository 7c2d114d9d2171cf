"""Attention variants over scaled dot-product scores.

The score matrix P = Q K^T / sqrt(d') feeds one of four row normalizers:

* ``dense``     - plain softmax.
* ``topk``      - keep the k largest scores per row, mask the rest to
                  -inf, then softmax.  Masked probabilities are exactly 0
                  and the backward pass treats the per-row threshold as a
                  constant, passing gradients straight through surviving
                  positions only.
* ``sparsemax`` - Euclidean projection of each row onto the probability
                  simplex (sort-and-threshold).
* ``entmax15``  - the alpha=1.5 member between softmax and sparsemax,
                  p_i = max(0, x_i/2 - tau)^2 with tau found exactly from
                  the sorted candidates.

Structural masks (causal, padding) are applied before any of the above;
a -inf entry never counts toward the top-k selection, and rows with fewer
than k finite entries keep all of them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    DegenerateRowError,
    ShapeError,
    Tensor,
    _acc,
    _result,
    masked_fill_neg_inf,
    matmul,
    scale,
    softmax_rows,
    split_heads,
    merge_heads,
    transpose,
)

VARIANTS = ("dense", "topk", "sparsemax", "entmax15")
SPARSIFY_PHASES = ("train_and_predict", "train_only")


@dataclass
class AttentionConfig:
    """Selects the attention variant and its hyperparameters.

    ``k`` only matters for the topk variant.  ``sparsify_phase`` set to
    ``train_only`` means the sparsifier runs during training steps while
    evaluation/inference falls back to dense softmax.
    """

    variant: str = "topk"
    k: int = 8
    num_heads: int = 4
    d_model: int = 64
    sparsify_phase: str = "train_and_predict"
    causal: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.sparsify_phase not in SPARSIFY_PHASES:
            raise ValueError(f"unknown sparsify_phase {self.sparsify_phase!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.num_heads < 1:
            raise ValueError("num_heads must be >= 1")
        if self.d_model % self.num_heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by num_heads={self.num_heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads

    def effective_variant(self, training: bool) -> str:
        if self.variant == "dense":
            return "dense"
        if not training and self.sparsify_phase == "train_only":
            return "dense"
        return self.variant


@dataclass
class AttentionOutput:
    """Attention result plus the per-head weight matrices.

    ``weights[h]`` is the normalized [l_Q, l_K] distribution of head h,
    kept as a plain array snapshot for inspection and heatmap export.
    """

    output: Tensor
    weights: np.ndarray


# ---------------------------------------------------------------------------
# top-k row masking
# ---------------------------------------------------------------------------

def row_thresholds(p: np.ndarray, k: int) -> np.ndarray:
    """Per-row k-th largest finite value of the last axis.

    Rows holding fewer than k finite entries fall back to their minimum
    finite value, so thresholding with >= keeps everything finite.
    Raises :class:`DegenerateRowError` if a row has no finite entry.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    p = np.asarray(p)
    n = p.shape[-1]
    if k >= n:
        t = np.min(np.where(np.isfinite(p), p, np.inf), axis=-1)
    else:
        t = np.partition(p, n - k, axis=-1)[..., n - k]
        deficient = np.isneginf(t)
        if deficient.any():
            # fewer than k finite entries in those rows
            min_finite = np.min(np.where(np.isfinite(p), p, np.inf), axis=-1)
            t = np.where(deficient, min_finite, t)
    if np.isinf(t).any():
        raise DegenerateRowError("row_thresholds: a row holds no finite entry")
    return t


def topk_keep_mask(p: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of entries surviving top-k selection (ties included).

    The threshold is always finite, so a >= comparison alone excludes
    structural -inf entries; no separate finiteness mask is needed.
    """
    p = np.asarray(p)
    return p >= row_thresholds(p, k)[..., None]


def topk_mask_data(p: np.ndarray, k: int) -> np.ndarray:
    keep = topk_keep_mask(p, k)
    return np.where(keep, p, -np.inf)


def topk_mask(p: Tensor, k: int) -> Tensor:
    """Keep each row's k largest finite scores, set the rest to -inf.

    The comparison is >= against the k-th largest value, so scores tied at
    the threshold all survive and a tied row may keep more than k entries.
    Pre-existing -inf entries (structural masks) never count toward the k
    and stay -inf.  Backward treats the threshold as a constant: incoming
    gradients pass through kept positions unchanged and are zero
    elsewhere.
    """
    keep = topk_keep_mask(p.data, k)
    out = _result(np.where(keep, p.data, -np.inf), (p,), "topk_mask")
    if out.requires_grad:
        def _bw():
            _acc(p, np.where(keep, out.grad, 0))
        out._backward = _bw
    return out


def topk_mask_backward(d_masked: np.ndarray, p: np.ndarray, k: int) -> np.ndarray:
    """Straight-through vjp of :func:`topk_mask` at scores ``p``.

    dP_ij = dM_ij where P_ij survived the selection, else 0.
    """
    d_masked = np.asarray(d_masked)
    p = np.asarray(p)
    if d_masked.shape != p.shape:
        raise ShapeError(f"topk_mask_backward: shape mismatch {d_masked.shape} vs {p.shape}")
    return np.where(topk_keep_mask(p, k), d_masked, 0)


# ---------------------------------------------------------------------------
# sparsemax / entmax-1.5 row normalizers
# ---------------------------------------------------------------------------

def _require_finite(x: np.ndarray, op: str):
    if not np.isfinite(x).all():
        raise ValueError(f"{op} requires finite rows; mask handling happens upstream")


def sparsemax_rows_data(x: np.ndarray) -> np.ndarray:
    """Project each row (last axis) onto the probability simplex."""
    _require_finite(x, "sparsemax_rows")
    n = x.shape[-1]
    z = np.flip(np.sort(x, axis=-1), axis=-1)
    cumsum = np.cumsum(z, axis=-1) - 1.0
    rho = np.arange(1, n + 1, dtype=x.dtype)
    support = np.count_nonzero(z - cumsum / rho > 0, axis=-1)
    tau = np.take_along_axis(cumsum, support[..., None] - 1, axis=-1) / support[..., None].astype(x.dtype)
    return np.maximum(x - tau, 0)


def sparsemax_rows(x: Tensor) -> Tensor:
    """Sparsemax over the last axis: argmin_p ||p - x||^2 on the simplex.

    Produces exact zeros outside the support.  The backward pass subtracts
    the support-mean of the incoming gradient inside the support and is
    zero outside it.
    """
    p = sparsemax_rows_data(x.data)
    out = _result(p, (x,), "sparsemax_rows")
    if out.requires_grad:
        support = p > 0
        def _bw():
            g = out.grad
            cnt = support.sum(axis=-1, keepdims=True)
            mean = np.where(support, g, 0).sum(axis=-1, keepdims=True) / cnt
            _acc(x, np.where(support, g - mean, 0))
        out._backward = _bw
    return out


def entmax15_rows_data(x: np.ndarray) -> np.ndarray:
    """Exact alpha=1.5 entmax over the last axis via sorted candidates."""
    _require_finite(x, "entmax15_rows")
    n = x.shape[-1]
    z = np.flip(np.sort(x, axis=-1), axis=-1) / 2.0
    rho = np.arange(1, n + 1, dtype=x.dtype)
    mean = np.cumsum(z, axis=-1) / rho
    mean_sq = np.cumsum(z * z, axis=-1) / rho
    ss = rho * (mean_sq - mean * mean)
    delta = (1.0 - ss) / rho
    # tiny negatives inside the support are rounding noise
    tau = mean - np.sqrt(np.maximum(delta, 0))
    support = np.count_nonzero(tau <= z, axis=-1)
    tau_star = np.take_along_axis(tau, support[..., None] - 1, axis=-1)
    return np.maximum(x / 2.0 - tau_star, 0) ** 2


def entmax15_rows(x: Tensor) -> Tensor:
    """Entmax-1.5 over the last axis: p_i = max(0, x_i/2 - tau)^2.

    tau is the exact normalizing threshold.  Backward uses the closed-form
    correction weighted by sqrt(p) restricted to the support.
    """
    p = entmax15_rows_data(x.data)
    out = _result(p, (x,), "entmax15_rows")
    if out.requires_grad:
        gppr = np.sqrt(p)
        def _bw():
            g = out.grad
            dx = g * gppr
            q = dx.sum(axis=-1, keepdims=True) / gppr.sum(axis=-1, keepdims=True)
            _acc(x, dx - q * gppr)
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# score computation and masking
# ---------------------------------------------------------------------------

def attention_scores(q: Tensor, k: Tensor) -> Tensor:
    """P = Q K^T / sqrt(d') where d' is the width actually used."""
    if q.data.shape[-1] != k.data.shape[-1]:
        raise ShapeError(f"attention_scores: width mismatch {q.data.shape} vs {k.data.shape}")
    d = q.data.shape[-1]
    return scale(matmul(q, transpose(k)), 1.0 / np.sqrt(d))


def causal_mask(l_q: int, l_k: int) -> np.ndarray:
    """Boolean [l_q, l_k] matrix, True above the diagonal (blocked)."""
    return np.triu(np.ones((l_q, l_k), dtype=bool), k=1)


def apply_structural_mask(p: Tensor, causal: bool = False, pad_mask: np.ndarray | None = None) -> Tensor:
    """Set causally/padding-blocked positions to -inf before any variant.

    ``pad_mask`` is boolean with True meaning blocked; it may be [l_K] or
    broadcastable to the score shape.  Returns ``p`` unchanged when there
    is nothing to mask.
    """
    l_q, l_k = p.data.shape[-2], p.data.shape[-1]
    mask = None
    if causal:
        mask = causal_mask(l_q, l_k)
    if pad_mask is not None:
        pad_mask = np.asarray(pad_mask, dtype=bool)
        mask = pad_mask if mask is None else (mask | pad_mask)
    if mask is None:
        return p
    return masked_fill_neg_inf(p, mask)


def _masked_floor_fill(scores: Tensor, margin: float) -> Tensor:
    """Replace -inf entries with (row finite min - margin), constant w.r.t. grad.

    sparsemax/entmax need finite rows; a value at least 1 below the row
    maximum is guaranteed to fall outside their support (tau >= max - 1 on
    the simplex), so the filled positions get probability exactly 0 and
    zero gradient, matching the -inf semantics.
    """
    finite = np.isfinite(scores.data)
    if finite.all():
        return scores
    if not finite.any(axis=-1).all():
        raise DegenerateRowError("attention row holds no finite entry")
    floor = np.min(np.where(finite, scores.data, np.inf), axis=-1, keepdims=True) - margin
    out = _result(np.where(finite, scores.data, floor), (scores,), "masked_floor_fill")
    if out.requires_grad:
        def _bw():
            _acc(scores, np.where(finite, out.grad, 0))
        out._backward = _bw
    return out


def normalize_scores(scores: Tensor, variant: str, k: int) -> Tensor:
    """Turn (possibly -inf masked) scores into per-row distributions."""
    if variant == "dense":
        return softmax_rows(scores)
    if variant == "topk":
        return softmax_rows(topk_mask(scores, k))
    if variant == "sparsemax":
        return sparsemax_rows(_masked_floor_fill(scores, 2.0))
    if variant == "entmax15":
        return entmax15_rows(_masked_floor_fill(scores, 4.0))
    raise ValueError(f"unknown variant {variant!r}")


def attend(q: Tensor, k: Tensor, v: Tensor, variant: str = "topk", k_top: int = 8,
           causal: bool = False, pad_mask: np.ndarray | None = None):
    """Full attention step: scores -> structural mask -> normalize -> C = A V.

    Accepts rank-2 single-head inputs or rank-3 stacks (leading axis =
    batch*heads).  Returns ``(C, A)`` as graph nodes; this is the one code
    path shared by the toy models and the benchmark harness.
    """
    if k.data.shape[-2] != v.data.shape[-2]:
        raise ShapeError(f"attend: key/value length mismatch {k.data.shape} vs {v.data.shape}")
    p = attention_scores(q, k)
    p = apply_structural_mask(p, causal=causal, pad_mask=pad_mask)
    a = normalize_scores(p, variant, k_top)
    return matmul(a, v), a


def sparse_attention(q: Tensor, k: Tensor, v: Tensor, k_top: int) -> AttentionOutput:
    """Single-head top-k attention; the k >= l_K case equals dense exactly."""
    c, a = attend(q, k, v, variant="topk", k_top=k_top)
    weights = a.data if a.data.ndim == 3 else a.data[None]
    return AttentionOutput(output=c, weights=weights.copy())


# ---------------------------------------------------------------------------
# multi-head attention
# ---------------------------------------------------------------------------

@dataclass
class AttentionParams:
    """Projection weights for one multi-head attention site (all d x d)."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wc: Tensor


def init_attention_params(d_model: int, rng: np.random.Generator, dtype=np.float32) -> AttentionParams:
    """Uniform +-sqrt(6/(fan_in+fan_out)) init for the four projections."""
    bound = np.sqrt(6.0 / (d_model + d_model))
    def w():
        return Tensor(rng.uniform(-bound, bound, size=(d_model, d_model)).astype(dtype),
                      requires_grad=True)
    return AttentionParams(wq=w(), wk=w(), wv=w(), wc=w())


def multi_head_attention_batched(x_q: Tensor, x_kv: Tensor, batch: int,
                                 params: AttentionParams, config: AttentionConfig,
                                 training: bool = True,
                                 pad_mask: np.ndarray | None = None):
    """Batched multi-head attention over flattened [batch*len, d] inputs.

    Per head h, Q/K/V are the h-th feature slices of the projected inputs
    and attention runs at scale sqrt(d_model/num_heads).  Head outputs are
    concatenated and projected by ``wc``.  Returns the flattened output
    and the [batch*heads, l_Q, l_K] weight snapshot.
    """
    g = config.num_heads
    variant = config.effective_variant(training)
    q = split_heads(matmul(x_q, params.wq), batch, g)
    k = split_heads(matmul(x_kv, params.wk), batch, g)
    v = split_heads(matmul(x_kv, params.wv), batch, g)
    c, a = attend(q, k, v, variant=variant, k_top=config.k,
                  causal=config.causal, pad_mask=pad_mask)
    out = matmul(merge_heads(c, batch, g), params.wc)
    return out, a.data.copy()


def multi_head_attention(x_q: Tensor, x_kv: Tensor, params: AttentionParams,
                         config: AttentionConfig, training: bool = True,
                         pad_mask: np.ndarray | None = None) -> AttentionOutput:
    """Multi-head attention for a single sequence pair.

    Self-attention is the ``x_q is x_kv`` case; context attention passes
    decoder states as ``x_q`` against encoder output as ``x_kv``.
    """
    if x_q.data.ndim != 2 or x_kv.data.ndim != 2:
        raise ShapeError("multi_head_attention expects rank-2 [len, d] inputs")
    if x_q.data.shape[1] != config.d_model or x_kv.data.shape[1] != config.d_model:
        raise ShapeError(f"multi_head_attention: inputs must have width d_model={config.d_model}")
    out, weights = multi_head_attention_batched(x_q, x_kv, 1, params, config,
                                                training=training, pad_mask=pad_mask)
    return AttentionOutput(output=out, weights=weights)
