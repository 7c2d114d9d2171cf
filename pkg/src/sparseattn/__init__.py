"""Sparse attention laboratory.

A small numpy library for studying attention sparsification: explicit
top-k masked softmax with exact forward/backward semantics, sparsemax and
entmax-1.5 baselines, a toy encoder-decoder transformer on synthetic
sequence tasks, and a wall-clock benchmark harness.
"""

from .tensor import (
    Tensor,
    ShapeError,
    DegenerateRowError,
    backward,
    gradients,
    grad_check,
    matmul,
    softmax_rows,
)
from .attention import (
    AttentionConfig,
    AttentionOutput,
    AttentionParams,
    attend,
    attention_scores,
    apply_structural_mask,
    entmax15_rows,
    multi_head_attention,
    row_thresholds,
    sparse_attention,
    sparsemax_rows,
    topk_mask,
    topk_mask_backward,
)
from .seeding import substream

__version__ = "0.1.0"

__all__ = [
    "Tensor", "ShapeError", "DegenerateRowError", "backward", "gradients",
    "grad_check", "matmul", "softmax_rows",
    "AttentionConfig", "AttentionOutput", "AttentionParams", "attend",
    "attention_scores", "apply_structural_mask", "entmax15_rows",
    "multi_head_attention", "row_thresholds", "sparse_attention",
    "sparsemax_rows", "topk_mask", "topk_mask_backward", "substream",
    "__version__",
]
