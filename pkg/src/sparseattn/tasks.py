"""Synthetic sequence-to-sequence tasks: copy, reverse, sort.

Sequences are drawn uniformly over the non-reserved symbols; ids 0/1/2
are reserved for pad/bos/eos.  All sequences in a task share one length,
so batches need no padding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .seeding import substream

PAD, BOS, EOS = 0, 1, 2
N_RESERVED = 3

TASK_KINDS = ("copy", "reverse", "sort")


@dataclass
class TaskSpec:
    kind: str = "copy"
    seq_len: int = 8
    vocab_size: int = 16
    n_train: int = 512
    n_eval: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}, expected one of {TASK_KINDS}")
        if self.vocab_size < N_RESERVED + 1:
            raise ValueError("vocab_size must leave room for pad/bos/eos plus one symbol")
        if self.seq_len < 1:
            raise ValueError("seq_len must be >= 1")


def target_for(kind: str, src: np.ndarray) -> np.ndarray:
    if kind == "copy":
        return src.copy()
    if kind == "reverse":
        return src[..., ::-1].copy()
    if kind == "sort":
        return np.sort(src, axis=-1)
    raise ValueError(f"unknown task kind {kind!r}")


def generate_task(spec: TaskSpec):
    """Deterministic (train, eval) datasets of (src, tgt) int arrays.

    Returns ``((train_src, train_tgt), (eval_src, eval_tgt))`` with shapes
    [n, seq_len].
    """
    rng = substream(spec.seed, f"task-{spec.kind}")
    total = spec.n_train + spec.n_eval
    src = rng.integers(N_RESERVED, spec.vocab_size, size=(total, spec.seq_len), dtype=np.int64)
    tgt = target_for(spec.kind, src)
    tr, ev = slice(0, spec.n_train), slice(spec.n_train, total)
    return (src[tr], tgt[tr]), (src[ev], tgt[ev])
