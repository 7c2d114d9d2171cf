"""Wall-clock comparison of the attention variants.

Times exactly the attention computation the models call (scores,
normalization, weighted values, and optionally the reverse sweep) on
pre-generated inputs; input creation and report serialization stay
outside the timed region.  Every iteration folds the output into a
checksum so nothing can be optimized away.  Absolute numbers are
machine-dependent; comparisons should use ratios of medians.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor, backward
from .attention import VARIANTS, attend
from .seeding import substream

BENCH_MODES = ("forward", "forward_backward")

CSV_HEADER = ("variant,batch,l_Q,l_K,d,g,k,mode,dtype,iters,"
              "median_s,mean_s,std_s,tokens_per_s")

MIN_ITERS = 30
MIN_WARMUP = 5


@dataclass
class BenchShape:
    batch: int = 4
    l_q: int = 64
    l_k: int = 64
    d: int = 64
    g: int = 4
    k: int = 8

    @property
    def head_dim(self) -> int:
        if self.d % self.g != 0:
            raise ValueError(f"d={self.d} not divisible by g={self.g}")
        return self.d // self.g


@dataclass
class BenchReport:
    variant: str
    shape: BenchShape
    mode: str
    dtype: str
    iters: int
    warmup: int
    times: list = field(default_factory=list)
    checksum: float = 0.0

    @property
    def median_s(self) -> float:
        return float(np.median(self.times))

    @property
    def mean_s(self) -> float:
        return float(np.mean(self.times))

    @property
    def std_s(self) -> float:
        return float(np.std(self.times))

    @property
    def tokens_per_s(self) -> float:
        return self.shape.batch * self.shape.l_q / self.mean_s

    def csv_row(self) -> str:
        s = self.shape
        return (f"{self.variant},{s.batch},{s.l_q},{s.l_k},{s.d},{s.g},{s.k},"
                f"{self.mode},{self.dtype},{self.iters},"
                f"{self.median_s:.6e},{self.mean_s:.6e},{self.std_s:.6e},"
                f"{self.tokens_per_s:.1f}")


def make_inputs(shape: BenchShape, seed: int = 0, dtype=np.float32):
    """Per-head Q/K/V stacks [batch*g, len, d/g], shared by all variants."""
    rng = substream(seed, "bench")
    dk = shape.head_dim
    lead = shape.batch * shape.g
    q = rng.standard_normal((lead, shape.l_q, dk)).astype(dtype)
    k = rng.standard_normal((lead, shape.l_k, dk)).astype(dtype)
    v = rng.standard_normal((lead, shape.l_k, dk)).astype(dtype)
    return q, k, v


def attention_checksum(q, k, v, variant: str, k_top: int, mode: str) -> float:
    """One untimed pass through the exact code the benchmark times."""
    requires = mode == "forward_backward"
    qt = Tensor(q, requires_grad=requires)
    kt = Tensor(k, requires_grad=requires)
    vt = Tensor(v, requires_grad=requires)
    c, _ = attend(qt, kt, vt, variant=variant, k_top=k_top)
    total = float(c.data.sum())
    if requires:
        backward(T.sum_all(c))
        total += float(qt.grad.sum()) + float(kt.grad.sum()) + float(vt.grad.sum())
    return total


def _validate(variant, mode, iters, warmup):
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if mode not in BENCH_MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if iters < MIN_ITERS:
        raise ValueError(f"iters must be >= {MIN_ITERS}")
    if warmup < MIN_WARMUP:
        raise ValueError(f"warmup must be >= {MIN_WARMUP}")


def _time_once(q, k, v, variant, k_top, requires, sink):
    t0 = time.perf_counter()
    qt = Tensor(q, requires_grad=requires)
    kt = Tensor(k, requires_grad=requires)
    vt = Tensor(v, requires_grad=requires)
    c, _ = attend(qt, kt, vt, variant=variant, k_top=k_top)
    sink[0] += float(c.data.reshape(-1)[0])
    if requires:
        backward(T.sum_all(c))
        sink[0] += float(qt.grad.reshape(-1)[0])
    return time.perf_counter() - t0


def bench_attention(variant: str, shape: BenchShape, mode: str = "forward",
                    iters: int = 50, warmup: int = 10, seed: int = 0,
                    dtype=np.float32) -> BenchReport:
    """Time one (variant, shape, mode) cell and return its report."""
    _validate(variant, mode, iters, warmup)
    q, k, v = make_inputs(shape, seed=seed, dtype=dtype)
    requires = mode == "forward_backward"
    report = BenchReport(variant=variant, shape=shape, mode=mode,
                         dtype=np.dtype(dtype).name.replace("float", "f"),
                         iters=iters, warmup=warmup)
    sink = [0.0]
    for i in range(warmup + iters):
        dt = _time_once(q, k, v, variant, shape.k, requires, sink)
        if i >= warmup:
            report.times.append(dt)
    report.checksum = attention_checksum(q, k, v, variant, shape.k, mode) + 0.0 * sink[0]
    return report


def bench_suite(shapes, variants, modes=BENCH_MODES, iters: int = 50,
                warmup: int = 10, seed: int = 0) -> list[BenchReport]:
    """Cross-product run over shapes x variants x modes.

    Cells are timed round-robin (iteration 1 of every cell, then
    iteration 2, ...) so that transient host stalls spread evenly across
    variants instead of skewing whichever cell they land on, and the
    warmup rounds pay allocator growth and JIT compilation up front.
    Comparisons between rows of one suite run are therefore fair even on
    a machine with background noise.
    """
    shapes = list(shapes)
    variants = list(variants)
    modes = list(modes)
    if not shapes or not variants or not modes:
        raise ValueError("shapes, variants and modes must be nonempty")
    cells = []
    sink = [0.0]
    for shape in shapes:
        for variant in variants:
            for mode in modes:
                _validate(variant, mode, iters, warmup)
                q, k, v = make_inputs(shape, seed=seed)
                report = BenchReport(variant=variant, shape=shape, mode=mode,
                                     dtype="f32", iters=iters, warmup=warmup)
                report.checksum = attention_checksum(q, k, v, variant, shape.k, mode)
                cells.append((shape, variant, mode, q, k, v, report))
    for i in range(warmup + iters):
        for shape, variant, mode, q, k, v, report in cells:
            dt = _time_once(q, k, v, variant, shape.k,
                            mode == "forward_backward", sink)
            if i >= warmup:
                report.times.append(dt)
    return [cell[-1] for cell in cells]


def suite_to_csv(reports) -> str:
    lines = [CSV_HEADER]
    lines.extend(r.csv_row() for r in reports)
    return "\n".join(lines) + "\n"
