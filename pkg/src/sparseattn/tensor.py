"""Dense tensors plus a minimal reverse-mode differentiation engine.

Values are numpy arrays wrapped in :class:`Tensor` nodes.  Every operation
builds the computation graph on the fly; calling :func:`backward` on a
scalar-valued node walks the graph in reverse topological order and
accumulates gradients into ``.grad`` of every node it reaches.

Two contracts matter throughout:

* Reductions run in a fixed, deterministic order.  Matrix products
  accumulate over the inner dimension strictly left to right, so results
  are bit-identical to a naive triple loop and reproducible across runs.
* Negative infinity is a first-class sentinel for masked score entries.
  ``softmax_rows`` maps it to exactly 0, never to a small epsilon.
"""

from __future__ import annotations

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes (or dtypes) are incompatible with the operation."""


class DegenerateRowError(ValueError):
    """A row holds no finite entry, so no distribution over it exists."""


class Tensor:
    """A dense real-valued array node in the computation graph.

    ``data`` is row-major with rank 1-3 in practice.  Entries are finite
    except for the negative-infinity sentinel inside masked score
    matrices.  Nodes record their op kind and input nodes, which makes
    the graph acyclic by construction.
    """

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_op", "_backward")

    def __init__(self, data, requires_grad=False, _prev=(), _op="leaf"):
        arr = np.asarray(data)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._prev = tuple(_prev)
        self._op = _op
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, op={self._op})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    # Small amount of operator sugar; the module-level functions are the
    # real surface and carry the shape checks.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _result(data, prev, op):
    req = any(p.requires_grad for p in prev)
    return Tensor(data, requires_grad=req, _prev=prev, _op=op)


def _acc(t: Tensor, g):
    # Lazy gradient accumulation: the first contribution is stored as-is
    # (it may alias the producer's buffer), later fan-in allocates a fresh
    # sum.  Nothing ever mutates a stored gradient in place, which keeps
    # the aliasing safe.
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _check_same_dtype(a: Tensor, b: Tensor, op: str):
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    _check_same_dtype(a, b, "add")
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")
    out = _result(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                _acc(a, out.grad)
            if b.requires_grad:
                _acc(b, out.grad)
        out._backward = _bw
    return out


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-n vector to every row of an [..., n] tensor."""
    _check_same_dtype(x, b, "add_bias")
    if b.data.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"add_bias: vector {b.data.shape} does not fit rows of {x.data.shape}")
    out = _result(x.data + b.data, (x, b), "add_bias")
    if out.requires_grad:
        def _bw():
            if x.requires_grad:
                _acc(x, out.grad)
            if b.requires_grad:
                _acc(b, out.grad.reshape(-1, b.data.shape[0]).sum(axis=0))
        out._backward = _bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    _check_same_dtype(a, b, "mul")
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shape mismatch {a.data.shape} vs {b.data.shape}")
    out = _result(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                _acc(a, b.data * out.grad)
            if b.requires_grad:
                _acc(b, a.data * out.grad)
        out._backward = _bw
    return out


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant (no gradient through c)."""
    c = float(c)
    out = _result(x.data * c, (x,), "scale")
    if out.requires_grad:
        def _bw():
            _acc(x, c * out.grad)
        out._backward = _bw
    return out


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = _result(x.data.reshape(shape), (x,), "reshape")
    if out.requires_grad:
        def _bw():
            _acc(x, out.grad.reshape(x.data.shape))
        out._backward = _bw
    return out


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes (plain transpose for rank 2)."""
    if x.data.ndim < 2:
        raise ShapeError("transpose needs rank >= 2")
    out = _result(np.swapaxes(x.data, -1, -2).copy(), (x,), "transpose")
    if out.requires_grad:
        def _bw():
            _acc(x, np.swapaxes(out.grad, -1, -2))
        out._backward = _bw
    return out


def relu(x: Tensor) -> Tensor:
    out = _result(np.maximum(x.data, 0), (x,), "relu")
    if out.requires_grad:
        keep = x.data > 0
        def _bw():
            _acc(x, np.where(keep, out.grad, 0))
        out._backward = _bw
    return out


def masked_fill_neg_inf(x: Tensor, mask: np.ndarray) -> Tensor:
    """Set positions where ``mask`` is True to -inf; identity elsewhere.

    The mask is a boolean array broadcastable to ``x.shape``.  Gradients
    at masked positions are exactly zero.
    """
    mask = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(mask.shape, x.data.shape)
    except ValueError:
        raise ShapeError(f"mask shape {mask.shape} does not broadcast to {x.data.shape}")
    out = _result(np.where(mask, -np.inf, x.data), (x,), "masked_fill")
    if out.requires_grad:
        def _bw():
            _acc(x, np.where(mask, 0, out.grad))
        out._backward = _bw
    return out


def sum_all(x: Tensor) -> Tensor:
    """Sum every entry into a single-element tensor."""
    out = _result(x.data.sum().reshape(1), (x,), "sum_all")
    if out.requires_grad:
        def _bw():
            _acc(x, np.broadcast_to(out.grad[0], x.data.shape))
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# matmul with deterministic left-to-right accumulation
# ---------------------------------------------------------------------------

try:
    from numba import njit as _njit
    USING_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    USING_NUMBA = False

if USING_NUMBA:
    # fastmath stays off: no FMA contraction, no reassociation, so the
    # kernels are bit-identical to the plain python triple loop.
    @_njit(cache=True)
    def _mm2_kernel(a, b, out):
        m, p = a.shape
        n = b.shape[1]
        for i in range(m):
            for t in range(p):
                s = a[i, t]
                for j in range(n):
                    out[i, j] += s * b[t, j]

    @_njit(cache=True)
    def _mm3_kernel(a, b, out):
        bn, m, p = a.shape
        n = b.shape[2]
        for k in range(bn):
            for i in range(m):
                for t in range(p):
                    s = a[k, i, t]
                    for j in range(n):
                        out[k, i, j] += s * b[k, t, j]


def _matmul_data_numpy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # One rank-1 update per inner index, so every output element is summed
    # strictly left to right; used when numba is unavailable.
    inner = a.shape[-1]
    if a.ndim == 2:
        out = np.zeros((a.shape[0], b.shape[1]), dtype=a.dtype)
        tmp = np.empty_like(out)
        for t in range(inner):
            np.multiply(a[:, t, None], b[None, t, :], out=tmp)
            out += tmp
        return out
    out = np.zeros((a.shape[0], a.shape[1], b.shape[2]), dtype=a.dtype)
    tmp = np.empty_like(out)
    for t in range(inner):
        np.multiply(a[:, :, t, None], b[:, t, None, :], out=tmp)
        out += tmp
    return out


def _matmul_data(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Matrix product accumulated over the inner dimension in index order.
    # BLAS is avoided on purpose: its blocked/FMA accumulation is neither
    # order-stable across builds nor equal to the naive triple loop.  The
    # numba kernels and the numpy fallback share the exact same summation
    # order, hence identical bits.
    if not USING_NUMBA:
        return _matmul_data_numpy(a, b)
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b)
    if a.ndim == 2:
        out = np.zeros((a.shape[0], b.shape[1]), dtype=a.dtype)
        _mm2_kernel(a, b, out)
        return out
    out = np.zeros((a.shape[0], a.shape[1], b.shape[2]), dtype=a.dtype)
    _mm3_kernel(a, b, out)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for rank-2 pairs or batched rank-3 pairs.

    Rank 3 multiplies slice i of ``a`` with slice i of ``b``; leading
    extents must match.  Summation order is fixed (see module docstring).
    """
    _check_same_dtype(a, b, "matmul")
    da, db = a.data, b.data
    if da.ndim == 2 and db.ndim == 2:
        if da.shape[1] != db.shape[0]:
            raise ShapeError(f"matmul: inner extents differ, {da.shape} x {db.shape}")
    elif da.ndim == 3 and db.ndim == 3:
        if da.shape[0] != db.shape[0] or da.shape[2] != db.shape[1]:
            raise ShapeError(f"matmul: batched shapes incompatible, {da.shape} x {db.shape}")
    else:
        raise ShapeError(f"matmul: ranks must be 2x2 or 3x3, got {da.ndim}x{db.ndim}")
    out = _result(_matmul_data(da, db), (a, b), "matmul")
    if out.requires_grad:
        def _bw():
            g = out.grad
            if a.requires_grad:
                _acc(a, _matmul_data(g, np.swapaxes(db, -1, -2)))
            if b.requires_grad:
                _acc(b, _matmul_data(np.swapaxes(da, -1, -2), g))
        out._backward = _bw
    return out


def split_heads(x: Tensor, batch: int, heads: int) -> Tensor:
    """[batch*len, d] -> [batch*heads, len, d/heads] with per-head slices.

    Head h of sequence item takes feature columns [h*dk, (h+1)*dk).
    """
    n, d = x.data.shape
    if n % batch != 0 or d % heads != 0:
        raise ShapeError(f"split_heads: {x.data.shape} not divisible by batch={batch}, heads={heads}")
    length, dk = n // batch, d // heads
    data = (x.data.reshape(batch, length, heads, dk)
            .transpose(0, 2, 1, 3)
            .reshape(batch * heads, length, dk))
    out = _result(data, (x,), "split_heads")
    if out.requires_grad:
        def _bw():
            _acc(x, out.grad.reshape(batch, heads, length, dk)
                 .transpose(0, 2, 1, 3)
                 .reshape(n, d))
        out._backward = _bw
    return out


def merge_heads(x: Tensor, batch: int, heads: int) -> Tensor:
    """Inverse of :func:`split_heads`: [batch*heads, len, dk] -> [batch*len, d]."""
    bh, length, dk = x.data.shape
    if bh != batch * heads:
        raise ShapeError(f"merge_heads: leading extent {bh} != batch*heads {batch * heads}")
    data = (x.data.reshape(batch, heads, length, dk)
            .transpose(0, 2, 1, 3)
            .reshape(batch * length, heads * dk))
    out = _result(data, (x,), "merge_heads")
    if out.requires_grad:
        def _bw():
            _acc(x, out.grad.reshape(batch, length, heads, dk)
                 .transpose(0, 2, 1, 3)
                 .reshape(bh, length, dk))
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# softmax over rows with the -inf sentinel
# ---------------------------------------------------------------------------

def softmax_rows_data(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax of the last axis; -inf entries map to exactly 0."""
    rowmax = np.max(x, axis=-1, keepdims=True)
    if np.isneginf(rowmax).any():
        raise DegenerateRowError("softmax_rows: a row holds no finite entry")
    with np.errstate(invalid="ignore"):
        shifted = x - rowmax
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x: Tensor) -> Tensor:
    """Normalize each row (last axis) into a probability distribution.

    Entries equal to -inf receive probability exactly 0.  Raises
    :class:`DegenerateRowError` when a whole row is -inf.
    """
    p = softmax_rows_data(x.data)
    out = _result(p, (x,), "softmax_rows")
    if out.requires_grad:
        def _bw():
            g = out.grad
            dot = np.sum(g * p, axis=-1, keepdims=True)
            _acc(x, p * (g - dot))
        out._backward = _bw
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    _check_same_dtype(x, gain, "layer_norm")
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError("layer_norm: gain/bias must be length-d vectors")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = (x.data - mu) * inv
    out = _result(xhat * gain.data + bias.data, (x, gain, bias), "layer_norm")
    if out.requires_grad:
        def _bw():
            g = out.grad
            if gain.requires_grad:
                _acc(gain, (g * xhat).reshape(-1, d).sum(axis=0))
            if bias.requires_grad:
                _acc(bias, g.reshape(-1, d).sum(axis=0))
            if x.requires_grad:
                gy = g * gain.data
                m1 = gy.mean(axis=-1, keepdims=True)
                m2 = (gy * xhat).mean(axis=-1, keepdims=True)
                _acc(x, inv * (gy - m1 - xhat * m2))
        out._backward = _bw
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` by integer id; scatter-adds on backward."""
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() >= table.data.shape[0]:
        raise ShapeError("embedding: id out of range")
    out = _result(table.data[ids], (table,), "embedding")
    if out.requires_grad:
        def _bw():
            g = np.zeros_like(table.data)
            np.add.at(g, ids, out.grad)
            _acc(table, g)
        out._backward = _bw
    return out


def cross_entropy_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer labels under row-wise softmax(logits)."""
    labels = np.asarray(labels).reshape(-1)
    n, v = logits.data.shape
    if labels.shape[0] != n:
        raise ShapeError(f"cross_entropy: {labels.shape[0]} labels for {n} rows")
    m = logits.data.max(axis=-1, keepdims=True)
    z = logits.data - m
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    loss = -logp[np.arange(n), labels].mean()
    out = _result(np.asarray([loss], dtype=logits.data.dtype), (logits,), "cross_entropy")
    if out.requires_grad:
        def _bw():
            p = np.exp(logp)
            p[np.arange(n), labels] -= 1.0
            _acc(logits, (out.grad[0] / n) * p)
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output: Tensor) -> None:
    """Reverse-mode sweep from a scalar-valued output node.

    Fills ``.grad`` on every node reachable from ``output`` with
    d(output)/d(node); fan-out contributions accumulate by summation.
    Raises :class:`ShapeError` when the output is not single-element.
    """
    if output.data.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.data.shape}")
    order = _topo_order(output)
    for node in order:
        node.grad = None
    output.grad = np.ones_like(output.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward()
    for node in order:
        if node.requires_grad and node.grad is None:
            node.grad = np.zeros_like(node.data)


def gradients(output: Tensor, inputs) -> list[np.ndarray]:
    """Run :func:`backward` and return the gradient arrays of ``inputs``."""
    backward(output)
    return [t.grad for t in inputs]


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def grad_check(f, x: np.ndarray, eps: float = 1e-5, pattern_fn=None,
               floor: float = 1e-12) -> float:
    """Max relative error between reverse-mode and central differences.

    ``f`` maps a Tensor to a single-element Tensor.  For each coordinate
    the relative error is |analytic - central| / max(|analytic|,
    |central|, floor).  When ``pattern_fn`` is given it is evaluated at
    both perturbed points; coordinates whose discrete pattern (top-k mask,
    simplex support, ...) differs between the two are skipped, since the
    function is not differentiable across those boundaries.

    The default floor of 1e-12 only guards division by zero.  Central
    differences at eps=1e-5 in f64 carry ~1e-11 absolute cancellation
    noise, so coordinates whose true gradient is below ~1e-5 cannot be
    certified to fine relative tolerance by any oracle of this form;
    callers checking such losses pass a noise floor (e.g. 1e-4) to keep
    zero-signal coordinates from reading as disagreement.
    """
    x = np.asarray(x, dtype=np.float64)
    leaf = Tensor(x.copy(), requires_grad=True)
    backward(f(leaf))
    analytic = leaf.grad.reshape(-1)

    flat = x.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += eps
        xm[i] -= eps
        xp, xm = xp.reshape(x.shape), xm.reshape(x.shape)
        if pattern_fn is not None:
            if not np.array_equal(pattern_fn(xp), pattern_fn(xm)):
                continue
        fp = f(Tensor(xp)).item()
        fm = f(Tensor(xm)).item()
        central = (fp - fm) / (2.0 * eps)
        a = analytic[i]
        err = abs(a - central) / max(abs(a), abs(central), floor)
        worst = max(worst, err)
    return worst
