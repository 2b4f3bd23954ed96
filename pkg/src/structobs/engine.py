"""Dense float64 arrays with reverse-mode gradients on an explicit tape.

Every op computes eagerly with numpy and, when a tape is active and an
input requires gradients, records a node (output, inputs, vjp) on the
tape. ``Tape.backward`` walks the nodes in reverse execution order, which
is already a valid topological order, visiting each node exactly once.
Tapes are per-thread; computations on distinct tapes share nothing.
"""

import math
import threading

import numpy as np

PROB_FLOOR = 1e-12  # clamp applied to probabilities before any log


class ShapeError(ValueError):
    """Operand shapes do not satisfy an op's contract."""


class DegenerateInputError(ValueError):
    """Input is outside an op's numerical domain (e.g. near-zero norm)."""


_TLS = threading.local()


def _active_tape():
    return getattr(_TLS, "tape", None)


class Array:
    """A shaped buffer of float64 values, optionally carrying a gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Array(self.data.copy())

    def __repr__(self):
        return f"Array(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_array(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_array(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(as_array(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_array(x):
    return x if isinstance(x, Array) else Array(x)


def parameter(data, name=None):
    """A trainable leaf array."""
    return Array(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class Tape:
    """Execution-ordered record of op nodes for one reverse pass."""

    def __init__(self):
        self.nodes = []
        self._prev = None

    def __enter__(self):
        self._prev = _active_tape()
        _TLS.tape = self
        return self

    def __exit__(self, *exc):
        _TLS.tape = self._prev
        return False

    def backward(self, loss):
        """Seed d(loss)/d(loss) = 1 and accumulate grads into leaf arrays."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, inputs, vjp in reversed(self.nodes):
            if out.grad is None:
                continue
            grads = vjp(out.grad)
            for inp, g in zip(inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += g


class no_grad:
    """Suspend tape recording inside the block; outputs become constants."""

    def __enter__(self):
        self._prev = _active_tape()
        _TLS.tape = None
        return self

    def __exit__(self, *exc):
        _TLS.tape = self._prev
        return False


def _record(out, inputs, vjp):
    tape = _active_tape()
    if tape is not None and any(x.requires_grad for x in inputs):
        out.requires_grad = True
        tape.nodes.append((out, tuple(inputs), vjp))
    return out


def _unbroadcast(g, shape):
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    a, b = as_array(a), as_array(b)
    out = Array(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_array(a), as_array(b)
    out = Array(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_array(a), as_array(b)
    out = Array(a.data * b.data)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), vjp)


def div(a, b):
    a, b = as_array(a), as_array(b)
    out = Array(a.data / b.data)

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _record(out, (a, b), vjp)


def neg(a):
    out = Array(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def matmul(a, b):
    """Matrix product; 1-D operands are promoted to row/column matrices."""
    a, b = as_array(a), as_array(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul supports 1-D/2-D operands, got {a.shape} x {b.shape}")
    ka = a.shape[-1]
    kb = b.shape[0]
    if ka != kb:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    out = Array(a.data @ b.data)

    def vjp(g):
        ga = gb = None
        ad = a.data if a.ndim == 2 else a.data[None, :]
        bd = b.data if b.ndim == 2 else b.data[:, None]
        g2 = g
        if a.ndim == 1 and b.ndim == 1:
            g2 = np.asarray(g).reshape(1, 1)
        elif a.ndim == 1:
            g2 = g[None, :]
        elif b.ndim == 1:
            g2 = g[:, None]
        ga = g2 @ bd.T
        gb = ad.T @ g2
        if a.ndim == 1:
            ga = ga[0]
        if b.ndim == 1:
            gb = gb[:, 0]
        return ga, gb

    return _record(out, (a, b), vjp)


def transpose(a):
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    out = Array(a.data.T)
    return _record(out, (a,), lambda g: (g.T,))


def reshape(a, shape):
    out = Array(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def exp(a):
    out = Array(np.exp(a.data))
    return _record(out, (a,), lambda g: (g * out.data,))


def log(a):
    if np.any(a.data <= 0.0):
        raise DegenerateInputError("log of non-positive value")
    out = Array(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def relu(a):
    out = Array(np.maximum(a.data, 0.0))
    return _record(out, (a,), lambda g: (g * (a.data > 0.0),))


def clamp_min(a, floor):
    out = Array(np.maximum(a.data, floor))
    return _record(out, (a,), lambda g: (g * (a.data > floor),))


def total(a):
    """Sum of all entries, as a scalar."""
    out = Array(a.data.sum())
    return _record(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a):
    n = a.data.size
    out = Array(a.data.sum() / n)
    return _record(out, (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def rowsum(a):
    """Sum along the last axis of a matrix, giving a vector."""
    if a.ndim != 2:
        raise ShapeError(f"rowsum expects a matrix, got shape {a.shape}")
    out = Array(a.data.sum(axis=1))
    return _record(out, (a,), lambda g: (np.repeat(g[:, None], a.shape[1], axis=1),))


def softmax_rows(a):
    """Row-wise softmax with per-row max subtraction for stability."""
    if a.ndim == 1:
        z = a.data - a.data.max()
        e = np.exp(z)
        p = e / e.sum()
    elif a.ndim == 2:
        z = a.data - a.data.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
    else:
        raise ShapeError(f"softmax_rows expects 1-D or 2-D input, got shape {a.shape}")
    out = Array(p)

    def vjp(g):
        if a.ndim == 1:
            return (p * (g - (g * p).sum()),)
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _record(out, (a,), vjp)


def l2_normalize(a, eps=1e-12):
    """Scale rows (or a single vector) to unit Euclidean norm."""
    if a.ndim == 1:
        n = np.linalg.norm(a.data)
        if n <= eps:
            raise DegenerateInputError(f"cannot normalize near-zero vector (norm={n:.3e})")
        y = a.data / n

        def vjp(g):
            return ((g - y * (y @ g)) / n,)

    elif a.ndim == 2:
        n = np.linalg.norm(a.data, axis=1, keepdims=True)
        if np.any(n <= eps):
            raise DegenerateInputError("cannot normalize matrix with a near-zero row")
        y = a.data / n

        def vjp(g):
            return ((g - y * (y * g).sum(axis=1, keepdims=True)) / n,)

    else:
        raise ShapeError(f"l2_normalize expects 1-D or 2-D input, got shape {a.shape}")
    return _record(Array(y), (a,), vjp)


def cross_entropy(y, p):
    """H(y, p) = -sum(y * log p) with p clamped at PROB_FLOOR."""
    y, p = as_array(y), as_array(p)
    if y.shape != p.shape or y.ndim != 1:
        raise ShapeError(f"cross_entropy expects equal-length vectors, got {y.shape} and {p.shape}")
    pc = np.maximum(p.data, PROB_FLOOR)
    logp = np.log(pc)
    out = Array(-(y.data * logp).sum())

    def vjp(g):
        gy = -logp * g
        gp = np.where(p.data > PROB_FLOOR, -y.data / pc, 0.0) * g
        return gy, gp

    return _record(out, (y, p), vjp)


def kl_divergence(q, p):
    """KL(q || p) = sum(q * log(q / p)); zero-mass q terms contribute 0."""
    q, p = as_array(q), as_array(p)
    if q.shape != p.shape or q.ndim != 1:
        raise ShapeError(f"kl_divergence expects equal-length vectors, got {q.shape} and {p.shape}")
    qc = np.maximum(q.data, PROB_FLOOR)
    pc = np.maximum(p.data, PROB_FLOOR)
    out = Array((q.data * (np.log(qc) - np.log(pc))).sum())

    def vjp(g):
        gq = (np.log(qc) - np.log(pc) + np.where(q.data > PROB_FLOOR, 1.0, 0.0)) * g
        gp = np.where(p.data > PROB_FLOOR, -q.data / pc, 0.0) * g
        return gq, gp

    return _record(out, (q, p), vjp)


def take_rows(a, idx):
    """Gather rows of a matrix (or entries of a vector) by integer index."""
    idx = np.asarray(idx, dtype=np.intp)
    out = Array(a.data[idx])

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _record(out, (a,), vjp)


def take_per_row(a, cols):
    """out[i] = a[i, cols[i]] for a matrix, giving a vector."""
    if a.ndim != 2:
        raise ShapeError(f"take_per_row expects a matrix, got shape {a.shape}")
    cols = np.asarray(cols, dtype=np.intp)
    rows = np.arange(a.shape[0])
    out = Array(a.data[rows, cols])

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, cols), g)
        return (ga,)

    return _record(out, (a,), vjp)


def concat_rows(parts):
    parts = [as_array(p) for p in parts]
    out = Array(np.concatenate([p.data for p in parts], axis=0))
    sizes = [p.shape[0] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _record(out, tuple(parts), vjp)


def concat_cols(parts):
    parts = [as_array(p) for p in parts]
    out = Array(np.concatenate([p.data for p in parts], axis=1))
    sizes = [p.shape[1] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _record(out, tuple(parts), vjp)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize each row to zero mean / unit variance, then scale and shift."""
    if x.ndim != 2:
        raise ShapeError(f"layer_norm expects a matrix, got shape {x.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Array(xhat * gain.data + bias.data)

    def vjp(g):
        ggain = (g * xhat).sum(axis=0)
        gbias = g.sum(axis=0)
        gx_hat = g * gain.data
        m1 = gx_hat.mean(axis=1, keepdims=True)
        m2 = (gx_hat * xhat).mean(axis=1, keepdims=True)
        gx = (gx_hat - m1 - xhat * m2) * inv
        return gx, ggain, gbias

    return _record(out, (x, gain, bias), vjp)


def grad_check(f, x, h=1e-5):
    """Max relative error between reverse-mode and central-difference grads.

    `f` maps an Array to a scalar Array. Returns
    max_i |analytic_i - numeric_i| / (|numeric_i| + 1e-8).
    """
    if not (1e-5 <= h <= 1e-3):
        raise ValueError(f"step h={h} outside [1e-5, 1e-3]")
    x.grad = None
    with Tape() as tape:
        out = f(x)
        if out.data.size != 1:
            raise ShapeError("grad_check target must be scalar")
        if not np.isfinite(out.data):
            raise DegenerateInputError("f(x) is not finite")
        tape.backward(out)
    analytic = (x.grad if x.grad is not None else np.zeros_like(x.data)).copy()
    x.grad = None

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data)
        flat[i] = orig - h
        fm = float(f(x).data)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)
    rel = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)
    return float(rel.max())


def sqrt_scale(dim):
    """1/sqrt(dim) as a plain float, for attention score scaling."""
    return 1.0 / math.sqrt(dim)
