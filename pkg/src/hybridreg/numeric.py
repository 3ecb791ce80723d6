"""Float64 tensors with reverse-mode differentiation and cost tracing.

Every op builds its output through :func:`make_op`, which records the parents and
a vector-Jacobian closure when gradients are needed, and reports a FLOP count to
the active :class:`CostTracer`. Closures capture numpy arrays, never output
tensors, so graphs are acyclic and memory is released as soon as the last
reference drops.

FLOP conventions (forward only):

* matmul ``(m, k) @ (k, n)``: ``2mkn``
* elementwise arithmetic, ``exp``, ``log``, ``sqrt``: 1 per output element
* ``sigmoid`` 3, ``softplus`` 3, ``silu`` 4 per element
* ``softmax_rows`` 5 per element, ``logsumexp_rows`` 4, ``layernorm_rows`` 7
* ``dwconv1d``: ``2 * M * C * K``; reductions: 1 per input element
* ``selective_scan``: ``M * E * (11 * N + 2)`` (see :func:`selective_scan`)
* indexing, reshapes and concatenation: 0
"""

from __future__ import annotations

import threading
import time
import weakref
from contextlib import contextmanager
from dataclasses import dataclass, field, fields, is_dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NonScalarOutput, ShapeMismatch

_state = threading.local()


def _grad_on() -> bool:
    return getattr(_state, "grad", True)


def _tracer() -> "CostTracer | None":
    return getattr(_state, "tracer", None)


@contextmanager
def no_grad():
    prev = _grad_on()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = op
        tracer = _tracer()
        if tracer is not None:
            tracer._alloc(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(x) -> Tensor:
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


def make_op(value, parents: Sequence[Tensor], backward: Callable, op: str, flops: int = 0) -> Tensor:
    """Create an op output.

    ``backward(g)`` receives the gradient of the output and returns one gradient
    (or ``None``) per parent, in order.
    """
    needs = _grad_on() and any(p.requires_grad for p in parents)
    out = Tensor(
        value,
        requires_grad=needs,
        _parents=tuple(parents) if needs else (),
        _backward=backward if needs else None,
        op=op,
    )
    tracer = _tracer()
    if tracer is not None:
        tracer._record(op, int(flops), out.data.nbytes)
    return out


# -- cost tracing ---------------------------------------------------------------


@dataclass
class OpRecord:
    op: str
    flops: int
    out_bytes: int


@dataclass
class CostTracer:
    """Collects per-op FLOPs and the high-water mark of live tensor bytes."""

    records: list[OpRecord] = field(default_factory=list)
    live_bytes: int = 0
    peak_bytes: int = 0
    elapsed_ms: float = 0.0

    def _alloc(self, t: Tensor) -> None:
        n = t.data.nbytes
        self.live_bytes += n
        self.peak_bytes = max(self.peak_bytes, self.live_bytes)
        weakref.finalize(t, self._free, n)

    def _free(self, n: int) -> None:
        self.live_bytes -= n

    def _record(self, op: str, flops: int, out_bytes: int) -> None:
        self.records.append(OpRecord(op, flops, out_bytes))

    def workspace(self, nbytes: int) -> None:
        """Account for temporary buffers an op holds beyond its output."""
        self.peak_bytes = max(self.peak_bytes, self.live_bytes + int(nbytes))


@contextmanager
def trace_costs():
    """Record costs of every op executed in the block (single tracer per thread)."""
    if _tracer() is not None:
        raise RuntimeError("cost traces cannot be nested")
    tracer = CostTracer()
    _state.tracer = tracer
    start = time.perf_counter()
    try:
        yield tracer
    finally:
        tracer.elapsed_ms = (time.perf_counter() - start) * 1e3
        _state.tracer = None


# -- differentiation ------------------------------------------------------------


class Tape:
    """Nodes reachable from ``output`` in topological order (parents first)."""

    def __init__(self, output: Tensor):
        self.output = output
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order

    def backward(self, keep: Iterable[Tensor] = ()) -> dict[int, np.ndarray]:
        keep_ids = {id(t) for t in keep}
        grads: dict[int, np.ndarray] = {id(self.output): np.ones_like(self.output.data)}
        kept: dict[int, np.ndarray] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if id(node) in keep_ids:
                kept[id(node)] = g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.broadcast_to(pg, parent.shape) if pg.shape != parent.shape else pg
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
        return kept


def grad(output: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``output`` with respect to each of ``params``."""
    if output.data.size != 1:
        raise NonScalarOutput(f"grad needs a scalar output, got shape {output.shape}")
    kept = Tape(output).backward(keep=params)
    return [np.array(kept.get(id(p), np.zeros_like(p.data))) for p in params]


@dataclass
class GradcheckReport:
    names: list[str]
    max_rel_error: list[float]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.max_rel_error)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error, default=0.0)


def gradcheck(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-4,
    tol: float = 1e-4,
    names: Sequence[str] | None = None,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradcheckReport:
    """Compare analytic gradients with central finite differences.

    The error of a parameter is ``max|analytic - numeric|`` over its entries,
    divided by ``max(max|analytic|, max|numeric|, 1e-6)``. ``max_entries`` caps
    the number of probed entries per parameter (sampled with ``seed``).
    """
    analytic = grad(f(), params)
    rng = np.random.default_rng(seed)
    errors = []
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        num = np.empty(idx.size)
        with no_grad():
            for n, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + step
                fp = f().item()
                flat[i] = orig - step
                fm = f().item()
                flat[i] = orig
                num[n] = (fp - fm) / (2 * step)
        a_sel = a.reshape(-1)[idx]
        scale = max(np.abs(a_sel).max(initial=0.0), np.abs(num).max(initial=0.0), 1e-6)
        errors.append(float(np.abs(a_sel - num).max(initial=0.0) / scale))
    names = list(names) if names is not None else [f"p{i}" for i in range(len(params))]
    return GradcheckReport(names, errors, tol)


# -- elementwise ----------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return make_op(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add", out.size)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    sa, sb = a.shape, b.shape
    return make_op(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub", out.size)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad * bd
    return make_op(
        out, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul", out.size
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return make_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
        "div",
        out.size,
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_op(-a.data, (a,), lambda g: (-g,), "neg", a.size)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,), "exp", out.size)


def log(a, floor: float = 0.0) -> Tensor:
    """Natural log; with ``floor > 0`` inputs below it are clamped (zero gradient there)."""
    a = as_tensor(a)
    x = a.data
    if floor > 0:
        live = x > floor
        out = np.log(np.where(live, x, floor))
        return make_op(out, (a,), lambda g: (np.where(live, g / np.where(live, x, 1.0), 0.0),), "log", out.size)
    out = np.log(x)
    return make_op(out, (a,), lambda g: (g / x,), "log", out.size)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_op(out, (a,), lambda g: (g * 0.5 / out,), "sqrt", out.size)


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return make_op(x * x, (a,), lambda g: (2.0 * g * x,), "square", x.size)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return make_op(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid", 3 * s.size)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.logaddexp(0.0, x)
    return make_op(out, (a,), lambda g: (g * _sigmoid(x),), "softplus", 3 * out.size)


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = _sigmoid(x)
    out = x * s
    return make_op(out, (a,), lambda g: (g * (s + out * (1.0 - s)),), "silu", 4 * out.size)


# -- linear algebra and shape ops -------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[0] or ad.ndim > 2 or bd.ndim > 2:
        raise ShapeMismatch(f"matmul {ad.shape} @ {bd.shape}")
    out = ad @ bd
    m = ad.shape[0] if ad.ndim == 2 else 1
    n = bd.shape[1] if bd.ndim == 2 else 1
    flops = 2 * m * ad.shape[-1] * n

    def backward(g):
        g2 = g.reshape(m, n)
        a2 = ad.reshape(m, -1)
        b2 = bd.reshape(-1, n)
        return (g2 @ b2.T).reshape(ad.shape), (a2.T @ g2).reshape(bd.shape)

    return make_op(out, (a, b), backward, "matmul", flops)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return make_op(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    s = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(s),), "reshape")


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    if isinstance(key, Tensor):
        key = key.data.astype(np.int64)
    out = a.data[key]
    s = a.shape

    def backward(g):
        ga = np.zeros(s)
        np.add.at(ga, key, g)
        return (ga,)

    return make_op(np.array(out), (a,), backward, "getitem")


def gather_rows(a, idx) -> Tensor:
    """Rows ``a[idx]``; the backward pass scatter-adds into the source rows."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    s = a.shape

    def backward(g):
        ga = np.zeros(s)
        np.add.at(ga, idx, g)
        return (ga,)

    return make_op(a.data[idx], (a,), backward, "gather_rows")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    out = np.concatenate([t.data for t in ts], axis=axis)
    cuts = np.cumsum(sizes)[:-1]
    return make_op(out, ts, lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    s = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, s),)

    return make_op(out, (a,), backward, "sum", a.size)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) / float(n)


def linear(x, W, b=None) -> Tensor:
    y = matmul(x, W)
    return y if b is None else add(y, b)


# -- row-wise normalizations ---------------------------------------------------


def softmax_rows(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    return make_op(y, (a,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),), "softmax_rows", 5 * y.size)


def logsumexp_rows(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (np.log(s) + m)[..., 0]
    p = e / s
    return make_op(out, (a,), lambda g: (g[..., None] * p,), "logsumexp_rows", 4 * x.size)


def layernorm_rows(a, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean and unit variance, then apply ``gain``/``bias``."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    out = make_op(xhat, (a,), backward, "layernorm_rows", 7 * x.size)
    if gain is not None:
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


def norm_rows(a, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is taken as 0."""
    a = as_tensor(a)
    x = a.data
    out = np.sqrt((x * x).sum(axis=axis))

    def backward(g):
        safe = np.where(out > 0, out, 1.0)
        scale = np.where(out > 0, g / safe, 0.0)
        return (x * np.expand_dims(scale, axis),)

    return make_op(out, (a,), backward, "norm_rows", 2 * x.size)


# -- sequence and segment ops ----------------------------------------------------


def dwconv1d(x, kernel) -> Tensor:
    """Causal depthwise convolution ``y[t, c] = sum_k kernel[k, c] * x[t - k, c]``.

    ``x`` is (M, C) and ``kernel`` is (K, C); positions before the start are zero.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    X, Kw = x.data, kernel.data
    if X.ndim != 2 or Kw.ndim != 2 or X.shape[1] != Kw.shape[1]:
        raise ShapeMismatch(f"dwconv1d input {X.shape} with kernel {Kw.shape}")
    M, C = X.shape
    K = Kw.shape[0]
    Xp = np.vstack([np.zeros((K - 1, C)), X])
    y = np.zeros((M, C))
    for k in range(K):
        y += Kw[k] * Xp[K - 1 - k : K - 1 - k + M]

    def backward(g):
        gp = np.zeros_like(Xp)
        gk = np.empty_like(Kw)
        for k in range(K):
            sl = slice(K - 1 - k, K - 1 - k + M)
            gp[sl] += Kw[k] * g
            gk[k] = (g * Xp[sl]).sum(axis=0)
        return gp[K - 1 :], gk

    return make_op(y, (x, kernel), backward, "dwconv1d", 2 * M * C * K)


def segment_sum(a, seg, n_seg: int) -> Tensor:
    """Sum rows of ``a`` that share a segment id."""
    a = as_tensor(a)
    seg = np.asarray(seg, dtype=np.int64)
    out = np.zeros((n_seg,) + a.shape[1:])
    np.add.at(out, seg, a.data)
    return make_op(out, (a,), lambda g: (g[seg],), "segment_sum", a.size)


def segment_max(a, seg, n_seg: int) -> Tensor:
    """Per-segment maximum of rows; the gradient goes to the first maximal row."""
    a = as_tensor(a)
    seg = np.asarray(seg, dtype=np.int64)
    x = a.data
    out = np.full((n_seg,) + x.shape[1:], -np.inf)
    np.maximum.at(out, seg, x)
    hit = x == out[seg]
    rows = np.broadcast_to(np.arange(x.shape[0]).reshape((-1,) + (1,) * (x.ndim - 1)), x.shape)
    first = np.full(out.shape, x.shape[0], dtype=np.int64)
    np.minimum.at(first, seg, np.where(hit, rows, x.shape[0]))
    winner = rows == first[seg]

    def backward(g):
        return (np.where(winner, g[seg], 0.0),)

    return make_op(out, (a,), backward, "segment_max", x.size)


def segment_softmax(a, seg, n_seg: int) -> Tensor:
    """Softmax of a column vector within each segment."""
    a = as_tensor(a)
    seg = np.asarray(seg, dtype=np.int64)
    shift = np.full((n_seg,) + a.shape[1:], -np.inf)
    np.maximum.at(shift, seg, a.data)
    e = exp(a - shift[seg])
    return e / gather_rows(segment_sum(e, seg, n_seg), seg)


# -- fused kernels ----------------------------------------------------------------


def _phi(z: np.ndarray) -> np.ndarray:
    """(exp(z) - 1) / z with its series near 0."""
    small = np.abs(z) < 1e-2
    zs = np.where(small, 1.0, z)
    series = 1 + z / 2 + z**2 / 6 + z**3 / 24 + z**4 / 120
    return np.where(small, series, np.expm1(zs) / zs)


def _dphi(z: np.ndarray) -> np.ndarray:
    small = np.abs(z) < 1e-2
    zs = np.where(small, 1.0, z)
    series = 0.5 + z / 3 + z**2 / 8 + z**3 / 30 + z**4 / 144 + z**5 / 840
    em1 = np.expm1(zs)
    return np.where(small, series, (zs * em1 + zs - em1) / (zs * zs))


def selective_scan(u, delta, A, B, C, D) -> Tensor:
    """Input-dependent diagonal SSM with zero-order-hold discretization per step.

    Shapes: ``u``/``delta`` (M, E), ``A`` (E, N), ``B``/``C`` (M, N), ``D`` (E,).
    For every channel e and state n::

        z      = delta[t, e] * A[e, n]
        h[t]   = exp(z) * h[t-1] + (expm1(z) / z) * delta[t, e] * B[t, n] * u[t, e]
        y[t,e] = sum_n C[t, n] * h[t, e, n] + D[e] * u[t, e]

    That is 11 FLOPs per (t, e, n) and 2 per (t, e).
    """
    u, delta, A, B, C, D = (as_tensor(t) for t in (u, delta, A, B, C, D))
    U, Dl, Am, Bm, Cm, Dv = u.data, delta.data, A.data, B.data, C.data, D.data
    M, E = U.shape
    N = Am.shape[1]
    if Dl.shape != (M, E) or Am.shape != (E, N) or Bm.shape != (M, N) or Cm.shape != (M, N) or Dv.shape != (E,):
        raise ShapeMismatch("selective_scan operand shapes disagree")
    z = Dl[:, :, None] * Am[None]
    a = np.exp(z)
    phi = _phi(z)
    bbar = phi * Dl[:, :, None] * Bm[:, None, :]
    h = np.empty((M, E, N))
    prev = np.zeros((E, N))
    for t in range(M):
        prev = a[t] * prev + bbar[t] * U[t][:, None]
        h[t] = prev
    y = np.einsum("tn,ten->te", Cm, h) + U * Dv
    tracer = _tracer()
    if tracer is not None:
        tracer.workspace(5 * h.nbytes)

    def backward(gy):
        gD = (gy * U).sum(axis=0)
        gC = np.einsum("te,ten->tn", gy, h)
        gU = gy * Dv
        ga = np.empty_like(h)
        gbbar = np.empty_like(h)
        run = np.zeros((E, N))
        for t in range(M - 1, -1, -1):
            run = run + gy[t][:, None] * Cm[t][None, :]
            ga[t] = run * (h[t - 1] if t > 0 else 0.0)
            gbbar[t] = run * U[t][:, None]
            gU[t] += (run * bbar[t]).sum(axis=1)
            run = run * a[t]
        gz = ga * a + gbbar * Dl[:, :, None] * Bm[:, None, :] * _dphi(z)
        gDl = (gbbar * phi * Bm[:, None, :]).sum(axis=2) + (gz * Am[None]).sum(axis=2)
        gB = (gbbar * phi * Dl[:, :, None]).sum(axis=1)
        gA = (gz * Dl[:, :, None]).sum(axis=0)
        return gU, gDl, gA, gB, gC, gD

    return make_op(y, (u, delta, A, B, C, D), backward, "selective_scan", M * E * (11 * N + 2))


def sym_top_eigvec(K) -> Tensor:
    """Unit eigenvector of the largest eigenvalue of ``(K + K^T) / 2``.

    The sign is fixed so the largest-magnitude component is positive. The
    gradient assumes the top eigenvalue is simple.
    """
    K = as_tensor(K)
    S = 0.5 * (K.data + K.data.T)
    lam, V = np.linalg.eigh(S)
    v = V[:, -1].copy()
    if v[np.argmax(np.abs(v))] < 0:
        v = -v
    n = S.shape[0]

    def backward(g):
        coef = np.zeros(n)
        gap = lam[-1] - lam[:-1]
        coef[:-1] = (V[:, :-1].T @ g) / gap
        dv = V @ coef
        gS = np.outer(dv, v)
        return (0.5 * (gS + gS.T),)

    return make_op(v, (K,), backward, "sym_top_eigvec", 9 * n**3)


def softmax_cross_entropy(logits, target_index: int) -> Tensor:
    """``-log softmax(logits)[target]`` for a 1D logit vector."""
    logits = as_tensor(logits)
    return logsumexp_rows(logits.reshape(1, -1))[0] - logits[target_index]


# -- parameter trees ----------------------------------------------------------------


def named_parameters(obj, prefix: str = "") -> list[tuple[str, Tensor]]:
    """Flatten nested dataclasses, lists and dicts of tensors into ``(name, tensor)``."""
    out: list[tuple[str, Tensor]] = []
    if isinstance(obj, Tensor):
        out.append((prefix, obj))
    elif is_dataclass(obj):
        for f in fields(obj):
            out += named_parameters(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            out += named_parameters(v, f"{prefix}.{i}" if prefix else str(i))
    elif isinstance(obj, dict):
        for k, v in obj.items():
            out += named_parameters(v, f"{prefix}.{k}" if prefix else str(k))
    return out


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, scale: float = 1.0) -> Tensor:
    return parameter(rng.normal(0.0, scale / np.sqrt(fan_in), size=(fan_in, fan_out)))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return make_op(np.abs(x), (a,), lambda g: (g * np.sign(x),), "abs", x.size)


def clamp_min(a, lo: float) -> Tensor:
    """``max(a, lo)``; entries clamped at ``lo`` receive no gradient."""
    a = as_tensor(a)
    x = a.data
    live = x >= lo
    return make_op(np.where(live, x, lo), (a,), lambda g: (np.where(live, g, 0.0),), "clamp_min", x.size)


def log1p_sum_exp_rows(a) -> Tensor:
    """``log(1 + sum_j exp(a_ij))`` per row, accurate when the sum is tiny."""
    a = as_tensor(a)
    x = a.data
    m = np.maximum(x.max(axis=1, initial=-np.inf), 0.0) if x.shape[1] else np.zeros(x.shape[0])
    s = np.exp(x - m[:, None]).sum(axis=1)
    out = np.where(m == 0.0, np.log1p(s), m + np.log(np.exp(-m) + s))

    def backward(g):
        return (g[:, None] * np.exp(x - out[:, None]),)

    return make_op(out, (a,), backward, "log1p_sum_exp_rows", 4 * x.size)
