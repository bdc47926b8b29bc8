"""Dense tensor engine with reverse-mode automatic differentiation.

Tensors wrap row-major numpy arrays (canonical image layout B,C,H,W) and
record a dynamic tape during the forward pass; ``backward`` walks the tape
once and frees it.  Storage defaults to float32 with a float64 switch for
gradient-check runs (``use_dtype``).

Every primitive op also reports itself to an optional op log together with
the active scope (``op_scope``), which is how the test suite proves the
inference path never touches the diffusion head.
"""

from __future__ import annotations

import contextlib
import weakref

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "Parameter", "Module", "ModuleList",
    "ShapeError", "GraphError",
    "no_grad", "use_dtype", "default_dtype", "op_scope", "record_ops",
    "backward",
    "add", "sub", "mul", "div", "neg", "abs_", "exp", "clip",
    "sum_", "mean_", "max_dim", "matmul",
    "reshape", "transpose", "concat", "narrow", "chunk",
    "relu", "leaky_relu", "gelu", "sigmoid",
    "softmax_dim", "l2_normalize_dim", "instance_norm",
    "conv2d", "bilinear_upsample", "avg_downsample", "global_avg_pool",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class GraphError(RuntimeError):
    """backward() was called on an unsuitable tensor."""


# ---------------------------------------------------------------------------
# Global modes: dtype, grad recording, scopes, op log
# ---------------------------------------------------------------------------

_DTYPE = np.float32
_GRAD_ENABLED = True
_SCOPE_STACK: list[str] = []
_OP_LOG: list | None = None
_SEQ = 0
# tensors whose .grad was populated by the most recent backward pass
_LAST_GRADS: "weakref.WeakSet[Tensor]" = weakref.WeakSet()


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily switch the storage dtype (float64 for gradient checks)."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def op_scope(name: str):
    """Tag every op executed inside the context with `name` in the op log."""
    _SCOPE_STACK.append(name)
    try:
        yield
    finally:
        _SCOPE_STACK.pop()


@contextlib.contextmanager
def record_ops():
    """Capture (op_name, scope) for every primitive op, grad mode or not."""
    global _OP_LOG
    prev = _OP_LOG
    log: list[tuple[str, str]] = []
    _OP_LOG = log
    try:
        yield log
    finally:
        _OP_LOG = prev


class _Node:
    """Tape entry: how an output tensor was produced."""

    __slots__ = ("op", "scope", "parents", "backward_fn", "seq")

    def __init__(self, op, parents, backward_fn):
        global _SEQ
        _SEQ += 1
        self.op = op
        self.scope = "/".join(_SCOPE_STACK)
        self.parents = parents
        self.backward_fn = backward_fn
        self.seq = _SEQ


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------

class Tensor:
    """N-dimensional array participating (optionally) in the gradient tape.

    Immutable after creation except for grad population; ``grad`` is only
    present after a backward pass in which this tensor participated.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, node: "_Node | None" = None) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = node is not None
        t.grad = None
        t._node = node
        return t

    # -- introspection ------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self):
        grad = ", grad" if self.grad is not None else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{grad})"

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis, keepdims)

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """Learnable tensor with a unique dotted-path name inside one model.

    init_gain scales the seeded initialization draw; residual-branch output
    projections use a small gain so deep gated stacks start near identity.
    """

    __slots__ = ("name", "init_gain")

    def __init__(self, data, name: str | None = None, dtype=None, init_gain: float = 1.0):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.init_gain = init_gain


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DTYPE))


def _result(arr: np.ndarray, op: str, parents: tuple, backward_fn) -> Tensor:
    if _OP_LOG is not None:
        _OP_LOG.append((op, "/".join(_SCOPE_STACK)))
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor._wrap(arr, _Node(op, parents, backward_fn))
    return Tensor._wrap(arr)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate grads of every requires_grad ancestor of a scalar loss.

    Each call starts from zeroed grads: grads written by the previous
    backward are dropped first, so repeated calls never accumulate.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None and not loss.requires_grad:
        raise GraphError("tensor is outside the recorded graph")

    for t in list(_LAST_GRADS):
        t.grad = None
    _LAST_GRADS.clear()

    # iterative topological order over the tape
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            topo.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for p in t._node.parents:
                if id(p) not in visited and (p._node is not None or p.requires_grad):
                    stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    _LAST_GRADS.add(loss)
    for t in reversed(topo):
        node = t._node
        if node is None or t.grad is None:
            continue
        grads = node.backward_fn(t.grad)
        for p, g in zip(node.parents, grads):
            if g is None or not (p.requires_grad or p._node is not None):
                continue
            g = np.asarray(g, dtype=p.data.dtype)
            if p.grad is None:
                p.grad = g
                _LAST_GRADS.add(p)
            else:
                p.grad = p.grad + g
        t._node = None  # free the tape as we go


def find_first_nan(t: Tensor) -> str | None:
    """Name the earliest recorded op whose output contains a non-finite value."""
    seen: set[int] = set()
    stack = [t]
    bad: list[tuple[int, str, str]] = []
    while stack:
        cur = stack.pop()
        if id(cur) in seen:
            continue
        seen.add(id(cur))
        node = cur._node
        if node is None:
            continue
        if not np.all(np.isfinite(cur.data)):
            if all(np.all(np.isfinite(p.data)) for p in node.parents):
                bad.append((node.seq, node.op, node.scope))
        stack.extend(node.parents)
    if not bad:
        return None
    seq, op, scope = min(bad)
    where = f" in scope '{scope}'" if scope else ""
    return f"op '{op}'{where}"


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, "add", (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, "sub", (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        ga = _unbroadcast(g * b.data, a.shape) if (a.requires_grad or a._node) else None
        gb = _unbroadcast(g * a.data, b.shape) if (b.requires_grad or b._node) else None
        return ga, gb

    return _result(a.data * b.data, "mul", (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape) if (a.requires_grad or a._node) else None
        gb = None
        if b.requires_grad or b._node:
            gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _result(a.data / b.data, "div", (a, b), bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _result(-a.data, "neg", (a,), lambda g: (-g,))


def abs_(a) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        return (g * np.sign(a.data),)

    return _result(np.abs(a.data), "abs", (a,), bwd)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _result(out, "exp", (a,), lambda g: (g * out,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only strictly inside the range."""
    a = _as_tensor(a)
    mask = (a.data > lo) & (a.data < hi)

    def bwd(g):
        return (g * mask,)

    return _result(np.clip(a.data, lo, hi), "clip", (a,), bwd)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axis = _norm_axis(axis, a.ndim)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), "sum", (a,), bwd)


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axis = _norm_axis(axis, a.ndim)
    count = a.size if axis is None else int(np.prod([a.shape[ax] for ax in axis]))

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / count,)

    return _result(a.data.mean(axis=axis, keepdims=keepdims), "mean", (a,), bwd)


def max_dim(a, axis: int, keepdims: bool = True) -> Tensor:
    """Max along one axis; gradient routes to the (first) argmax."""
    a = _as_tensor(a)
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        dx = np.zeros_like(a.data)
        np.put_along_axis(dx, np.expand_dims(idx, axis), g, axis=axis)
        return (dx,)

    return _result(out, "max_dim", (a,), bwd)


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape) if not isinstance(shape, int) else (shape,)

    def bwd(g):
        return (g.reshape(a.shape),)

    return _result(a.data.reshape(shape), "reshape", (a,), bwd)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return _result(a.data.transpose(axes), "transpose", (a,), bwd)


def concat(tensors, axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis),
                   "concat", tuple(tensors), bwd)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    a = _as_tensor(a)
    axis = axis % a.ndim
    sl = tuple(slice(None) if i != axis else slice(start, start + length)
               for i in range(a.ndim))

    def bwd(g):
        dx = np.zeros_like(a.data)
        dx[sl] = g
        return (dx,)

    return _result(np.ascontiguousarray(a.data[sl]), "narrow", (a,), bwd)


def chunk(a, parts: int, axis: int) -> tuple:
    """Split into `parts` equal slices along `axis`."""
    a = _as_tensor(a)
    n = a.shape[axis]
    if n % parts != 0:
        raise ShapeError(f"axis {axis} extent {n} not divisible into {parts} chunks")
    step = n // parts
    return tuple(narrow(a, axis, i * step, step) for i in range(parts))


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product; leading dims must match exactly."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dims differ: {a.shape[-1]} (a dim {a.ndim - 1}) "
            f"vs {b.shape[-2]} (b dim {b.ndim - 2})")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul leading dims differ: {a.shape[:-2]} vs {b.shape[:-2]}")

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if (a.requires_grad or a._node) else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if (b.requires_grad or b._node) else None
        return ga, gb

    return _result(np.matmul(a.data, b.data), "matmul", (a, b), bwd)


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data >= 0
    return _result(np.where(mask, a.data, 0), "relu", (a,), lambda g: (g * mask,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _as_tensor(a)
    mask = a.data >= 0

    def bwd(g):
        return (np.where(mask, g, g * np.asarray(slope, dtype=g.dtype)),)

    return _result(np.where(mask, a.data, a.data * np.asarray(slope, dtype=a.dtype)),
                   "leaky_relu", (a,), bwd)


def gelu(a) -> Tensor:
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    a = _as_tensor(a)
    x = a.data
    phi_cdf = 0.5 * (1.0 + erf(x / np.sqrt(np.asarray(2.0, dtype=x.dtype))))

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(np.asarray(2.0 * np.pi, dtype=x.dtype))
        return (g * (phi_cdf + x * pdf),)

    return _result(x * phi_cdf, "gelu", (a,), bwd)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _result(out, "sigmoid", (a,), bwd)


# ---------------------------------------------------------------------------
# Normalizations
# ---------------------------------------------------------------------------

def softmax_dim(a, axis: int) -> Tensor:
    """Numerically stabilized softmax along one axis."""
    a = _as_tensor(a)
    axis = axis % a.ndim
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _result(out, "softmax", (a,), bwd)


def l2_normalize_dim(a, axis: int, eps: float = 1e-12) -> Tensor:
    """Scale slices along `axis` to unit Euclidean norm (eps-regularized)."""
    a = _as_tensor(a)
    axis = axis % a.ndim
    x = a.data
    n2 = (x * x).sum(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(n2 + np.asarray(eps, dtype=x.dtype))
    out = x * inv

    def bwd(g):
        proj = (g * x).sum(axis=axis, keepdims=True)
        return (g * inv - x * (proj * inv ** 3),)

    return _result(out, "l2_normalize", (a,), bwd)


def instance_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Per (sample, channel) spatial standardization with affine params."""
    a, gamma, beta = _as_tensor(a), _as_tensor(gamma), _as_tensor(beta)
    if a.ndim != 4:
        raise ShapeError(f"instance_norm expects B,C,H,W, got {a.shape}")
    C = a.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"gamma/beta must have shape ({C},)")
    x = a.data
    mu = x.mean(axis=(2, 3), keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = xc * inv
    g4 = gamma.data.reshape(1, C, 1, 1)
    out = xhat * g4 + beta.data.reshape(1, C, 1, 1)

    def bwd(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3)) if (gamma.requires_grad or gamma._node) else None
        dbeta = g.sum(axis=(0, 2, 3)) if (beta.requires_grad or beta._node) else None
        dx = None
        if a.requires_grad or a._node:
            gg = g * g4
            m1 = gg.mean(axis=(2, 3), keepdims=True)
            m2 = (gg * xhat).mean(axis=(2, 3), keepdims=True)
            dx = inv * (gg - m1 - xhat * m2)
        return dx, dgamma, dbeta

    return _result(out, "instance_norm", (a, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    B, C, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (B, C, kh, kw, Ho, Wo), (s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False)
    return win.reshape(B, C * kh * kw, Ho * Wo)  # copies into contiguous cols


def conv2d(a, weight, bias=None, stride: int = 1, padding: int = 0,
           groups: int = 1) -> Tensor:
    """2-D cross-correlation: B,Ci,H,W * Co,Ci/g,kh,kw -> B,Co,H',W'."""
    a, weight = _as_tensor(a), _as_tensor(weight)
    bias = _as_tensor(bias) if bias is not None else None
    if a.ndim != 4:
        raise ShapeError(f"conv2d input must be B,Ci,H,W, got {a.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be Co,Ci/g,kh,kw, got {weight.shape}")
    B, Ci, H, W = a.shape
    Co, Cig, kh, kw = weight.shape
    if Ci % groups != 0:
        raise ShapeError(f"input channels {Ci} not divisible by groups {groups}")
    if Co % groups != 0:
        raise ShapeError(f"output channels {Co} not divisible by groups {groups}")
    if Cig != Ci // groups:
        raise ShapeError(f"weight channel dim {Cig} != input channels per group {Ci // groups}")
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise ShapeError(f"kernel {kh}x{kw} exceeds padded input {H + 2 * padding}x{W + 2 * padding}")
    if bias is not None and bias.shape != (Co,):
        raise ShapeError(f"bias must have shape ({Co},), got {bias.shape}")

    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    K = Cig * kh * kw
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0

    if pointwise:
        cols = a.data.reshape(B, Ci, H * W)  # view, no gather
    else:
        xp = a.data if padding == 0 else np.pad(
            a.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        cols = _im2col(xp, kh, kw, stride, Ho, Wo)
    if groups == 1:
        out = np.matmul(weight.data.reshape(Co, K), cols)
    else:
        colsg = cols.reshape(B, groups, K, Ho * Wo)
        wg = weight.data.reshape(groups, Co // groups, K)
        out = np.matmul(wg, colsg).reshape(B, Co, Ho * Wo)
    out = out.reshape(B, Co, Ho, Wo)
    if bias is not None:
        out = out + bias.data.reshape(1, Co, 1, 1)

    def bwd(g):
        # cols captured from the forward pass; BLAS-friendly strided matmuls
        gf = g.reshape(B, Co, Ho * Wo)
        need_x = a.requires_grad or a._node
        need_w = weight.requires_grad or weight._node

        dw = None
        if need_w:
            if groups == 1:
                dw = np.matmul(gf, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
            else:
                dw = np.matmul(gf.reshape(B, groups, Co // groups, Ho * Wo),
                               cols.reshape(B, groups, K, Ho * Wo).transpose(0, 1, 3, 2)
                               ).sum(axis=0).reshape(weight.shape)

        dx = None
        if need_x:
            if groups == 1:
                dcols = np.matmul(weight.data.reshape(Co, K).T, gf)
            else:
                wg_t = weight.data.reshape(groups, Co // groups, K).transpose(0, 2, 1)
                dcols = np.matmul(wg_t, gf.reshape(B, groups, Co // groups, Ho * Wo)
                                  ).reshape(B, Ci * kh * kw, Ho * Wo)
            if pointwise:
                dx = dcols.reshape(B, Ci, H, W)
            else:
                dcols = dcols.reshape(B, Ci, kh, kw, Ho, Wo)
                Hp, Wp = H + 2 * padding, W + 2 * padding
                dxp = np.zeros((B, Ci, Hp, Wp), dtype=g.dtype)
                for i in range(kh):
                    hi = i + stride * Ho
                    for j in range(kw):
                        wj = j + stride * Wo
                        dxp[:, :, i:hi:stride, j:wj:stride] += dcols[:, :, i, j]
                dx = dxp[:, :, padding:padding + H, padding:padding + W] if padding else dxp

        db = gf.sum(axis=(0, 2)) if bias is not None and (bias.requires_grad or bias._node) else None
        return (dx, dw, db) if bias is not None else (dx, dw)

    parents = (a, weight, bias) if bias is not None else (a, weight)
    return _result(out, "conv2d", parents, bwd)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

def _up_weights(n_in: int, factor: int):
    # sample centers at (o + 0.5)/factor - 0.5, align-corners-false
    src = (np.arange(n_in * factor) + 0.5) / factor - 0.5
    i0f = np.floor(src)
    frac = src - i0f
    i0 = np.clip(i0f, 0, n_in - 1).astype(np.intp)
    i1 = np.clip(i0f + 1, 0, n_in - 1).astype(np.intp)
    return i0, i1, frac


def _segment_add(dst, idx, vals, axis):
    """dst[..., i, ...] += sum of vals rows with idx == i (idx non-decreasing)."""
    starts = np.flatnonzero(np.r_[True, np.diff(idx) != 0])
    labels = idx[starts]
    seg = np.add.reduceat(vals, starts, axis=axis)
    sl = tuple(slice(None) if d != axis else labels for d in range(dst.ndim))
    dst[sl] += seg


def bilinear_upsample(a, factor: int) -> Tensor:
    """Separable bilinear upsampling by an integer factor (align corners false)."""
    a = _as_tensor(a)
    if a.ndim != 4:
        raise ShapeError(f"bilinear_upsample expects B,C,H,W, got {a.shape}")
    if factor < 1:
        raise ShapeError(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return _result(a.data.copy(), "bilinear_upsample", (a,), lambda g: (g,))
    B, C, H, W = a.shape
    hi0, hi1, hf = _up_weights(H, factor)
    wi0, wi1, wf = _up_weights(W, factor)
    dt = a.dtype
    hf_ = hf.astype(dt)[:, None]
    wf_ = wf.astype(dt)[None, :]

    x = a.data
    rows = x[:, :, hi0, :] * (1 - hf_) + x[:, :, hi1, :] * hf_
    out = rows[:, :, :, wi0] * (1 - wf_) + rows[:, :, :, wi1] * wf_

    def bwd(g):
        # undo W axis: scatter columns back, then undo H axis
        drows = np.zeros((B, C, H * factor, W), dtype=g.dtype)
        _segment_add(drows, wi0, g * (1 - wf_), axis=3)
        _segment_add(drows, wi1, g * wf_, axis=3)
        dx = np.zeros((B, C, H, W), dtype=g.dtype)
        _segment_add(dx, hi0, drows * (1 - hf_), axis=2)
        _segment_add(dx, hi1, drows * hf_, axis=2)
        return (dx,)

    return _result(out, "bilinear_upsample", (a,), bwd)


def avg_downsample(a, factor: int) -> Tensor:
    """Average disjoint factor x factor blocks; H, W must divide evenly."""
    a = _as_tensor(a)
    if a.ndim != 4:
        raise ShapeError(f"avg_downsample expects B,C,H,W, got {a.shape}")
    B, C, H, W = a.shape
    if factor < 1:
        raise ShapeError(f"factor must be >= 1, got {factor}")
    if H % factor or W % factor:
        raise ShapeError(f"spatial dims {H}x{W} not divisible by factor {factor}")
    out = a.data.reshape(B, C, H // factor, factor, W // factor, factor).mean(axis=(3, 5))

    def bwd(g):
        g = g / np.asarray(factor * factor, dtype=g.dtype)
        return (np.repeat(np.repeat(g, factor, axis=2), factor, axis=3),)

    return _result(out, "avg_downsample", (a,), bwd)


def global_avg_pool(a) -> Tensor:
    """B,C,H,W -> B,C,1,1 spatial mean."""
    a = _as_tensor(a)
    if a.ndim != 4:
        raise ShapeError(f"global_avg_pool expects B,C,H,W, got {a.shape}")
    B, C, H, W = a.shape

    def bwd(g):
        return (np.broadcast_to(g / (H * W), a.shape),)

    return _result(a.data.mean(axis=(2, 3), keepdims=True), "global_avg_pool", (a,), bwd)


# ---------------------------------------------------------------------------
# Modules
# ---------------------------------------------------------------------------

class Module:
    """Container that tracks Parameters and sub-modules by attribute name.

    Parameter iteration is deterministic: lexicographic by dotted path.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for k, p in self._params.items():
            name = f"{prefix}{k}"
            p.name = name
            out[name] = p
        for k, child in self._children.items():
            out.update(child.named_parameters(prefix=f"{prefix}{k}."))
        return dict(sorted(out.items()))

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        self._children[str(len(self._items))] = module
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def init_parameters(module: Module, rng, neg_slope: float = 0.2) -> None:
    """Seeded He-style init, independent of registration order.

    Weights with >= 2 dims get fan-in scaled normals from a stream split by
    the parameter's own name; 1-D params (biases, norm betas) stay zero and
    norm gammas stay one, as constructed.
    """
    for name, p in module.named_parameters().items():
        if p.ndim < 2:
            continue
        fan_in = int(np.prod(p.shape[1:]))
        std = p.init_gain * np.sqrt(2.0 / ((1.0 + neg_slope ** 2) * fan_in))
        draw = rng.split("init", name).normal(p.shape) * std
        p.data = draw.astype(p.data.dtype)
