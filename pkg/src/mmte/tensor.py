"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array; every differentiable operation records its
inputs and a backward closure on the result node, so the implicit tape is the
creation order of the nodes. ``backward`` materializes the tape as a ``Graph``
(exact topological order) and walks it in reverse. All reductions are plain
sequential numpy reductions, so forward results are bit-identical across runs
for identical inputs.

Training runs in float32; ``use_dtype("float64")`` switches new tensors to
float64 for gradient verification (``finite_difference_check``).
"""

from __future__ import annotations

import contextlib

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dt.type


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (evaluation / decoding fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A dense array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    @classmethod
    def _from_op(cls, data: np.ndarray, op: str, parents, backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def dims(self):
        return list(self.data.shape)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar; constants wrap as non-grad leaves
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    @property
    def T(self):
        return transpose(self, None)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Graph:
    """Topologically ordered op records reachable from a root node."""

    __slots__ = ("nodes",)

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        # iterative post-order DFS; parent order fixes the topological order
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)


def backward(loss: Tensor) -> None:
    """Accumulate exact reverse-mode gradients into ``.grad`` of reachable tensors."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    graph = Graph.trace(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        if node._backward is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._backward(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = g.copy() if g.base is not None or g is node.grad else g
            else:
                parent.grad += g


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bw(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return Tensor._from_op(out, "add", (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bw(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))

    return Tensor._from_op(out, "sub", (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))

    return Tensor._from_op(out, "mul", (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * c

    def bw(g):
        return (g * c,)

    return Tensor._from_op(out, "scale", (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul requires rank >= 2 operands, got {a.ndim} and {b.ndim}")
    ka, kb = a.shape[-1], b.shape[-2]
    if ka != kb:
        raise ValueError(f"matmul inner dimensions differ: left has {ka}, right has {kb} (shapes {a.shape} x {b.shape})")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ bd.swapaxes(-1, -2)
        gb = ad.swapaxes(-1, -2) @ g
        return (_unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape))

    return Tensor._from_op(out, "matmul", (a, b), bw)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return Tensor._from_op(out, "relu", (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    old = a.data.shape

    def bw(g):
        return (g.reshape(old),)

    return Tensor._from_op(out, "reshape", (a,), bw)


def transpose(a: Tensor, axes=None) -> Tensor:
    out = a.data.transpose(axes) if axes is not None else a.data.transpose()
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv) if inv is not None else g.transpose(),)

    return Tensor._from_op(out, "transpose", (a,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(out, "concat", tuple(tensors), bw)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather rows along ``axis`` 0 (embedding lookup / position gather)."""
    if axis != 0:
        raise ValueError("take supports axis=0 only")
    idx = np.asarray(indices)
    out = a.data[idx]
    shape = a.data.shape

    def bw(g):
        ga = np.zeros(shape, dtype=g.dtype)
        np.add.at(ga, idx, g)
        return (ga,)

    return Tensor._from_op(out, "take", (a,), bw)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(np.asarray(out), "sum", (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.data.shape
    n = a.data.size if axis is None else shape[axis]

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape) / n,)

    return Tensor._from_op(np.asarray(out), "mean", (a,), bw)


def max_(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; gradient flows to the first argmax (deterministic ties)."""
    out = a.data.max(axis=axis, keepdims=keepdims)
    arg = np.expand_dims(a.data.argmax(axis=axis), axis)
    shape = a.data.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        ga = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(ga, arg, g, axis=axis)
        return (ga,)

    return Tensor._from_op(out, "max", (a,), bw)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0. Deterministic given ``rng``."""
    if rate <= 0.0:
        return a
    if rate >= 1.0:
        raise ValueError("dropout rate must be < 1")
    keep = (rng.random(a.data.shape) >= rate).astype(a.data.dtype) / (1.0 - rate)
    out = a.data * keep

    def bw(g):
        return (g * keep,)

    return Tensor._from_op(out, "dropout", (a,), bw)


# ---------------------------------------------------------------------------
# fused numerical ops
# ---------------------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax with max-subtraction; rows sum to 1 for any finite input."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return Tensor._from_op(out, "softmax", (a,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if x.shape[-1] < 1:
        raise ValueError("layer_norm needs a non-empty last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    with np.errstate(over="ignore"):
        # variance may overflow to inf for extreme inputs; inv then underflows
        # to 0 and the output stays finite
        var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data
    d = x.shape[-1]
    gd = gain.data

    def bw(g):
        dxhat = g * gd
        gx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        reduce_axes = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=reduce_axes) if reduce_axes else g * xhat
        gbias = g.sum(axis=reduce_axes) if reduce_axes else g
        return (gx, _unbroadcast(ggain, gain.data.shape), _unbroadcast(gbias, bias.data.shape))

    return Tensor._from_op(out, "layer_norm", (x, gain, bias), bw)


def cross_entropy(logits: Tensor, targets, pad_id: int) -> Tensor:
    """Mean negative log-likelihood over non-pad positions.

    ``logits`` is [n, vocab]; ``targets`` an int sequence of length n whose
    entries are class ids or ``pad_id``. Pad positions contribute nothing.
    """
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy expects [n, vocab] logits, got shape {logits.shape}")
    t = np.asarray(targets)
    if t.shape != (logits.shape[0],):
        raise ValueError(f"targets length {t.shape} does not match logits rows {logits.shape[0]}")
    live = t != pad_id
    n_live = int(live.sum())
    if n_live == 0:
        raise ValueError("cross_entropy: every target position is padding")
    V = logits.shape[1]
    if t[live].min() < 0 or t[live].max() >= V:
        raise ValueError(f"target ids must lie in [0, {V}) or equal pad_id={pad_id}")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    denom = e.sum(axis=1, keepdims=True)
    logprob = (z - m) - np.log(denom)
    safe_t = np.where(live, t, 0)
    picked = logprob[np.arange(len(t)), safe_t]
    loss = -(picked * live).sum() / n_live
    probs = e / denom

    def bw(g):
        gl = probs.copy()
        gl[np.arange(len(t)), safe_t] -= 1.0
        gl *= (live / n_live)[:, None]
        return (gl * g,)

    return Tensor._from_op(np.asarray(loss, dtype=z.dtype), "cross_entropy", (logits,), bw)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


def finite_difference_check(
    f,
    params,
    h: float = 1e-4,
    samples_per_tensor: int = 64,
    seed: int = 0,
) -> float:
    """Compare analytic gradients of scalar ``f()`` against central differences.

    ``f`` must be a deterministic closure over ``params`` (name -> Tensor)
    returning a scalar Tensor. Returns the max over sampled coordinates of
    ``|analytic - numeric| / (|analytic| + |numeric| + 1e-12)``.

    Coordinates where the second difference reveals a non-smooth point (a ReLU
    kink inside the stencil) are skipped: central differences are meaningless
    there. A genuinely wrong analytic gradient is still caught because it
    disagrees with the (mutually consistent) one-sided slopes on smooth
    coordinates. Run in 64-bit mode.
    """
    for p in params.values():
        p.zero_grad()
    loss = f()
    backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()}
    f0 = float(loss.data)

    rng = np.random.default_rng(seed)
    worst = 0.0
    skipped = 0
    checked = 0
    with no_grad():
        for name in sorted(params):
            p = params[name]
            n = p.data.size
            if n <= samples_per_tensor:
                coords = np.arange(n)
            else:
                coords = rng.choice(n, size=samples_per_tensor, replace=False)
                coords.sort()
            flat = p.data.reshape(-1)
            for c in coords:
                orig = flat[c]
                flat[c] = orig + h
                f_plus = float(f().data)
                flat[c] = orig - h
                f_minus = float(f().data)
                flat[c] = orig
                numeric = (f_plus - f_minus) / (2.0 * h)
                curvature = abs(f_plus + f_minus - 2.0 * f0)
                if curvature > 0.1 * abs(f_plus - f_minus) + 1e-14:
                    skipped += 1
                    continue
                a = float(analytic[name].reshape(-1)[c])
                err = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
                worst = max(worst, err)
                checked += 1
    if checked == 0 or skipped > 0.25 * (checked + skipped):
        raise RuntimeError(
            f"finite_difference_check unreliable: {skipped} of {checked + skipped} coordinates hit non-smooth points"
        )
    return worst
