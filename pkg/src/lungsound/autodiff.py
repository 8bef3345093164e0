"""Reverse-mode automatic differentiation over dense real tensors.

A small define-by-run engine in the micrograd style: every op returns a
:class:`Tensor` that remembers its parents and a closure computing parent
gradients from the output gradient.  :func:`backward` topologically sorts the
graph and accumulates gradients; :func:`trace` exposes the same graph as an
inspectable record list.

The op set is exactly what the scalogram classifier needs: matmul, 2-D
convolution (dense / depthwise / pointwise), batch and layer normalization,
relu / relu6, softmax, global average pooling, dropout, elementwise add and
multiply, reshape / transpose, and reductions.  Convolutions are NHWC and run
as a loop over kernel taps, each tap a strided-view GEMM, which keeps peak
memory at one tap instead of a full im2col matrix.

Dtype policy: tensors are float32 by default; every op computes in the dtype
of its inputs, so running a graph on float64 tensors (as the finite-difference
checker does) gives float64 gradients throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LungsoundError
from .rng import Rng

__all__ = [
    "Tensor", "ShapeMismatchError", "NonScalarLossError",
    "add", "mul", "scale", "matmul", "reshape", "transpose",
    "relu", "relu6", "softmax", "mean_axis", "mean_all", "sum_all",
    "conv2d", "depthwise_conv2d", "pointwise_conv2d", "depthwise_separable_conv",
    "batch_norm", "layer_norm", "global_avg_pool", "dropout",
    "backward", "trace", "Graph", "GraphNode", "make_op",
    "finite_difference_check", "save_tensors", "load_tensors",
]


class ShapeMismatchError(LungsoundError):
    """Operand shapes are inconsistent for the requested op."""


class NonScalarLossError(LungsoundError):
    """backward() was asked to differentiate a non-scalar node."""


class Tensor:
    """A dense array plus the graph edge that produced it.

    ``_backward`` maps the output gradient to a tuple of parent gradients
    (``None`` for parents that need no gradient).  Leaves have no parents.
    """

    __slots__ = ("data", "requires_grad", "name", "_op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _op: str = "leaf", _parents: tuple = (), _backward=None):
        if isinstance(data, np.ndarray):
            if data.dtype not in (np.float32, np.float64):
                data = data.astype(np.float32)
        else:
            data = np.asarray(data, dtype=np.float32)
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._op = _op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self):
        tag = self.name or self._op
        return f"Tensor({tag}, shape={self.data.shape}, dtype={self.data.dtype})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_same_dtype(*tensors: Tensor):
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeMismatchError(f"mixed tensor dtypes {sorted(map(str, dtypes))}")


def make_op(data: np.ndarray, parents: tuple, op: str, backward_fn) -> Tensor:
    """Create an op output; the hook other modules use to add custom ops.

    ``backward_fn(out_grad) -> tuple`` must return one gradient (or None)
    per parent.  The graph edge is only kept if some parent requires grad.
    """
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, _op=op)
    return Tensor(data, requires_grad=True, _op=op, _parents=parents,
                  _backward=backward_fn)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and linear-algebra ops

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    out = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_op(out, (a, b), "add", back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    out = a.data * b.data

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_op(out, (a, b), "mul", back)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)

    def back(g):
        return (g * c,)

    return make_op(a.data * c, (a,), "scale", back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """np.matmul semantics for stacked matrices; operands must be >= 2-D."""
    _check_same_dtype(a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatchError("matmul operands must be at least 2-D")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeMismatchError(str(exc)) from None

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_op(out, (a, b), "matmul", back)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def back(g):
        return (g.reshape(a.shape),)

    return make_op(out, (a,), "reshape", back)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def back(g):
        return (g.transpose(inv),)

    return make_op(out, (a,), "transpose", back)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = np.where(mask, a.data, a.dtype.type(0))

    def back(g):
        return (g * mask,)

    return make_op(out, (a,), "relu", back)


def relu6(a: Tensor) -> Tensor:
    out = np.clip(a.data, 0, 6)
    mask = (a.data > 0) & (a.data < 6)

    def back(g):
        return (g * mask,)

    return make_op(out, (a,), "relu6", back)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return make_op(out, (a,), "softmax", back)


def mean_axis(a: Tensor, axis: int) -> Tensor:
    n = a.shape[axis]
    out = a.data.mean(axis=axis)

    def back(g):
        return (np.repeat(np.expand_dims(g / n, axis), n, axis=axis),)

    return make_op(out, (a,), "mean_axis", back)


def mean_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.mean(dtype=np.float64), dtype=a.dtype)

    def back(g):
        return (np.full(a.shape, g / a.size, dtype=a.dtype),)

    return make_op(out, (a,), "mean_all", back)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype)

    def back(g):
        return (np.full(a.shape, g, dtype=a.dtype),)

    return make_op(out, (a,), "sum_all", back)


# ---------------------------------------------------------------------------
# convolutions (NHWC)

def _same_pad(in_size: int, k: int, s: int) -> tuple[int, int, int]:
    out = -(-in_size // s)
    pad = max((out - 1) * s + k - in_size, 0)
    return out, pad // 2, pad - pad // 2


def _out_size_valid(in_size: int, k: int, s: int) -> int:
    return (in_size - k) // s + 1


def _pad_input(x: np.ndarray, kh: int, kw: int, s: int, padding: str):
    n, h, w, c = x.shape
    if padding == "same":
        oh, pt, pb = _same_pad(h, kh, s)
        ow, pl, pr = _same_pad(w, kw, s)
        if pt or pb or pl or pr:
            x = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    elif padding == "valid":
        oh, ow = _out_size_valid(h, kh, s), _out_size_valid(w, kw, s)
        pt = pl = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    return x, oh, ow, pt, pl


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """Dense 2-D convolution; ``x`` is NHWC, ``w`` is (kh, kw, cin, cout)."""
    _check_same_dtype(x, w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeMismatchError("conv2d expects NHWC input and (kh,kw,cin,cout) kernel")
    if x.shape[3] != w.shape[2]:
        raise ShapeMismatchError(f"conv2d channels: input {x.shape[3]} != kernel {w.shape[2]}")
    kh, kw, cin, cout = w.shape
    s = stride
    xp, oh, ow, pt, pl = _pad_input(x.data, kh, kw, s, padding)
    n = x.shape[0]
    out2 = np.zeros((n * oh * ow, cout), dtype=x.dtype)
    for dy in range(kh):
        for dx in range(kw):
            tap = xp[:, dy:dy + s * oh:s, dx:dx + s * ow:s, :]
            out2 += tap.reshape(-1, cin) @ w.data[dy, dx]
    out = out2.reshape(n, oh, ow, cout)

    def back(g):
        g2 = g.reshape(-1, cout)
        gw = np.empty_like(w.data)
        gxp = np.zeros_like(xp)
        for dy in range(kh):
            for dx in range(kw):
                tap = xp[:, dy:dy + s * oh:s, dx:dx + s * ow:s, :]
                gw[dy, dx] = tap.reshape(-1, cin).T @ g2
                gxp[:, dy:dy + s * oh:s, dx:dx + s * ow:s, :] += (
                    g2 @ w.data[dy, dx].T).reshape(n, oh, ow, cin)
        gx = gxp[:, pt:pt + x.shape[1], pl:pl + x.shape[2], :]
        return gx, gw

    return make_op(out, (x, w), "conv2d", back)


def depthwise_conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """Per-channel 2-D convolution; ``w`` is (kh, kw, c), one filter per channel."""
    _check_same_dtype(x, w)
    if x.data.ndim != 4 or w.data.ndim != 3:
        raise ShapeMismatchError("depthwise_conv2d expects NHWC input and (kh,kw,c) kernel")
    if x.shape[3] != w.shape[2]:
        raise ShapeMismatchError(f"depthwise channels: input {x.shape[3]} != kernel {w.shape[2]}")
    kh, kw, c = w.shape
    s = stride
    xp, oh, ow, pt, pl = _pad_input(x.data, kh, kw, s, padding)
    n = x.shape[0]
    out = np.zeros((n, oh, ow, c), dtype=x.dtype)
    for dy in range(kh):
        for dx in range(kw):
            out += xp[:, dy:dy + s * oh:s, dx:dx + s * ow:s, :] * w.data[dy, dx]

    def back(g):
        gw = np.empty_like(w.data)
        gxp = np.zeros_like(xp)
        for dy in range(kh):
            for dx in range(kw):
                tap = xp[:, dy:dy + s * oh:s, dx:dx + s * ow:s, :]
                gw[dy, dx] = (tap * g).sum(axis=(0, 1, 2))
                gxp[:, dy:dy + s * oh:s, dx:dx + s * ow:s, :] += g * w.data[dy, dx]
        gx = gxp[:, pt:pt + x.shape[1], pl:pl + x.shape[2], :]
        return gx, gw

    return make_op(out, (x, w), "depthwise_conv2d", back)


def pointwise_conv2d(x: Tensor, w: Tensor) -> Tensor:
    """1x1 channel-mixing convolution; ``w`` is (cin, cout)."""
    _check_same_dtype(x, w)
    if x.data.ndim != 4 or w.data.ndim != 2:
        raise ShapeMismatchError("pointwise_conv2d expects NHWC input and (cin,cout) kernel")
    if x.shape[3] != w.shape[0]:
        raise ShapeMismatchError(f"pointwise channels: input {x.shape[3]} != kernel {w.shape[0]}")
    n, h, wd, cin = x.shape
    cout = w.shape[1]
    out = (x.data.reshape(-1, cin) @ w.data).reshape(n, h, wd, cout)

    def back(g):
        g2 = g.reshape(-1, cout)
        gx = (g2 @ w.data.T).reshape(x.shape)
        gw = x.data.reshape(-1, cin).T @ g2
        return gx, gw

    return make_op(out, (x, w), "pointwise_conv2d", back)


def depthwise_separable_conv(x: Tensor, d: Tensor, p: Tensor, stride: int = 1) -> Tensor:
    """Depthwise filtering followed by pointwise channel mixing."""
    return pointwise_conv2d(depthwise_conv2d(x, d, stride=stride, padding="same"), p)


# ---------------------------------------------------------------------------
# normalization, pooling, dropout

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.9, eps: float = 1e-3) -> Tensor:
    """Channel-wise batch normalization over all non-channel axes.

    In training mode the batch statistics are used and the running buffers
    are updated in place; in inference mode the running buffers are used.
    """
    _check_same_dtype(x, gamma, beta)
    axes = tuple(range(x.data.ndim - 1))
    if training:
        mu = x.data.mean(axis=axes, dtype=np.float64).astype(x.dtype)
        var = x.data.var(axis=axes, dtype=np.float64).astype(x.dtype)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x.data - mu) * inv_std
    out = gamma.data * xhat + beta.data

    def back(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data
        if training:
            m = 1
            for ax in axes:
                m *= x.shape[ax]
            dvar = (dxhat * (x.data - mu)).sum(axis=axes) * (-0.5) * inv_std ** 3
            dmu = (-dxhat * inv_std).sum(axis=axes)
            gx = dxhat * inv_std + dvar * 2.0 * (x.data - mu) / m + dmu / m
        else:
            gx = dxhat * inv_std
        return gx.astype(x.dtype, copy=False), dgamma, dbeta

    return make_op(out.astype(x.dtype, copy=False), (x, gamma, beta), "batch_norm", back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    _check_same_dtype(x, gamma, beta)
    mu = x.data.mean(axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)
    var = x.data.var(axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x.data - mu) * inv_std
    out = gamma.data * xhat + beta.data
    lead = tuple(range(x.data.ndim - 1))

    def back(g):
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv_std * (dxhat - m1 - xhat * m2)
        return gx.astype(x.dtype, copy=False), dgamma, dbeta

    return make_op(out.astype(x.dtype, copy=False), (x, gamma, beta), "layer_norm", back)


def global_avg_pool(x: Tensor) -> Tensor:
    """NHWC feature map -> per-channel spatial mean, shape (N, C)."""
    if x.data.ndim != 4:
        raise ShapeMismatchError("global_avg_pool expects an NHWC tensor")
    n, h, w, c = x.shape
    out = x.data.mean(axis=(1, 2))

    def back(g):
        return (np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).astype(x.dtype, copy=False),)

    return make_op(out, (x,), "global_avg_pool", back)


def dropout(x: Tensor, p: float, rng: Rng, training: bool) -> Tensor:
    """Zero elements with probability ``p`` and rescale survivors by 1/(1-p).

    Identity when not training or ``p == 0``.  The mask is drawn from the
    counter-based ``rng`` handle, so a given (seed, stream) always produces
    the same mask.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = rng.generator().random(x.shape) >= p
    factor = x.dtype.type(1.0 / (1.0 - p))
    mask = keep.astype(x.dtype) * factor
    out = x.data * mask

    def back(g):
        return (g * mask,)

    return make_op(out, (x,), "dropout", back)


# ---------------------------------------------------------------------------
# graph traversal

def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


@dataclass
class GraphNode:
    op: str
    input_ids: tuple[int, ...]
    output_id: int
    output: Tensor


@dataclass
class Graph:
    """Inspectable form of a traced computation: topologically ordered records."""
    nodes: list[GraphNode]
    parameters: dict[int, Tensor]


def trace(root: Tensor) -> Graph:
    """Extract the op-record graph reachable from ``root``.

    Records are in topological order (every node's inputs precede it) and
    ``parameters`` collects the requires-grad leaves keyed by node id.
    """
    nodes = []
    params: dict[int, Tensor] = {}
    for t in _topo(root):
        if t._parents:
            nodes.append(GraphNode(t._op, tuple(id(p) for p in t._parents), id(t), t))
        elif t.requires_grad:
            params[id(t)] = t
    return Graph(nodes, params)


def backward(loss: Tensor, params: dict[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss with respect to ``params``.

    Returns a fresh name -> gradient map on every call (no accumulation
    between calls).  Parameters that do not influence the loss get zero
    gradients.  With ``params=None``, gradients for every reachable
    requires-grad leaf are returned, keyed by tensor name or ``id``.
    """
    if loss.data.size != 1:
        raise NonScalarLossError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    order = _topo(loss)
    reached: dict[int, np.ndarray] = {}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            if t.requires_grad:
                reached[id(t)] = g
            continue
        parent_grads = t._backward(g)
        for p, pg in zip(t._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] += pg
            else:
                grads[id(p)] = pg
    if params is None:
        out = {}
        for t in order:
            if not t._parents and t.requires_grad:
                key = t.name if t.name is not None else f"id{id(t)}"
                out[key] = reached.get(id(t), np.zeros_like(t.data))
        return out
    return {name: reached.get(id(t), np.zeros_like(t.data)) for name, t in params.items()}


# ---------------------------------------------------------------------------
# gradient verification

def finite_difference_check(fn, inputs: list[np.ndarray], eps: float = 1e-3) -> float:
    """Max relative error between backward() and central differences.

    ``fn`` maps a list of Tensors to a scalar Tensor.  The graph is run in
    float64 so the comparison probes the math, not storage precision.
    Relative error uses a ``max(1e-8, |a| + |n|)`` denominator.
    """
    tensors = [Tensor(np.asarray(x, dtype=np.float64), requires_grad=True, name=f"in{i}")
               for i, x in enumerate(inputs)]
    loss = fn(*tensors)
    analytic = backward(loss, {t.name: t for t in tensors})

    worst = 0.0
    for t in tensors:
        num = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = num.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            hi = float(fn(*tensors).data)
            flat[j] = orig - eps
            lo = float(fn(*tensors).data)
            flat[j] = orig
            nflat[j] = (hi - lo) / (2.0 * eps)
        a = analytic[t.name]
        denom = np.maximum(1e-8, np.abs(a) + np.abs(num))
        worst = max(worst, float(np.max(np.abs(a - num) / denom)))
    return worst


# ---------------------------------------------------------------------------
# named-tensor store

_TNS_MAGIC = b"TNS1"


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named float32 arrays: magic, count, then per-tensor records.

    Record layout (little-endian): name length u32, name bytes, rank u32,
    extents u32 each, float32 data.  Entries are written in sorted name
    order so identical contents produce identical bytes.
    """
    own = not hasattr(path, "write")
    f = open(path, "wb") if own else path
    try:
        f.write(_TNS_MAGIC)
        f.write(np.uint32(len(tensors)).tobytes())
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            nb = name.encode("utf-8")
            f.write(np.uint32(len(nb)).tobytes())
            f.write(nb)
            f.write(np.uint32(arr.ndim).tobytes())
            f.write(np.asarray(arr.shape, dtype="<u4").tobytes())
            f.write(arr.tobytes())
    finally:
        if own:
            f.close()


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise LungsoundError("truncated tensor store")
    return buf


def load_tensors(path) -> dict[str, np.ndarray]:
    """Read a store written by :func:`save_tensors` (float32 arrays)."""
    own = not hasattr(path, "read")
    f = open(path, "rb") if own else path
    try:
        if _read_exact(f, 4) != _TNS_MAGIC:
            raise LungsoundError("bad tensor store magic")
        count = int(np.frombuffer(_read_exact(f, 4), dtype="<u4")[0])
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            nlen = int(np.frombuffer(_read_exact(f, 4), dtype="<u4")[0])
            name = _read_exact(f, nlen).decode("utf-8")
            rank = int(np.frombuffer(_read_exact(f, 4), dtype="<u4")[0])
            shape = tuple(np.frombuffer(_read_exact(f, 4 * rank), dtype="<u4").tolist())
            n_items = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(_read_exact(f, 4 * n_items), dtype="<f4")
            out[name] = data.reshape(shape).copy()
        return out
    finally:
        if own:
            f.close()
