"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients.  Calling
:func:`backward` on a scalar orders the reachable graph into a :class:`Tape`
(creation order is a valid topological order) and sweeps it once in reverse.
"""
from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_counter = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    pass


class no_grad:
    """Context manager that stops operations from being recorded."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "_retain", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_counter)
        self._retain = False
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def retain_grad(self) -> "Tensor":
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- element-wise -------------------------------------------------------------
def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _check_broadcast("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _check_broadcast("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def tensor_mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return _make(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, g / n, dtype=a.dtype),), "mean")


# -- linear algebra -------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """NCHW input, OIHW kernel, zero padding, im2col + one GEMM.

    Columns are laid out as (C*kh*kw, N*Ho*Wo) so each gather copies whole
    spatial blocks.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    xt = np.ascontiguousarray(_pad(x.data, padding).transpose(1, 0, 2, 3))
    if kh == kw == 1 and stride == 1:
        cols = xt.reshape(c, n * ho * wo)
    else:
        cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, i, j] = xt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
        cols = cols.reshape(c * kh * kw, n * ho * wo)
    wmat = w.data.reshape(o, -1)
    out = (wmat @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
        gw = (g2 @ cols.T).reshape(w.shape)
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(c, kh, kw, n, ho, wo)
            gxt = np.zeros(xt.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
            if padding:
                gxt = gxt[:, :, padding : padding + h, padding : padding + wd]
            gx = gxt.transpose(1, 0, 2, 3)
        return gx, gw

    return _make(np.ascontiguousarray(out), (x, w), bw, "conv2d")


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    training: bool = True,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of an NCHW tensor.

    In training mode batch statistics are used and the running buffers (if
    given) are updated in place with the unbiased batch variance.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm2d: incompatible shapes {x.shape} and {gamma.shape}")
    axes = (0, 2, 3)
    m = x.data.size // x.shape[1]
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if running_mean is not None:
            running_mean *= 1 - momentum
            running_mean += momentum * mean
            running_var *= 1 - momentum
            running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    out = out.astype(x.dtype, copy=False)

    def bw(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data[None, :, None, None]
        if training:
            gx = (inv[None, :, None, None] / m) * (
                m * gxhat - gxhat.sum(axis=axes, keepdims=True) - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = gxhat * inv[None, :, None, None]
        return gx.astype(x.dtype, copy=False), gg, gb

    return _make(out, (x, gamma, beta), bw, "batchnorm2d")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected NCHW, got {x.shape}")
    n, c, h, w = x.shape

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None], x.shape) / (h * w)).astype(x.dtype),

    return _make(x.data.mean(axis=(2, 3)), (x,), bw, "global_avg_pool")


def max_pool2d(x: Tensor, kernel: int = 2, stride: int | None = None) -> Tensor:
    stride = stride or kernel
    if x.ndim != 4 or x.shape[2] < kernel or x.shape[3] < kernel:
        raise ShapeError(f"max_pool2d: input {x.shape} incompatible with kernel {kernel}")
    n, c, h, w = x.shape
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        di, dj = np.divmod(arg, kernel)
        ni, ci, oi, oj = np.indices(arg.shape)
        np.add.at(gx, (ni, ci, oi * stride + di, oj * stride + dj), g)
        return (gx,)

    return _make(out, (x,), bw, "max_pool2d")


# -- shape manipulation -------------------------------------------------------
def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for k, (a, b) in enumerate(zip(ref, t.shape)) if k != axis % len(ref)):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def take_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` along axis 0."""

    def bw(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[start:stop] = g
        return (gx,)

    return _make(x.data[start:stop], (x,), bw, "take_rows")


# -- softmax family -------------------------------------------------------------
def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"softmax: expected N×K logits, got {x.shape}")
    p = softmax_np(x.data)

    def bw(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make(p, (x,), bw, "softmax")


def one_hot(labels: np.ndarray, k: int, dtype=np.float64) -> np.ndarray:
    out = np.zeros((len(labels), k), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1
    return out


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over rows of -sum_k target_k log softmax(logits)_k.

    ``targets`` is either an integer index vector or an N×K array of
    probability rows.
    """
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise ShapeError(f"softmax_cross_entropy: expected N×K logits, got {logits.shape}")
    if not np.all(np.isfinite(logits.data)):
        raise FloatingPointError("softmax_cross_entropy: non-finite logits")
    n, k = logits.shape
    t = np.asarray(targets)
    if t.ndim == 1:
        if t.shape[0] != n or t.min() < 0 or t.max() >= k:
            raise ShapeError(f"softmax_cross_entropy: bad class indices for logits {logits.shape}")
        t = one_hot(t, k, logits.dtype)
    elif t.shape != logits.shape:
        raise ShapeError(f"softmax_cross_entropy: incompatible shapes {logits.shape} and {t.shape}")
    t = t.astype(logits.dtype, copy=False)
    logp = _log_softmax(logits.data)
    loss = -(t * logp).sum() / n

    def bw(g):
        return (g * (np.exp(logp) * t.sum(axis=1, keepdims=True) - t) / n,)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "softmax_cross_entropy")


def mse(a: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error over all elements against a constant target."""
    target = np.asarray(target, dtype=a.dtype)
    if target.shape != a.shape:
        raise ShapeError(f"mse: incompatible shapes {a.shape} and {target.shape}")
    diff = a.data - target
    return _make(np.asarray((diff**2).mean(), dtype=a.dtype), (a,), lambda g: (g * 2 * diff / diff.size,), "mse")


OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "mul": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "batchnorm2d": batchnorm2d,
    "global_avg_pool": global_avg_pool,
    "max_pool2d": max_pool2d,
    "reshape": reshape,
    "concat": concat,
}


def forward_op(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Dispatch a differentiable operation by name."""
    if kind not in OPS:
        raise ValueError(f"unknown op {kind!r}; expected one of {sorted(OPS)}")
    if kind == "concat":
        return concat(inputs, **attrs)
    return OPS[kind](*inputs, **attrs)


# -- backward -----------------------------------------------------------------
class Tape:
    """Operations reachable from a root, in creation (topological) order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(p for p in t._parents if p.requires_grad)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/dt into ``t.grad`` for every leaf (or retained) ancestor."""
    if loss.data.size != 1 or loss.ndim != 0:
        raise ShapeError(f"backward: expected a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor requiring grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    for node in reversed(Tape.from_root(loss).nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None or node._retain:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# -- optimizer ----------------------------------------------------------------
class SgdState:
    """SGD with classical momentum and coupled weight decay."""

    def __init__(self, params: Iterable[tuple[str, Tensor]], learning_rate: float = 0.1,
                 momentum: float = 0.9, weight_decay: float = 5e-4):
        if learning_rate < 0 or not 0 <= momentum < 1 or weight_decay < 0:
            raise ValueError("SgdState: need learning_rate >= 0, momentum in [0,1), weight_decay >= 0")
        self.params = list(params)
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def sgd_step(state: SgdState) -> None:
    """v <- momentum*v + grad + wd*param; param <- param - lr*v."""
    for name, p in state.params:
        if p.grad is None:
            continue
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"sgd_step: non-finite gradient for parameter {name!r}")
        v = state.velocity[name]
        v *= state.momentum
        v += p.grad
        if state.weight_decay:
            v += state.weight_decay * p.data
        p.data -= state.learning_rate * v
