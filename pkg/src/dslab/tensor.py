"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op that sees an input with ``requires_grad`` records a :class:`Node`
carrying a monotonically increasing id. ``backward`` walks the reachable
nodes in strictly decreasing id order, so the traversal order is the
reverse of graph insertion order.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Node",
    "ShapeError",
    "LabelError",
    "NonFiniteError",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "assert_finite",
    "matmul",
    "linear",
    "add",
    "concat",
    "relu",
    "scalar_mul",
    "sum",
    "global_avg_pool",
    "conv2d",
    "batchnorm2d",
    "softmax_cross_entropy",
]

DTYPE = np.float64

# cap on one im2col buffer; larger batches are processed in slices
_COLS_BUDGET_BYTES = 64 * 1024 * 1024

_node_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    pass


class LabelError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, index: int, value: float, name: str | None = None):
        self.index = index
        self.value = value
        where = f" in {name}" if name else ""
        super().__init__(f"non-finite value {value!r} at flat index {index}{where}")


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend graph recording (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Node:
    __slots__ = ("id", "op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], backward_fn: Callable):
        self.id = next(_node_ids)
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn

    def __repr__(self) -> str:
        return f"Node({self.id}, {self.op})"


class Tensor:
    """A dense row-major array with an optional gradient of the same shape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._node: Node | None = None

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
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    @property
    def node_id(self) -> int | None:
        return None if self._node is None else self._node.id

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        return scalar_mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], op: str, backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._node = None
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, inputs, backward_fn)
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor that requires grad."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not require grad: nothing was recorded")
    if loss._node is None:
        _accumulate(loss, np.ones_like(loss.data))
        return

    tensors: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._node is None or t._node.id in tensors:
            continue
        tensors[t._node.id] = t
        stack.extend(i for i in t._node.inputs if i.requires_grad)

    pending: dict[int, np.ndarray] = {loss._node.id: np.ones_like(loss.data)}
    for nid in sorted(tensors, reverse=True):
        t = tensors[nid]
        g = pending.pop(nid, None)
        if g is None:
            continue
        _accumulate(t, g)
        in_grads = t._node.backward_fn(g)
        for inp, ig in zip(t._node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp._node is None:
                _accumulate(inp, ig)
            else:
                key = inp._node.id
                if key in pending:
                    pending[key] = pending[key] + ig
                else:
                    pending[key] = ig


def assert_finite(t: Tensor | np.ndarray, name: str | None = None) -> None:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    flat = data.reshape(-1)
    bad = np.flatnonzero(~np.isfinite(flat))
    if bad.size:
        raise NonFiniteError(int(bad[0]), float(flat[bad[0]]), name)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- dense ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def bw(g):
        return (
            g @ b.data.T if a.requires_grad else None,
            a.data.T @ g if b.requires_grad else None,
        )

    return _result(a.data @ b.data, (a, b), "matmul", bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape (N, in) and weight (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input shape {x.shape} incompatible with weight shape {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} incompatible with weight shape {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        grads = [
            g @ weight.data if x.requires_grad else None,
            g.T @ x.data if weight.requires_grad else None,
        ]
        if bias is not None:
            grads.append(g.sum(axis=0) if bias.requires_grad else None)
        return grads

    return _result(out, inputs, "linear", bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _result(out, (a, b), "add", bw)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            i != axis and t.shape[i] != ref[i] for i in range(len(ref))
        ):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        parts = np.split(g, splits, axis=axis)
        return [p if t.requires_grad else None for p, t in zip(parts, tensors)]

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _result(np.where(mask, x.data, 0.0), (x,), "relu", bw)


def scalar_mul(x: Tensor, s) -> Tensor:
    """Multiply by a Python scalar or by a one-element tensor (e.g. a learnable gate)."""
    if isinstance(s, Tensor):
        if s.size != 1:
            raise ShapeError(f"scalar_mul: scale must have one element, got shape {s.shape}")
        sv = s.data.reshape(-1)[0]

        def bw(g):
            return (
                g * sv if x.requires_grad else None,
                np.full(s.shape, np.sum(g * x.data)) if s.requires_grad else None,
            )

        return _result(x.data * sv, (x, s), "scalar_mul", bw)

    s = float(s)

    def bw(g):
        return (g * s,)

    return _result(x.data * s, (x,), "scalar_mul", bw)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - op name in the closed set
    def bw(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.array(x.data.sum()), (x,), "sum", bw)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape

    def bw(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).copy(),)

    return _result(x.data.mean(axis=(2, 3)), (x,), "global_avg_pool", bw)


# ------------------------------------------------------------- convolution


def _conv_geometry(x_shape, w_shape, stride, padding):
    n, c, h, w = x_shape
    f, cw, kh, kw = w_shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    return n, c, h, w, f, kh, kw, ho, wo


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    nb, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, nb, ho, wo), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, nb * ho * wo)


def _col2im_add(dxp: np.ndarray, dcols: np.ndarray, kh, kw, stride, ho, wo) -> None:
    nb, c = dxp.shape[:2]
    dcols = dcols.reshape(c, kh, kw, nb, ho, wo)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += (
                dcols[:, i, j].transpose(1, 0, 2, 3)
            )


def _chunk(n: int, rows: int, per_sample: int) -> int:
    return max(1, min(n, _COLS_BUDGET_BYTES // max(1, rows * per_sample * 8)))


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    method: str = "auto",
) -> Tensor:
    """2-D cross-correlation over NCHW input with zero padding.

    ``method`` is ``"im2col"`` (column buffer + one matmul) or ``"kn2row"``
    (stacked-kernel matmul + shifted accumulation, stride 1 only). ``"auto"``
    takes kn2row when the layer narrows channels, where the column buffer
    would dominate memory traffic.
    """
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input shape {x.shape} incompatible with weight shape {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d: bias shape {bias.shape} incompatible with weight shape {weight.shape}")
    n, c, h, w, f, kh, kw, ho, wo = _conv_geometry(x.shape, weight.shape, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {weight.shape} larger than padded input {x.shape}")
    if method == "auto":
        method = "kn2row" if stride == 1 and kh * kw > 1 and f < c else "im2col"
    if method == "kn2row":
        if stride != 1:
            raise ValueError("conv2d: kn2row supports stride 1 only")
        return _conv2d_kn2row(x, weight, bias, padding)
    if method != "im2col":
        raise ValueError(f"conv2d: unknown method {method!r}")
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    w2 = weight.data.reshape(f, -1)
    rows = c * kh * kw
    step = _chunk(n, rows, ho * wo)
    out = np.empty((n, f, ho, wo), dtype=DTYPE)
    for n0 in range(0, n, step):
        xs = xp[n0 : n0 + step]
        cols = _im2col(xs, kh, kw, stride, ho, wo)
        out[n0 : n0 + step] = (w2 @ cols).reshape(f, xs.shape[0], ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out += bias.data[None, :, None, None]
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        dw2 = np.zeros_like(w2) if weight.requires_grad else None
        dx = None
        if x.requires_grad:
            dxp = np.zeros(xp.shape, dtype=DTYPE)
        for n0 in range(0, n, step):
            xs = xp[n0 : n0 + step]
            nb = xs.shape[0]
            g2 = g[n0 : n0 + step].transpose(1, 0, 2, 3).reshape(f, nb * ho * wo)
            if dw2 is not None:
                dw2 += g2 @ _im2col(xs, kh, kw, stride, ho, wo).T
            if x.requires_grad:
                _col2im_add(dxp[n0 : n0 + step], w2.T @ g2, kh, kw, stride, ho, wo)
        if x.requires_grad:
            dx = dxp[:, :, p : p + h, p : p + w] if p else dxp
        grads = [dx, None if dw2 is None else dw2.reshape(weight.shape)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)
        return grads

    return _result(out, inputs, "conv2d", bw)


def _conv2d_kn2row(x: Tensor, weight: Tensor, bias: Tensor | None, p: int) -> Tensor:
    n, c, h, w = x.shape
    f, _, kh, kw = weight.shape
    hp, wp = h + 2 * p, w + 2 * p
    ho, wo = hp - kh + 1, wp - kw + 1
    xt = np.zeros((c, n, hp, wp), dtype=DTYPE)
    xt[:, :, p : p + h, p : p + w] = x.data.transpose(1, 0, 2, 3)
    xt = xt.reshape(c, -1)
    # rows ordered (i, j, f)
    ws = weight.data.transpose(2, 3, 0, 1).reshape(kh * kw * f, c)
    y = (ws @ xt).reshape(kh, kw, f, n, hp, wp)
    acc = np.zeros((f, n, ho, wo), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            acc += y[i, j, :, :, i : i + ho, j : j + wo]
    del y
    out = acc.transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gt = g.transpose(1, 0, 2, 3)
        dy = np.zeros((kh, kw, f, n, hp, wp), dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                dy[i, j, :, :, i : i + ho, j : j + wo] = gt
        dy = dy.reshape(kh * kw * f, -1)
        dw = None
        if weight.requires_grad:
            dw = (dy @ xt.T).reshape(kh, kw, f, c).transpose(2, 3, 0, 1)
        dx = None
        if x.requires_grad:
            dxt = (ws.T @ dy).reshape(c, n, hp, wp)
            dx = dxt[:, :, p : p + h, p : p + w].transpose(1, 0, 2, 3)
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)
        return grads

    return _result(out, inputs, "conv2d", bw)


# ---------------------------------------------------------------- batchnorm


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (N, H, W).

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, exponential average).
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm2d: input shape {x.shape} incompatible with scale shape {gamma.shape}")
    axes = (0, 2, 3)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if m > 1:
            running_mean *= 1 - momentum
            running_mean += momentum * mu
            running_var *= 1 - momentum
            running_var += momentum * var * m / (m - 1)
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        dbeta = g.sum(axis=axes) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None, None]
            if training:
                s1 = dxhat.sum(axis=axes)[None, :, None, None]
                s2 = (dxhat * xhat).sum(axis=axes)[None, :, None, None]
                dx = (inv[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
            else:
                dx = dxhat * inv[None, :, None, None]
        return dx, dgamma, dbeta

    return _result(out, (x, gamma, beta), "batchnorm2d", bw)


# ----------------------------------------------------------------- loss


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over the batch; labels are integer class ids."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be (N, C), got {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: logits shape {logits.shape} vs labels shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= c):
        bad = int(np.flatnonzero((labels < 0) | (labels >= c))[0])
        raise LabelError(f"label {int(labels[bad])} at position {bad} outside [0, {c})")
    labels = labels.astype(np.intp)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.array((lse - z[rows, labels]).mean())

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _result(loss, (logits,), "softmax_cross_entropy", bw)
