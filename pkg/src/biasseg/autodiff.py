"""Dense tensors with reverse-mode automatic differentiation.

A small tape-free autograd: every operation returns a new `Tensor` holding
its parents and a vector-Jacobian closure. `backward()` topologically sorts
the graph and accumulates gradients into every reachable tensor that has
`requires_grad` set.

Broadcasting is deliberately restricted to scalar-vs-tensor (a Python number
or a one-element tensor) and equal shapes, so every backward rule stays
auditable. 64-bit arrays are the default; 32-bit is supported for training
speed and checkpoint fidelity.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import GraphError, ConfigError, ShapeError

Scalar = Union[int, float, np.floating]


class Tensor:
    """N-dimensional float array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        dtype=None,
        _parents: tuple = (),
        _vjp: Optional[Callable] = None,
    ):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        # Parents/vjp are only kept while a gradient can flow; constants
        # stay leaf nodes so graphs rooted in data tensors stay small.
        self._parents = _parents if requires_grad else ()
        self._vjp = _vjp if requires_grad else None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _is_scalar_like(t: Tensor) -> bool:
    return t.data.size == 1


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=tuple(parents), _vjp=vjp)


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Collapse a broadcast gradient back to a one-element operand."""
    if grad.shape == shape:
        return grad
    return np.sum(grad).reshape(shape)


# -- elementwise arithmetic --------------------------------------------------


def _check_elementwise(a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or _is_scalar_like(a) or _is_scalar_like(b):
        return
    raise ShapeError(f"elementwise shapes {a.shape} and {b.shape} do not broadcast")


def add(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    _check_elementwise(a, b)
    out = a.data + b.data

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make(out, (a, b), vjp)


def sub(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    _check_elementwise(a, b)
    out = a.data - b.data

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _make(out, (a, b), vjp)


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    _check_elementwise(a, b)
    out = a.data * b.data

    def vjp(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _make(out, (a, b), vjp)


def div(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    _check_elementwise(a, b)
    out = a.data / b.data

    def vjp(g):
        ga = _reduce_to(g / b.data, a.shape)
        gb = _reduce_to(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op: str, a: Tensor, b) -> Tensor:
    """Dispatch an elementwise binary op by tag: add, sub, mul, div."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ConfigError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


# -- pointwise nonlinearities ------------------------------------------------


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def vjp(g):
        return (g * (0.5 / out),)

    return _make(out, (a,), vjp)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = np.where(mask, a.data, 0.0).astype(a.dtype)
    return _make(out, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    # Two-branch form avoids overflow in exp for large |x|.
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), vjp)


# -- reductions and shape ops ------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).astype(a.dtype, copy=True),)

    return _make(out, (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        n = a.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).astype(a.dtype, copy=True),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2 / n, a.shape).astype(a.dtype, copy=True),)

    return _make(out, (a,), vjp)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    arrays = [t.data for t in tensors]
    out = np.concatenate(arrays, axis=axis)
    sizes = [arr.shape[axis] for arr in arrays]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        pieces = []
        for i in range(len(arrays)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(idx)])
        return tuple(pieces)

    return _make(out, tuple(tensors), vjp)


def take(a: Tensor, key) -> Tensor:
    """Basic int/slice indexing with gradient scatter on backward."""
    out = a.data[key]
    if np.isscalar(out):
        out = np.asarray(out)

    def vjp(g):
        grad = np.zeros(a.shape, dtype=a.dtype)
        grad[key] += g
        return (grad,)

    return _make(np.array(out, copy=True), (a,), vjp)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows by integer index; duplicates accumulate on backward."""
    idx = np.asarray(indices, dtype=np.intp)
    out = a.data[idx]

    def vjp(g):
        grad = np.zeros(a.shape, dtype=a.dtype)
        np.add.at(grad, idx, g)
        return (grad,)

    return _make(np.array(out, copy=True), (a,), vjp)


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), vjp)


def add_row_bias(x: Tensor, b: Tensor) -> Tensor:
    """x: (N, D) plus a length-D bias on every row."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"row bias shapes incompatible: {x.shape} and {b.shape}")
    out = x.data + b.data[None, :]

    def vjp(g):
        return g, g.sum(axis=0)

    return _make(out, (x, b), vjp)


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """x: (C, H, W) plus a length-C bias on every channel plane."""
    if x.data.ndim != 3 or b.data.ndim != 1 or x.shape[0] != b.shape[0]:
        raise ShapeError(f"channel bias shapes incompatible: {x.shape} and {b.shape}")
    out = x.data + b.data[:, None, None]

    def vjp(g):
        return g, g.sum(axis=(1, 2))

    return _make(out, (x, b), vjp)


# -- spatial kernels ---------------------------------------------------------


def conv2d(x: Tensor, k: Tensor, stride: int = 1) -> Tensor:
    """3x3 convolution with zero padding 1.

    x: (C_in, H, W), k: (C_out, C_in, 3, 3), stride 1 or 2.
    Output spatial size: floor((H + 2 - 3) / stride) + 1.
    """
    if stride not in (1, 2):
        raise ConfigError(f"conv2d stride must be 1 or 2, got {stride}")
    if x.data.ndim != 3 or k.data.ndim != 4:
        raise ShapeError(f"conv2d expects (C,H,W) and (O,C,3,3), got {x.shape}, {k.shape}")
    c_in, h, w = x.shape
    c_out, kc, kh, kw = k.shape
    if kc != c_in or kh != 3 or kw != 3:
        raise ShapeError(f"kernel shape {k.shape} does not match input channels {c_in}")
    if h < 3 or w < 3:
        raise ShapeError(f"conv2d needs spatial size >= 3, got {h}x{w}")

    h_out = (h + 2 - 3) // stride + 1
    w_out = (w + 2 - 3) // stride + 1
    xp = np.zeros((c_in, h + 2, w + 2), dtype=x.dtype)
    xp[:, 1 : h + 1, 1 : w + 1] = x.data

    out = np.zeros((c_out, h_out, w_out), dtype=x.dtype)
    kd = k.data
    # One tensordot per kernel tap keeps both passes vectorized.
    for ki in range(3):
        for kj in range(3):
            xs = xp[:, ki : ki + stride * h_out : stride, kj : kj + stride * w_out : stride]
            out += np.tensordot(kd[:, :, ki, kj], xs, axes=([1], [0]))

    def vjp(g):
        gx_p = np.zeros_like(xp) if x.requires_grad else None
        gk = np.zeros_like(kd) if k.requires_grad else None
        for ki in range(3):
            for kj in range(3):
                xs = xp[:, ki : ki + stride * h_out : stride, kj : kj + stride * w_out : stride]
                if gk is not None:
                    gk[:, :, ki, kj] = np.tensordot(g, xs, axes=([1, 2], [1, 2]))
                if gx_p is not None:
                    contrib = np.tensordot(kd[:, :, ki, kj], g, axes=([0], [0]))
                    gx_p[:, ki : ki + stride * h_out : stride, kj : kj + stride * w_out : stride] += contrib
        gx = gx_p[:, 1 : h + 1, 1 : w + 1] if gx_p is not None else np.zeros(x.shape, dtype=x.dtype)
        if gk is None:
            gk = np.zeros(k.shape, dtype=k.dtype)
        return gx, gk

    return _make(out, (x, k), vjp)


def _bilinear_weights(n_out: int, n_in: int, dtype):
    """Align-corners source indices and blend weights for one axis."""
    if n_out == 1 or n_in == 1:
        lo = np.zeros(n_out, dtype=np.intp)
        hi = np.zeros(n_out, dtype=np.intp)
        frac = np.zeros(n_out, dtype=dtype)
        return lo, hi, frac
    src = np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)
    lo = np.floor(src).astype(np.intp)
    lo = np.minimum(lo, n_in - 2)
    hi = lo + 1
    frac = (src - lo).astype(dtype)
    return lo, hi, frac


def bilinear_upsample(x: Tensor, target: tuple) -> Tensor:
    """Resize (C, h, w) to (C, H, W) with align-corners bilinear interpolation."""
    if x.data.ndim != 3:
        raise ShapeError(f"bilinear_upsample expects (C,h,w), got {x.shape}")
    c, h, w = x.shape
    H, W = int(target[0]), int(target[1])
    if H < h or W < w:
        raise ShapeError(f"target {target} smaller than source {(h, w)}")

    r0, r1, fr = _bilinear_weights(H, h, x.dtype)
    c0, c1, fc = _bilinear_weights(W, w, x.dtype)
    fr_col = fr[:, None]
    fc_row = fc[None, :]
    w00 = (1 - fr_col) * (1 - fc_row)
    w01 = (1 - fr_col) * fc_row
    w10 = fr_col * (1 - fc_row)
    w11 = fr_col * fc_row

    d = x.data
    out = (
        d[:, r0[:, None], c0[None, :]] * w00
        + d[:, r0[:, None], c1[None, :]] * w01
        + d[:, r1[:, None], c0[None, :]] * w10
        + d[:, r1[:, None], c1[None, :]] * w11
    )

    def vjp(g):
        grad = np.zeros(x.shape, dtype=x.dtype)
        rows0 = np.broadcast_to(r0[:, None], (H, W))
        rows1 = np.broadcast_to(r1[:, None], (H, W))
        cols0 = np.broadcast_to(c0[None, :], (H, W))
        cols1 = np.broadcast_to(c1[None, :], (H, W))
        for ch in range(c):
            gch = g[ch]
            np.add.at(grad[ch], (rows0, cols0), gch * w00)
            np.add.at(grad[ch], (rows0, cols1), gch * w01)
            np.add.at(grad[ch], (rows1, cols0), gch * w10)
            np.add.at(grad[ch], (rows1, cols1), gch * w11)
        return (grad,)

    return _make(out.astype(x.dtype, copy=False), (x,), vjp)


def bilinear_upsample_array(data: np.ndarray, target: tuple) -> np.ndarray:
    """Forward-only bilinear resize for plain arrays (no graph)."""
    return bilinear_upsample(Tensor(data), target).data


# -- backward pass -----------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate .grad on every reachable requires_grad tensor.

    Gradients accumulate additively, both across multiple uses inside one
    graph and across repeated backward calls; call zero_grad between steps.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    seen = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = np.zeros_like(node.data)
        node.grad = node.grad + g
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            acc = flowing.get(id(p))
            flowing[id(p)] = pg if acc is None else acc + pg


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
