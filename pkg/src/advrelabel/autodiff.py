"""Reverse-mode automatic differentiation over dense float64 arrays.

The engine is a flat tape: every primitive evaluation appends a node
(op kind, input ids, output id, cached values) to a ``Tape``, and
``backward`` walks the node list once in reverse.  Tensors are immutable
values; a tensor created through ``Tensor(...)`` is an untracked constant,
one created through ``Tape.leaf`` participates in gradient computation.
Running the same primitives on untracked tensors performs the identical
arithmetic with no recording, so recorded and unrecorded forward passes
are bit-identical.

Supported primitives: add, multiply, matmul, conv2d (stride 1, symmetric
zero padding, no kernel flip), maxpool2d (2x2, stride 2, first-index tie
break), relu, reshape, bias_add, softmax, cross_entropy, tensor_sum.
Broadcasting is limited to scalar-with-tensor (add/multiply) plus the
dedicated bias_add primitive.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are invalid for a primitive."""


class Tensor:
    """Immutable dense float64 array, optionally tracked on a Tape."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data):
        arr = np.array(data, dtype=DTYPE)
        arr.setflags(write=False)
        self.data = arr
        self.tape = None
        self.node_id = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, tape: "Tape | None" = None, node_id: int | None = None) -> "Tensor":
        # internal: takes ownership of arr, no copy
        t = object.__new__(cls)
        arr = np.asarray(arr, dtype=DTYPE)
        arr.setflags(write=False)
        t.data = arr
        t.tape = tape
        t.node_id = node_id
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    """One recorded primitive: kind, operand ids, result id, backward cache."""

    op: str
    inputs: tuple[int, ...]
    output: int
    ctx: tuple


class Tape:
    """Computation record: leaves plus a topologically ordered node list."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._leaf_shapes: dict[int, tuple[int, ...]] = {}
        self._next_id = 0

    def _new_id(self) -> int:
        i = self._next_id
        self._next_id += 1
        return i

    def leaf(self, data) -> Tensor:
        """Register a differentiable input; gradients are reported for it."""
        t = Tensor(data)
        nid = self._new_id()
        self._leaf_shapes[nid] = t.data.shape
        return Tensor._wrap(t.data, self, nid)

    @property
    def leaves(self) -> tuple[int, ...]:
        return tuple(self._leaf_shapes)

    def _record(self, op: str, inputs: tuple[int, ...], out: np.ndarray, ctx: tuple) -> Tensor:
        nid = self._new_id()
        self.nodes.append(Node(op, inputs, nid, ctx))
        return Tensor._wrap(out, self, nid)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ValueError("operands belong to different computation records")
    return tape


def _emit(op: str, operands: tuple[Tensor, ...], out: np.ndarray, ctx: tuple) -> Tensor:
    tape = _tape_of(*operands)
    if tape is None:
        return Tensor._wrap(out)
    ids = []
    for t in operands:
        if t.tape is None:
            # constant pulled into a recorded graph: register as a leaf
            t = Tensor._wrap(t.data, tape, tape._new_id())
            tape._leaf_shapes[t.node_id] = t.data.shape
        ids.append(t.node_id)
    return tape._record(op, tuple(ids), out, ctx)


def _check_same_or_scalar(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} are incompatible")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # collapse a broadcast gradient back to a scalar operand
    if grad.shape == shape:
        return grad
    return np.sum(grad).reshape(shape)


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_or_scalar("add", a, b)
    out = a.data + b.data
    return _emit("add", (a, b), out, (a.shape, b.shape))


def multiply(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_or_scalar("multiply", a, b)
    out = a.data * b.data
    return _emit("multiply", (a, b), out, (a.data, b.data))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul: operand shapes {a.shape} and {b.shape} are incompatible")
    ka = a.shape[-1]
    kb = b.shape[0]
    if ka != kb:
        raise ShapeError(f"matmul: operand shapes {a.shape} and {b.shape} are incompatible")
    out = a.data @ b.data
    return _emit("matmul", (a, b), out, (a.data, b.data))


def bias_add(x, b) -> Tensor:
    """x[..., d] + b[d]; gradient for b sums over leading axes."""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.ndim != 1 or x.ndim < 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"bias_add: operand shapes {x.shape} and {b.shape} are incompatible")
    out = x.data + b.data
    return _emit("bias_add", (x, b), out, (x.ndim,))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = np.maximum(x.data, 0.0)
    return _emit("relu", (x,), out, (x.data,))


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        out = np.reshape(x.data, shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {x.shape} as {tuple(shape)}") from None
    return _emit("reshape", (x,), out, (x.shape,))


def tensor_sum(x) -> Tensor:
    x = _as_tensor(x)
    out = np.sum(x.data)
    return _emit("tensor_sum", (x,), out, (x.shape,))


def softmax(x) -> Tensor:
    """Softmax along the last axis, shift-stabilized."""
    x = _as_tensor(x)
    if x.ndim < 1:
        raise ShapeError(f"softmax: operand shape {x.shape} is incompatible (needs at least one axis)")
    z = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=-1, keepdims=True)
    return _emit("softmax", (x,), out, (out,))


def cross_entropy(probs, target) -> Tensor:
    """-log(probs[target]); probs (K,) with int target, or (B,K) with (B,) targets."""
    probs = _as_tensor(probs)
    if probs.ndim == 1:
        t = np.asarray([int(target)])
        p = probs.data[None, :]
        squeeze = True
    elif probs.ndim == 2:
        t = np.asarray(target, dtype=np.int64).reshape(-1)
        p = probs.data
        squeeze = False
        if t.shape[0] != p.shape[0]:
            raise ShapeError(
                f"cross_entropy: operand shapes {probs.shape} and {t.shape} are incompatible"
            )
    else:
        raise ShapeError(f"cross_entropy: operand shape {probs.shape} is incompatible")
    if np.any(t < 0) or np.any(t >= p.shape[1]):
        raise ValueError(f"cross_entropy: target index out of range for {p.shape[1]} classes")
    picked = p[np.arange(p.shape[0]), t]
    if np.any(picked <= 0.0):
        raise ValueError("cross_entropy: target probability is zero")
    out = -np.log(picked)
    if squeeze:
        out = out.reshape(())
    return _emit("cross_entropy", (probs,), out, (p, t, squeeze))


_POOL = 2


def maxpool2d(x) -> Tensor:
    """2x2 max pooling with stride 2; ties go to the first index in row-major order."""
    x = _as_tensor(x)
    if x.ndim not in (3, 4):
        raise ShapeError(f"maxpool2d: operand shape {x.shape} is incompatible (need 3-D or 4-D)")
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    b, c, h, w = xd.shape
    h2, w2 = h // _POOL, w // _POOL
    if h2 == 0 or w2 == 0:
        raise ShapeError(f"maxpool2d: spatial extents of {x.shape} are smaller than the 2x2 window")
    cropped = xd[:, :, : h2 * _POOL, : w2 * _POOL]
    win = cropped.reshape(b, c, h2, _POOL, w2, _POOL).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h2, w2, 4)
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    if not batched:
        out = out[0]
    return _emit("maxpool2d", (x,), out, (arg, (b, c, h, w), batched))


def _conv_geometry(c: int, h: int, w: int, k: int) -> tuple[np.ndarray, int, int]:
    """Flat scatter indices mapping (c*k*k, h*w) columns into the padded image."""
    pad = (k - 1) // 2
    hp, wp = h + 2 * pad, w + 2 * pad
    ci, ui, vi = np.meshgrid(np.arange(c), np.arange(k), np.arange(k), indexing="ij")
    base = (ci * hp + ui) * wp + vi  # (c,k,k) top-left corner offsets
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pos = (ii * wp + jj).reshape(-1)  # (h*w,) window origins
    idx = base.reshape(-1, 1) + pos[None, :]
    return idx.reshape(-1), hp, wp


_GEOMETRY_CACHE: dict[tuple[int, int, int, int], tuple[np.ndarray, int, int]] = {}


def _geometry(c: int, h: int, w: int, k: int) -> tuple[np.ndarray, int, int]:
    key = (c, h, w, k)
    got = _GEOMETRY_CACHE.get(key)
    if got is None:
        got = _conv_geometry(c, h, w, k)
        _GEOMETRY_CACHE[key] = got
    return got


def _im2col(xd: np.ndarray, k: int) -> np.ndarray:
    """(b,c,h,w) -> (b, c*k*k, h*w) with symmetric zero padding, stride 1."""
    b, c, h, w = xd.shape
    pad = (k - 1) // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return windows.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * k * k, h * w)


def conv2d(x, kernel, bias=None) -> Tensor:
    """2-D cross-correlation, stride 1, zero padded to preserve spatial size.

    x is (c,h,w) or (b,c,h,w); kernel is (f,c,k,k) with k odd; bias (f,) optional.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim not in (3, 4) or kernel.ndim != 4:
        raise ShapeError(f"conv2d: operand shapes {x.shape} and {kernel.shape} are incompatible")
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    b, c, h, w = xd.shape
    f, ck, kh, kw = kernel.shape
    if ck != c or kh != kw:
        raise ShapeError(f"conv2d: operand shapes {x.shape} and {kernel.shape} are incompatible")
    if kh % 2 != 1:
        raise ShapeError(f"conv2d: kernel size {kh} is even; symmetric same-padding needs odd")
    cols = _im2col(xd, kh)  # (b, c*k*k, h*w)
    wmat = kernel.data.reshape(f, c * kh * kw)
    out = np.matmul(wmat, cols).reshape(b, f, h, w)
    operands: tuple[Tensor, ...] = (x, kernel)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (f,):
            raise ShapeError(f"conv2d: operand shapes {kernel.shape} and {bias.shape} are incompatible")
        out = out + bias.data[None, :, None, None]
        operands = (x, kernel, bias)
    if not batched:
        out = out[0]
    return _emit("conv2d", operands, out, (cols, kernel.data, (b, c, h, w), batched))


# ---------------------------------------------------------------------------
# backward rules


def _bwd_add(node: Node, g: np.ndarray) -> tuple[np.ndarray, ...]:
    sa, sb = node.ctx
    return _reduce_to(g, sa), _reduce_to(g, sb)


def _bwd_multiply(node: Node, g: np.ndarray) -> tuple[np.ndarray, ...]:
    ad, bd = node.ctx
    return _reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)


def _bwd_matmul(node: Node, g: np.ndarray) -> tuple[np.ndarray, ...]:
    ad, bd = node.ctx
    a2 = ad if ad.ndim == 2 else ad[None, :]
    b2 = bd if bd.ndim == 2 else bd[:, None]
    g2 = g.reshape(a2.shape[0], b2.shape[1])
    ga = g2 @ b2.T
    gb = a2.T @ g2
    return ga.reshape(ad.shape), gb.reshape(bd.shape)


def _bwd_bias_add(node: Node, g: np.ndarray) -> tuple[np.ndarray, ...]:
    (xdim,) = node.ctx
    axes = tuple(range(xdim - 1))
    return g, g.sum(axis=axes) if axes else g.copy()


def _bwd_relu(node: Node, g: np.ndarray) -> tuple[np.ndarray, ...]:
    (xd,) = node.ctx
    return (g * (xd > 0.0),)


def _bwd_reshape(node: Node, g: np.ndarray) -> tuple[np.ndarray, ...]:
    (shape,) = node.ctx
    return (g.reshape(shape),)


def _bwd_tensor_sum(node: Node, g: np.ndarray) -> tuple[np.ndarray, ...]:
    (shape,) = node.ctx
    return (np.broadcast_to(g, shape).copy(),)


def _bwd_softmax(node: Node, g: np.ndarray) -> tuple[np.ndarray, ...]:
    (p,) = node.ctx
    dot = np.sum(g * p, axis=-1, keepdims=True)
    return (p * (g - dot),)


def _bwd_cross_entropy(node: Node, g: np.ndarray) -> tuple[np.ndarray, ...]:
    p, t, squeeze = node.ctx
    gp = np.zeros_like(p)
    rows = np.arange(p.shape[0])
    gvec = np.asarray(g).reshape(-1)
    gp[rows, t] = -gvec / p[rows, t]
    if squeeze:
        gp = gp[0]
    return (gp,)


def _bwd_maxpool2d(node: Node, g: np.ndarray) -> tuple[np.ndarray, ...]:
    arg, (b, c, h, w), batched = node.ctx
    h2, w2 = arg.shape[2], arg.shape[3]
    gx = np.zeros((b, c, h, w), dtype=DTYPE)
    bi, ci, ii, ji = np.ogrid[0:b, 0:c, 0:h2, 0:w2]
    ri = ii * _POOL + arg // _POOL
    cj = ji * _POOL + arg % _POOL
    gd = g if batched else g[None]
    gx[bi, ci, ri, cj] = gd
    return (gx if batched else gx[0],)


def _bwd_conv2d(node: Node, g: np.ndarray) -> tuple[np.ndarray, ...]:
    cols, kd, (b, c, h, w), batched = node.ctx
    f = kd.shape[0]
    k = kd.shape[2]
    pad = (k - 1) // 2
    gd = (g if batched else g[None]).reshape(b, f, h * w)
    wmat = kd.reshape(f, c * k * k)
    gw = np.einsum("bfp,bkp->fk", gd, cols).reshape(kd.shape)
    gcols = np.matmul(wmat.T, gd)  # (b, c*k*k, h*w)
    idx, hp, wp = _geometry(c, h, w, k)
    padded = np.empty((b, c * hp * wp), dtype=DTYPE)
    for i in range(b):
        padded[i] = np.bincount(idx, weights=gcols[i].ravel(), minlength=c * hp * wp)
    gx = padded.reshape(b, c, hp, wp)
    if pad:
        gx = gx[:, :, pad:-pad, pad:-pad]
    gx = np.ascontiguousarray(gx)
    grads = [gx if batched else gx[0], gw]
    if len(node.inputs) == 3:
        grads.append(gd.sum(axis=(0, 2)))
    return tuple(grads)


_BACKWARD: dict[str, Callable[[Node, np.ndarray], tuple[np.ndarray, ...]]] = {
    "add": _bwd_add,
    "multiply": _bwd_multiply,
    "matmul": _bwd_matmul,
    "bias_add": _bwd_bias_add,
    "relu": _bwd_relu,
    "reshape": _bwd_reshape,
    "tensor_sum": _bwd_tensor_sum,
    "softmax": _bwd_softmax,
    "cross_entropy": _bwd_cross_entropy,
    "maxpool2d": _bwd_maxpool2d,
    "conv2d": _bwd_conv2d,
}


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Gradients of a scalar loss for every id on the tape that feeds it.

    Every registered leaf is present in the result (zeros when the leaf does
    not influence the loss).  Each recorded node is visited exactly once.
    """
    if loss.tape is not tape:
        raise ValueError("loss tensor was not computed on this tape")
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.get(node.output)
        if g is None:
            continue
        for nid, gi in zip(node.inputs, _BACKWARD[node.op](node, g)):
            acc = grads.get(nid)
            grads[nid] = gi if acc is None else acc + gi
    for nid, shape in tape._leaf_shapes.items():
        if nid not in grads:
            grads[nid] = np.zeros(shape, dtype=DTYPE)
    return grads


def finite_difference_gradient(f, x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError(f"finite_difference_gradient: step size must be positive, got {h}")
    x = np.array(x, dtype=DTYPE)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(f(x))
        flat[i] = orig - h
        lo = float(f(x))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad
