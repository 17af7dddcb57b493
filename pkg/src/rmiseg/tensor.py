"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything runs in 64-bit precision. Shapes are explicit and checked; the
only implicit broadcast anywhere is the per-channel bias inside the
convolution ops. Operations never modify their operands: a Tensor's array
is locked read-only on creation, and the optimizer produces new tensors
instead of writing into old ones.

Recording: while a Tape is active (as a context manager), every operation
whose inputs require gradients appends one record. The records are stored
in execution order, so walking them in reverse is a valid reverse
topological order for the backward pass.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DomainError",
    "ContractError",
    "NonFiniteError",
    "set_debug_checks",
    "debug_checks_enabled",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "sigmoid",
    "tanh",
    "relu",
    "log",
    "softplus",
    "concat",
    "slice_axis",
    "reshape",
    "sum_all",
    "mean_all",
    "channel_mean",
    "tile_to_grid",
    "conv1x1",
    "extract_patches",
    "conv2d",
    "bilinear_resize",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the operation."""


class DomainError(ValueError):
    """Operand values are outside the operation's domain (e.g. log of <= 0)."""


class ContractError(ValueError):
    """The operation was called in a way its contract forbids."""


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared in an operation result (debug checks on)."""


_DEBUG = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle the NaN/Inf check that runs after every operation."""
    global _DEBUG
    _DEBUG = bool(enabled)


def debug_checks_enabled() -> bool:
    return _DEBUG


class Tensor:
    """Immutable dense array with shape metadata and a requires_grad flag."""

    __slots__ = ("data", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)  # always copy: caller keeps theirs
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._tape = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool, tape) -> "Tensor":
        # Internal: wrap an array we own without copying it.
        t = cls.__new__(cls)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        if arr.flags.writeable:
            arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t._tape = tape
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Thin sugar over the module-level ops; keeps recurrence code readable.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


class Tape:
    """Ordered record of executed operations for one backward pass.

    Single-writer: one tape must only ever be fed from one thread.
    Independent tapes on independent threads are fine.
    """

    def __init__(self):
        self._records = []  # (out, inputs, backward_fn) in execution order

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _stack().pop()
        if popped is not self:
            raise ContractError("tape context exited out of order")

    def backward(self, loss: Tensor, wrt=None) -> dict:
        """Gradient of a scalar loss w.r.t. tensors recorded on this tape.

        Returns a dict keyed by Tensor. With ``wrt`` given, the result has
        exactly those tensors as keys; any that the loss does not reach get
        a zero gradient. Without ``wrt``, every requires_grad leaf that
        appeared as an operation input is a key.
        """
        if loss.shape != ():
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not recorded on this tape")

        grads = {id(loss): np.ones((), dtype=np.float64)}
        for out, inputs, backward_fn in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue  # not on any path to the loss
            for inp, gin in zip(inputs, backward_fn(g)):
                if not inp.requires_grad:
                    continue
                acc = grads.get(id(inp))
                grads[id(inp)] = gin if acc is None else acc + gin

        if wrt is not None:
            return {t: grads.get(id(t), np.zeros(t.shape)) for t in wrt}

        produced = {id(out) for out, _, _ in self._records}
        leaves = {}
        for _, inputs, _ in self._records:
            for inp in inputs:
                if inp.requires_grad and id(inp) not in produced:
                    leaves.setdefault(id(inp), inp)
        return {t: grads.get(i, np.zeros(t.shape)) for i, t in leaves.items()}


_LOCAL = threading.local()


def _stack() -> list:
    try:
        return _LOCAL.stack
    except AttributeError:
        _LOCAL.stack = []
        return _LOCAL.stack


def _active_tape():
    stack = _stack()
    return stack[-1] if stack else None


def backward(loss: Tensor, wrt=None) -> dict:
    """Backward pass using the tape the loss was recorded on."""
    if loss._tape is None:
        raise ContractError("loss is not connected to any tape")
    return loss._tape.backward(loss, wrt=wrt)


def _finish(name: str, arr: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in output of {name}")
    requires_grad = any(t.requires_grad for t in inputs)
    tape = _active_tape() if requires_grad else None
    out = Tensor._wrap(arr, requires_grad, tape)
    if tape is not None:
        tape._records.append((out, inputs, backward_fn))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product: (m,k)@(k,p) -> (m,p), or (m,k)@(k,) -> (m,).

    The forward contraction runs through einsum rather than BLAS: its
    k-accumulation order depends only on the contraction width, so the
    vector path here and the grid path in conv1x1 agree bit for bit on
    equal-width blocks. The recurrent cells rely on that.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2):
        raise ShapeError(f"matmul needs 2-d x (1|2)-d, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    if b.ndim == 1:
        out = np.einsum("ij,j->i", a.data, b.data)
    else:
        out = np.einsum("ij,jk->ik", a.data, b.data)
    ad, bd = a.data, b.data

    if b.ndim == 1:

        def backward_fn(g):
            return np.outer(g, bd), ad.T @ g

    else:

        def backward_fn(g):
            return g @ bd.T, ad.T @ g

    return _finish("matmul", out, (a, b), backward_fn)


# ---------------------------------------------------------------------------
# elementwise


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes differ, {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("add", a, b)
    return _finish("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("sub", a, b)
    return _finish("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    """Hadamard product."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _finish("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _finish("neg", -a.data, (a,), lambda g: (-g,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    # Stable in both tails: never exponentiates a positive argument.
    e = np.exp(-np.abs(a.data))
    out = np.where(a.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _finish("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _finish("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0
    return _finish("relu", out, (a,), lambda g: (g * mask,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive value")
    ad = a.data
    return _finish("log", np.log(ad), (a,), lambda g: (g / ad,))


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed as max(x, 0) + log1p(exp(-|x|))."""
    a = _as_tensor(a)
    ad = a.data
    out = np.maximum(ad, 0.0) + np.log1p(np.exp(-np.abs(ad)))
    e = np.exp(-np.abs(ad))
    sig = np.where(ad >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _finish("softplus", out, (a,), lambda g: (g * sig,))


# ---------------------------------------------------------------------------
# shape manipulation


def concat(tensors, axis: int = 0) -> Tensor:
    """Juxtapose along one axis. A single argument is returned unchanged."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of no tensors")
    if len(tensors) == 1:
        return tensors[0]
    ndim = tensors[0].ndim
    if not 0 <= axis < ndim:
        raise ShapeError(f"concat axis {axis} out of range for ndim {ndim}")
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if t.ndim != ndim or other[:axis] != ref[:axis] or other[axis + 1 :] != ref[axis + 1 :]:
            raise ShapeError(f"concat: incompatible shapes {tensors[0].shape} vs {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _finish("concat", out, tuple(tensors), backward_fn)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start:stop) along one axis."""
    a = _as_tensor(a)
    if not 0 <= axis < a.ndim:
        raise ShapeError(f"slice axis {axis} out of range for ndim {a.ndim}")
    extent = a.shape[axis]
    if not 0 <= start < stop <= extent:
        raise ShapeError(f"slice [{start}:{stop}) outside axis of extent {extent}")
    index = tuple(slice(None) if d != axis else slice(start, stop) for d in range(a.ndim))
    shape = a.shape

    def backward_fn(g):
        full = np.zeros(shape, dtype=np.float64)
        full[index] = g
        return (full,)

    return _finish("slice", a.data[index], (a,), backward_fn)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    old = a.shape
    return _finish("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def tile_to_grid(v, height: int, width: int) -> Tensor:
    """Repeat a vector at every cell of an height x width grid."""
    v = _as_tensor(v)
    if v.ndim != 1:
        raise ShapeError(f"tile_to_grid needs a vector, got shape {v.shape}")
    out = np.broadcast_to(v.data, (height, width, v.shape[0]))
    return _finish("tile", out, (v,), lambda g: (g.sum(axis=(0, 1)),))


# ---------------------------------------------------------------------------
# reductions


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    out = np.asarray(a.data.sum())
    return _finish("sum", out, (a,), lambda g: (np.broadcast_to(g, shape),))


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    shape, n = a.shape, a.size
    out = np.asarray(a.data.mean())
    return _finish("mean", out, (a,), lambda g: (np.broadcast_to(g / n, shape),))


def channel_mean(a) -> Tensor:
    """Mean over the last (channel) axis."""
    a = _as_tensor(a)
    if a.ndim < 1:
        raise ShapeError("channel_mean needs at least one axis")
    n = a.shape[-1]
    out = a.data.mean(axis=-1)
    return _finish("chmean", out, (a,), lambda g: (np.broadcast_to(g[..., None] / n, a.shape),))


# ---------------------------------------------------------------------------
# convolution


def conv1x1(feature_map, kernel, bias) -> Tensor:
    """Shared linear map at every grid cell: out[i,j] = K @ f[i,j] + b.

    feature_map: (H, W, Cin); kernel: (Cout, Cin); bias: (Cout,).
    Forward contraction via einsum for the same reason as matmul: each
    output cell reproduces the matching matmul(K, f[i,j]) bit for bit.
    """
    f, k, b = _as_tensor(feature_map), _as_tensor(kernel), _as_tensor(bias)
    if f.ndim != 3 or k.ndim != 2 or b.ndim != 1:
        raise ShapeError(f"conv1x1: bad ranks {f.shape}, {k.shape}, {b.shape}")
    height, width, cin = f.shape
    cout = k.shape[0]
    if k.shape[1] != cin:
        raise ShapeError(f"conv1x1: channel mismatch, map has {cin}, kernel wants {k.shape[1]}")
    if b.shape[0] != cout:
        raise ShapeError(f"conv1x1: bias length {b.shape[0]} != {cout} output channels")
    flat = f.data.reshape(height * width, cin)
    out = np.einsum("hwk,ck->hwc", f.data, k.data) + b.data
    kd = k.data

    def backward_fn(g):
        g2 = g.reshape(height * width, cout)
        return (g2 @ kd).reshape(height, width, cin), g2.T @ flat, g2.sum(axis=0)

    return _finish("conv1x1", out, (f, k, b), backward_fn)


def extract_patches(a, ksize: int, stride: int, pad: int) -> Tensor:
    """im2col: (H, W, C) -> (Ho, Wo, ksize*ksize*C) of zero-padded patches.

    Patch channels are ordered (row offset, column offset, channel),
    row-major; conv kernels must use the same layout.
    """
    a = _as_tensor(a)
    if a.ndim != 3:
        raise ShapeError(f"extract_patches needs (H, W, C), got {a.shape}")
    height, width, cin = a.shape
    h_out = (height + 2 * pad - ksize) // stride + 1
    w_out = (width + 2 * pad - ksize) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError("patch window larger than padded input")
    padded = np.zeros((height + 2 * pad, width + 2 * pad, cin), dtype=np.float64)
    padded[pad : pad + height, pad : pad + width] = a.data
    cols = np.empty((h_out, w_out, ksize, ksize, cin), dtype=np.float64)
    for di in range(ksize):
        rows = slice(di, di + stride * h_out, stride)
        for dj in range(ksize):
            cols[:, :, di, dj, :] = padded[rows, dj : dj + stride * w_out : stride, :]
    out = cols.reshape(h_out, w_out, ksize * ksize * cin)

    def backward_fn(g):
        g5 = g.reshape(h_out, w_out, ksize, ksize, cin)
        dpadded = np.zeros_like(padded)
        for di in range(ksize):
            rows = slice(di, di + stride * h_out, stride)
            for dj in range(ksize):
                dpadded[rows, dj : dj + stride * w_out : stride, :] += g5[:, :, di, dj, :]
        return (dpadded[pad : pad + height, pad : pad + width],)

    return _finish("patches", out, (a,), backward_fn)


def conv2d(a, kernel, bias, *, ksize: int, stride: int, pad: int) -> Tensor:
    """Strided 2-d convolution as im2col followed by a 1x1 convolution.

    kernel: (Cout, ksize*ksize*Cin) in extract_patches channel order.
    """
    return conv1x1(extract_patches(a, ksize=ksize, stride=stride, pad=pad), kernel, bias)


# ---------------------------------------------------------------------------
# resampling


def _bilinear_axis(src: int, dst: int):
    # Half-pixel centers: source coordinate = (dst + 0.5) * scale - 0.5, clamped.
    coords = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    coords = np.clip(coords, 0.0, src - 1.0)
    lo = np.floor(coords).astype(np.int64)
    lo = np.minimum(lo, src - 1)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, coords - lo


def bilinear_resize(a, height: int, width: int) -> Tensor:
    """Resize (h, w, C) to (height, width, C) with half-pixel-center bilinear.

    Written in lerp form a + w*(b - a), so constant maps and same-size
    resizes are exactly invariant.
    """
    a = _as_tensor(a)
    if a.ndim != 3:
        raise ShapeError(f"bilinear_resize needs (H, W, C), got {a.shape}")
    if height < 1 or width < 1:
        raise ShapeError("target extents must be positive")
    src_h, src_w, _ = a.shape
    y0, y1, wy = _bilinear_axis(src_h, height)
    x0, x1, wx = _bilinear_axis(src_w, width)
    wy_ = wy[:, None, None]
    wx_ = wx[None, :, None]

    f00 = a.data[np.ix_(y0, x0)]
    f01 = a.data[np.ix_(y0, x1)]
    f10 = a.data[np.ix_(y1, x0)]
    f11 = a.data[np.ix_(y1, x1)]
    top = f00 + wx_ * (f01 - f00)
    bot = f10 + wx_ * (f11 - f10)
    out = top + wy_ * (bot - top)
    src_shape = a.shape

    def backward_fn(g):
        da = np.zeros(src_shape, dtype=np.float64)
        gy0 = g * (1.0 - wy_)
        gy1 = g * wy_
        yy0, xx0 = np.ix_(y0, x0)  # broadcastable index grids
        yy1, xx1 = np.ix_(y1, x1)
        np.add.at(da, (np.broadcast_to(yy0, g.shape[:2]), np.broadcast_to(xx0, g.shape[:2])), gy0 * (1.0 - wx_))
        np.add.at(da, (np.broadcast_to(yy0, g.shape[:2]), np.broadcast_to(xx1, g.shape[:2])), gy0 * wx_)
        np.add.at(da, (np.broadcast_to(yy1, g.shape[:2]), np.broadcast_to(xx0, g.shape[:2])), gy1 * (1.0 - wx_))
        np.add.at(da, (np.broadcast_to(yy1, g.shape[:2]), np.broadcast_to(xx1, g.shape[:2])), gy1 * wx_)
        return (da,)

    return _finish("bilinear", out, (a,), backward_fn)
