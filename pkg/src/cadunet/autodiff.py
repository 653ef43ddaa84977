"""Dense tensors with a dynamically built reverse-mode graph.

Only the operations the CAD-Unet architecture needs are provided. Every op
returns a new :class:`Tensor` whose ``_backward`` closure maps the output
gradient onto its parents. Graphs are rebuilt on every forward pass.
"""

from __future__ import annotations

import contextlib
import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "checked",
    "backward",
    "conv2d",
    "maxpool2",
    "upsample2",
    "batchnorm",
    "relu",
    "sigmoid",
    "add",
    "mul",
    "scale",
    "concat_channels",
    "reshape",
    "sum",
    "softmax",
    "squash",
    "bce_with_logits",
    "save_tensor",
    "load_tensor",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op."""


class NonFiniteError(FloatingPointError):
    """Raised in checked mode when an op produces NaN or Inf."""


_CHECKED = False


@contextlib.contextmanager
def checked(enabled: bool = True):
    """Make every forward op verify that its output is finite."""
    global _CHECKED
    previous = _CHECKED
    _CHECKED = enabled
    try:
        yield
    finally:
        _CHECKED = previous


_BRANCHES: list | None = None


@contextlib.contextmanager
def record_branches():
    """Collect the branch choices (relu signs, max-pool winners) of every forward op.

    Two evaluations with equal records lie on the same smooth piece of the
    function, which is what a finite-difference check needs.
    """
    global _BRANCHES
    previous = _BRANCHES
    _BRANCHES = log = []
    try:
        yield log
    finally:
        _BRANCHES = previous


class Tensor:
    """A numpy array plus the graph bookkeeping needed for backward.

    A tensor created directly by the user is a leaf; tensors returned by ops
    remember their parents and a closure computing parent gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{label})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, -_as_tensor(other, self.dtype))


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    if _CHECKED and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _toposort(root: Tensor) -> list[Tensor]:
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> list[np.ndarray] | None:
    """Backpropagate from a scalar ``loss``.

    Leaf gradients accumulate into ``.grad``. When ``params`` is given, the
    gradient of each one is returned, zeros for parameters the loss does not
    reach.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(_toposort(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    if params is None:
        return None
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------------
# pointwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make(ad * bd, (a, b), bw, "mul")


def scale(x: Tensor, k: float) -> Tensor:
    return _make(x.data * k, (x,), lambda g: (g * k,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _BRANCHES is not None:
        _BRANCHES.append(mask)
    return _make(np.maximum(x.data, 0), (x,), lambda g: (g * mask,), "relu")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _make(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW tensors along the channel axis, preserving order."""
    first = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(first) or t.shape[:1] + t.shape[2:] != first[:1] + first[2:]:
            raise ShapeError(f"concat_channels: shapes {first} and {t.shape} differ off the channel axis")
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])
    data = np.concatenate([t.data for t in tensors], axis=1)

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _make(data, tuple(tensors), bw, "concat")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _make(data, (x,), lambda g: (g.reshape(src),), "reshape")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def softmax(x: Tensor, axis: int) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


SQUASH_EPS = 1e-9


def squash(s: Tensor, axis: int = -1) -> Tensor:
    """v = |s|^2/(1+|s|^2) * s/|s|, evaluated as s*|s|/(1+|s|^2) so s=0 maps to 0."""
    sd = s.data
    n = np.sqrt((sd * sd).sum(axis=axis, keepdims=True))
    f = n / (1.0 + n * n)

    def bw(g):
        fprime = (1.0 - n * n) / (1.0 + n * n) ** 2
        unit = sd / (n + SQUASH_EPS)
        radial = (g * unit).sum(axis=axis, keepdims=True)
        return (f * g + radial * fprime * sd,)

    return _make(sd * f, (s,), bw, "squash")


def bce_with_logits(logits: Tensor, targets: np.ndarray, weight: np.ndarray | None = None) -> Tensor:
    """Sum-reduced binary cross-entropy computed from logits.

    ``weight`` broadcasts against the logits and scales each pixel's term.
    """
    z = logits.data
    y = np.asarray(targets, dtype=z.dtype)
    if y.shape != z.shape:
        raise ShapeError(f"bce: logits {z.shape} vs targets {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("bce: targets must be binary {0, 1}")
    terms = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    w = None if weight is None else np.broadcast_to(np.asarray(weight, dtype=z.dtype), z.shape)
    if w is not None:
        terms = terms * w
    p = _sigmoid(z)

    def bw(g):
        d = p - y
        if w is not None:
            d = d * w
        return (g * d,)

    return _make(np.asarray(terms.sum(), dtype=z.dtype), (logits,), bw, "bce")


# ----------------------------------------------------------------------
# spatial


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols


def _col2im(cols: np.ndarray, shape: tuple[int, ...], k: int, stride: int) -> np.ndarray:
    n, c, _, _, ho, wo = cols.shape
    xp = np.zeros(shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return xp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation over NCHW input with an OIKK weight.

    Each sample is computed with its own GEMMs in a fixed order, so a sample's
    output does not depend on what else is in the batch.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: need NCHW input and OIKK weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, cg, k, k2 = weight.shape
    if k != k2 or c != cg * groups or o % groups:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape} (groups={groups})")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {o} output channels")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(f"conv2d: input {x.shape} with padding {padding} smaller than kernel {weight.shape}")
    if groups == 1 and stride == 1 and k == 1 and padding == 0:
        out, bw_core = _conv_pointwise(x, weight)
    elif groups == 1 and stride == 1:
        out, bw_core = _conv_shifted(x, weight, padding)
    else:
        out, bw_core = _conv_im2col(x, weight, stride, padding, groups)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        gx, gw = bw_core(g, x.requires_grad, weight.requires_grad)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "conv2d")


def _conv_pointwise(x: Tensor, weight: Tensor):
    n, c, h, w = x.shape
    o = weight.shape[0]
    xf = x.data.reshape(n, c, h * w)
    wm = weight.data.reshape(o, c)
    out = np.empty((n, o, h * w), dtype=x.dtype)
    for b in range(n):
        np.matmul(wm, xf[b], out=out[b])

    def bw(g, need_x, need_w):
        gf = g.reshape(n, o, h * w)
        gx = gw = None
        if need_x:
            gx = np.empty_like(xf)
            for b in range(n):
                np.matmul(wm.T, gf[b], out=gx[b])
            gx = gx.reshape(x.shape)
        if need_w:
            gw = np.zeros_like(wm)
            for b in range(n):
                gw += gf[b] @ xf[b].T
            gw = gw.reshape(weight.shape)
        return gx, gw

    return out.reshape(n, o, h, w), bw


def _conv_shifted(x: Tensor, weight: Tensor, padding: int):
    # Stride-1 conv as K*K GEMMs over shifted contiguous slices of the
    # flattened padded image; columns past the true width are discarded.
    n, c, h, w = x.shape
    o, _, k, _ = weight.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho, wo = hp - k + 1, wp - k + 1
    span = ho * wp
    xp = np.zeros((n, c, hp * wp + k), dtype=x.dtype)
    xp[:, :, :hp * wp].reshape(n, c, hp, wp)[:, :, padding:padding + h, padding:padding + w] = x.data
    taps = np.ascontiguousarray(weight.data.transpose(2, 3, 0, 1))
    offsets = [(i, j, i * wp + j) for i in range(k) for j in range(k)]
    out = np.zeros((n, o, span), dtype=x.dtype)
    for b in range(n):
        for i, j, off in offsets:
            out[b] += taps[i, j] @ xp[b, :, off:off + span]
    result = np.ascontiguousarray(out.reshape(n, o, ho, wp)[:, :, :, :wo])

    def bw(g, need_x, need_w):
        gpad = np.zeros((n, o, ho, wp), dtype=g.dtype)
        gpad[:, :, :, :wo] = g
        gpad = gpad.reshape(n, o, span)
        gx = gw = None
        if need_x:
            dxp = np.zeros_like(xp)
            for b in range(n):
                for i, j, off in offsets:
                    dxp[b, :, off:off + span] += taps[i, j].T @ gpad[b]
            gx = dxp[:, :, :hp * wp].reshape(n, c, hp, wp)[:, :, padding:padding + h, padding:padding + w]
            gx = np.ascontiguousarray(gx)
        if need_w:
            gtaps = np.zeros_like(taps)
            for b in range(n):
                for i, j, off in offsets:
                    gtaps[i, j] += gpad[b] @ xp[b, :, off:off + span].T
            gw = np.ascontiguousarray(gtaps.transpose(2, 3, 0, 1))
        return gx, gw

    return result, bw


def _conv_im2col(x: Tensor, weight: Tensor, stride: int, padding: int, groups: int):
    n, c, h, w = x.shape
    o, cg, k, _ = weight.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, ho, wo).reshape(n, groups, cg * k * k, ho * wo)
    wmat = weight.data.reshape(groups, o // groups, cg * k * k)
    out = np.empty((n, groups, o // groups, ho * wo), dtype=x.dtype)
    for b in range(n):
        np.matmul(wmat, cols[b], out=out[b])

    def bw(g, need_x, need_w):
        g4 = g.reshape(n, groups, o // groups, ho * wo)
        gx = gw = None
        if need_x:
            dcols = np.empty_like(cols)
            for b in range(n):
                np.matmul(wmat.transpose(0, 2, 1), g4[b], out=dcols[b])
            dxp = _col2im(dcols.reshape(n, c, k, k, ho, wo), xp.shape, k, stride)
            gx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        if need_w:
            gw = np.zeros_like(wmat)
            for b in range(n):
                gw += g4[b] @ cols[b].transpose(0, 2, 1)
            gw = gw.reshape(weight.shape)
        return gx, gw

    return out.reshape(n, o, ho, wo), bw


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pool with stride 2; ties resolve to the first window element in row-major order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: extents {h}x{w} must be even; pad the input first")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    if _BRANCHES is not None:
        _BRANCHES.append(idx)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        return (gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _make(out, (x,), bw, "maxpool2")


def bilinear_matrix(size: int, dtype=np.float64) -> np.ndarray:
    """(2*size, size) interpolation matrix for x2 bilinear, align_corners=False."""
    m = np.zeros((2 * size, size), dtype=dtype)
    for o in range(2 * size):
        src = max((o + 0.5) / 2.0 - 0.5, 0.0)
        i0 = min(int(np.floor(src)), size - 1)
        i1 = min(i0 + 1, size - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


def upsample2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    ah = bilinear_matrix(h, x.dtype)
    aw = bilinear_matrix(w, x.dtype)
    out = np.matmul(np.matmul(ah, x.data), aw.T)

    def bw(g):
        return (np.matmul(np.matmul(ah.T, g), aw),)

    return _make(out, (x,), bw, "upsample2")


BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, training: bool, momentum: float = BN_MOMENTUM,
              eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the running statistics are updated in place; the
    running variance uses the unbiased estimate.
    """
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: {c} channels but gamma {gamma.shape}, beta {beta.shape}")
    g_ = gamma.data[None, :, None, None]
    b_ = beta.data[None, :, None, None]
    if training:
        m = n * h * w
        if m < 2:
            raise ValueError(f"batchnorm: train mode needs at least 2 values per channel, got input {x.shape}")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * m / (m - 1)
    else:
        mean, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * g_ + b_

    def bw(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        dxhat = g * g_
        if training:
            m = n * h * w
            gx = (inv[None, :, None, None] / m) * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = dxhat * inv[None, :, None, None]
        return gx, gg, gb

    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), bw, "batchnorm")


# ----------------------------------------------------------------------
# serialization

_MAGIC = b"CADT"


def save_tensor(path: str | Path, array) -> None:
    """Write ``array`` as little-endian CADT: magic, u32 rank, u64 extents, f32 payload."""
    arr = np.asarray(array.data if isinstance(array, Tensor) else array)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_tensor(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a CADT tensor file")
    (rank,) = struct.unpack_from("<I", raw, 4)
    shape = struct.unpack_from(f"<{rank}Q", raw, 8)
    offset = 8 + 8 * rank
    count = int(np.prod(shape, dtype=np.int64))
    if len(raw) - offset != 4 * count:
        raise ValueError(f"{path}: payload has {len(raw) - offset} bytes, expected {4 * count}")
    return np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
