"""Dense tensors with reverse-mode automatic differentiation.

Forward operations are pure: they allocate a fresh output tensor and, when any
input tracks gradients, append a record to the module-level tape.  backward()
replays the tape once in reverse, accumulating gradients by summation, so a
tensor feeding several consumers receives the sum of its downstream gradients
and tensors that do not influence the loss are left untouched.

Tensors store float32 or float64 data; reductions accumulate in 64-bit even
for float32 storage.  The tape is confined to one process and must be cleared
explicitly between training iterations (see clear_tape / Tape.clear).
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor",
    "Tape",
    "tape",
    "clear_tape",
    "no_grad",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "relu",
    "sigmoid",
    "absolute",
    "square",
    "concat",
    "reshape",
    "index_select",
    "tensor_max",
    "tensor_sum",
    "tensor_mean",
    "softmax",
    "softmax_cross_entropy",
    "conv3d",
    "maxpool3d",
    "upsample3d_nearest",
    "trilinear_sample",
    "core_op_set",
    "adam_step",
    "Adam",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """An n-d array with an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

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

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def detach(self):
        """A gradient-free view of the same values."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def has_bad_values(self):
        """True when data or gradient contain NaN or Inf (fault-state check)."""
        if not np.all(np.isfinite(self.data)):
            return True
        return self.grad is not None and not np.all(np.isfinite(self.grad))

    # reductions as methods so they read like numpy
    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis, keepdims=False):
        return tensor_max(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


def _scalar_error(t):
    raise ContractError(f"expected a single-element tensor, got shape {t.data.shape}")


class Tape:
    """Ordered record of executed operations for one backward pass."""

    def __init__(self):
        self._records = []

    def record(self, out, inputs, backward_fn):
        self._records.append((out, inputs, backward_fn))

    def clear(self):
        self._records.clear()

    def __len__(self):
        return len(self._records)


_TAPE = Tape()
_GRAD_ENABLED = True


def tape():
    """The process-wide tape new operations record onto."""
    return _TAPE


def clear_tape():
    _TAPE.clear()


class no_grad:
    """Context manager that suspends tape recording (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._saved = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._saved
        return False


def _wrap(x, like=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.ndim > 0 and arr.dtype in (np.float32, np.float64):
        return Tensor(arr)
    # scalars and integer arrays adopt the partner's dtype so float32
    # pipelines are not silently promoted to float64
    return Tensor(arr.astype(like if like is not None else np.float64))


def _wrap_pair(a, b):
    if isinstance(a, Tensor):
        return a, _wrap(b, like=a.dtype)
    if isinstance(b, Tensor):
        return _wrap(a, like=b.dtype), b
    return _wrap(a), _wrap(b)

def _tracked(*tensors):
    return _GRAD_ENABLED and any(t.requires_grad for t in tensors)


def _make(data, inputs, backward_fn):
    """Allocate the output tensor and record the op when gradients flow."""
    track = _tracked(*inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        _TAPE.record(out, inputs, backward_fn)
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss):
    """Replay the tape once in reverse from a scalar loss.

    Gradients accumulate by summation into .grad of every tensor on a path
    from the loss to a requires_grad leaf; off-path tensors are untouched.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad += np.ones_like(loss.data)
    for out, inputs, backward_fn in reversed(_TAPE._records):
        if out.grad is None:
            continue  # not on any path to the loss
        for t, g in zip(inputs, backward_fn(out.grad)):
            if g is not None:
                _accumulate(t, g)


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b):
    a, b = _wrap_pair(a, b)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(a.data + b.data, (a, b), bwd)


def sub(a, b):
    a, b = _wrap_pair(a, b)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(a.data - b.data, (a, b), bwd)


def mul(a, b):
    a, b = _wrap_pair(a, b)
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bwd)


def div(a, b):
    a, b = _wrap_pair(a, b)
    ad, bd = a.data, b.data

    def bwd(g):
        return (_unbroadcast(g / bd, ad.shape),
                _unbroadcast(-g * ad / (bd * bd), bd.shape))

    return _make(ad / bd, (a, b), bwd)


def neg(a):
    a = _wrap(a)

    def bwd(g):
        return (-g,)

    return _make(-a.data, (a,), bwd)


def relu(a):
    a = _wrap(a)
    mask = a.data > 0

    def bwd(g):
        return (g * mask,)

    return _make(np.where(mask, a.data, 0.0), (a,), bwd)


def sigmoid(a):
    a = _wrap(a)
    x = a.data
    # stable evaluation on both tails
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(g):
        return (g * s * (1.0 - s),)

    return _make(s, (a,), bwd)


def absolute(a):
    a = _wrap(a)
    sign = np.sign(a.data)  # subgradient 0 at the kink

    def bwd(g):
        return (g * sign,)

    return _make(np.abs(a.data), (a,), bwd)


def square(a):
    a = _wrap(a)
    ad = a.data

    def bwd(g):
        return (2.0 * g * ad,)

    return _make(ad * ad, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra and shape ops

def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-d operands, got {a.data.ndim}-d and {b.data.ndim}-d")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul inner axes differ: {a.data.shape[1]} vs {b.data.shape[0]}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return _make(ad @ bd, (a, b), bwd)


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    ref = tensors[0].data.ndim
    for t in tensors[1:]:
        if t.data.ndim != ref:
            raise DimensionError("concat operands differ in rank")
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


def reshape(a, shape):
    a = _wrap(a)
    old = a.data.shape

    def bwd(g):
        return (g.reshape(old),)

    return _make(a.data.reshape(shape), (a,), bwd)


def index_select(a, indices, axis=0):
    """Gather rows (or slices along `axis`) by integer index."""
    a = _wrap(a)
    idx = np.asarray(indices, dtype=np.int64)

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (slice(None),) * axis + (idx,), g)
        return (ga,)

    return _make(np.take(a.data, idx, axis=axis), (a,), bwd)


def segment_mean(a, segment_ids, num_segments):
    """Mean of rows sharing a segment id; output row i averages rows with id i.

    Empty segments produce zero rows.  Gradient scatters the output gradient
    back to member rows scaled by one over the segment size.
    """
    a = _wrap(a)
    if a.data.ndim != 2:
        raise DimensionError(f"segment_mean expects 2-D input, got {a.data.shape}")
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.shape != (a.data.shape[0],):
        raise DimensionError(
            f"segment ids must be ({a.data.shape[0]},), got {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= num_segments):
        raise DimensionError("segment id out of range")
    counts = np.bincount(ids, minlength=num_segments).astype(a.data.dtype)
    scale = 1.0 / np.maximum(counts, 1.0)
    out = np.zeros((num_segments, a.data.shape[1]), dtype=a.data.dtype)
    np.add.at(out, ids, a.data)
    out *= scale[:, None]

    def bwd(g):
        return ((g * scale[:, None])[ids],)

    return _make(out, (a,), bwd)


def _getitem(a, key):
    a = _wrap(a)

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, key, g)
        return (ga,)

    return _make(a.data[key], (a,), bwd)


# ---------------------------------------------------------------------------
# reductions (64-bit accumulation regardless of storage dtype)

def tensor_sum(a, axis=None, keepdims=False):
    a = _wrap(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64)
    out = np.asarray(out, dtype=a.data.dtype)
    shape = a.data.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(a.data.dtype, copy=True),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).astype(a.data.dtype, copy=True),)

    return _make(out, (a,), bwd)


def tensor_mean(a, axis=None, keepdims=False):
    a = _wrap(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.data.shape[ax] for ax in axes]))
    s = tensor_sum(a, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / n)


def tensor_max(a, axis, keepdims=False):
    """Maximum along one axis; gradient routes to the (first) argmax."""
    a = _wrap(a)
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    shape = a.data.shape

    def bwd(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        ga = np.zeros(shape, dtype=a.data.dtype)
        np.put_along_axis(ga, np.expand_dims(idx, axis), gg, axis=axis)
        return (ga,)

    return _make(out if keepdims else np.squeeze(out, axis=axis), (a,), bwd)


# ---------------------------------------------------------------------------
# softmax family

def softmax(a, axis=1):
    a = _wrap(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / np.sum(e, axis=axis, keepdims=True)

    def bwd(g):
        return (p * (g - np.sum(g * p, axis=axis, keepdims=True)),)

    return _make(p, (a,), bwd)


def softmax_cross_entropy(logits, labels, axis=1):
    """Mean negative log-likelihood over all positions.

    `logits` has a class axis; `labels` holds integer class ids with the same
    shape minus that axis.  Uniform two-class logits give ln 2 per position.
    """
    logits = _wrap(logits)
    lab = np.asarray(labels, dtype=np.int64)
    expect = logits.data.shape[:axis] + logits.data.shape[axis + 1:]
    if lab.shape != expect:
        raise DimensionError(f"labels shape {lab.shape} does not match logits {expect}")
    shifted = logits.data - np.max(logits.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    logp = shifted - lse
    lab_exp = np.expand_dims(lab, axis)
    nll = -np.take_along_axis(logp, lab_exp, axis=axis)
    n_pos = lab.size
    loss = np.asarray(np.sum(nll, dtype=np.float64) / n_pos, dtype=logits.data.dtype)

    def bwd(g):
        grad = np.exp(logp)
        picked = np.take_along_axis(grad, lab_exp, axis=axis) - 1.0
        np.put_along_axis(grad, lab_exp, picked, axis=axis)
        return (grad * (float(g) / n_pos),)

    return _make(loss, (logits,), bwd)


# ---------------------------------------------------------------------------
# 3-d grid operators

def conv3d(x, kernel, bias=None, stride=1, pad=0):
    """Cross-correlation of [N,C,D,H,W] with kernels [K,C,k,k,k].

    Odd kernel extents only; zero padding of `pad` voxels per side; output
    spatial extent floor((in + 2*pad - k)/stride) + 1.
    """
    x, kernel = _wrap(x), _wrap(kernel)
    if bias is not None:
        bias = _wrap(bias)
    xd, kd = x.data, kernel.data
    if xd.ndim != 5 or kd.ndim != 5:
        raise DimensionError(f"conv3d expects 5-d input and kernel, got {xd.ndim}-d / {kd.ndim}-d")
    n, c, d, h, w = xd.shape
    kout, kc, k0, k1, k2 = kd.shape
    if kc != c:
        raise DimensionError(f"conv3d channel axis mismatch: input {c}, kernel {kc}")
    if not (k0 == k1 == k2) or k0 % 2 == 0:
        raise DimensionError(f"conv3d kernel extents must be equal and odd, got {(k0, k1, k2)}")
    k = k0
    xp = np.pad(xd, ((0, 0), (0, 0)) + ((pad, pad),) * 3)
    dp, hp, wp = xp.shape[2:]
    for name, extent in (("depth", dp), ("height", hp), ("width", wp)):
        if extent < k:
            raise DimensionError(f"conv3d {name} axis too small: {extent} < kernel {k}")
    do = (dp - k) // stride + 1
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1

    def windows(arr, i, j, l):
        return arr[:, :,
                   i:i + stride * (do - 1) + 1:stride,
                   j:j + stride * (ho - 1) + 1:stride,
                   l:l + stride * (wo - 1) + 1:stride]

    acc = np.zeros((n, do, ho, wo, kout), dtype=xd.dtype)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                # [N,C,do,ho,wo] x [K,C] contracted over C
                acc += np.tensordot(windows(xp, i, j, l), kd[:, :, i, j, l], axes=([1], [1]))
    out = np.moveaxis(acc, -1, 1)
    if bias is not None:
        if bias.data.shape != (kout,):
            raise DimensionError(f"conv3d bias shape {bias.data.shape} != ({kout},)")
        out = out + bias.data[None, :, None, None, None]

    def bwd(g):
        gmoved = np.moveaxis(g, 1, -1)  # [N,do,ho,wo,K]
        gk = np.empty_like(kd)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                for l in range(k):
                    win = windows(xp, i, j, l)
                    gk[:, :, i, j, l] = np.tensordot(
                        gmoved, win, axes=([0, 1, 2, 3], [0, 2, 3, 4]))
                    contrib = np.tensordot(gmoved, kd[:, :, i, j, l], axes=([4], [0]))
                    windows(gxp, i, j, l)[...] += np.moveaxis(contrib, -1, 1)
        gx = gxp[:, :, pad:pad + d, pad:pad + h, pad:pad + w] if pad else gxp
        gb = None if bias is None else gmoved.sum(axis=(0, 1, 2, 3))
        return (gx, gk) if bias is None else (gx, gk, gb)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, inputs, bwd)


def maxpool3d(x):
    """Max pooling over non-overlapping 2x2x2 blocks; even extents required."""
    x = _wrap(x)
    xd = x.data
    if xd.ndim != 5:
        raise DimensionError(f"maxpool3d expects 5-d input, got {xd.ndim}-d")
    n, c, d, h, w = xd.shape
    for name, extent in (("depth", d), ("height", h), ("width", w)):
        if extent % 2:
            raise DimensionError(f"maxpool3d needs an even {name} axis, got {extent}")
    blocks = xd.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(n, c, d // 2, h // 2, w // 2, 8)
    idx = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, d // 2, h // 2, w // 2, 2, 2, 2)
        gb = gb.transpose(0, 1, 2, 5, 3, 6, 4, 7).reshape(n, c, d, h, w)
        return (gb,)

    return _make(out, (x,), bwd)


def upsample3d_nearest(x):
    """Nearest-neighbour upsampling by a factor of 2 per spatial axis."""
    x = _wrap(x)
    xd = x.data
    if xd.ndim != 5:
        raise DimensionError(f"upsample3d_nearest expects 5-d input, got {xd.ndim}-d")
    n, c, d, h, w = xd.shape
    out = xd.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)

    def bwd(g):
        return (g.reshape(n, c, d, 2, h, 2, w, 2).sum(axis=(3, 5, 7)),)

    return _make(out, (x,), bwd)


def trilinear_sample(grid, coords):
    """Trilinear interpolation of a [C,D,H,W] grid at continuous voxel coords.

    `coords` is an (n,3) float array in voxel units; samples are clamped to
    the grid boundary.  Differentiable with respect to the grid only; the
    coordinates are treated as constants.
    """
    grid = _wrap(grid)
    pts = np.asarray(coords, dtype=np.float64)
    if grid.data.ndim != 4:
        raise DimensionError(f"trilinear_sample expects a [C,D,H,W] grid, got {grid.data.ndim}-d")
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DimensionError(f"coords must be (n,3), got {pts.shape}")
    c, d, h, w = grid.data.shape
    dims = np.array([d, h, w], dtype=np.float64)
    p = np.clip(pts, 0.0, dims - 1.0)
    lo = np.floor(p).astype(np.int64)
    lo = np.minimum(lo, (dims - 1.0).astype(np.int64))
    frac = p - lo
    hi = np.minimum(lo + 1, (dims - 1.0).astype(np.int64))

    flat = np.moveaxis(grid.data, 0, -1).reshape(-1, c)  # [D*H*W, C]
    corners = []
    for bz in (0, 1):
        for by in (0, 1):
            for bx in (0, 1):
                iz = hi[:, 0] if bz else lo[:, 0]
                iy = hi[:, 1] if by else lo[:, 1]
                ix = hi[:, 2] if bx else lo[:, 2]
                wz = frac[:, 0] if bz else 1.0 - frac[:, 0]
                wy = frac[:, 1] if by else 1.0 - frac[:, 1]
                wx = frac[:, 2] if bx else 1.0 - frac[:, 2]
                corners.append(((iz * h + iy) * w + ix, wz * wy * wx))
    out = np.zeros((pts.shape[0], c), dtype=grid.data.dtype)
    for flat_idx, weight in corners:
        out += flat[flat_idx] * weight[:, None]

    def bwd(g):
        gflat = np.zeros_like(flat)
        for flat_idx, weight in corners:
            np.add.at(gflat, flat_idx, g * weight[:, None])
        return (np.moveaxis(gflat.reshape(d, h, w, c), -1, 0),)

    return _make(out, (grid,), bwd)


def core_op_set():
    """Name -> callable map of the differentiable primitives."""
    return {
        "add": add,
        "sub": sub,
        "mul": mul,
        "div": div,
        "neg": neg,
        "relu": relu,
        "sigmoid": sigmoid,
        "absolute": absolute,
        "square": square,
        "matmul": matmul,
        "concat": concat,
        "reshape": reshape,
        "index_select": index_select,
        "segment_mean": segment_mean,
        "max": tensor_max,
        "sum": tensor_sum,
        "mean": tensor_mean,
        "softmax": softmax,
        "softmax_cross_entropy": softmax_cross_entropy,
        "conv3d": conv3d,
        "maxpool3d": maxpool3d,
        "upsample3d_nearest": upsample3d_nearest,
        "trilinear_sample": trilinear_sample,
    }


# ---------------------------------------------------------------------------
# optimisation

def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place on the parameter arrays.

    `state` is a dict with keys "m", "v" (lists of arrays) and "t" (int); an
    empty dict is initialised on first use.  Returns the updated state.
    """
    if not state:
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
        state["t"] = 0
    state["t"] += 1
    t = state["t"]
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g is None:
            continue
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        p -= lr * mhat / (np.sqrt(vhat) + eps)
    return state


class Adam:
    """Adam over a name -> Tensor parameter dict."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.names = sorted(params)
        self.params = [params[k] for k in self.names]
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = {}

    def step(self):
        grads = [p.grad for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state,
                  lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_arrays(self):
        """Flat name -> array view of the moment buffers, for checkpoints."""
        out = {}
        if not self.state:
            return out
        for name, m, v in zip(self.names, self.state["m"], self.state["v"]):
            out[f"adam.m.{name}"] = m
            out[f"adam.v.{name}"] = v
        return out

    def load_state_arrays(self, arrays, t):
        self.state = {
            "m": [np.array(arrays[f"adam.m.{k}"]) for k in self.names],
            "v": [np.array(arrays[f"adam.v.{k}"]) for k in self.names],
            "t": int(t),
        }
