"""Dense tensors with tape-based reverse-mode differentiation.

Tensors wrap contiguous numpy buffers (float32 by default, float64 for
verification runs). Operations executed while a Tape is active record a
backward closure; ``backward`` replays the tape in reverse and accumulates
gradients into every tensor that requires them. Creation order is the
topological order, so each node is visited exactly once.

Shape convention used throughout the package: feature maps are channel-last,
with the two spatial axes at positions -3 and -2. All spatial ops
(convolution, padding, upsampling, gathers) treat any leading axes as batch.
"""

from __future__ import annotations

import math
import threading

import numpy as np
import torch
import torch.nn.functional as _F
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import ContractError, DimensionError, NumericError

# torch supplies fast CPU kernels (convolution, softmax, erf) behind the tape;
# tensors cross the boundary zero-copy. Autograd is never engaged.
torch.set_grad_enabled(False)


def _tt(arr):
    return torch.from_numpy(np.ascontiguousarray(arr))

_FLOAT_DTYPES = (np.float32, np.float64)
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_tls = threading.local()


def _tape_stack():
    stack = getattr(_tls, "tapes", None)
    if stack is None:
        stack = []
        _tls.tapes = stack
    return stack


class Tape:
    """Recording of differentiable operations, one forward pass per tape.

    A tape and the tensors it references are confined to one thread for the
    duration of a forward/backward pass.
    """

    def __init__(self):
        self.nodes = []  # list of (output Tensor, backward closure)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense N-dimensional real array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor construction rejected non-finite values")
        if any(d <= 0 for d in arr.shape):
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = None

    @classmethod
    def _wrap(cls, arr):
        """Fast constructor for op outputs; skips boundary validation."""
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.node_id = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def detach(self):
        return Tensor._wrap(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name})"


def _needs(t):
    return t.requires_grad or t.node_id is not None


def _accum(t, g):
    # Out-of-place accumulation: backward closures may hand over views of
    # other gradient buffers, which must never be mutated in place.
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _record(out, inputs, backward_fn):
    tape = _active_tape()
    if tape is not None and any(_needs(t) for t in inputs):
        out.node_id = len(tape.nodes)
        tape.nodes.append((out, backward_fn))
    return out


def _check_dtype(*tensors):
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise DimensionError(
                f"mixed dtypes {dt.name} and {t.data.dtype.name}; cast inputs explicitly"
            )
    return dt


def _unbroadcast(g, shape):
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(tape, loss):
    """Populate gradients of every tensor on the tape reachable from ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.data.shape}")
    loss.grad = np.ones_like(loss.data)
    for out, fn in reversed(tape.nodes):
        if out.grad is not None:
            fn(out.grad)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    _check_dtype(a, b)
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"add shapes incompatible: {a.shape} vs {b.shape}") from None
    out = Tensor._wrap(data)

    def bw(g):
        if _needs(a):
            _accum(a, _unbroadcast(g, a.data.shape))
        if _needs(b):
            _accum(b, _unbroadcast(g, b.data.shape))

    return _record(out, (a, b), bw)


def sub(a, b):
    _check_dtype(a, b)
    try:
        data = a.data - b.data
    except ValueError:
        raise DimensionError(f"sub shapes incompatible: {a.shape} vs {b.shape}") from None
    out = Tensor._wrap(data)

    def bw(g):
        if _needs(a):
            _accum(a, _unbroadcast(g, a.data.shape))
        if _needs(b):
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _record(out, (a, b), bw)


def mul(a, b):
    _check_dtype(a, b)
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul shapes incompatible: {a.shape} vs {b.shape}") from None
    out = Tensor._wrap(data)
    ad, bd = a.data, b.data

    def bw(g):
        if _needs(a):
            _accum(a, _unbroadcast(g * bd, a.data.shape))
        if _needs(b):
            _accum(b, _unbroadcast(g * ad, b.data.shape))

    return _record(out, (a, b), bw)


def scale(a, s):
    s = float(s)
    out = Tensor._wrap(a.data * s)

    def bw(g):
        if _needs(a):
            _accum(a, g * s)

    return _record(out, (a,), bw)


# ---------------------------------------------------------------------------
# matmul


def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast."""
    _check_dtype(a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} x {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul batch axes incompatible: {a.shape} x {b.shape}") from None
    out = Tensor._wrap(data)
    ad, bd = a.data, b.data

    def bw(g):
        if _needs(a):
            ga = np.matmul(g, np.swapaxes(bd, -1, -2))
            _accum(a, _unbroadcast(ga, ad.shape))
        if _needs(b):
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
            _accum(b, _unbroadcast(gb, bd.shape))

    return _record(out, (a, b), bw)


# ---------------------------------------------------------------------------
# structural ops


def reshape(x, shape):
    shape = tuple(int(d) for d in shape)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from None
    out = Tensor._wrap(data)
    orig = x.data.shape

    def bw(g):
        if _needs(x):
            _accum(x, g.reshape(orig))

    return _record(out, (x,), bw)


def permute_axes(x, axes):
    axes = tuple(int(i) for i in axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise DimensionError(f"invalid permutation {axes} for rank {x.data.ndim}")
    out = Tensor._wrap(np.transpose(x.data, axes))
    inv = np.argsort(axes)

    def bw(g):
        if _needs(x):
            _accum(x, np.transpose(g, inv))

    return _record(out, (x,), bw)


def concat(tensors, axis=-1):
    tensors = list(tensors)
    _check_dtype(*tensors)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(
            "concat shapes incompatible: " + ", ".join(str(t.shape) for t in tensors)
        ) from None
    out = Tensor._wrap(data)
    ax = axis if axis >= 0 else data.ndim + axis
    sizes = [t.data.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        parts = np.split(g, splits, axis=ax)
        for t, p in zip(tensors, parts):
            if _needs(t):
                _accum(t, p)

    return _record(out, tuple(tensors), bw)


def concat_channels(tensors):
    return concat(tensors, axis=-1)


def stack0(tensors):
    """Stack tensors along a new leading axis."""
    tensors = list(tensors)
    _check_dtype(*tensors)
    shapes = {t.data.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack0 needs equal shapes, got {sorted(shapes)}")
    out = Tensor._wrap(np.stack([t.data for t in tensors], axis=0))

    def bw(g):
        for i, t in enumerate(tensors):
            if _needs(t):
                _accum(t, g[i])

    return _record(out, tuple(tensors), bw)


def take0(x, index):
    """Select one slice along the leading axis (axis removed)."""
    n = x.data.shape[0]
    if not 0 <= index < n:
        raise DimensionError(f"take0 index {index} out of range for extent {n}")
    out = Tensor._wrap(x.data[index])
    shape = x.data.shape
    dtype = x.data.dtype

    def bw(g):
        if _needs(x):
            full = np.zeros(shape, dtype)
            full[index] = g
            _accum(x, full)

    return _record(out, (x,), bw)


# ---------------------------------------------------------------------------
# activations


def relu(x):
    xt = _tt(x.data)
    out = Tensor._wrap(torch.relu(xt).numpy())

    def bw(g):
        if _needs(x):
            _accum(x, (_tt(g) * (xt > 0)).numpy())

    return _record(out, (x,), bw)


def sigmoid(x):
    yt = torch.sigmoid(_tt(x.data))
    out = Tensor._wrap(yt.numpy())

    def bw(g):
        if _needs(x):
            _accum(x, (_tt(g) * (yt * (1.0 - yt))).numpy())

    return _record(out, (x,), bw)


def gelu(x):
    """Exact Gaussian-CDF form x * Phi(x)."""
    xt = _tt(x.data)
    phi = 0.5 * (1.0 + torch.erf(xt * _INV_SQRT2))
    out = Tensor._wrap((xt * phi).numpy())

    def bw(g):
        if _needs(x):
            pdf = torch.exp(-0.5 * xt * xt) * _INV_SQRT2PI
            _accum(x, (_tt(g) * (phi + xt * pdf)).numpy())

    return _record(out, (x,), bw)


def abs_(x):
    out = Tensor._wrap(np.abs(x.data))
    sgn = np.sign(x.data)

    def bw(g):
        if _needs(x):
            _accum(x, g * sgn)

    return _record(out, (x,), bw)


# ---------------------------------------------------------------------------
# softmax / normalization


def softmax_rows(x):
    """Softmax over the last axis, with row-max subtraction for stability."""
    yt = torch.softmax(_tt(x.data), dim=-1)
    y = yt.numpy()
    out = Tensor._wrap(y)

    def bw(g):
        if _needs(x):
            gt = _tt(g)
            dot = (gt * yt).sum(dim=-1, keepdim=True)
            _accum(x, (yt * (gt - dot)).numpy())

    return _record(out, (x,), bw)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the channel (last) axis at each position, then affine."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    c = x.data.shape[-1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise DimensionError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match channels {c}"
        )
    _check_dtype(x, gamma, beta)
    xt = _tt(x.data)
    mu = xt.mean(dim=-1, keepdim=True)
    xc = xt - mu
    var = (xc * xc).mean(dim=-1, keepdim=True)
    inv = 1.0 / torch.sqrt(var + eps)
    xh = xc * inv
    gd = _tt(gamma.data)
    out = Tensor._wrap((xh * gd + _tt(beta.data)).numpy())

    def bw(g):
        gt = _tt(g)
        lead = tuple(range(gt.ndim - 1))
        if _needs(gamma):
            _accum(gamma, (gt * xh).sum(dim=lead).numpy())
        if _needs(beta):
            _accum(beta, gt.sum(dim=lead).numpy())
        if _needs(x):
            dxh = gt * gd
            m1 = dxh.mean(dim=-1, keepdim=True)
            m2 = (dxh * xh).mean(dim=-1, keepdim=True)
            _accum(x, (inv * (dxh - m1 - xh * m2)).numpy())

    return _record(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(x, axes=None, keepdims=False):
    if axes is None:
        axes = tuple(range(x.data.ndim))
    elif isinstance(axes, int):
        axes = (axes,)
    axes = tuple(a % x.data.ndim for a in axes)
    out = Tensor._wrap(x.data.sum(axis=axes, keepdims=keepdims))
    shape = x.data.shape

    def bw(g):
        if _needs(x):
            if not keepdims:
                expand = list(shape)
                for a in axes:
                    expand[a] = 1
                g = g.reshape(expand)
            _accum(x, np.broadcast_to(g, shape))

    return _record(out, (x,), bw)


def reduce_mean(x, axes=None, keepdims=False):
    if axes is None:
        count = x.data.size
    else:
        ax = (axes,) if isinstance(axes, int) else axes
        count = int(np.prod([x.data.shape[a] for a in ax]))
    return scale(reduce_sum(x, axes, keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# spatial ops (channel-last; spatial axes at -3, -2)


def reflect_index(idx, n):
    """Map out-of-range indices into [0, n) by mirroring with edge repeat.

    -1 -> 0, -2 -> 1, n -> n-1, n+1 -> n-2, ... (period 2n triangle wave)
    """
    idx = np.asarray(idx)
    if n == 1:
        return np.zeros_like(idx)
    q = np.mod(idx, 2 * n)
    return np.where(q >= n, 2 * n - 1 - q, q)


def _fold_axis(g, idx, n, axis):
    """Transpose of an index-gather along one axis: scatter-add rows of g.

    ``idx`` is the reflect-pad index vector; the interior maps one-to-one, so
    only the 2*pad border rows need explicit accumulation.
    """
    pad = (len(idx) - n) // 2
    gm = np.moveaxis(g, axis, 0)
    out = gm[pad : pad + n].copy()
    for i in range(pad):
        out[idx[i]] += gm[i]
    for i in range(n + pad, n + 2 * pad):
        out[idx[i]] += gm[i]
    return np.moveaxis(out, 0, axis)


_REFLECT_CACHE = {}


def _reflect_indices(n, pad):
    key = (n, pad)
    hit = _REFLECT_CACHE.get(key)
    if hit is None:
        hit = reflect_index(np.arange(-pad, n + pad), n).astype(np.intp)
        _REFLECT_CACHE[key] = hit
    return hit


def pad_reflect(x, pad):
    """Mirror-pad (edge repeating) the two spatial axes by ``pad`` pixels."""
    if pad == 0:
        return x
    h, w = x.data.shape[-3], x.data.shape[-2]
    if pad >= h or pad >= w:
        raise DimensionError(f"reflect pad {pad} too large for spatial extents {h}x{w}")
    width = [(0, 0)] * (x.data.ndim - 3) + [(pad, pad), (pad, pad), (0, 0)]
    out = Tensor._wrap(np.pad(x.data, width, mode="symmetric"))
    ridx = _reflect_indices(h, pad)
    cidx = _reflect_indices(w, pad)

    def bw(g):
        if _needs(x):
            g = _fold_axis(g, ridx, h, g.ndim - 3)
            g = _fold_axis(g, cidx, w, g.ndim - 2)
            _accum(x, g)

    return _record(out, (x,), bw)


def pad_zero(x, pad):
    if pad == 0:
        return x
    width = [(0, 0)] * (x.data.ndim - 3) + [(pad, pad), (pad, pad), (0, 0)]
    out = Tensor._wrap(np.pad(x.data, width))

    def bw(g):
        if _needs(x):
            _accum(x, g[..., pad:-pad, pad:-pad, :])

    return _record(out, (x,), bw)


def _nhwc(arr, lead):
    """View a (..., H, W, C) numpy array as a torch NCHW tensor (no copy)."""
    n = 1
    for d in lead:
        n *= d
    t = torch.from_numpy(arr.reshape((n,) + arr.shape[len(lead) :]))
    return t.permute(0, 3, 1, 2)


def _from_nchw(t, lead):
    """Back to channel-last numpy with the original leading axes (no copy)."""
    arr = t.permute(0, 2, 3, 1).numpy()
    return arr.reshape(lead + arr.shape[1:])


def _conv_valid(x, kernel, stride, grouped=False):
    """Valid cross-correlation of channel-last maps with a (k,k,Cin,Cout)
    kernel, or with per-group (G,k,k,Cin,Cout) kernels matched against the
    leading axis of ``x`` when ``grouped``. Kernels run on torch's CPU
    convolution; layouts cross the boundary zero-copy."""
    xd, kd = x.data, kernel.data
    k = kd.shape[-4]
    cin, cout = kd.shape[-2], kd.shape[-1]
    lead = xd.shape[:-3]
    if grouped:
        # fold the group axis into channels: (G, rest..., H, W, C) -> NHWC with
        # G*C channels and per-group kernels via torch's grouped convolution
        g_dim = kd.shape[0]
        rest = lead[1:]
        xm = np.ascontiguousarray(np.moveaxis(xd, 0, -2))  # (rest..., H, W, G, C)
        xt = _nhwc(xm.reshape(rest + xd.shape[-3:-1] + (g_dim * cin,)), rest)
        wt = _tt(kd).permute(0, 4, 3, 1, 2).reshape(g_dim * cout, cin, k, k).contiguous()
        groups = g_dim
    else:
        xt = _nhwc(xd, lead)
        wt = _tt(kd).permute(3, 2, 0, 1).contiguous()
        groups = 1
    ot = _F.conv2d(xt, wt, stride=stride, groups=groups)
    if grouped:
        om = _from_nchw(ot, rest)  # (rest..., oh, ow, G*cout)
        oh, ow = om.shape[-3], om.shape[-2]
        om = om.reshape(rest + (oh, ow, g_dim, cout))
        out_np = np.ascontiguousarray(np.moveaxis(om, -2, 0))
    else:
        out_np = _from_nchw(ot, lead)
    out = Tensor._wrap(out_np)

    def bw(g):
        if grouped:
            gm = np.ascontiguousarray(np.moveaxis(g, 0, -2))
            gt = _nhwc(gm.reshape(rest + g.shape[-3:-1] + (g_dim * cout,)), rest)
        else:
            gt = _nhwc(np.ascontiguousarray(g), lead)
        dxt, dw, _ = torch.ops.aten.convolution_backward(
            gt.contiguous(),
            xt.contiguous(),
            wt,
            None,
            (stride, stride),
            (0, 0),
            (1, 1),
            False,
            (0, 0),
            groups,
            (_needs(x), _needs(kernel), False),
        )
        if _needs(kernel):
            if grouped:
                dw = dw.reshape(g_dim, cout, cin, k, k).permute(0, 3, 4, 2, 1)
            else:
                dw = dw.permute(2, 3, 1, 0)
            _accum(kernel, np.ascontiguousarray(dw.numpy()))
        if _needs(x):
            if grouped:
                dxm = _from_nchw(dxt, rest).reshape(rest + xd.shape[-3:-1] + (g_dim, cin))
                _accum(x, np.ascontiguousarray(np.moveaxis(dxm, -2, 0)))
            else:
                _accum(x, _from_nchw(dxt, lead))

    return _record(out, (x, kernel), bw)


def conv2d(x, kernel, stride=1, padding="reflect"):
    """2D convolution of a channel-last map, 'same' geometry at stride 1.

    kernel: (k, k, Cin, Cout) with odd k; padding in {"zero", "reflect"};
    stride in {1, 2}.
    """
    _check_dtype(x, kernel)
    if kernel.data.ndim != 4 or kernel.data.shape[0] != kernel.data.shape[1]:
        raise DimensionError(f"conv kernel must be (k,k,Cin,Cout), got {kernel.shape}")
    k = kernel.data.shape[0]
    if k % 2 == 0:
        raise DimensionError(f"conv kernel extent must be odd, got {k}")
    if stride not in (1, 2):
        raise ContractError(f"conv stride must be 1 or 2, got {stride}")
    if x.data.ndim < 3:
        raise DimensionError(f"conv input needs rank >= 3, got {x.shape}")
    if x.data.shape[-1] != kernel.data.shape[2]:
        raise DimensionError(
            f"conv channel mismatch: input {x.data.shape[-1]}, kernel expects {kernel.data.shape[2]}"
        )
    if padding == "reflect":
        x = pad_reflect(x, k // 2)
    elif padding == "zero":
        x = pad_zero(x, k // 2)
    else:
        raise ContractError(f"unknown pad mode {padding!r}")
    return _conv_valid(x, kernel, stride)


def conv2d_grouped(x, kernels, padding="reflect"):
    """Apply one conv kernel per leading-axis group of ``x``.

    x: (G, ..., H, W, Cin); kernels: (G, k, k, Cin, Cout). Equivalent to G
    independent stride-1 convolutions batched into one call.
    """
    _check_dtype(x, kernels)
    if kernels.data.ndim != 5 or kernels.data.shape[0] != x.data.shape[0]:
        raise DimensionError(
            f"grouped conv kernels {kernels.shape} do not match input groups {x.shape}"
        )
    if x.data.shape[-1] != kernels.data.shape[-2]:
        raise DimensionError(
            f"conv channel mismatch: input {x.data.shape[-1]}, kernel expects {kernels.data.shape[-2]}"
        )
    k = kernels.data.shape[-4]
    if padding == "reflect":
        x = pad_reflect(x, k // 2)
    elif padding == "zero":
        x = pad_zero(x, k // 2)
    else:
        raise ContractError(f"unknown pad mode {padding!r}")
    return _conv_valid(x, kernels, 1, grouped=True)


def add_channel_bias(x, bias):
    """Add a per-channel bias vector over the last axis."""
    _check_dtype(x, bias)
    c = x.data.shape[-1]
    if bias.data.shape != (c,):
        raise DimensionError(f"bias shape {bias.shape} does not match channels {c}")
    out = Tensor._wrap(x.data + bias.data)

    def bw(g):
        if _needs(x):
            _accum(x, g)
        if _needs(bias):
            _accum(bias, g.reshape(-1, c).sum(axis=0))

    return _record(out, (x, bias), bw)


def upsample_nearest(x, factor=2):
    """Nearest-neighbour upsampling of the two spatial axes."""
    if factor != 2:
        raise ContractError("only factor-2 upsampling is supported")
    xd = x.data
    out = Tensor._wrap(np.repeat(np.repeat(xd, 2, axis=-3), 2, axis=-2))
    h, w = xd.shape[-3], xd.shape[-2]
    lead = xd.shape[:-3]

    def bw(g):
        if _needs(x):
            g = g.reshape(lead + (h, 2, w, 2, xd.shape[-1]))
            _accum(x, g.sum(axis=(-4, -2)))

    return _record(out, (x,), bw)


def gather_hw(x, rows, cols, scatter_index=None):
    """Gather pixels of a channel-last map at integer coordinate arrays.

    rows/cols share a shape S; output is (..., *S, C) with
    out[..., s, c] = x[..., rows[s], cols[s], c]. ``scatter_index`` is an
    optional precomputed flat index (rows*W + cols, raveled) reused by the
    backward scatter.
    """
    h, w = x.data.shape[-3], x.data.shape[-2]
    out = Tensor._wrap(x.data[..., rows, cols, :])
    c = x.data.shape[-1]
    lead = x.data.shape[:-3]
    n = rows.size
    if scatter_index is None:
        scatter_index = (rows.reshape(-1) * w + cols.reshape(-1)).astype(np.intp)
    flat = scatter_index

    def bw(g):
        if _needs(x):
            g2 = g.reshape((-1, n * c))
            idx2 = (flat[:, None] * c + np.arange(c)).reshape(-1)
            dx = np.empty((g2.shape[0], h * w * c), g.dtype)
            for i in range(g2.shape[0]):
                dx[i] = np.bincount(idx2, weights=g2[i], minlength=h * w * c)
            _accum(x, dx.reshape(lead + (h, w, c)))

    return _record(out, (x,), bw)


def _space_to_blocks_raw(xd, b):
    lead = xd.shape[:-3]
    h, w, c = xd.shape[-3:]
    r = len(lead)
    v = xd.reshape(lead + (h // b, b, w // b, b, c))
    v = v.transpose(tuple(range(r)) + (r + 1, r + 3, r, r + 2, r + 4))
    return np.ascontiguousarray(v).reshape(lead + (b * b, (h // b) * (w // b), c))


def _blocks_to_space_raw(xd, b, hw):
    h, w = hw
    lead = xd.shape[:-3]
    c = xd.shape[-1]
    r = len(lead)
    v = xd.reshape(lead + (b, b, h // b, w // b, c))
    v = v.transpose(tuple(range(r)) + (r + 2, r, r + 3, r + 1, r + 4))
    return np.ascontiguousarray(v).reshape(lead + (h, w, c))


def space_to_blocks(x, b):
    """Rearrange (..., H, W, C) into (..., b*b, nBlocks, C), both row-major."""
    h, w = x.data.shape[-3], x.data.shape[-2]
    if h % b or w % b:
        raise DimensionError(f"block size {b} must divide spatial extents {h}x{w}")
    out = Tensor._wrap(_space_to_blocks_raw(x.data, b))

    def bw(g):
        if _needs(x):
            _accum(x, _blocks_to_space_raw(g, b, (h, w)))

    return _record(out, (x,), bw)


def blocks_to_space(x, b, hw):
    """Exact inverse of :func:`space_to_blocks`."""
    h, w = hw
    expect = (b * b, (h // b) * (w // b))
    if x.data.shape[-3:-1] != expect:
        raise DimensionError(f"blocked shape {x.shape} does not match geometry b={b}, hw={hw}")
    out = Tensor._wrap(_blocks_to_space_raw(x.data, b, hw))

    def bw(g):
        if _needs(x):
            _accum(x, _space_to_blocks_raw(g, b))

    return _record(out, (x,), bw)


# ---------------------------------------------------------------------------
# fused multi-head attention kernel


def multihead_attention(xq, xkv, wq, wk, wv, wo, heads, weights_out=None):
    """Fused blocked multi-head attention with a hand-derived backward.

    ``xq``/``xkv`` carry tokens on axis -3 and the block/batch axis at -2:
    shape (..., tokens, blocks, C). ``wq``/``wk``/``wv``/``wo`` are (C, C)
    projections with the heads laid out as contiguous column groups. The
    softmax temperature is sqrt(C/heads). Leading axes broadcast, so a stack
    of key/value sources can attend against one shared query tensor.

    ``weights_out``: optional list; if given, the post-softmax attention
    probabilities are appended (diagnostics only).
    """
    _check_dtype(xq, xkv, wq, wk, wv, wo)
    c = wq.data.shape[0]
    if xq.data.shape[-1] != c or xkv.data.shape[-1] != c:
        raise DimensionError(
            f"attention channels mismatch: {xq.shape} / {xkv.shape} vs projections {wq.shape}"
        )
    if c % heads != 0:
        raise DimensionError(f"head count {heads} does not divide channels {c}")
    if xq.data.shape[-3] != xkv.data.shape[-3]:
        raise DimensionError(
            f"token counts differ: {xq.data.shape[-3]} vs {xkv.data.shape[-3]}"
        )
    hd = c // heads
    alpha = 1.0 / math.sqrt(hd)

    def to_heads(a):
        a = a.reshape(a.shape[:-1] + (heads, hd))
        return a.swapaxes(-3, -2).contiguous()

    def from_heads(a):
        a = a.swapaxes(-3, -2).contiguous()
        return a.reshape(a.shape[:-2] + (c,))

    xqt = _tt(xq.data).swapaxes(-3, -2)  # (..., blocks, tokens, C)
    xkt = _tt(xkv.data).swapaxes(-3, -2)
    twq, twk, twv, two = _tt(wq.data), _tt(wk.data), _tt(wv.data), _tt(wo.data)
    qh = to_heads(xqt @ twq)  # (..., blocks, heads, tokens, hd)
    kh = to_heads(xkt @ twk)
    vh = to_heads(xkt @ twv)

    p = torch.softmax((qh @ kh.swapaxes(-1, -2)) * alpha, dim=-1)
    if weights_out is not None:
        weights_out.append(p.numpy().copy())

    merged = from_heads(p @ vh)  # (..., blocks, tokens, C)
    out = Tensor._wrap((merged @ two).swapaxes(-3, -2).contiguous().numpy())

    def bw(g):
        gt = _tt(g).swapaxes(-3, -2).contiguous()
        if _needs(wo):
            _accum(wo, (merged.reshape(-1, c).T @ gt.reshape(-1, c)).numpy())
        dz = to_heads(gt @ two.T)
        # batched small matmuls run faster through numpy's dispatch
        dzn, vhn, pn, qhn, khn = dz.numpy(), vh.numpy(), p.numpy(), qh.numpy(), kh.numpy()
        dp = np.matmul(dzn, np.swapaxes(vhn, -1, -2))
        dvh = torch.from_numpy(np.matmul(np.swapaxes(pn, -1, -2), dzn))
        dpt = torch.from_numpy(dp)
        dpt -= (dpt * p).sum(dim=-1, keepdim=True)
        dpt *= p
        dpt *= alpha
        dqh = torch.from_numpy(np.matmul(dp, khn))
        dkh = torch.from_numpy(np.matmul(np.swapaxes(dp, -1, -2), qhn))

        def unbroadcast_t(t, shape):
            extra = t.ndim - len(shape)
            if extra > 0:
                t = t.sum(dim=tuple(range(extra)))
            axes = tuple(i for i, d in enumerate(shape) if d == 1 and t.shape[i] != 1)
            if axes:
                t = t.sum(dim=axes, keepdim=True)
            return t

        dq = unbroadcast_t(from_heads(dqh), xqt.shape)
        dk = unbroadcast_t(from_heads(dkh), xkt.shape)
        dv = unbroadcast_t(from_heads(dvh), xkt.shape)
        if _needs(wq):
            _accum(wq, (xqt.reshape(-1, c).T @ dq.reshape(-1, c)).numpy())
        if _needs(wk):
            _accum(wk, (xkt.reshape(-1, c).T @ dk.reshape(-1, c)).numpy())
        if _needs(wv):
            _accum(wv, (xkt.reshape(-1, c).T @ dv.reshape(-1, c)).numpy())
        if _needs(xq):
            _accum(xq, (dq @ twq.T).swapaxes(-3, -2).contiguous().numpy())
        if _needs(xkv):
            dkv = dk @ twk.T
            dkv += dv @ twv.T
            _accum(xkv, dkv.swapaxes(-3, -2).contiguous().numpy())

    return _record(out, (xq, xkv, wq, wk, wv, wo), bw)


# ---------------------------------------------------------------------------
# gradient checking


def gradcheck(f, x, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps one tensor to a scalar Tensor. Error per coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
    """
    base = x.data.astype(np.float64)
    leaf = Tensor(base, requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        loss = f(leaf)
    backward(tape, loss)
    analytic = (
        np.zeros_like(base) if leaf.grad is None else leaf.grad.reshape(base.shape).copy()
    )

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(Tensor._wrap(base)).item()
        flat[i] = orig - eps
        lo = f(Tensor._wrap(base)).item()
        flat[i] = orig
        numeric.reshape(-1)[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom))
