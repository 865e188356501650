"""Dense tensors with reverse-mode automatic differentiation on numpy.

Covers exactly the operations the attention blocks, the four-branch
network, and the re-ID losses need: 2-d and 1-d convolution, adaptive
average pooling and its anti-pooling inverse, GELU, sigmoid, broadcasted
add/multiply, matmul, reductions, and L2 normalization.

Every forward op validates that finite inputs produce finite outputs.
Verification paths run in float64; training runs in float32.  The
convolution has a direct-loop reference path (`conv2d_reference`) and an
im2col fast path that must agree within 1e-10 in float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf, expit


class NumericsError(ArithmeticError):
    """A forward op produced NaN/Inf from finite inputs, or hit a zero norm."""


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values produced by {op}")


def _as_pair(v):
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def _as_padding(v):
    """Normalize padding to ((top, bottom), (left, right)).

    Accepts an int, an (ph, pw) pair, or the full per-side form.  The
    asymmetric form exists for "same" padding of even effective kernels
    inside the attention blocks.
    """
    if isinstance(v, (tuple, list)) and len(v) == 2 and isinstance(v[0], (tuple, list)):
        (pt, pb), (pl, pr) = v
        return (int(pt), int(pb)), (int(pl), int(pr))
    ph, pw = _as_pair(v)
    return (ph, ph), (pw, pw)


@dataclass(frozen=True)
class Conv2dSpec:
    """Shape contract for a 2-d convolution."""

    in_channels: int
    out_channels: int
    kernel: tuple
    stride: object = 1
    padding: object = 0
    dilation: object = 1
    groups: int = 1
    has_bias: bool = True

    def __post_init__(self):
        kh, kw = _as_pair(self.kernel)
        if kh < 1 or kw < 1:
            raise ValueError(f"kernel extents must be >= 1, got {self.kernel}")
        if self.groups < 1:
            raise ValueError("groups must be >= 1")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"channels ({self.in_channels}, {self.out_channels}) not divisible "
                f"by groups ({self.groups})"
            )
        if min(_as_pair(self.stride)) < 1:
            raise ValueError("stride must be >= 1")
        if min(_as_pair(self.dilation)) < 1:
            raise ValueError("dilation must be >= 1")

    @property
    def is_depthwise(self):
        return self.groups == self.in_channels == self.out_channels

    def weight_shape(self):
        kh, kw = _as_pair(self.kernel)
        return (self.out_channels, self.in_channels // self.groups, kh, kw)

    def out_size(self, h, w):
        kh, kw = _as_pair(self.kernel)
        sh, sw = _as_pair(self.stride)
        dh, dw = _as_pair(self.dilation)
        (pt, pb), (pl, pr) = _as_padding(self.padding)
        oh = (h + pt + pb - dh * (kh - 1) - 1) // sh + 1
        ow = (w + pl + pr - dw * (kw - 1) - 1) // sw + 1
        if oh < 1 or ow < 1:
            raise ValueError(
                f"conv output extent < 1 for input {h}x{w} with spec {self}"
            )
        return oh, ow


class Tensor:
    """N-d array plus the bookkeeping for reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_prev")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._backward = None
        self._prev = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; the real work is in the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_wrap(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), mul(self, -1.0))

    def backward(self):
        backward(self)


def _wrap(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, op_name):
    """Create an output tensor wired to its parents (backward set by caller)."""
    _check_finite(data, op_name)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g.astype(t.data.dtype, copy=False)


def _unbroadcast(g, shape):
    """Reduce a gradient back down to the shape it was broadcast from."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss):
    """Reverse-mode pass from a scalar; accumulates into .grad additively."""
    if loss.size != 1:
        raise ValueError("backward requires a scalar tensor")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any requires_grad tensor")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad += np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()


# ---------------------------------------------------------------------------
# elementwise / linear algebra


def add(a, b):
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    b = _wrap(b, a.dtype)
    out = _node(a.data + b.data, [a, b], "add")

    def _bw():
        _accum(a, _unbroadcast(out.grad, a.shape))
        _accum(b, _unbroadcast(out.grad, b.shape))

    out._backward = _bw
    return out


def mul(a, b):
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    b = _wrap(b, a.dtype)
    out = _node(a.data * b.data, [a, b], "mul")

    def _bw():
        _accum(a, _unbroadcast(out.grad * b.data, a.shape))
        _accum(b, _unbroadcast(out.grad * a.data, b.shape))

    out._backward = _bw
    return out


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-d tensors")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = _node(a.data @ b.data, [a, b], "matmul")

    def _bw():
        _accum(a, out.grad @ b.data.T)
        _accum(b, a.data.T @ out.grad)

    out._backward = _bw
    return out


def tsum(x, axis=None, keepdims=False):
    out = _node(x.data.sum(axis=axis, keepdims=keepdims), [x], "sum")

    def _bw():
        g = out.grad
        if axis is not None and not keepdims:
            axes = (axis,) if np.isscalar(axis) else tuple(axis)
            g = np.expand_dims(g, axes)
        _accum(x, np.broadcast_to(g, x.shape))

    out._backward = _bw
    return out


def tmean(x, axis=None, keepdims=False):
    n = x.size if axis is None else np.prod(
        [x.shape[a] for a in ((axis,) if np.isscalar(axis) else axis)]
    )
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x, shape):
    out = _node(x.data.reshape(shape), [x], "reshape")

    def _bw():
        _accum(x, out.grad.reshape(x.shape))

    out._backward = _bw
    return out


def transpose(x, axes):
    axes = tuple(axes)
    out = _node(np.ascontiguousarray(x.data.transpose(axes)), [x], "transpose")
    inv = tuple(np.argsort(axes))

    def _bw():
        _accum(x, out.grad.transpose(inv))

    out._backward = _bw
    return out


def concat(tensors, axis):
    tensors = list(tensors)
    out = _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _bw():
        for t, g in zip(tensors, np.split(out.grad, splits, axis=axis)):
            _accum(t, g)

    out._backward = _bw
    return out


def gather_rows(table, indices):
    """Row lookup into a 2-d table; the backbone of the metadata embeddings."""
    idx = np.asarray(indices)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ValueError("indices must be a 1-d integer array")
    if idx.min(initial=0) < 0 or (idx.size and idx.max() >= table.shape[0]):
        raise ValueError("index out of range for embedding table")
    out = _node(table.data[idx], [table], "gather_rows")

    def _bw():
        g = np.zeros_like(table.data)
        np.add.at(g, idx, out.grad)
        _accum(table, g)

    out._backward = _bw
    return out


def gelu(x):
    """Exact Gaussian-CDF GELU (not the tanh approximation)."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = _node(x.data * cdf, [x], "gelu")

    def _bw():
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        _accum(x, out.grad * (cdf + x.data * pdf))

    out._backward = _bw
    return out


def sigmoid(x):
    s = expit(x.data)
    out = _node(s, [x], "sigmoid")

    def _bw():
        _accum(x, out.grad * s * (1.0 - s))

    out._backward = _bw
    return out


def l2_normalize(x, axis):
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm == 0.0):
        raise NumericsError("l2_normalize: zero-norm slice")
    y = x.data / norm
    out = _node(y, [x], "l2_normalize")

    def _bw():
        g = out.grad
        proj = (g * x.data).sum(axis=axis, keepdims=True)
        _accum(x, g / norm - x.data * (proj / norm**3))

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# convolution


def conv2d_reference(x, weight, bias, spec):
    """Direct six-nested-loop convolution on raw arrays (the slow path).

    The im2col fast path must match this within 1e-10 in float64.
    """
    n_batch, c_in, h, w = x.shape
    if c_in != spec.in_channels:
        raise ValueError(f"input has {c_in} channels, spec wants {spec.in_channels}")
    if weight.shape != spec.weight_shape():
        raise ValueError(f"weight shape {weight.shape} != {spec.weight_shape()}")
    kh, kw = _as_pair(spec.kernel)
    sh, sw = _as_pair(spec.stride)
    dh, dw = _as_pair(spec.dilation)
    (pt, _pb), (pl, _pr) = _as_padding(spec.padding)
    oh, ow = spec.out_size(h, w)
    icpg = spec.in_channels // spec.groups
    ocpg = spec.out_channels // spec.groups
    out = np.zeros((n_batch, spec.out_channels, oh, ow), dtype=x.dtype)
    for n in range(n_batch):
        for oc in range(spec.out_channels):
            g = oc // ocpg
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0 if bias is None else bias[oc]
                    for ic in range(icpg):
                        c = g * icpg + ic
                        for ky in range(kh):
                            iy = oy * sh + ky * dh - pt
                            if iy < 0 or iy >= h:
                                continue
                            for kx in range(kw):
                                ix = ox * sw + kx * dw - pl
                                if 0 <= ix < w:
                                    acc += weight[oc, ic, ky, kx] * x[n, c, iy, ix]
                    out[n, oc, oy, ox] = acc
    return out


def _im2col(x, spec, h, w):
    kh, kw = _as_pair(spec.kernel)
    sh, sw = _as_pair(spec.stride)
    dh, dw = _as_pair(spec.dilation)
    (pt, pb), (pl, pr) = _as_padding(spec.padding)
    oh, ow = spec.out_size(h, w)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    i0 = np.repeat(np.arange(kh) * dh, kw)
    j0 = np.tile(np.arange(kw) * dw, kh)
    oi = np.repeat(np.arange(oh) * sh, ow)
    oj = np.tile(np.arange(ow) * sw, oh)
    idx_h = i0[:, None] + oi[None, :]
    idx_w = j0[:, None] + oj[None, :]
    cols = xp[:, :, idx_h, idx_w]  # (N, C, kh*kw, oh*ow)
    return cols, (oh, ow, xp.shape)


def _col2im(dcols, spec, x_shape, xp_shape, oh, ow):
    """Scatter column gradients back to the input; inverse of _im2col.

    For a fixed kernel tap the destination rows/cols form an arithmetic
    progression, so the scatter is kh*kw strided slice-adds, no np.add.at.
    """
    n, c, h, w = x_shape
    kh, kw = _as_pair(spec.kernel)
    sh, sw = _as_pair(spec.stride)
    dh, dw = _as_pair(spec.dilation)
    (pt, _pb), (pl, _pr) = _as_padding(spec.padding)
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    d6 = dcols.reshape(n, c, kh, kw, oh, ow)
    for ky in range(kh):
        for kx in range(kw):
            dxp[
                :,
                :,
                ky * dh : ky * dh + sh * oh : sh,
                kx * dw : kx * dw + sw * ow : sw,
            ] += d6[:, :, ky, kx]
    return dxp[:, :, pt : pt + h, pl : pl + w]


def conv2d(x, weight, bias, spec, method="im2col"):
    """2-d convolution over NCHW input, differentiable in x, weight, bias."""
    if x.data.ndim != 4:
        raise ValueError("conv2d expects NCHW input")
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ValueError(f"input has {c} channels, spec wants {spec.in_channels}")
    if weight.shape != spec.weight_shape():
        raise ValueError(f"weight shape {weight.shape} != {spec.weight_shape()}")
    if spec.has_bias != (bias is not None):
        raise ValueError("bias presence does not match spec.has_bias")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ValueError(f"bias shape {bias.shape} != ({spec.out_channels},)")

    kh, kw = _as_pair(spec.kernel)
    groups = spec.groups
    icpg = spec.in_channels // groups
    ocpg = spec.out_channels // groups

    cols, (oh, ow, xp_shape) = _im2col(x.data, spec, h, w)
    colsg = cols.reshape(n, groups, icpg * kh * kw, oh * ow)
    wg = weight.data.reshape(groups, ocpg, icpg * kh * kw)
    if method == "direct":
        b_arr = None if bias is None else bias.data
        out_data = conv2d_reference(x.data, weight.data, b_arr, spec)
    else:
        out_data = np.matmul(wg, colsg).reshape(n, spec.out_channels, oh, ow)
        if bias is not None:
            out_data = out_data + bias.data[None, :, None, None]

    parents = [x, weight] if bias is None else [x, weight, bias]
    out = _node(out_data, parents, "conv2d")

    def _bw():
        doutg = out.grad.reshape(n, groups, ocpg, oh * ow)
        dw = np.matmul(doutg, colsg.swapaxes(2, 3)).sum(axis=0)
        _accum(weight, dw.reshape(weight.shape))
        if x.requires_grad:
            dcols = np.matmul(wg.swapaxes(1, 2), doutg)
            dcols = dcols.reshape(n, spec.in_channels, kh * kw, oh * ow)
            _accum(x, _col2im(dcols, spec, x.shape, xp_shape, oh, ow))
        if bias is not None:
            _accum(bias, out.grad.sum(axis=(0, 2, 3)))

    out._backward = _bw
    return out


def conv1d(x, weight, bias, kernel, padding):
    """Length-preserving 1-d convolution with a single shared kernel vector.

    Input is (B, C_seq, L); the same weight vector slides along every
    sequence.  Odd kernels only, with padding (k-1)/2.
    """
    if x.data.ndim != 3:
        raise ValueError("conv1d expects (B, C_seq, L) input")
    k = int(kernel)
    if k < 1 or k % 2 == 0:
        raise ValueError(f"conv1d kernel must be odd and >= 1, got {k}")
    if padding != (k - 1) // 2:
        raise ValueError(f"conv1d padding must be (k-1)/2 = {(k - 1) // 2}")
    if weight.shape != (k,):
        raise ValueError(f"conv1d weight shape {weight.shape} != ({k},)")
    b, cs, length = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))
    idx = np.arange(k)[:, None] + np.arange(length)[None, :]
    cols = xp[:, :, idx]  # (B, C_seq, k, L)
    out_data = np.einsum("k,bckl->bcl", weight.data, cols)
    if bias is not None:
        out_data = out_data + bias.data.reshape(-1)[0]

    parents = [x, weight] if bias is None else [x, weight, bias]
    out = _node(out_data, parents, "conv1d")

    def _bw():
        g = out.grad
        _accum(weight, np.einsum("bcl,bckl->k", g, cols))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for j in range(k):
                dxp[:, :, j : j + length] += weight.data[j] * g
            _accum(x, dxp[:, :, padding : padding + length])
        if bias is not None:
            _accum(bias, np.full(bias.shape, g.sum(), dtype=bias.dtype))

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# pooling


def _pool_bins(extent, out_extent):
    """Bin (start, stop) pairs: bin i covers [floor(i*H/o), ceil((i+1)*H/o))."""
    return [
        (math.floor(i * extent / out_extent), math.ceil((i + 1) * extent / out_extent))
        for i in range(out_extent)
    ]


def adaptive_avg_pool(x, out_hw):
    """Average-pool NCHW input to an (oh, ow) grid; (1, 1) is the global mean."""
    if x.data.ndim != 4:
        raise ValueError("adaptive_avg_pool expects NCHW input")
    n, c, h, w = x.shape
    oh, ow = int(out_hw[0]), int(out_hw[1])
    if not (1 <= oh <= h and 1 <= ow <= w):
        raise ValueError(f"pool output {oh}x{ow} invalid for input {h}x{w}")
    rows = _pool_bins(h, oh)
    cols = _pool_bins(w, ow)
    out_data = np.empty((n, c, oh, ow), dtype=x.dtype)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out_data[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3))
    out = _node(out_data, [x], "adaptive_avg_pool")

    def _bw():
        dx = np.zeros_like(x.data)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                area = (r1 - r0) * (c1 - c0)
                dx[:, :, r0:r1, c0:c1] += out.grad[:, :, i : i + 1, j : j + 1] / area
        _accum(x, dx)

    out._backward = _bw
    return out


def _owner_map(extent, out_extent):
    """For each output position, the bin whose value it replicates.

    Later bins win where the floor/ceil bins overlap, matching a
    replication loop in bin order.
    """
    owner = np.zeros(extent, dtype=np.intp)
    for i, (a, b) in enumerate(_pool_bins(extent, out_extent)):
        owner[a:b] = i
    return owner


def anti_pool(x, target_hw):
    """Replicate each pooled bin value over the region its pooling bin covered."""
    if x.data.ndim != 4:
        raise ValueError("anti_pool expects NCHW input")
    n, c, oh, ow = x.shape
    h, w = int(target_hw[0]), int(target_hw[1])
    if h < oh or w < ow:
        raise ValueError(f"anti_pool target {h}x{w} smaller than input {oh}x{ow}")
    owner_h = _owner_map(h, oh)
    owner_w = _owner_map(w, ow)
    out = _node(x.data[:, :, owner_h[:, None], owner_w[None, :]], [x], "anti_pool")

    def _bw():
        dx = np.zeros_like(x.data)
        np.add.at(dx, (slice(None), slice(None), owner_h[:, None], owner_w[None, :]), out.grad)
        _accum(x, dx)

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# gradient checking


def gradient_check(f, inputs, h=1e-5, sample=None, rng=None):
    """Max relative error between analytic and central-difference gradients.

    `f` takes the given tensors and returns a scalar Tensor; it must be
    deterministic (checked with two forward passes) and run in float64.
    `sample` limits the check to that many randomly chosen elements per
    input tensor; by default every element is checked.
    """
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != np.float64:
            raise ValueError("gradient_check requires float64 inputs")
        t.requires_grad = True
    out1 = f(*inputs)
    out2 = f(*inputs)
    if not np.array_equal(out1.data, out2.data):
        raise ValueError("gradient_check: f is not deterministic")

    for t in inputs:
        t.grad = None
    loss = f(*inputs)
    backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for t, ga in zip(inputs, analytic):
        if sample is not None and t.size > sample:
            idxs = rng.choice(t.size, size=sample, replace=False)
        else:
            idxs = range(t.size)
        flat = t.data.reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*inputs).item()
            flat[i] = orig - h
            fm = f(*inputs).item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = float(ga.reshape(-1)[i])
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if rel > worst:
                worst = rel
    return worst
