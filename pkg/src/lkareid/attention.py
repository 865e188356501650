"""Large-kernel spatial attention and hybrid channel attention blocks.

A K x K convolution is replaced by a (2d-1) x (2d-1) depthwise conv, a
ceil(K/d) x ceil(K/d) depthwise conv with dilation d, and a 1x1 conv.
The hybrid channel block pools the feature map to a small k_s x k_s grid,
runs 1-d cross-channel convolutions on a global and a per-bin local
branch, restores resolution by anti-pooling, and gates the input with a
sigmoid of the fused branches.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Conv2dSpec, Tensor


@dataclass(frozen=True)
class LkaConfig:
    """Channels plus the (K, d) pair driving the kernel decomposition."""

    channels: int
    kernel: int = 7
    dilation: int = 2

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd and >= 1, got {self.kernel}")
        if not 1 <= self.dilation <= self.kernel:
            raise ValueError(f"dilation must be in [1, {self.kernel}], got {self.dilation}")

    @property
    def dw_kernel(self):
        return 2 * self.dilation - 1

    @property
    def dd_kernel(self):
        return math.ceil(self.kernel / self.dilation)


@dataclass(frozen=True)
class HcaConfig:
    """Channels, local pooling grid, and the two kernel-size hyperparameters."""

    channels: int
    local_grid: int = 5
    gamma: float = 2.0
    b: float = 2.0

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.local_grid < 1:
            raise ValueError("local_grid must be >= 1")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")

    @property
    def conv1d_kernel(self):
        return eca_kernel_size(self.channels, self.gamma, self.b)


@dataclass(frozen=True)
class Decomposition:
    """Kernel sizes, receptive field, and cost accounting for one (K, d)."""

    dw_kernel: int
    dd_kernel: int
    dilation: int
    receptive_field: int
    params_decomposed: int
    params_depthwise_full: int
    params_full_conv: int
    flops_per_position: int


def decompose_large_kernel(kernel, dilation, channels=1):
    """Split a K x K conv into the depthwise / dilated-depthwise / 1x1 triple.

    Parameter counts are weights only.  The depthwise-full comparison point
    is a K x K depthwise conv followed by the same 1x1 channel mixing, so
    all three variants produce a channel-mixed output.
    """
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel must be odd and >= 1, got {kernel}")
    if not 1 <= dilation <= kernel:
        raise ValueError(f"dilation must be in [1, {kernel}], got {dilation}")
    if channels < 1:
        raise ValueError("channels must be >= 1")
    c = channels
    dw = 2 * dilation - 1
    dd = math.ceil(kernel / dilation)
    rf = (dd - 1) * dilation + dw
    params_dec = c * dw * dw + c * dd * dd + c * c
    params_dw_full = c * kernel * kernel + c * c
    params_full = c * c * kernel * kernel
    return Decomposition(
        dw_kernel=dw,
        dd_kernel=dd,
        dilation=dilation,
        receptive_field=rf,
        params_decomposed=params_dec,
        params_depthwise_full=params_dw_full,
        params_full_conv=params_full,
        flops_per_position=2 * params_dec,
    )


def eca_kernel_size(channels, gamma=2.0, b=2.0):
    """Adaptive odd 1-d kernel size from the channel count.

    t = log2(C)/gamma + b/gamma, truncated toward zero; even values are
    bumped up by one and the result is clamped to >= 1.
    """
    if channels < 1:
        raise ValueError("channels must be >= 1")
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    t = math.log2(channels) / gamma + b / gamma
    k = int(t)
    if k % 2 == 0:
        k += 1
    if k < 1:
        k = 1
    return k


# ---------------------------------------------------------------------------
# parameters

_UNIFORM, _ZEROS = "uniform", "zeros"


def lka_param_shapes(cfg):
    """(name, shape, init) for one LKA block, in creation order."""
    c = cfg.channels
    dw, dd = cfg.dw_kernel, cfg.dd_kernel
    return [
        ("proj_in.weight", (c, c, 1, 1), _UNIFORM),
        ("proj_in.bias", (c,), _ZEROS),
        ("dw.weight", (c, 1, dw, dw), _UNIFORM),
        ("dw.bias", (c,), _ZEROS),
        ("dd.weight", (c, 1, dd, dd), _UNIFORM),
        ("dd.bias", (c,), _ZEROS),
        ("attn.weight", (c, c, 1, 1), _UNIFORM),
        ("attn.bias", (c,), _ZEROS),
        ("proj_out.weight", (c, c, 1, 1), _UNIFORM),
        ("proj_out.bias", (c,), _ZEROS),
    ]


def hca_param_shapes(cfg):
    """(name, shape, init) for one HCA block: two 1-d kernels with biases."""
    k = cfg.conv1d_kernel
    return [
        ("global.weight", (k,), _UNIFORM),
        ("global.bias", (1,), _ZEROS),
        ("local.weight", (k,), _UNIFORM),
        ("local.bias", (1,), _ZEROS),
    ]


def init_params(shapes, rng, dtype=np.float64):
    """LeCun-uniform weights, zero biases, as a name->Tensor dict."""
    params = {}
    for name, shape, kind in shapes:
        if kind == _ZEROS:
            data = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
            bound = math.sqrt(3.0 / fan_in)
            data = rng.uniform(-bound, bound, shape).astype(dtype)
        params[name] = Tensor(data, requires_grad=True)
    return params


def _same_padding(kernel, dilation):
    span = dilation * (kernel - 1)
    return ((span // 2, span - span // 2),) * 2 if span % 2 else span // 2


# ---------------------------------------------------------------------------
# forward passes


def lka_forward(x, params, cfg):
    """Project, build the attention map from the decomposed large kernel,
    gate, re-project, and add the residual.  Shape-preserving."""
    c = cfg.channels
    if x.shape[1] != c:
        raise ValueError(f"input has {x.shape[1]} channels, config wants {c}")
    pw = Conv2dSpec(c, c, (1, 1))
    dw_spec = Conv2dSpec(
        c, c, (cfg.dw_kernel, cfg.dw_kernel),
        padding=_same_padding(cfg.dw_kernel, 1), groups=c,
    )
    dd_spec = Conv2dSpec(
        c, c, (cfg.dd_kernel, cfg.dd_kernel),
        padding=_same_padding(cfg.dd_kernel, cfg.dilation),
        dilation=cfg.dilation, groups=c,
    )
    f1 = T.conv2d(T.gelu(x), params["proj_in.weight"], params["proj_in.bias"], pw)
    a = T.conv2d(f1, params["dw.weight"], params["dw.bias"], dw_spec)
    a = T.conv2d(a, params["dd.weight"], params["dd.bias"], dd_spec)
    a = T.conv2d(a, params["attn.weight"], params["attn.bias"], pw)
    out = T.conv2d(T.mul(a, f1), params["proj_out.weight"], params["proj_out.bias"], pw)
    return T.add(out, x)


def hca_attention_map(x, params, cfg):
    """The sigmoid gate combining the global and per-bin channel branches."""
    n, c, h, w = x.shape
    if c != cfg.channels:
        raise ValueError(f"input has {c} channels, config wants {cfg.channels}")
    ks = cfg.local_grid
    if ks > min(h, w):
        raise ValueError(f"local grid {ks} exceeds spatial extent {h}x{w}")
    k = cfg.conv1d_kernel
    pad = (k - 1) // 2

    pooled = T.adaptive_avg_pool(x, (ks, ks))  # (N, C, ks, ks)

    # global branch: GAP then 1-d conv along channels
    g = T.adaptive_avg_pool(pooled, (1, 1))
    g = T.reshape(g, (n, 1, c))
    g = T.conv1d(g, params["global.weight"], params["global.bias"], k, pad)
    g = T.reshape(g, (n, c, 1, 1))
    u_global = T.anti_pool(g, (h, w))

    # local branch: one channel sequence per pooling bin, shared kernel
    loc = T.reshape(pooled, (n, c, ks * ks))
    loc = T.transpose(loc, (0, 2, 1))  # (N, ks*ks, C)
    loc = T.conv1d(loc, params["local.weight"], params["local.bias"], k, pad)
    loc = T.transpose(loc, (0, 2, 1))
    loc = T.reshape(loc, (n, c, ks, ks))
    u_local = T.anti_pool(loc, (h, w))

    return T.sigmoid(T.add(u_global, u_local))


def hca_forward(x, params, cfg):
    """Gate the input with the hybrid channel attention map."""
    return T.mul(x, hca_attention_map(x, params, cfg))


# ---------------------------------------------------------------------------
# cost accounting


def _conv_flops(spec, h, w, n=1):
    oh, ow = spec.out_size(h, w)
    kh, kw = T._as_pair(spec.kernel)
    macs = spec.out_channels * (spec.in_channels // spec.groups) * kh * kw * oh * ow * n
    return 2 * macs


def lka_params_flops(cfg, input_shape):
    """Exact weight count and 2*MAC FLOPs of one LKA block at input_shape."""
    n, c, h, w = input_shape
    if c != cfg.channels:
        raise ValueError("input_shape channels do not match config")
    params = sum(int(np.prod(s)) for _, s, _ in lka_param_shapes(cfg))
    pw = Conv2dSpec(c, c, (1, 1))
    dw_spec = Conv2dSpec(c, c, (cfg.dw_kernel,) * 2, padding=_same_padding(cfg.dw_kernel, 1), groups=c)
    dd_spec = Conv2dSpec(
        c, c, (cfg.dd_kernel,) * 2,
        padding=_same_padding(cfg.dd_kernel, cfg.dilation), dilation=cfg.dilation, groups=c,
    )
    flops = 3 * _conv_flops(pw, h, w, n) + _conv_flops(dw_spec, h, w, n) + _conv_flops(dd_spec, h, w, n)
    # gelu, gate multiply, residual add: one flop per element each
    flops += 3 * n * c * h * w
    return params, flops


def hca_params_flops(cfg, input_shape):
    """Weight count and FLOPs of one HCA block at input_shape."""
    n, c, h, w = input_shape
    if c != cfg.channels:
        raise ValueError("input_shape channels do not match config")
    ks, k = cfg.local_grid, cfg.conv1d_kernel
    params = sum(int(np.prod(s)) for _, s, _ in hca_param_shapes(cfg))
    flops = n * c * h * w  # local average pooling reads each input once
    flops += n * c * ks * ks  # GAP over the pooled grid
    flops += 2 * k * c * n  # global-branch conv1d
    flops += 2 * k * c * ks * ks * n  # local-branch conv1d
    flops += 3 * n * c * h * w  # fuse add, sigmoid, gate multiply
    return params, flops


def count_params_flops(cfg, input_shape):
    """Dispatch cost accounting over block and model configs."""
    if isinstance(cfg, LkaConfig):
        return lka_params_flops(cfg, input_shape)
    if isinstance(cfg, HcaConfig):
        return hca_params_flops(cfg, input_shape)
    from .model import ModelConfig, model_params_flops

    if isinstance(cfg, ModelConfig):
        return model_params_flops(cfg, input_shape)
    raise TypeError(f"unsupported config type {type(cfg).__name__}")
