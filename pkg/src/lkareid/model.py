"""The four-branch re-ID network: shared stem, two large-kernel-attention
branches, two hybrid-channel-attention branches, feature heads, and a
self-describing binary checkpoint format.

Branches L1/H1 carry identity classifiers (cross-entropy), L2/H2 feed the
triplet loss.  At inference the four embeddings are concatenated in the
fixed order L1 | L2 | H1 | H2 and L2-normalized per row.
"""
from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import (
    HcaConfig,
    LkaConfig,
    hca_forward,
    hca_param_shapes,
    lka_forward,
    lka_param_shapes,
    lka_params_flops,
    hca_params_flops,
)
from .tensor import Conv2dSpec, Tensor

BRANCHES = ("l1", "l2", "h1", "h2")
_LKA_BRANCHES = ("l1", "l2")
_CLS_BRANCHES = ("l1", "h1")

_MAGIC = b"LKAR"
_VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated, or inconsistent checkpoint file."""


@dataclass(frozen=True)
class ModelConfig:
    num_identities: int
    stem_widths: tuple = (16, 32, 64)
    feature_dim: int = 128
    blocks_per_branch: int = 3
    lka_kernel: int = 7
    lka_dilation: int = 2
    hca_local_grid: int = 5
    hca_gamma: float = 2.0
    hca_b: float = 2.0
    num_cameras: int = 4
    num_views: int = 2
    metadata_embeddings_enabled: bool = False
    attention_enabled: bool = True
    share_stem: bool = True

    def __post_init__(self):
        if self.num_identities < 1:
            raise ValueError("num_identities must be >= 1")
        if not self.stem_widths or any(wd < 1 for wd in self.stem_widths):
            raise ValueError(f"invalid stem widths {self.stem_widths}")
        if self.feature_dim < 1 or self.blocks_per_branch < 1:
            raise ValueError("feature_dim and blocks_per_branch must be >= 1")
        object.__setattr__(self, "stem_widths", tuple(int(wd) for wd in self.stem_widths))

    @property
    def branch_channels(self):
        return self.stem_widths[-1]

    def lka_config(self):
        return LkaConfig(self.branch_channels, self.lka_kernel, self.lka_dilation)

    def hca_config(self):
        return HcaConfig(self.branch_channels, self.hca_local_grid, self.hca_gamma, self.hca_b)


@dataclass
class ModelState:
    """Ordered named-parameter store plus the config that shaped it."""

    config: ModelConfig
    params: dict  # name -> Tensor, insertion-ordered
    version: int = _VERSION

    def num_params(self):
        return sum(t.size for t in self.params.values())


@dataclass
class BranchOutput:
    branch: str
    embedding: Tensor  # (B, D)
    logits: Tensor | None = None  # (B, num_identities), classification branches only


# ---------------------------------------------------------------------------
# parameter layout

_UNIFORM, _ZEROS = "uniform", "zeros"


def _stem_shapes(cfg, prefix):
    shapes = []
    c_in = 3
    for i, width in enumerate(cfg.stem_widths):
        shapes.append((f"{prefix}.{i}.weight", (width, c_in, 3, 3), _UNIFORM))
        shapes.append((f"{prefix}.{i}.bias", (width,), _ZEROS))
        c_in = width
    return shapes


def parameter_shapes(cfg):
    """Every parameter of the model, in creation order: (name, shape, init)."""
    shapes = []
    if cfg.share_stem:
        shapes += _stem_shapes(cfg, "stem")
    else:
        for br in BRANCHES:
            shapes += _stem_shapes(cfg, f"stem_{br}")
    c = cfg.branch_channels
    for br in BRANCHES:
        block_shapes = (
            lka_param_shapes(cfg.lka_config())
            if br in _LKA_BRANCHES
            else hca_param_shapes(cfg.hca_config())
        )
        for blk in range(cfg.blocks_per_branch):
            base = f"branch_{br}.block{blk}"
            shapes.append((f"{base}.conv.weight", (c, c, 3, 3), _UNIFORM))
            shapes.append((f"{base}.conv.bias", (c,), _ZEROS))
            if cfg.attention_enabled:
                for name, shape, kind in block_shapes:
                    shapes.append((f"{base}.attn.{name}", shape, kind))
        shapes.append((f"branch_{br}.proj.weight", (cfg.feature_dim, c), _UNIFORM))
        shapes.append((f"branch_{br}.proj.bias", (cfg.feature_dim,), _ZEROS))
    for br in _CLS_BRANCHES:
        shapes.append((f"head_{br}.weight", (cfg.num_identities, cfg.feature_dim), _UNIFORM))
        shapes.append((f"head_{br}.bias", (cfg.num_identities,), _ZEROS))
    # metadata tables always exist (zero-init), used only when enabled
    shapes.append(("meta.camera", (cfg.num_cameras, cfg.feature_dim), _ZEROS))
    shapes.append(("meta.view", (cfg.num_views, cfg.feature_dim), _ZEROS))
    return shapes


def build_model(cfg, seed, dtype=np.float32):
    """Deterministic init: LeCun-uniform weights (unit fan-in variance
    scaling), zero biases and embedding tables."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, kind in parameter_shapes(cfg):
        if kind == _ZEROS:
            data = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
            bound = math.sqrt(3.0 / fan_in)
            data = rng.uniform(-bound, bound, shape).astype(dtype)
        params[name] = Tensor(data, requires_grad=True)
    return ModelState(config=cfg, params=params)


# ---------------------------------------------------------------------------
# forward


def _run_stem(state, x, branch):
    cfg = state.config
    prefix = "stem" if cfg.share_stem else f"stem_{branch}"
    c_in = 3
    for i, width in enumerate(cfg.stem_widths):
        spec = Conv2dSpec(c_in, width, (3, 3), stride=2, padding=1)
        x = T.conv2d(x, state.params[f"{prefix}.{i}.weight"], state.params[f"{prefix}.{i}.bias"], spec)
        x = T.gelu(x)
        c_in = width
    return x


def _run_branch(state, x, branch):
    """Trunk blocks, GAP, and the linear projection to the embedding."""
    cfg = state.config
    c = cfg.branch_channels
    conv_spec = Conv2dSpec(c, c, (3, 3), stride=1, padding=1)
    attn_cfg = cfg.lka_config() if branch in _LKA_BRANCHES else cfg.hca_config()
    attn_fwd = lka_forward if branch in _LKA_BRANCHES else hca_forward
    for blk in range(cfg.blocks_per_branch):
        base = f"branch_{branch}.block{blk}"
        x = T.conv2d(x, state.params[f"{base}.conv.weight"], state.params[f"{base}.conv.bias"], conv_spec)
        x = T.gelu(x)
        if cfg.attention_enabled:
            attn_params = {
                name: state.params[f"{base}.attn.{name}"]
                for name, _, _ in (
                    lka_param_shapes(attn_cfg) if branch in _LKA_BRANCHES else hca_param_shapes(attn_cfg)
                )
            }
            x = attn_fwd(x, attn_params, attn_cfg)
    pooled = T.adaptive_avg_pool(x, (1, 1))
    flat = T.reshape(pooled, (x.shape[0], c))
    w = state.params[f"branch_{branch}.proj.weight"]
    b = state.params[f"branch_{branch}.proj.bias"]
    return T.add(T.matmul(flat, T.transpose(w, (1, 0))), b)


def _branch_embeddings(state, images):
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.data.ndim != 4 or x.shape[1] != 3:
        raise ValueError("images must be (B, 3, H, W)")
    # center [0, 1] pixel intensities to [-1, 1]
    x = T.add(T.mul(x, 2.0), -1.0)
    if state.config.share_stem:
        shared = _run_stem(state, x, BRANCHES[0])
        return {br: _run_branch(state, shared, br) for br in BRANCHES}
    return {br: _run_branch(state, _run_stem(state, x, br), br) for br in BRANCHES}


def forward_train(state, images, camera_ids, view_ids):
    """Training-mode forward: four BranchOutputs, logits on L1/H1 only."""
    cfg = state.config
    batch = images.shape[0]
    if batch < 2:
        raise ValueError("training forward requires batch size >= 2")
    camera_ids = np.asarray(camera_ids)
    view_ids = np.asarray(view_ids)
    if camera_ids.size and camera_ids.max() >= cfg.num_cameras:
        raise ValueError("camera id out of range")
    if view_ids.size and view_ids.max() >= cfg.num_views:
        raise ValueError("view id out of range")

    embeddings = _branch_embeddings(state, images)
    meta = None
    if cfg.metadata_embeddings_enabled:
        meta = T.add(
            T.gather_rows(state.params["meta.camera"], camera_ids),
            T.gather_rows(state.params["meta.view"], view_ids),
        )
    outputs = []
    for br in BRANCHES:
        emb = embeddings[br]
        if meta is not None:
            emb = T.add(emb, meta)
        logits = None
        if br in _CLS_BRANCHES:
            w = state.params[f"head_{br}.weight"]
            b = state.params[f"head_{br}.bias"]
            logits = T.add(T.matmul(emb, T.transpose(w, (1, 0))), b)
        outputs.append(BranchOutput(branch=br, embedding=emb, logits=logits))
    return outputs


def extract_features(state, images):
    """Inference features: L1 | L2 | H1 | H2 concatenation, L2-normalized
    per row.  Metadata never enters this path."""
    embeddings = _branch_embeddings(state, images)
    joined = T.concat([embeddings[br] for br in BRANCHES], axis=1)
    return T.l2_normalize(joined, axis=1)


# ---------------------------------------------------------------------------
# cost accounting


def model_params_flops(cfg, input_shape):
    """Exact parameter count plus 2*MAC FLOPs for one forward pass."""
    n, c_in, h, w = input_shape
    if c_in != 3:
        raise ValueError("model input must have 3 channels")
    params = sum(int(np.prod(s)) for _, s, _ in parameter_shapes(cfg))

    def stem_flops():
        flops, ci, hh, ww = 0, 3, h, w
        for width in cfg.stem_widths:
            spec = Conv2dSpec(ci, width, (3, 3), stride=2, padding=1)
            oh, ow = spec.out_size(hh, ww)
            flops += 2 * width * ci * 9 * oh * ow * n + width * oh * ow * n  # conv + gelu
            ci, hh, ww = width, oh, ow
        return flops, hh, ww

    sflops, bh, bw = stem_flops()
    flops = sflops * (1 if cfg.share_stem else 4)
    c = cfg.branch_channels
    for br in BRANCHES:
        for _ in range(cfg.blocks_per_branch):
            flops += 2 * c * c * 9 * bh * bw * n + c * bh * bw * n
            if cfg.attention_enabled:
                block_cost = (
                    lka_params_flops(cfg.lka_config(), (n, c, bh, bw))
                    if br in _LKA_BRANCHES
                    else hca_params_flops(cfg.hca_config(), (n, c, bh, bw))
                )
                flops += block_cost[1]
        flops += c * bh * bw * n  # GAP
        flops += 2 * cfg.feature_dim * c * n  # projection
        if br in _CLS_BRANCHES:
            flops += 2 * cfg.num_identities * cfg.feature_dim * n
    return params, flops


# ---------------------------------------------------------------------------
# checkpoint I/O


def _config_to_json(cfg):
    d = dataclasses.asdict(cfg)
    d["stem_widths"] = list(d["stem_widths"])
    return json.dumps(d, sort_keys=True)


def _config_from_json(text):
    d = json.loads(text)
    d["stem_widths"] = tuple(d["stem_widths"])
    return ModelConfig(**d)


def save_checkpoint(state, path):
    """Self-describing binary format: magic, version, config snapshot, then
    a named tensor table with little-endian float32 values."""
    blob = bytearray()
    blob += _MAGIC
    blob += struct.pack("<H", state.version)
    cfg_bytes = _config_to_json(state.config).encode("utf-8")
    blob += struct.pack("<I", len(cfg_bytes))
    blob += cfg_bytes
    blob += struct.pack("<I", len(state.params))
    for name, tensor in state.params.items():
        name_bytes = name.encode("utf-8")
        blob += struct.pack("<H", len(name_bytes))
        blob += name_bytes
        blob += struct.pack("<B", tensor.data.ndim)
        for dim in tensor.data.shape:
            blob += struct.pack("<I", dim)
        blob += np.ascontiguousarray(tensor.data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    view = memoryview(blob)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != _MAGIC:
        raise CheckpointError("bad magic bytes, not a checkpoint file")
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", take(4, "config length"))
    cfg = _config_from_json(bytes(take(cfg_len, "config")).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    expected = parameter_shapes(cfg)
    if count != len(expected):
        raise CheckpointError(f"checkpoint lists {count} tensors, config expects {len(expected)}")
    params = {}
    for exp_name, exp_shape, _ in expected:
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = bytes(take(name_len, "name")).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        shape = tuple(struct.unpack("<I", take(4, "dim"))[0] for _ in range(ndim))
        if name != exp_name or shape != tuple(exp_shape):
            raise CheckpointError(
                f"tensor {name} with shape {shape} does not match config "
                f"({exp_name}, {tuple(exp_shape)})"
            )
        n_items = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(4 * n_items, name), dtype="<f4").reshape(shape)
        params[name] = Tensor(data.astype(np.float32), requires_grad=True)
    if pos != len(blob):
        raise CheckpointError("trailing bytes after tensor table")
    return ModelState(config=cfg, params=params, version=version)
