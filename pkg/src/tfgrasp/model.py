"""U-shaped windowed-attention network for pixel-wise grasp maps.

A strided patch embedding turns the image into a 56x56 token grid, four
encoder stages interleaved with 2x2 patch merging shrink it to 7x7, a
bottleneck block sits at the bottom, and a mirrored decoder with patch
expanding (optionally fused with same-resolution encoder features) grows
it back; four 1x1 heads emit quality / cos / sin / width maps at full
input resolution.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .attention import (AttentionParams, MlpParams, NormParams, SwinBlockParams,
                        WindowLayout, swin_block)
from .errors import ConfigurationError, FormatError
from .tensor import Tensor

CHECKPOINT_MAGIC = b"TFGR"
CHECKPOINT_VERSION = 1

MODE_CHANNELS = {"d": 1, "rgb": 3, "rgbd": 4}


@dataclass
class ModelConfig:
    in_channels: int = 1
    embed_dim: int = 16          # desk scale; 96 reproduces the full-size shapes
    patch_size: int = 4
    window: int = 7
    heads: tuple = (1, 2, 4, 8)
    resolution: int = 224

    def __post_init__(self):
        if self.in_channels not in (1, 3, 4):
            raise ConfigurationError(f"in_channels must be 1, 3 or 4, got {self.in_channels}")
        if len(self.heads) != 4:
            raise ConfigurationError("heads must list one count per stage (4 stages)")
        if self.resolution % self.patch_size:
            raise ConfigurationError(
                f"resolution {self.resolution} not divisible by patch size {self.patch_size}")
        if self.embed_dim % 4:
            raise ConfigurationError("embed_dim must be divisible by 4 (two final expands)")
        for grid, h in zip(self.grids, self.heads):
            if grid % self.window:
                raise ConfigurationError(
                    f"stage grid {grid} not divisible by window {self.window}")
            if (self.embed_dim * self.grids[0] // grid) % h:
                raise ConfigurationError(f"stage dim not divisible by {h} heads")

    @property
    def grids(self):
        g0 = self.resolution // self.patch_size
        if g0 % 8:
            raise ConfigurationError(f"token grid {g0} cannot be halved three times")
        return [g0 >> i for i in range(4)]

    @property
    def dims(self):
        return [self.embed_dim << i for i in range(4)]

    @classmethod
    def for_mode(cls, mode: str, embed_dim: int = 16) -> "ModelConfig":
        if mode not in MODE_CHANNELS:
            raise ConfigurationError(f"unknown input mode {mode!r}; expected d/rgb/rgbd")
        return cls(in_channels=MODE_CHANNELS[mode], embed_dim=embed_dim)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _rng_for(seed: int, name: str) -> np.random.Generator:
    # per-name stream: adding/removing other parameters never shifts this one
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def _trunc_normal(seed, name, shape, dtype, std=0.02):
    rng = _rng_for(seed, name)
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


def _block_param_specs(prefix, dim, heads, window):
    table = (2 * window - 1) ** 2
    specs = []
    for idx in ("1", "2"):
        a, n_pre, n_post, mlp = f"attn{idx}", f"norm{2*int(idx)-1}", f"norm{2*int(idx)}", f"mlp{idx}"
        specs += [
            (f"{prefix}.{n_pre}.gamma", (dim,), "ones"),
            (f"{prefix}.{n_pre}.beta", (dim,), "zeros"),
            (f"{prefix}.{a}.w_q", (dim, dim), "trunc"),
            (f"{prefix}.{a}.w_k", (dim, dim), "trunc"),
            (f"{prefix}.{a}.w_v", (dim, dim), "trunc"),
            (f"{prefix}.{a}.w_o", (dim, dim), "trunc"),
            (f"{prefix}.{a}.bias_table", (table, heads), "trunc"),
            (f"{prefix}.{n_post}.gamma", (dim,), "ones"),
            (f"{prefix}.{n_post}.beta", (dim,), "zeros"),
            (f"{prefix}.{mlp}.w1", (dim, 4 * dim), "trunc"),
            (f"{prefix}.{mlp}.b1", (4 * dim,), "zeros"),
            (f"{prefix}.{mlp}.w2", (4 * dim, dim), "trunc"),
            (f"{prefix}.{mlp}.b2", (dim,), "zeros"),
        ]
    return specs


def _param_specs(config: ModelConfig, use_skips: bool):
    d = config.embed_dim
    p = config.patch_size
    specs = [("patch_embed.kernel", (d, config.in_channels, p, p), "trunc"),
             ("patch_embed.bias", (d,), "zeros")]
    for i, (dim, heads) in enumerate(zip(config.dims, config.heads), start=1):
        specs += _block_param_specs(f"enc.stage{i}", dim, heads, config.window)
        if i < 4:
            specs += [(f"enc.merge{i}.weight", (4 * dim, 2 * dim), "trunc"),
                      (f"enc.merge{i}.bias", (2 * dim,), "zeros")]
    specs += _block_param_specs("bottleneck", config.dims[-1], config.heads[-1],
                                config.window)
    dec_dims = config.dims[::-1]
    dec_heads = config.heads[::-1]
    for i, (dim, heads) in enumerate(zip(dec_dims, dec_heads), start=1):
        if use_skips:
            specs += [(f"dec.skipreduce{i}.weight", (2 * dim, dim), "trunc"),
                      (f"dec.skipreduce{i}.bias", (dim,), "zeros")]
        specs += _block_param_specs(f"dec.stage{i}", dim, heads, config.window)
        if i < 4:
            specs += [(f"dec.expand{i}.weight", (dim, 2 * dim), "trunc"),
                      (f"dec.expand{i}.bias", (2 * dim,), "zeros")]
    specs += [("final.expand1.weight", (d, 2 * d), "trunc"),
              ("final.expand1.bias", (2 * d,), "zeros"),
              ("final.expand2.weight", (d // 2, d), "trunc"),
              ("final.expand2.bias", (d,), "zeros")]
    for head in ("quality", "cos", "sin", "width"):
        specs += [(f"head.{head}.weight", (d // 4, 1), "trunc"),
                  (f"head.{head}.bias", (1,), "zeros")]
    return specs


def build_params(config: ModelConfig, seed: int = 0, use_skips: bool = True,
                 dtype=np.float32) -> dict:
    """Named parameter map; construction order and values are seed-determined."""
    params = {}
    for name, shape, kind in _param_specs(config, use_skips):
        if kind == "trunc":
            data = _trunc_normal(seed, name, shape, dtype)
        elif kind == "ones":
            data = np.ones(shape, dtype=dtype)
        else:
            data = np.zeros(shape, dtype=dtype)
        params[name] = Tensor(data, requires_grad=True, dtype=dtype)
    return params


def param_count(params: dict) -> int:
    return sum(int(p.size) for p in params.values())


def infer_in_channels(params: dict) -> int:
    return int(params["patch_embed.kernel"].shape[1])


def has_skip_params(params: dict) -> bool:
    return "dec.skipreduce1.weight" in params


def _block_view(params, prefix, heads) -> SwinBlockParams:
    g = lambda name: params[f"{prefix}.{name}"]
    attn = lambda i: AttentionParams(g(f"attn{i}.w_q"), g(f"attn{i}.w_k"),
                                     g(f"attn{i}.w_v"), g(f"attn{i}.w_o"),
                                     g(f"attn{i}.bias_table"), heads)
    norm = lambda i: NormParams(g(f"norm{i}.gamma"), g(f"norm{i}.beta"))
    mlp = lambda i: MlpParams(g(f"mlp{i}.w1"), g(f"mlp{i}.b1"),
                              g(f"mlp{i}.w2"), g(f"mlp{i}.b2"))
    return SwinBlockParams(norm(1), attn(1), norm(2), mlp(1),
                           norm(3), attn(2), norm(4), mlp(2))


@lru_cache(maxsize=32)
def _layouts(grid: int, window: int):
    shift = window // 2
    return (WindowLayout.create(grid, grid, window, 0),
            WindowLayout.create(grid, grid, window, shift))


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def patch_embed(image: Tensor, params: dict, config: ModelConfig) -> Tensor:
    """[B, C, H, W] -> [B, H*W/p^2, D] token embedding via strided conv."""
    if image.data.shape[-3] != config.in_channels:
        raise ConfigurationError(
            f"image has {image.data.shape[-3]} channels, config expects {config.in_channels}")
    y = T.strided_conv2d(image, params["patch_embed.kernel"], config.patch_size)
    b, d, gh, gw = y.data.shape
    tokens = T.permute(T.reshape(y, (b, d, gh * gw)), (0, 2, 1))
    return T.add(tokens, params["patch_embed.bias"])


def patch_merge(x: Tensor, weight: Tensor, bias: Tensor, grid: int) -> Tensor:
    """Concatenate each 2x2 token group (4C) and project to 2C."""
    b, n, c = x.data.shape
    if grid % 2:
        raise ConfigurationError(f"cannot merge odd grid {grid}")
    h = grid
    y = T.reshape(x, (b, h // 2, 2, h // 2, 2, c))
    y = T.permute(y, (0, 1, 3, 2, 4, 5))
    y = T.reshape(y, (b, n // 4, 4 * c))
    return T.add(T.matmul(y, weight), bias)


def patch_expand(x: Tensor, weight: Tensor, bias: Tensor, grid: int) -> Tensor:
    """Project C -> 2C and scatter into a 2x2 group of C/2 channels."""
    b, n, c = x.data.shape
    if c % 2:
        raise ConfigurationError(f"cannot expand odd channel count {c}")
    y = T.add(T.matmul(x, weight), bias)               # [B, N, 2C]
    y = T.reshape(y, (b, grid, grid, 2, 2, c // 2))
    y = T.permute(y, (0, 1, 3, 2, 4, 5))
    return T.reshape(y, (b, 4 * n, c // 2))


def forward(image: Tensor, params: dict, config: ModelConfig,
            use_skips: bool = True, trace: dict | None = None) -> Tensor:
    """Image [C, H, W] (or batched [B, C, H, W]) -> grasp maps [4, H, W].

    Maps are stacked quality / cos2theta / sin2theta / width; quality is
    squashed through a sigmoid, the rest are linear.
    """
    if use_skips and not has_skip_params(params):
        raise ConfigurationError("use_skips=True but params carry no skip projections")
    squeeze = image.data.ndim == 3
    x = T.reshape(image, (1,) + image.data.shape) if squeeze else image
    b = x.data.shape[0]
    res = x.data.shape[-1]
    if x.data.shape[-2:] != (config.resolution, config.resolution):
        raise ConfigurationError(
            f"input spatial size {x.data.shape[-2:]} != config resolution {config.resolution}")

    tokens = patch_embed(x, params, config)
    if trace is not None:
        trace["grids"] = list(config.grids)

    skips = []
    for i, (grid, heads) in enumerate(zip(config.grids, config.heads), start=1):
        block = _block_view(params, f"enc.stage{i}", heads)
        tokens = swin_block(tokens, block, *_layouts(grid, config.window))
        skips.append(tokens)
        if trace is not None:
            trace.setdefault("encoder", []).append(tokens.data.copy())
        if i < 4:
            tokens = patch_merge(tokens, params[f"enc.merge{i}.weight"],
                                 params[f"enc.merge{i}.bias"], grid)

    tokens = swin_block(tokens, _block_view(params, "bottleneck", config.heads[-1]),
                        *_layouts(config.grids[-1], config.window))

    dec_grids = config.grids[::-1]
    dec_heads = config.heads[::-1]
    for i, (grid, heads) in enumerate(zip(dec_grids, dec_heads), start=1):
        if use_skips:
            fused = T.concat([tokens, skips[4 - i]], axis=-1)
            tokens = T.add(T.matmul(fused, params[f"dec.skipreduce{i}.weight"]),
                           params[f"dec.skipreduce{i}.bias"])
        tokens = swin_block(tokens, _block_view(params, f"dec.stage{i}", heads),
                            *_layouts(grid, config.window))
        if i < 4:
            tokens = patch_expand(tokens, params[f"dec.expand{i}.weight"],
                                  params[f"dec.expand{i}.bias"], grid)

    tokens = patch_expand(tokens, params["final.expand1.weight"],
                          params["final.expand1.bias"], config.grids[0])
    tokens = patch_expand(tokens, params["final.expand2.weight"],
                          params["final.expand2.bias"], config.grids[0] * 2)

    maps = []
    for head in ("quality", "cos", "sin", "width"):
        m = T.add(T.matmul(tokens, params[f"head.{head}.weight"]),
                  params[f"head.{head}.bias"])
        if head == "quality":
            m = T.sigmoid(m)
        maps.append(m)
    out = T.concat(maps, axis=-1)                       # [B, H*W, 4]
    out = T.permute(out, (0, 2, 1))
    out = T.reshape(out, (b, 4, res, res))
    return T.reshape(out, (4, res, res)) if squeeze else out


# ---------------------------------------------------------------------------
# checkpoint format: "TFGR", u32 version, u32 count, then per tensor
# u16 name length + UTF-8 name, u8 rank, u64 dims, float32 LE payload
# ---------------------------------------------------------------------------

def save_checkpoint(params: dict, path):
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for name, t in params.items():
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(t.data, dtype="<f4")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict:
    def take(f, n, what):
        buf = f.read(n)
        if len(buf) != n:
            raise FormatError(f"checkpoint truncated while reading {what}: {path}")
        return buf

    params = {}
    with open(path, "rb") as f:
        if take(f, 4, "magic") != CHECKPOINT_MAGIC:
            raise FormatError(f"not a TFGR checkpoint: {path}")
        version, count = struct.unpack("<II", take(f, 8, "header"))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}: {path}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", take(f, 2, "name length"))
            name = take(f, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", take(f, 1, "rank"))
            shape = struct.unpack(f"<{rank}Q", take(f, 8 * rank, "dims"))
            n = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(take(f, 4 * n, name), dtype="<f4").reshape(shape)
            params[name] = Tensor(data.copy(), requires_grad=True)
    return params
