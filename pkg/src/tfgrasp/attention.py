"""Window-based multi-head self-attention and the two-step swin block.

Attention runs inside non-overlapping M x M windows; the second half of a
block repeats it after a cyclic shift of floor(M/2) so neighbouring
windows exchange information. A learnable relative-position bias table,
indexed per token-pair offset, is added to the attention logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ShapeError
from .tensor import Tensor

MASK_VALUE = -1e9


@dataclass
class AttentionParams:
    """Projection matrices plus the per-head relative position bias table."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    bias_table: Tensor      # [(2M-1)^2, heads]
    heads: int


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor


@dataclass
class MlpParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class SwinBlockParams:
    """One block = W-MSA half + MLP, then SW-MSA half + MLP, all pre-norm."""

    norm1: NormParams
    attn1: AttentionParams
    norm2: NormParams
    mlp1: MlpParams
    norm3: NormParams
    attn2: AttentionParams
    norm4: NormParams
    mlp2: MlpParams


def build_relative_position_index(window: int) -> np.ndarray:
    """Index map [M^2, M^2] into a (2M-1)^2 bias table.

    index(i, j) = (drow + M - 1) * (2M - 1) + (dcol + M - 1) for the
    offset between tokens i and j inside one window.
    """
    m = int(window)
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij"))
    flat = coords.reshape(2, -1)                       # [2, M^2]
    rel = flat[:, :, None] - flat[:, None, :]          # [2, M^2, M^2]
    return (rel[0] + m - 1) * (2 * m - 1) + (rel[1] + m - 1)


def build_shift_mask(height: int, width: int, window: int, shift: int) -> np.ndarray:
    """Per-window additive mask [num_windows, M^2, M^2] for shifted attention.

    After the cyclic shift by (-s, -s), row/column segments
    [0, H-M), [H-M, H-s), [H-s, H) label which contiguous region each
    token came from; pairs from different regions get MASK_VALUE.
    """
    m, s = int(window), int(shift)
    if s == 0:
        n_windows = (height // m) * (width // m)
        return np.zeros((n_windows, m * m, m * m), dtype=np.float32)
    labels = np.zeros((height, width), dtype=np.int64)
    segments_h = (slice(0, height - m), slice(height - m, height - s), slice(height - s, height))
    segments_w = (slice(0, width - m), slice(width - m, width - s), slice(width - s, width))
    region = 0
    for sh in segments_h:
        for sw in segments_w:
            labels[sh, sw] = region
            region += 1
    tiled = labels.reshape(height // m, m, width // m, m)
    tiled = tiled.transpose(0, 2, 1, 3).reshape(-1, m * m)      # [nW, M^2]
    diff = tiled[:, :, None] != tiled[:, None, :]
    return np.where(diff, np.float32(MASK_VALUE), np.float32(0.0))


@dataclass
class WindowLayout:
    """Static geometry for one attention pass at a fixed feature-map size."""

    window: int
    shift: int
    height: int
    width: int
    rel_index: np.ndarray
    mask: np.ndarray | None

    @classmethod
    def create(cls, height, width, window, shift):
        if height % window or width % window:
            raise ShapeError(f"feature map {height}x{width} not divisible by window {window}")
        mask = build_shift_mask(height, width, window, shift) if shift else None
        return cls(window, shift, height, width,
                   build_relative_position_index(window), mask)

    @property
    def num_windows(self):
        return (self.height // self.window) * (self.width // self.window)


def window_partition(x: Tensor, window: int) -> Tensor:
    """[B, H, W, C] (or [H, W, C]) -> [B*nW, M^2, C] in row-major tile order."""
    m = int(window)
    batched = x.data.ndim == 4
    if x.data.ndim not in (3, 4):
        raise ShapeError(f"window_partition expects [*, H, W, C], got {x.shape}")
    h, w, c = x.data.shape[-3:]
    if h % m or w % m:
        raise ShapeError(f"spatial size {h}x{w} not divisible by window {m}")
    b = x.data.shape[0] if batched else 1
    y = x if batched else T.reshape(x, (1, h, w, c))
    y = T.reshape(y, (b, h // m, m, w // m, m, c))
    y = T.permute(y, (0, 1, 3, 2, 4, 5))
    return T.reshape(y, (b * (h // m) * (w // m), m * m, c))


def window_reverse(windows: Tensor, window: int, height: int, width: int) -> Tensor:
    """Inverse of window_partition; returns [B, H, W, C]."""
    m = int(window)
    n_windows = (height // m) * (width // m)
    b = windows.data.shape[0] // n_windows
    c = windows.data.shape[-1]
    y = T.reshape(windows, (b, height // m, width // m, m, m, c))
    y = T.permute(y, (0, 1, 3, 2, 4, 5))
    return T.reshape(y, (b, height, width, c))


def mhsa(x: Tensor, params: AttentionParams, rel_index=None, mask=None,
         return_weights=False):
    """Multi-head self-attention over one or a batch of windows.

    x: [N, dim] or [B, N, dim]. rel_index is the [N, N] bias lookup;
    mask is an additive [N, N] or [B, N, N] array (0 / MASK_VALUE).
    """
    dim = x.data.shape[-1]
    h = params.heads
    if dim % h:
        raise ConfigurationError(f"dim {dim} not divisible by {h} heads")
    d = dim // h
    squeeze = x.data.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.data.shape)
    b, n, _ = x.data.shape

    def split_heads(t):
        return T.permute(T.reshape(t, (b, n, h, d)), (0, 2, 1, 3))   # [B, h, N, d]

    q = split_heads(T.matmul(x, params.w_q))
    k = split_heads(T.matmul(x, params.w_k))
    v = split_heads(T.matmul(x, params.w_v))

    scores = T.scale(T.matmul(q, T.permute(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    if rel_index is not None:
        bias = T.take_rows(params.bias_table, np.asarray(rel_index).ravel())
        bias = T.permute(T.reshape(bias, (n, n, h)), (2, 0, 1))      # [h, N, N]
        scores = T.add(scores, bias)
    if mask is not None:
        mask = np.asarray(mask, dtype=x.data.dtype)
        if mask.ndim == 3:
            mask = mask[:, None]                                     # [B, 1, N, N]
        scores = T.add(scores, Tensor(mask, dtype=mask.dtype))
    attn = T.softmax(scores, axis=-1)

    out = T.matmul(attn, v)                                          # [B, h, N, d]
    out = T.reshape(T.permute(out, (0, 2, 1, 3)), (b, n, dim))
    out = T.matmul(out, params.w_o)
    if squeeze:
        out = T.reshape(out, (n, dim))
    if return_weights:
        return out, attn
    return out


def attention_pass(x: Tensor, norm: NormParams, attn: AttentionParams,
                   layout: WindowLayout) -> Tensor:
    """One residual half-step: x + (S)W-MSA(LN(x)) on token sequences.

    x: [B, H*W, C] or [H*W, C]. The shifted variant cyclically rolls the
    feature map before partitioning and rolls back after.
    """
    squeeze = x.data.ndim == 2
    xb = T.reshape(x, (1,) + x.data.shape) if squeeze else x
    b = xb.data.shape[0]
    h, w, m, s = layout.height, layout.width, layout.window, layout.shift
    c = xb.data.shape[-1]

    y = T.layer_norm(xb, norm.gamma, norm.beta)
    y = T.reshape(y, (b, h, w, c))
    if s:
        y = T.roll(y, (-s, -s), (1, 2))
    win = window_partition(y, m)
    mask = None
    if layout.mask is not None:
        mask = np.broadcast_to(layout.mask, (b,) + layout.mask.shape)
        mask = mask.reshape(b * layout.num_windows, m * m, m * m)
    win = mhsa(win, attn, layout.rel_index, mask)
    y = window_reverse(win, m, h, w)
    if s:
        y = T.roll(y, (s, s), (1, 2))
    y = T.reshape(y, (b, h * w, c))
    out = T.add(y, xb)
    return T.reshape(out, x.data.shape) if squeeze else out


def mlp_pass(x: Tensor, norm: NormParams, mlp: MlpParams) -> Tensor:
    """Residual feed-forward half-step: x + W2(gelu(W1 LN(x) + b1)) + b2."""
    y = T.layer_norm(x, norm.gamma, norm.beta)
    y = T.add(T.matmul(y, mlp.w1), mlp.b1)
    y = T.gelu(y)
    y = T.add(T.matmul(y, mlp.w2), mlp.b2)
    return T.add(y, x)


def swin_block(x: Tensor, params: SwinBlockParams, layout_plain: WindowLayout,
               layout_shift: WindowLayout) -> Tensor:
    """Window attention, MLP, shifted-window attention, MLP; all residual."""
    x = attention_pass(x, params.norm1, params.attn1, layout_plain)
    x = mlp_pass(x, params.norm2, params.mlp1)
    x = attention_pass(x, params.norm3, params.attn2, layout_shift)
    x = mlp_pass(x, params.norm4, params.mlp2)
    return x
