"""Independent oracles: finite differences, dense attention, Monte-Carlo IoU.

Everything here deliberately avoids the code paths it is checking: the
dense attention reference is plain numpy over all token pairs, gradient
checks perturb inputs numerically, and rectangle overlap is estimated by
point sampling. The suites at the bottom power `tfgrasp verify`.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor

FD_EPS = 1e-6


def fd_gradient(fn, array, eps=FD_EPS):
    """Central finite differences of scalar fn() wrt a float64 array in place."""
    grad = np.zeros_like(array)
    flat = array.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        fp = float(fn())
        flat[i] = saved - eps
        fm = float(fn())
        flat[i] = saved
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def max_relative_error(analytic, numeric, floor=1e-4):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


# ---------------------------------------------------------------------------
# dense attention reference
# ---------------------------------------------------------------------------

def dense_window_attention(x, w_q, w_k, w_v, w_o, bias_table, heads, height,
                           width, window):
    """Brute-force attention over all H*W tokens with a block-diagonal mask.

    Tokens may only attend within their own M x M tile; the relative
    position bias is re-derived from raw coordinates. Pure float64 numpy,
    no package ops. Used as the oracle for the windowed fast path with
    shift = 0.
    """
    m = window
    n = height * width
    dim = x.shape[-1]
    d = dim // heads
    rows, cols = np.divmod(np.arange(n), width)
    win_id = (rows // m) * (width // m) + cols // m
    same_window = win_id[:, None] == win_id[None, :]
    # bias index straight from coordinate deltas, clamped to same-window pairs
    drow = rows[:, None] - rows[None, :]
    dcol = cols[:, None] - cols[None, :]
    bias_idx = (drow + m - 1) * (2 * m - 1) + (dcol + m - 1)

    x = x.astype(np.float64)
    q = (x @ w_q).reshape(n, heads, d)
    k = (x @ w_k).reshape(n, heads, d)
    v = (x @ w_v).reshape(n, heads, d)
    out = np.zeros((n, heads, d))
    for h in range(heads):
        logits = q[:, h] @ k[:, h].T / math.sqrt(d)
        logits = logits + bias_table[np.clip(bias_idx, 0, bias_table.shape[0] - 1), h]
        logits = np.where(same_window, logits, -np.inf)
        logits = logits - logits.max(axis=1, keepdims=True)
        weights = np.exp(logits)
        weights /= weights.sum(axis=1, keepdims=True)
        out[:, h] = weights @ v[:, h]
    return out.reshape(n, dim) @ w_o


def windowed_vs_dense_max_diff(seed, height=14, width=14, window=7, dim=16,
                               heads=2):
    """Run the package path and the dense oracle on one random problem."""
    from .attention import AttentionParams, WindowLayout, mhsa, window_partition, window_reverse

    rng = np.random.default_rng(seed)
    x = rng.normal(size=(height * width, dim)) * 0.5
    mats = {k: rng.normal(size=(dim, dim)) * 0.2 for k in ("q", "k", "v", "o")}
    table = rng.normal(size=((2 * window - 1) ** 2, heads)) * 0.5

    params = AttentionParams(
        w_q=Tensor(mats["q"], dtype=np.float64),
        w_k=Tensor(mats["k"], dtype=np.float64),
        w_v=Tensor(mats["v"], dtype=np.float64),
        w_o=Tensor(mats["o"], dtype=np.float64),
        bias_table=Tensor(table, dtype=np.float64),
        heads=heads,
    )
    layout = WindowLayout.create(height, width, window, shift=0)
    with T.no_grad():
        spatial = Tensor(x.reshape(height, width, dim), dtype=np.float64)
        win = window_partition(spatial, window)
        fast = window_reverse(mhsa(win, params, layout.rel_index), window, height, width)
    fast = fast.data.reshape(height * width, dim)
    dense = dense_window_attention(x, mats["q"], mats["k"], mats["v"], mats["o"],
                                   table, heads, height, width, window)
    return float(np.abs(fast - dense).max())


def masked_pair_max_weight(seed, height=14, width=14, window=7, dim=16, heads=2):
    """Max post-softmax attention weight across a shift-mask boundary."""
    from .attention import AttentionParams, WindowLayout, mhsa, window_partition

    rng = np.random.default_rng(seed)
    shift = window // 2
    layout = WindowLayout.create(height, width, window, shift)
    x = rng.normal(size=(height, width, dim)).astype(np.float32)
    params = AttentionParams(
        w_q=Tensor(rng.normal(size=(dim, dim)) * 0.2),
        w_k=Tensor(rng.normal(size=(dim, dim)) * 0.2),
        w_v=Tensor(rng.normal(size=(dim, dim)) * 0.2),
        w_o=Tensor(rng.normal(size=(dim, dim)) * 0.2),
        bias_table=Tensor(rng.normal(size=((2 * window - 1) ** 2, heads))),
        heads=heads,
    )
    with T.no_grad():
        rolled = T.roll(Tensor(x), (-shift, -shift), (0, 1))
        win = window_partition(rolled, window)
        _, attn = mhsa(win, params, layout.rel_index, layout.mask, return_weights=True)
    weights = attn.data                            # [nW, heads, M^2, M^2]
    blocked = layout.mask < 0                      # [nW, M^2, M^2]
    if not blocked.any():
        return 0.0
    wi, ii, ji = blocked.nonzero()
    return float(weights[wi, :, ii, ji].max())


# ---------------------------------------------------------------------------
# rectangle overlap by point sampling
# ---------------------------------------------------------------------------

def _points_in_rect(points, rect):
    d = points - np.array([rect.x, rect.y])
    c, s = math.cos(rect.theta), math.sin(rect.theta)
    u = d[:, 0] * c + d[:, 1] * s
    v = -d[:, 0] * s + d[:, 1] * c
    return (np.abs(u) <= rect.w / 2) & (np.abs(v) <= rect.h / 2)


def monte_carlo_jaccard(rect_a, rect_b, samples=1_000_000, seed=0):
    """Estimate IoU by uniform sampling over the union's bounding box."""
    corners = np.vstack([rect_a.vertices(), rect_b.vertices()])
    lo = corners.min(axis=0)
    hi = corners.max(axis=0)
    rng = np.random.default_rng(seed)
    pts = rng.uniform(lo, hi, size=(samples, 2))
    in_a = _points_in_rect(pts, rect_a)
    in_b = _points_in_rect(pts, rect_b)
    union = (in_a | in_b).sum()
    if union == 0:
        return 0.0
    return float((in_a & in_b).sum() / union)


def random_rect_pair(seed, span=100.0):
    """A pair of nearby random rectangles for oracle comparisons."""
    from .geometry import GraspRect

    rng = np.random.default_rng(seed)
    def one(centre):
        return GraspRect(x=centre[0], y=centre[1],
                         theta=rng.uniform(-math.pi / 2, math.pi / 2),
                         w=rng.uniform(10, 60), h=rng.uniform(5, 40))
    c1 = rng.uniform(0.3 * span, 0.7 * span, size=2)
    c2 = c1 + rng.uniform(-20, 20, size=2)
    return one(c1), one(c2)
