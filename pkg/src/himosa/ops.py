"""Structured neural-network ops on top of :mod:`himosa.tensor`.

Feature maps are channels-first ``(C, H, W)``; token matrices are
channels-last ``(n, d)``. Ordering is row-major everywhere (windows,
tokens within a window, pixels).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels
from .errors import ContractError, DimensionError
from .tensor import Tensor, _record, add_macs, as_tensor


# -- convolutions --------------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, H: int, W: int) -> np.ndarray:
    C = xp.shape[0]
    v = sliding_window_view(xp, (k, k), axis=(1, 2))  # (C, H, W, k, k)
    return v.transpose(0, 3, 4, 1, 2).reshape(C * k * k, H * W)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Same-padded (zero) stride-1 cross-correlation.

    x: (C_in, H, W); w: (C_out, C_in, k, k) with k odd; b: (C_out,).
    """
    if x.ndim != 3 or w.ndim != 4:
        raise DimensionError(f"conv2d expects (C,H,W) input and 4-d kernel, got {x.shape}, {w.shape}")
    C_in, H, W = x.shape
    C_out, c_w, k, k2 = w.shape
    if c_w != C_in:
        raise DimensionError(f"conv2d channel mismatch: input has {C_in}, kernel expects {c_w}")
    if k != k2 or k % 2 == 0:
        raise ContractError(f"conv2d needs an odd square kernel, got {k}x{k2}")
    p = k // 2
    w2 = w.data.reshape(C_out, C_in * k * k)
    if k == 1:
        cols = x.data.reshape(C_in, H * W)
    else:
        xp = np.pad(x.data, ((0, 0), (p, p), (p, p)))
        cols = _im2col(xp, k, H, W)
    out = w2 @ cols
    add_macs(out.size * C_in * k * k)
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(C_out, H, W)
    parents = (x, w) if b is None else (x, w, b)

    def fn(g):
        g2 = g.reshape(C_out, H * W)
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = w2.T @ g2
            if k == 1:
                gx = dcols.reshape(x.shape)
            else:
                dcols = dcols.reshape(C_in, k, k, H, W)
                dxp = np.zeros((C_in, H + 2 * p, W + 2 * p), dtype=g.dtype)
                for u in range(k):
                    for v in range(k):
                        dxp[:, u:u + H, v:v + W] += dcols[:, u, v]
                gx = dxp[:, p:p + H, p:p + W]
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=1)

    return _record(out, parents, fn)


def depthwise_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-channel same-padded convolution; w: (C, 1, k, k)."""
    if x.ndim != 3 or w.ndim != 4 or w.shape[1] != 1:
        raise DimensionError(f"depthwise_conv2d expects (C,H,W) and (C,1,k,k), got {x.shape}, {w.shape}")
    C, H, W = x.shape
    if w.shape[0] != C:
        raise DimensionError(f"depthwise_conv2d channel mismatch: input has {C}, kernel has {w.shape[0]}")
    k = w.shape[2]
    if k != w.shape[3] or k % 2 == 0:
        raise ContractError(f"depthwise_conv2d needs an odd square kernel, got {w.shape[2:]}")
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p)))
    wk = w.data[:, 0]
    out = np.zeros((C, H, W), dtype=np.result_type(x.data, w.data))
    for u in range(k):
        for v in range(k):
            out += wk[:, u, v, None, None] * xp[:, u:u + H, v:v + W]
    add_macs(out.size * k * k)
    if b is not None:
        out += b.data[:, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def fn(g):
        gw = np.zeros_like(w.data)
        dxp = np.zeros_like(xp)
        for u in range(k):
            for v in range(k):
                gw[:, 0, u, v] = (g * xp[:, u:u + H, v:v + W]).sum(axis=(1, 2))
                dxp[:, u:u + H, v:v + W] += wk[:, u, v, None, None] * g
        gx = dxp[:, p:p + H, p:p + W]
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(1, 2))

    return _record(out, parents, fn)


# -- resampling / layout -------------------------------------------------------

def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """(r^2*C, H, W) -> (C, rH, rW); input channel c*r^2 + i*r + j lands at offset (i, j)."""
    C4, H, W = x.shape
    if C4 % (r * r):
        raise DimensionError(f"pixel_shuffle: {C4} channels not divisible by r^2={r * r}")
    C = C4 // (r * r)
    out = x.data.reshape(C, r, r, H, W).transpose(0, 3, 1, 4, 2).reshape(C, H * r, W * r)

    def fn(g):
        return (g.reshape(C, H, r, W, r).transpose(0, 2, 4, 1, 3).reshape(C4, H, W),)

    return _record(out, (x,), fn)


def reflect_pad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    """Reflect-pad the bottom/right edges of a (C, H, W) array."""
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, ph), (0, pw)), mode="reflect" if min(x.shape[1:]) > 1 else "edge")


def crop(x: Tensor, h: int, w: int) -> Tensor:
    if x.shape[1] == h and x.shape[2] == w:
        return x
    return x[:, :h, :w]


@dataclass(frozen=True)
class WindowLayout:
    original_hw: tuple[int, int]
    padded_hw: tuple[int, int]
    window_size: int
    grid: tuple[int, int]
    channels: int

    @property
    def n_windows(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def tokens_per_window(self) -> int:
        return self.window_size * self.window_size


def window_partition(x: Tensor, ws: int, original_hw: tuple[int, int] | None = None):
    """(C, H', W') -> (n_windows, ws*ws, C) plus the layout to undo it."""
    C, H, W = x.shape
    if ws < 1 or H % ws or W % ws:
        raise DimensionError(f"window_partition: extents {H}x{W} not multiples of window {ws}")
    gh, gw = H // ws, W // ws
    layout = WindowLayout(original_hw or (H, W), (H, W), ws, (gh, gw), C)
    out = x.data.reshape(C, gh, ws, gw, ws).transpose(1, 3, 2, 4, 0).reshape(gh * gw, ws * ws, C)

    def fn(g):
        return (g.reshape(gh, gw, ws, ws, C).transpose(4, 0, 2, 1, 3).reshape(C, H, W),)

    return _record(out, (x,), fn), layout


def window_merge(windows: Tensor, layout: WindowLayout) -> Tensor:
    nw, n, C = windows.shape
    gh, gw = layout.grid
    ws = layout.window_size
    if nw != gh * gw or n != ws * ws or C != layout.channels:
        raise DimensionError(f"window_merge: windows {windows.shape} inconsistent with {layout}")
    H, W = layout.padded_hw
    out = windows.data.reshape(gh, gw, ws, ws, C).transpose(4, 0, 2, 1, 3).reshape(C, H, W)

    def fn(g):
        return (g.reshape(C, gh, ws, gw, ws).transpose(1, 3, 2, 4, 0).reshape(nw, n, C),)

    return _record(out, (windows,), fn)


# -- selection / indexing --------------------------------------------------------

def topk_select(scores, k: int) -> np.ndarray:
    """Indices of the k largest scores: descending score, ties to the lower index.

    scores (n,) -> (k,); scores (n, m) -> (m, k), one row per expert.
    """
    s = scores.data if isinstance(scores, Tensor) else np.asarray(scores, dtype=float)
    if s.ndim not in (1, 2):
        raise DimensionError(f"topk_select: expected (n,) or (n, m) scores, got {s.shape}")
    n = s.shape[0]
    if not 1 <= k <= n:
        raise ContractError(f"topk_select: need 1 <= k <= n, got k={k}, n={n}")
    if s.ndim == 1:
        return _kernels.topk_indices(s.reshape(1, n, 1), k)[0, 0]
    return _kernels.topk_indices(s[None], k)[0]


def _check_idx(idx: np.ndarray, n: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ContractError(f"index out of range [0, {n}): {idx.min()}..{idx.max()}")
    return idx


def gather_rows(x: Tensor, idx) -> Tensor:
    idx = _check_idx(idx, x.shape[0])

    def fn(g):
        d = np.zeros_like(x.data)
        np.add.at(d, idx, g)
        return (d,)

    return _record(x.data[idx], (x,), fn)


def scatter_add_rows(acc: Tensor, idx, rows: Tensor) -> Tensor:
    """acc with ``rows[j]`` added at row ``idx[j]``; repeated indices accumulate."""
    acc, rows = as_tensor(acc), as_tensor(rows)
    idx = _check_idx(idx, acc.shape[0])
    if rows.shape[0] != idx.shape[0] or rows.shape[1:] != acc.shape[1:]:
        raise DimensionError(f"scatter_add_rows: rows {rows.shape} vs acc {acc.shape}, {idx.shape[0]} indices")
    out = acc.data.copy()
    np.add.at(out, idx, rows.data)
    return _record(out, (acc, rows), lambda g: (g, g[idx]))


def take_along_tokens(scores: Tensor, idx: np.ndarray) -> Tensor:
    """scores (B, n, m), idx (B, m, k) -> (B, m, k) with out[b,h,j] = scores[b, idx[b,h,j], h]."""
    B, n, m = scores.shape
    bsel = np.arange(B)[:, None, None]
    hsel = np.arange(m)[None, :, None]
    out = scores.data[bsel, idx, hsel]

    def fn(g):
        d = np.zeros_like(scores.data)
        # per-expert indices are distinct, so no collisions within (b, h)
        d[bsel, idx, hsel] += g
        return (d,)

    return _record(out, (scores,), fn)


def sparse_window_attention(tokens: Tensor, idx: np.ndarray, gates: Tensor | None,
                            wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor) -> Tensor:
    """Batched gated expert attention over selected tokens, scatter-added back.

    tokens (B, n, d); idx (B, m, k); gates (B, m, k) or None for unit gates;
    wq/wk/wv (m, d, e); wo (m, e, d). Runs the compiled kernel when available.
    """
    B, n, d = tokens.shape
    if wq.ndim != 3:
        raise DimensionError(f"expert weights must be (m, d, e), got {wq.shape}")
    m, _, e = wq.shape
    for name, w, want in (("wq", wq, (m, d, e)), ("wk", wk, (m, d, e)), ("wv", wv, (m, d, e)),
                          ("wo", wo, (m, e, d))):
        if w.shape != want:
            raise DimensionError(f"{name} has shape {w.shape}, expected {want} for tokens {tokens.shape}")
    idx = np.asarray(idx)
    if idx.ndim != 3 or idx.shape[:2] != (B, m):
        raise DimensionError(f"selection {idx.shape} does not match {B} windows x {m} experts")
    if gates is not None and gates.shape != idx.shape:
        raise DimensionError(f"gates {gates.shape} do not match selection {idx.shape}")
    _check_idx(idx, n)
    if idx.shape[2] > 1 and np.any(np.diff(np.sort(idx, axis=-1), axis=-1) == 0):
        raise ContractError("an expert selected the same token twice within one window")
    gdata = np.ones(idx.shape, dtype=tokens.dtype) if gates is None else gates.data
    out, cache = _kernels.sparse_attention_forward(
        tokens.data, idx, gdata, wq.data, wk.data, wv.data, wo.data)
    k = idx.shape[2]
    # projections, QK^T, AV, output projection
    add_macs(B * m * (3 * k * d * e + 2 * k * k * e + k * e * d))
    parents = (tokens, wq, wk, wv, wo) if gates is None else (tokens, wq, wk, wv, wo, gates)

    def fn(g):
        dt, dg, dwq, dwk, dwv, dwo = _kernels.sparse_attention_backward(
            g, tokens.data, idx, gdata, wq.data, wk.data, wv.data, wo.data, cache)
        if gates is None:
            return dt, dwq, dwk, dwv, dwo
        return dt, dwq, dwk, dwv, dwo, dg

    return _record(out, parents, fn)


# -- pooling / normalization -----------------------------------------------------

def global_avg_pool(x: Tensor) -> Tensor:
    C, H, W = x.shape
    if H < 1 or W < 1:
        raise ContractError("global_avg_pool on an empty map")
    return x.reshape(C, H * W).mean(axis=1)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + shift.data
    lead = tuple(range(xd.ndim - 1))

    def fn(g):
        gg = (g * xhat).sum(axis=lead)
        gs = g.sum(axis=lead)
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gs

    return _record(out, (x, gain, shift), fn)


def channel_layer_norm(x: Tensor, gain: Tensor, shift: Tensor) -> Tensor:
    """layer_norm over channels at every pixel of a (C, H, W) map."""
    C, H, W = x.shape
    tokens = x.reshape(C, H * W).T
    return layer_norm(tokens, gain, shift).T.reshape(C, H, W)
