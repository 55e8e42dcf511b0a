"""Pure-numpy versions of the hot kernels.

Shapes used throughout:
    tokens  (B, n, d)   B windows of n tokens
    idx     (B, m, k)   per-window, per-expert selected token indices
    gates   (B, m, k)
    wq/wk/wv (m, d, e), wo (m, e, d)
"""

import numpy as np


def topk_indices(scores, k):
    """Per (window, expert) top-k over tokens.

    scores: (B, n, m). Returns int64 (B, m, k) ordered by descending score,
    ties by ascending token index.
    """
    B, n, m = scores.shape
    cols = np.ascontiguousarray(np.swapaxes(scores, 1, 2))
    # stable sort of the negated scores keeps equal scores in index order
    order = np.argsort(-cols, axis=-1, kind="stable")
    return order[..., :k].astype(np.int64)


def sparse_attention_forward(tokens, idx, gates, wq, wk, wv, wo):
    B, n, d = tokens.shape
    m, _, e = wq.shape
    scale = 1.0 / np.sqrt(e)
    if idx.shape[2] == 0:
        k0 = np.zeros(idx.shape + (0,), dtype=tokens.dtype)
        return np.zeros_like(tokens), (k0, k0, k0, k0, k0, k0, k0)
    bsel = np.arange(B)[:, None, None]
    xs = tokens[bsel, idx]  # (B, m, k, d)
    q = xs @ wq[None]
    kk = xs @ wk[None]
    v = xs @ wv[None]
    s = (q @ np.swapaxes(kk, -1, -2)) * scale
    s -= s.max(axis=-1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(axis=-1, keepdims=True)
    ev = a @ v
    o_pre = ev @ wo[None]
    o = o_pre * gates[..., None]
    out = np.zeros_like(tokens)
    bidx = np.arange(B)[:, None]
    for h in range(m):
        # indices are distinct within one expert, so fancy += does not drop hits
        out[bidx, idx[:, h]] += o[:, h]
    cache = (xs, q, kk, v, a, ev, o_pre)
    return out, cache


def sparse_attention_backward(dout, tokens, idx, gates, wq, wk, wv, wo, cache):
    xs, q, kk, v, a, ev, o_pre = cache
    B, n, d = tokens.shape
    m, _, e = wq.shape
    scale = 1.0 / np.sqrt(e)
    if idx.shape[2] == 0:
        return (np.zeros_like(tokens), np.zeros(idx.shape, dtype=tokens.dtype), np.zeros_like(wq),
                np.zeros_like(wk), np.zeros_like(wv), np.zeros_like(wo))
    bsel = np.arange(B)[:, None, None]
    do = dout[bsel, idx]  # (B, m, k, d)
    dgates = (do * o_pre).sum(axis=-1)
    do_pre = do * gates[..., None]
    dwo = (np.swapaxes(ev, -1, -2) @ do_pre).sum(axis=0)
    dev = do_pre @ np.swapaxes(wo, -1, -2)[None]
    da = dev @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(a, -1, -2) @ dev
    ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
    dq = ds @ kk
    dk = np.swapaxes(ds, -1, -2) @ q
    xs_t = np.swapaxes(xs, -1, -2)
    dwq = (xs_t @ dq).sum(axis=0)
    dwk = (xs_t @ dk).sum(axis=0)
    dwv = (xs_t @ dv).sum(axis=0)
    dxs = (dq @ np.swapaxes(wq, -1, -2)[None]
           + dk @ np.swapaxes(wk, -1, -2)[None]
           + dv @ np.swapaxes(wv, -1, -2)[None])
    dtokens = np.zeros_like(tokens)
    bidx = np.arange(B)[:, None]
    for h in range(m):
        dtokens[bidx, idx[:, h]] += dxs[:, h]
    return dtokens, dgates, dwq, dwk, dwv, dwo
