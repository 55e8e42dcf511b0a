"""Naive reference implementations used only to check the production paths.

Deliberately written as straight loops over plain numpy arrays and Python
floats, and importing nothing from the rest of the package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class OracleReport:
    op: str
    max_abs: float
    max_rel: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel <= self.tol)

    def line(self) -> str:
        return f"{self.op}\t{self.max_abs:.3e}\t{self.max_rel:.3e}\t{'PASS' if self.passed else 'FAIL'}"


def compare(op: str, got, want, tol: float, floor: float = 1e-12) -> OracleReport:
    """Max abs error and max error relative to max(|want|) (floored)."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    if got.shape != want.shape:
        return OracleReport(op, math.inf, math.inf, tol)
    if got.size == 0:
        return OracleReport(op, 0.0, 0.0, tol)
    err = float(np.max(np.abs(got - want)))
    scale = max(float(np.max(np.abs(want))), floor)
    return OracleReport(op, err, err / scale, tol)


# -- attention --------------------------------------------------------------------------

def _matmul_loops(a, b):
    n, k = len(a), len(a[0])
    p = len(b[0])
    out = [[0.0] * p for _ in range(n)]
    for i in range(n):
        row = out[i]
        for t in range(k):
            av = a[i][t]
            brow = b[t]
            for j in range(p):
                row[j] += av * brow[j]
    return out


def dense_mha_oracle(x, wq, wk, wv, wo) -> np.ndarray:
    """sum_h softmax(X Wq_h (X Wk_h)^T / sqrt(e)) X Wv_h Wo_h over all tokens, no gating.

    x (n, d); wq/wk/wv (m, d, e); wo (m, e, d).
    """
    X = np.asarray(x, dtype=np.float64).tolist()
    m = len(wq)
    n, d = len(X), len(X[0])
    out = [[0.0] * d for _ in range(n)]
    for h in range(m):
        e = len(wq[h][0])
        Q = _matmul_loops(X, np.asarray(wq[h]).tolist())
        K = _matmul_loops(X, np.asarray(wk[h]).tolist())
        V = _matmul_loops(X, np.asarray(wv[h]).tolist())
        E = []
        for i in range(n):
            logits = [sum(Q[i][t] * K[j][t] for t in range(e)) / math.sqrt(e) for j in range(n)]
            top = max(logits)
            ex = [math.exp(s - top) for s in logits]
            z = sum(ex)
            E.append([sum(ex[j] / z * V[j][t] for j in range(n)) for t in range(e)])
        O = _matmul_loops(E, np.asarray(wo[h]).tolist())
        for i in range(n):
            for c in range(d):
                out[i][c] += O[i][c]
    return np.array(out)


# -- convolution / pooling ------------------------------------------------------------------

def naive_conv_oracle(x, w, b=None) -> np.ndarray:
    """Zero same-padded cross-correlation by direct summation."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    C_in, H, W = x.shape
    C_out, _, k, _ = w.shape
    p = k // 2
    out = np.zeros((C_out, H, W))
    for o in range(C_out):
        for i in range(H):
            for j in range(W):
                acc = 0.0 if b is None else float(b[o])
                for c in range(C_in):
                    for u in range(k):
                        for v in range(k):
                            yi, xj = i + u - p, j + v - p
                            if 0 <= yi < H and 0 <= xj < W:
                                acc += w[o, c, u, v] * x[c, yi, xj]
                out[o, i, j] = acc
    return out


def naive_avg_pool_oracle(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    C, H, W = x.shape
    out = np.zeros(C)
    for c in range(C):
        acc = 0.0
        for i in range(H):
            for j in range(W):
                acc += x[c, i, j]
        out[c] = acc / (H * W)
    return out


# -- images -----------------------------------------------------------------------------------

def _catmull_rom(t: float) -> float:
    a = -0.5
    t = abs(t)
    if t <= 1:
        return (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1
    if t < 2:
        return a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a
    return 0.0


def _taps(i: int, r: int, n_in: int):
    center = (i + 0.5) * r - 0.5
    raw = []
    j = math.floor(center - 2 * r)
    while j <= center + 2 * r + 1:
        raw.append((min(max(j, 0), n_in - 1), _catmull_rom((center - j) / r)))
        j += 1
    total = sum(w for _, w in raw)
    return [(src, w / total) for src, w in raw]


def naive_bicubic_oracle(img, r: int) -> np.ndarray:
    """Per-output-pixel 2-d kernel sum; img (h, w, 3) uint8 -> uint8."""
    img = np.asarray(img)
    h, w, _ = img.shape
    out = np.zeros((h // r, w // r, 3), dtype=np.uint8)
    for oy in range(h // r):
        ty = _taps(oy, r, h)
        for ox in range(w // r):
            tx = _taps(ox, r, w)
            for c in range(3):
                acc = 0.0
                for sy, wy in ty:
                    for sx, wx in tx:
                        acc += wy * wx * img[sy, sx, c] / 255.0
                v = acc * 255.0
                q = math.floor(abs(v) + 0.5) * (1 if v >= 0 else -1)
                out[oy, ox, c] = min(max(q, 0), 255)
    return out


def luma_oracle(img) -> list[list[float]]:
    img = np.asarray(img)
    if img.ndim == 2:
        return [[float(v) for v in row] for row in img]
    h, w, _ = img.shape
    return [[16.0 + (65.481 * float(img[i, j, 0]) + 128.553 * float(img[i, j, 1])
                     + 24.966 * float(img[i, j, 2])) / 255.0 for j in range(w)] for i in range(h)]


def psnr_oracle(a, b, border: int = 0) -> float:
    ya, yb = luma_oracle(a), luma_oracle(b)
    h, w = len(ya), len(ya[0])
    total, count = 0.0, 0
    for i in range(border, h - border):
        for j in range(border, w - border):
            diff = ya[i][j] - yb[i][j]
            total += diff * diff
            count += 1
    mse = total / count
    return math.inf if mse == 0 else 10 * math.log10(255.0 ** 2 / mse)


def ssim_oracle(a, b, border: int = 0) -> float:
    """Direct-formula SSIM: 11x11 Gaussian (sigma 1.5) windows at every valid position."""
    ya, yb = luma_oracle(a), luma_oracle(b)
    h, w = len(ya), len(ya[0])
    ya = [row[border:w - border] for row in ya[border:h - border]]
    yb = [row[border:w - border] for row in yb[border:h - border]]
    h, w = len(ya), len(ya[0])
    g1 = [math.exp(-((t - 5) ** 2) / (2 * 1.5 ** 2)) for t in range(11)]
    s = sum(g1)
    g1 = [v / s for v in g1]
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    vals = []
    for i in range(h - 10):
        for j in range(w - 10):
            ma = mb = saa = sbb = sab = 0.0
            for u in range(11):
                for v in range(11):
                    wt = g1[u] * g1[v]
                    pa, pb = ya[i + u][j + v], yb[i + u][j + v]
                    ma += wt * pa
                    mb += wt * pb
                    saa += wt * pa * pa
                    sbb += wt * pb * pb
                    sab += wt * pa * pb
            va, vb, cov = saa - ma * ma, sbb - mb * mb, sab - ma * mb
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)


# -- gradients ------------------------------------------------------------------------------------

def finite_diff_grad(f, x: np.ndarray, h: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``x`` (perturbed in place, restored).

    ``indices`` limits the check to some flat positions; others stay 0.
    """
    if x.dtype != np.float64:
        raise TypeError("finite differences need float64 data")
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f())
        flat[i] = orig - h
        fm = float(f())
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value while perturbing flat index {i}")
        gflat[i] = (fp - fm) / (2 * h)
    return grad
