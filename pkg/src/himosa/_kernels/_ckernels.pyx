# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot kernels; same signatures as ``_fallback``.

Per (window, expert) the dense products go through BLAS gemm; gather,
softmax, gating and scatter-add run as fused C loops without temporaries.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp, sqrt
from libc.stdlib cimport malloc, free
from scipy.linalg.cython_blas cimport dgemm, sgemm

cnp.import_array()


cdef inline void mm(const floating* A, const floating* B, floating* C, int M, int N, int K,
                    bint ta, bint tb, floating beta) noexcept nogil:
    """Row-major C[M, N] = op(A) @ op(B) + beta * C."""
    cdef char ca = b't' if tb else b'n'
    cdef char cb = b't' if ta else b'n'
    cdef int ldb = K if tb else N
    cdef int lda = M if ta else K
    cdef floating one = 1
    # column-major view: C^T = op(B)^T @ op(A)^T
    if floating is double:
        dgemm(&ca, &cb, &N, &M, &K, &one, <double*>B, &ldb, <double*>A, &lda, &beta, C, &N)
    else:
        sgemm(&ca, &cb, &N, &M, &K, &one, <float*>B, &ldb, <float*>A, &lda, &beta, C, &N)


cdef inline bint _before(double sa, long long ia, double sb, long long ib) noexcept nogil:
    """Selection order: higher score first, then lower index."""
    return sa > sb or (sa == sb and ia < ib)


cdef inline void _sift_down(double* hs, long long* hi, Py_ssize_t size, Py_ssize_t pos) noexcept nogil:
    # heap root holds the entry that comes last in selection order
    cdef Py_ssize_t child, worst
    cdef double ts
    cdef long long ti
    while True:
        child = 2 * pos + 1
        if child >= size:
            return
        worst = child
        if child + 1 < size and _before(hs[child], hi[child], hs[child + 1], hi[child + 1]):
            worst = child + 1
        if not _before(hs[pos], hi[pos], hs[worst], hi[worst]):
            return
        ts, ti = hs[pos], hi[pos]
        hs[pos], hi[pos] = hs[worst], hi[worst]
        hs[worst], hi[worst] = ts, ti
        pos = worst


def topk_indices(floating[:, :, ::1] scores, Py_ssize_t k):
    cdef Py_ssize_t B = scores.shape[0], n = scores.shape[1], m = scores.shape[2]
    out = np.empty((B, m, k), dtype=np.int64)
    if k == 0:
        return out
    cdef long long[:, :, ::1] ov = out
    cdef double* hs = <double*>malloc(k * sizeof(double))
    cdef long long* hi = <long long*>malloc(k * sizeof(long long))
    if hs == NULL or hi == NULL:
        free(hs)
        free(hi)
        raise MemoryError()
    cdef Py_ssize_t b, h, i, size
    cdef double s
    try:
        with nogil:
            for b in range(B):
                for h in range(m):
                    for i in range(k):
                        hs[i] = scores[b, i, h]
                        hi[i] = i
                    for i in range(k // 2 - 1, -1, -1):
                        _sift_down(hs, hi, k, i)
                    for i in range(k, n):
                        s = scores[b, i, h]
                        if _before(s, i, hs[0], hi[0]):
                            hs[0], hi[0] = s, i
                            _sift_down(hs, hi, k, 0)
                    # pop the worst remaining entry into the back of the output
                    size = k
                    while size > 0:
                        ov[b, h, size - 1] = hi[0]
                        size -= 1
                        hs[0], hi[0] = hs[size], hi[size]
                        _sift_down(hs, hi, size, 0)
    finally:
        free(hs)
        free(hi)
    return out


def sparse_attention_forward(floating[:, :, ::1] tokens, long long[:, :, ::1] idx,
                             floating[:, :, ::1] gates, floating[:, :, ::1] wq,
                             floating[:, :, ::1] wk, floating[:, :, ::1] wv,
                             floating[:, :, ::1] wo):
    cdef int B = tokens.shape[0], n = tokens.shape[1], d = tokens.shape[2]
    cdef int m = wq.shape[0], e = wq.shape[2], k = idx.shape[2]
    dt = np.float64 if floating is double else np.float32
    out_a = np.zeros((B, n, d), dtype=dt)
    xs_a = np.empty((B, m, k, d), dtype=dt)
    q_a = np.empty((B, m, k, e), dtype=dt)
    k_a = np.empty((B, m, k, e), dtype=dt)
    v_a = np.empty((B, m, k, e), dtype=dt)
    a_a = np.empty((B, m, k, k), dtype=dt)
    ev_a = np.empty((B, m, k, e), dtype=dt)
    op_a = np.empty((B, m, k, d), dtype=dt)
    cdef floating[:, :, ::1] out = out_a
    cdef floating[:, :, :, ::1] xs = xs_a, q = q_a, kk = k_a, v = v_a
    cdef floating[:, :, :, ::1] a = a_a, ev = ev_a, opre = op_a
    cdef floating scale = 1.0 / sqrt(<double>e)
    cdef int b, h, j, l, c, row
    cdef double mx, tot, g
    if k == 0:
        return out_a, (xs_a, q_a, k_a, v_a, a_a, ev_a, op_a)
    with nogil:
        for b in range(B):
            for h in range(m):
                for j in range(k):
                    row = idx[b, h, j]
                    for c in range(d):
                        xs[b, h, j, c] = tokens[b, row, c]
                mm(&xs[b, h, 0, 0], &wq[h, 0, 0], &q[b, h, 0, 0], k, e, d, False, False, 0)
                mm(&xs[b, h, 0, 0], &wk[h, 0, 0], &kk[b, h, 0, 0], k, e, d, False, False, 0)
                mm(&xs[b, h, 0, 0], &wv[h, 0, 0], &v[b, h, 0, 0], k, e, d, False, False, 0)
                mm(&q[b, h, 0, 0], &kk[b, h, 0, 0], &a[b, h, 0, 0], k, k, e, False, True, 0)
                for j in range(k):
                    mx = a[b, h, j, 0]
                    for l in range(1, k):
                        if a[b, h, j, l] > mx:
                            mx = a[b, h, j, l]
                    tot = 0
                    for l in range(k):
                        a[b, h, j, l] = exp((a[b, h, j, l] - mx) * scale)
                        tot = tot + a[b, h, j, l]
                    for l in range(k):
                        a[b, h, j, l] = a[b, h, j, l] / tot
                mm(&a[b, h, 0, 0], &v[b, h, 0, 0], &ev[b, h, 0, 0], k, e, k, False, False, 0)
                mm(&ev[b, h, 0, 0], &wo[h, 0, 0], &opre[b, h, 0, 0], k, d, e, False, False, 0)
                for j in range(k):
                    g = gates[b, h, j]
                    row = idx[b, h, j]
                    for c in range(d):
                        out[b, row, c] += opre[b, h, j, c] * g
    return out_a, (xs_a, q_a, k_a, v_a, a_a, ev_a, op_a)


def sparse_attention_backward(floating[:, :, ::1] dout, floating[:, :, ::1] tokens,
                              long long[:, :, ::1] idx, floating[:, :, ::1] gates,
                              floating[:, :, ::1] wq, floating[:, :, ::1] wk,
                              floating[:, :, ::1] wv, floating[:, :, ::1] wo, cache):
    cdef int B = tokens.shape[0], n = tokens.shape[1], d = tokens.shape[2]
    cdef int m = wq.shape[0], e = wq.shape[2], k = idx.shape[2]
    dt = np.float64 if floating is double else np.float32
    xs_a, q_a, k_a, v_a, a_a, ev_a, op_a = [np.ascontiguousarray(c_, dtype=dt) for c_ in cache]
    cdef floating[:, :, :, ::1] xs = xs_a, q = q_a, kk = k_a, v = v_a
    cdef floating[:, :, :, ::1] a = a_a, ev = ev_a, opre = op_a
    dtok_a = np.zeros((B, n, d), dtype=dt)
    dg_a = np.zeros((B, m, k), dtype=dt)
    dwq_a = np.zeros((m, d, e), dtype=dt)
    dwk_a = np.zeros((m, d, e), dtype=dt)
    dwv_a = np.zeros((m, d, e), dtype=dt)
    dwo_a = np.zeros((m, e, d), dtype=dt)
    cdef floating[:, :, ::1] dtok = dtok_a, dg = dg_a
    cdef floating[:, :, ::1] dwq = dwq_a, dwk = dwk_a, dwv = dwv_a, dwo = dwo_a
    if k == 0:
        return dtok_a, dg_a, dwq_a, dwk_a, dwv_a, dwo_a
    # per-(window, expert) scratch
    dop_a = np.empty((k, d), dtype=dt)
    dev_a = np.empty((k, e), dtype=dt)
    ds_a = np.empty((k, k), dtype=dt)
    dq_a = np.empty((k, e), dtype=dt)
    dk_a = np.empty((k, e), dtype=dt)
    dv_a = np.empty((k, e), dtype=dt)
    dxs_a = np.empty((k, d), dtype=dt)
    cdef floating[:, ::1] dop = dop_a, dev = dev_a, ds = ds_a
    cdef floating[:, ::1] dq = dq_a, dk = dk_a, dv = dv_a, dxs = dxs_a
    cdef double scale = 1.0 / sqrt(<double>e)
    cdef int b, h, j, l, c, row
    cdef double acc, g, rs
    with nogil:
        for b in range(B):
            for h in range(m):
                # gated output projection
                for j in range(k):
                    row = idx[b, h, j]
                    g = gates[b, h, j]
                    acc = 0
                    for c in range(d):
                        acc = acc + dout[b, row, c] * opre[b, h, j, c]
                        dop[j, c] = dout[b, row, c] * g
                    dg[b, h, j] = acc
                mm(&ev[b, h, 0, 0], &dop[0, 0], &dwo[h, 0, 0], e, d, k, True, False, 1)
                mm(&dop[0, 0], &wo[h, 0, 0], &dev[0, 0], k, e, d, False, True, 0)
                # softmax attention
                mm(&dev[0, 0], &v[b, h, 0, 0], &ds[0, 0], k, k, e, False, True, 0)
                mm(&a[b, h, 0, 0], &dev[0, 0], &dv[0, 0], k, e, k, True, False, 0)
                for j in range(k):
                    rs = 0
                    for l in range(k):
                        rs = rs + ds[j, l] * a[b, h, j, l]
                    for l in range(k):
                        ds[j, l] = a[b, h, j, l] * (ds[j, l] - rs) * scale
                mm(&ds[0, 0], &kk[b, h, 0, 0], &dq[0, 0], k, e, k, False, False, 0)
                mm(&ds[0, 0], &q[b, h, 0, 0], &dk[0, 0], k, e, k, True, False, 0)
                # input projections
                mm(&xs[b, h, 0, 0], &dq[0, 0], &dwq[h, 0, 0], d, e, k, True, False, 1)
                mm(&xs[b, h, 0, 0], &dk[0, 0], &dwk[h, 0, 0], d, e, k, True, False, 1)
                mm(&xs[b, h, 0, 0], &dv[0, 0], &dwv[h, 0, 0], d, e, k, True, False, 1)
                mm(&dq[0, 0], &wq[h, 0, 0], &dxs[0, 0], k, d, e, False, True, 0)
                mm(&dk[0, 0], &wk[h, 0, 0], &dxs[0, 0], k, d, e, False, True, 1)
                mm(&dv[0, 0], &wv[h, 0, 0], &dxs[0, 0], k, d, e, False, True, 1)
                for j in range(k):
                    row = idx[b, h, j]
                    for c in range(d):
                        dtok[b, row, c] += dxs[j, c]
    return dtok_a, dg_a, dwq_a, dwk_a, dwv_a, dwo_a
