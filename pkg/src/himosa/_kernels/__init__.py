"""Hot-kernel dispatch.

The compiled extension is used when it was built and imports cleanly;
otherwise the numpy fallback is used. ``HIMOSA_PURE_PYTHON=1`` forces the
fallback.
"""

import os

import numpy as np

from . import _fallback

try:
    if os.environ.get("HIMOSA_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python backend forced")
    from . import _ckernels
except ImportError:
    _ckernels = None

BACKENDS = {"python": _fallback}
if _ckernels is not None:
    BACKENDS["cython"] = _ckernels

BACKEND = "cython" if _ckernels is not None else "python"
_active = BACKENDS[BACKEND]


def get_backend(name=None):
    if name is None:
        return _active
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"backend {name!r} unavailable; have {sorted(BACKENDS)}") from None


def set_backend(name):
    global _active, BACKEND
    _active = get_backend(name)
    BACKEND = name


def _prep(*arrays, dtype):
    return [np.ascontiguousarray(a, dtype=dtype) for a in arrays]


def topk_indices(scores, k, backend=None):
    impl = get_backend(backend)
    scores = np.ascontiguousarray(scores)
    return impl.topk_indices(scores, int(k))


def sparse_attention_forward(tokens, idx, gates, wq, wk, wv, wo, backend=None):
    impl = get_backend(backend)
    dt = tokens.dtype
    tokens, gates, wq, wk, wv, wo = _prep(tokens, gates, wq, wk, wv, wo, dtype=dt)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    return impl.sparse_attention_forward(tokens, idx, gates, wq, wk, wv, wo)


def sparse_attention_backward(dout, tokens, idx, gates, wq, wk, wv, wo, cache, backend=None):
    impl = get_backend(backend)
    dt = tokens.dtype
    dout, tokens, gates, wq, wk, wv, wo = _prep(dout, tokens, gates, wq, wk, wv, wo, dtype=dt)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    return impl.sparse_attention_backward(dout, tokens, idx, gates, wq, wk, wv, wo, cache)
