"""The HIMOSA network: shallow conv, N blocks of M hierarchical layers, pixel-shuffle head.

Each hierarchical layer runs, on a (C, H, W) feature map:

    X_cab   = CAB(X)
    X_carsa = per-window expert-choice sparse attention at window size ws_i
    X       = X + X_carsa + X_cab
    X       = X + ConvGLU(norm(X))

Expert outputs are projected by a per-expert output matrix, scaled by the
router score of each selected token and scatter-added back into the window;
tokens no expert picked receive zero attention output.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import ops
from . import tensor as T
from .config import ModelConfig
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor

INIT_STD = 0.02


# -- schedules --------------------------------------------------------------------

def window_size_schedule(cfg: ModelConfig, i: int) -> int:
    if not 0 <= i < cfg.n_layers:
        raise ContractError(f"layer index {i} outside [0, {cfg.n_layers})")
    ws = cfg.ratios[i] * cfg.base_window
    if ws.denominator != 1 or ws <= 0:
        raise ConfigError(f"window size {ws} for layer {i} is not a positive integer")
    return int(ws)


def k_schedule(cfg: ModelConfig, i: int, n: int) -> int:
    """Tokens kept per expert: floor(n / rho_i), at least 1."""
    return max(1, n // cfg.sparsity[i])


# -- parameters ---------------------------------------------------------------------

def parameter_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    C, m, e = cfg.channels, cfg.n_experts, cfg.d_expert
    ch, sh, hid = cfg.cab_hidden, cfg.se_hidden, cfg.glu_hidden
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    shapes["shallow.weight"] = (C, 3, 3, 3)
    shapes["shallow.bias"] = (C,)
    for b in range(cfg.n_blocks):
        for i in range(cfg.n_layers):
            p = f"blocks.{b}.layers.{i}."
            if cfg.use_norm:
                shapes[p + "norm1.gain"] = (C,)
                shapes[p + "norm1.shift"] = (C,)
            shapes[p + "router.weight"] = (C, m)
            for name in ("wq", "wk", "wv"):
                shapes[p + f"attn.{name}"] = (m, C, e)
            shapes[p + "attn.wo"] = (m, e, C)
            shapes[p + "cab.conv1.weight"] = (ch, C, 3, 3)
            shapes[p + "cab.conv1.bias"] = (ch,)
            shapes[p + "cab.conv2.weight"] = (C, ch, 3, 3)
            shapes[p + "cab.conv2.bias"] = (C,)
            shapes[p + "cab.se.w1"] = (C, sh)
            shapes[p + "cab.se.b1"] = (sh,)
            shapes[p + "cab.se.w2"] = (sh, C)
            shapes[p + "cab.se.b2"] = (C,)
            if cfg.use_norm:
                shapes[p + "norm2.gain"] = (C,)
                shapes[p + "norm2.shift"] = (C,)
            shapes[p + "glu.value.weight"] = (hid, C, 1, 1)
            shapes[p + "glu.value.bias"] = (hid,)
            shapes[p + "glu.dw.weight"] = (hid, 1, 3, 3)
            shapes[p + "glu.dw.bias"] = (hid,)
            shapes[p + "glu.gate.weight"] = (hid, C, 1, 1)
            shapes[p + "glu.gate.bias"] = (hid,)
            shapes[p + "glu.out.weight"] = (C, hid, 1, 1)
            shapes[p + "glu.out.bias"] = (C,)
        shapes[f"blocks.{b}.conv.weight"] = (C, C, 3, 3)
        shapes[f"blocks.{b}.conv.bias"] = (C,)
    shapes["head.weight"] = (3 * cfg.scale ** 2, C, 3, 3)
    shapes["head.bias"] = (3 * cfg.scale ** 2,)
    return shapes


class Scope:
    """Read-only view of a weight store under a name prefix."""

    def __init__(self, store: "HimosaWeights", prefix: str):
        self._store = store
        self._prefix = prefix

    def __getitem__(self, name: str) -> Tensor:
        return self._store[self._prefix + name]

    def get(self, name: str):
        return self._store.get(self._prefix + name)

    def scope(self, prefix: str) -> "Scope":
        return Scope(self._store, self._prefix + prefix)


class HimosaWeights(OrderedDict):
    """Parameter path -> Tensor, in declaration order."""

    def scope(self, prefix: str) -> Scope:
        return Scope(self, prefix)

    def n_scalars(self) -> int:
        return int(sum(t.size for t in self.values()))

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def check_against(self, cfg: ModelConfig) -> None:
        """Raise on the first missing, orphan or mis-shaped parameter."""
        expected = parameter_shapes(cfg)
        for name, shape in expected.items():
            if name not in self:
                raise DimensionError(f"missing parameter {name} {shape}")
            if tuple(self[name].shape) != shape:
                raise DimensionError(f"parameter {name}: expected shape {shape}, got {tuple(self[name].shape)}")
        for name in self:
            if name not in expected:
                raise DimensionError(f"unexpected parameter {name} {tuple(self[name].shape)}")

    def astype(self, dtype) -> "HimosaWeights":
        return HimosaWeights((k, Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, name=k))
                             for k, v in self.items())


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return z * std


def init_weights(cfg: ModelConfig, seed: int = 0, dtype=np.float64, std: float = INIT_STD) -> HimosaWeights:
    rng = np.random.default_rng(seed)
    weights = HimosaWeights()
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain":
            arr = np.ones(shape)
        elif leaf in ("bias", "shift", "b1", "b2"):
            arr = np.zeros(shape)
        else:
            arr = _trunc_normal(rng, shape, std)
        weights[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return weights


# -- routing ---------------------------------------------------------------------------

@dataclass
class RouterSelection:
    """Per-expert token indices (m, k) and their gates (m, k); gates None means unit gates."""
    indices: np.ndarray
    gates: Tensor | None

    @property
    def n_experts(self) -> int:
        return self.indices.shape[0]

    @property
    def k(self) -> int:
        return self.indices.shape[1]


def route_scores(x: Tensor, w_r: Tensor) -> Tensor:
    """sigmoid(X @ W_r): (..., n, d) x (d, m) -> (..., n, m)."""
    if x.shape[-1] != w_r.shape[0]:
        raise DimensionError(f"route_scores: tokens {x.shape} vs router {w_r.shape}")
    return T.sigmoid(T.matmul(x, w_r))


def _select_indices(scores: np.ndarray, k: int, strategy: str, rng: np.random.Generator | None) -> np.ndarray:
    """scores (B, n, m) -> idx (B, m, k)."""
    B, n, m = scores.shape
    if not 1 <= k <= n:
        raise ContractError(f"select_tokens: need 1 <= k <= n, got k={k}, n={n}")
    if strategy == "content_aware":
        return ops._kernels.topk_indices(scores, k)
    if strategy == "sequential":
        return np.broadcast_to(np.arange(k, dtype=np.int64), (B, m, k)).copy()
    if strategy == "random":
        if rng is None:
            rng = np.random.default_rng(0)
        idx = np.empty((B, m, k), dtype=np.int64)
        for b in range(B):
            for h in range(m):
                idx[b, h] = np.sort(rng.choice(n, size=k, replace=False))
        return idx
    raise ConfigError(f"unknown selection strategy {strategy!r}")


def select_tokens(r: Tensor, k: int, strategy: str = "content_aware",
                  rng: np.random.Generator | None = None) -> RouterSelection:
    """Pick k tokens per expert from one window's scores r (n, m)."""
    n, m = r.shape
    idx = _select_indices(r.data.reshape(1, n, m), k, strategy, rng)
    gates = ops.take_along_tokens(r.reshape(1, n, m), idx).reshape(m, k)
    return RouterSelection(idx[0], gates)


# -- sub-modules --------------------------------------------------------------------------

def carsa_window(x: Tensor, attn: Scope, sel: RouterSelection) -> Tensor:
    """Sparse expert attention for a single window, composed from primitive ops.

    x: (n, d). ``attn`` holds stacked wq/wk/wv (m, d, e) and wo (m, e, d).
    """
    n, d = x.shape
    wq, wk, wv, wo = attn["wq"], attn["wk"], attn["wv"], attn["wo"]
    m, _, e = wq.shape
    if sel.indices.shape[0] != m:
        raise DimensionError(f"selection has {sel.indices.shape[0]} experts, weights have {m}")
    inv_sqrt = 1.0 / math.sqrt(e)
    acc = Tensor(np.zeros((n, d), dtype=x.dtype))
    for h in range(m):
        idx = sel.indices[h]
        xs = ops.gather_rows(x, idx)
        q = xs @ wq[h]
        kk = xs @ wk[h]
        v = xs @ wv[h]
        a = T.softmax_rows(T.scale(q @ kk.T, inv_sqrt))
        o = (a @ v) @ wo[h]
        if sel.gates is not None:
            o = o * sel.gates[h].reshape(len(idx), 1)
        acc = ops.scatter_add_rows(acc, idx, o)
    return acc


def channel_attention(x: Tensor, cab: Scope, cfg: ModelConfig | None = None) -> Tensor:
    C = x.shape[0]
    if cfg is not None and C % cfg.cab_reduction:
        raise ConfigError(f"channels {C} not divisible by cab_reduction {cfg.cab_reduction}")
    y = ops.conv2d(x, cab["conv1.weight"], cab["conv1.bias"])
    y = ops.conv2d(T.gelu(y), cab["conv2.weight"], cab["conv2.bias"])
    pooled = ops.global_avg_pool(y).reshape(1, C)
    hidden = T.gelu(pooled @ cab["se.w1"] + cab["se.b1"])
    s = T.sigmoid(hidden @ cab["se.w2"] + cab["se.b2"])
    return y * s.reshape(C, 1, 1)


def conv_glu(x: Tensor, glu: Scope) -> Tensor:
    v = ops.conv2d(x, glu["value.weight"], glu["value.bias"])
    v = ops.depthwise_conv2d(v, glu["dw.weight"], glu["dw.bias"])
    g = T.gelu(ops.conv2d(x, glu["gate.weight"], glu["gate.bias"]))
    return ops.conv2d(v * g, glu["out.weight"], glu["out.bias"])


def hierarchical_layer(x: Tensor, cfg: ModelConfig, i: int, lw: Scope, *,
                       rng: np.random.Generator | None = None, record: list | None = None,
                       fused: bool = True, force_unit_gates: bool = False) -> Tensor:
    C, H, W = x.shape
    ws = window_size_schedule(cfg, i)
    if H % ws or W % ws:
        raise DimensionError(f"layer {i}: map {H}x{W} not a multiple of window {ws}")
    x_cab = channel_attention(x, lw.scope("cab."), cfg)

    t = ops.channel_layer_norm(x, lw["norm1.gain"], lw["norm1.shift"]) if cfg.use_norm else x
    windows, layout = ops.window_partition(t, ws)
    n = layout.tokens_per_window
    k = k_schedule(cfg, i, n)
    scores = route_scores(windows, lw["router.weight"])
    idx = _select_indices(scores.data, k, cfg.selection_strategy, rng)
    if record is not None:
        record.append({"layer": i, "indices": idx, "layout": layout})
    gates = None
    if cfg.use_gate and not force_unit_gates:
        gates = ops.take_along_tokens(scores, idx)
    attn = lw.scope("attn.")
    if fused:
        out = ops.sparse_window_attention(windows, idx, gates, attn["wq"], attn["wk"], attn["wv"], attn["wo"])
    else:
        per_window = []
        for b in range(layout.n_windows):
            g_b = None if gates is None else gates[b]
            per_window.append(carsa_window(windows[b], attn, RouterSelection(idx[b], g_b)).reshape(1, n, C))
        out = per_window[0]
        if len(per_window) > 1:
            out = _stack_windows(per_window)
    x_carsa = ops.window_merge(out, layout)

    x = x + x_carsa + x_cab
    t2 = ops.channel_layer_norm(x, lw["norm2.gain"], lw["norm2.shift"]) if cfg.use_norm else x
    return x + conv_glu(t2, lw.scope("glu."))


def _stack_windows(parts: list[Tensor]) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def fn(g):
        return tuple(g[offsets[j]:offsets[j + 1]] for j in range(len(parts)))

    return T._record(data, tuple(parts), fn)


# -- full network ------------------------------------------------------------------------------

def himosa_forward(image, cfg: ModelConfig, weights: HimosaWeights, *, select_seed: int = 0,
                   record: list | None = None, fused: bool = True) -> Tensor:
    """LR image (3, h, w) in [0, 1] -> SR image (3, r*h, r*w)."""
    img = image.data if isinstance(image, Tensor) else np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DimensionError(f"expected a (3, h, w) image, got {img.shape}")
    _, h, w = img.shape
    if h < 1 or w < 1:
        raise ContractError("empty input image")
    unit = cfg.pad_unit
    ph, pw = (-h) % unit, (-w) % unit
    img = ops.reflect_pad(img.astype(weights["shallow.weight"].dtype, copy=False), ph, pw)

    x0 = ops.conv2d(Tensor(img), weights["shallow.weight"], weights["shallow.bias"])
    x = x0
    for b in range(cfg.n_blocks):
        for i in range(cfg.n_layers):
            rng = None
            if cfg.selection_strategy == "random":
                rng = np.random.default_rng([select_seed, b, i])
            rec = [] if record is not None else None
            x = hierarchical_layer(x, cfg, i, weights.scope(f"blocks.{b}.layers.{i}."),
                                   rng=rng, record=rec, fused=fused)
            if rec is not None:
                for entry in rec:
                    entry["block"] = b
                    record.append(entry)
        x = ops.conv2d(x, weights[f"blocks.{b}.conv.weight"], weights[f"blocks.{b}.conv.bias"])
    x = x0 + x
    out = ops.pixel_shuffle(ops.conv2d(x, weights["head.weight"], weights["head.bias"]), cfg.scale)
    return ops.crop(out, cfg.scale * h, cfg.scale * w)


def super_resolve(image: np.ndarray, cfg: ModelConfig, weights: HimosaWeights) -> np.ndarray:
    """Inference helper: float (3, h, w) -> float (3, rh, rw), no graph recorded."""
    with T.no_grad():
        return himosa_forward(image, cfg, weights).data
