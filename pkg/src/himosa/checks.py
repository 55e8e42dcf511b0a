"""Verification suites: production ops against the naive oracles and finite differences.

Each check returns an :class:`~himosa.oracle.OracleReport`; ``run_suite``
collects them for the ``check`` command and the acceptance tests.
"""

from __future__ import annotations

import math

import numpy as np

from . import ops
from . import tensor as T
from .config import ModelConfig
from .data import ImageBuffer, bicubic_downsample
from .metrics import psnr, ssim
from .model import (RouterSelection, carsa_window, channel_attention, conv_glu, himosa_forward,
                    init_weights)
from .oracle import (OracleReport, compare, dense_mha_oracle, finite_diff_grad, naive_avg_pool_oracle,
                     naive_bicubic_oracle, naive_conv_oracle, psnr_oracle, ssim_oracle)
from .tensor import Tensor
from .train import l1_loss

FD_STEP = 1e-5
FD_TOL = 1e-4
SAME_MATH_TOL = 1e-8
SEEDS = (0, 1, 2, 3, 4)


def _param(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def grad_report(name: str, build, inputs: list[Tensor], max_coords: int | None = None,
                rng: np.random.Generator | None = None) -> OracleReport:
    """Compare backward() against central differences for every tensor in ``inputs``.

    ``build()`` must return a scalar Tensor computed from ``inputs``.
    """
    for t in inputs:
        t.grad = None
    loss = build()
    T.backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    def f():
        with T.no_grad():
            return build().data

    worst = OracleReport(name, 0.0, 0.0, FD_TOL)
    for t, g in zip(inputs, analytic):
        idx = None
        if max_coords is not None and t.size > max_coords:
            idx = np.sort((rng or np.random.default_rng(0)).choice(t.size, max_coords, replace=False))
        fd = finite_diff_grad(f, t.data, FD_STEP, idx)
        got = g if idx is None else g.reshape(-1)[idx]
        want = fd if idx is None else fd.reshape(-1)[idx]
        rep = compare(name, got, want, FD_TOL, floor=1e-6)
        if rep.max_rel > worst.max_rel or (rep.max_rel == worst.max_rel and rep.max_abs > worst.max_abs):
            worst = rep
    return worst


def _projected(out: Tensor, rng) -> Tensor:
    """Scalar sum(out * R) with a fixed random R, so every output element matters."""
    R = Tensor(rng.standard_normal(out.shape))
    return T.sum(out * R)


def _merge(reports: list[OracleReport], name: str) -> OracleReport:
    worst = max(reports, key=lambda r: (r.max_rel, r.max_abs))
    return OracleReport(name, worst.max_abs, worst.max_rel, worst.tol)


def small_network_config() -> ModelConfig:
    return ModelConfig(n_blocks=1, n_layers=2, channels=4, base_window=2, ratios=(1, 2), sparsity=(1, 2),
                       n_experts=2, expert_dim=3, scale=2, cab_reduction=2, cab_compress=2)


# -- gradient suite ---------------------------------------------------------------------------

def _grad_cases():
    def matmul_case(rng):
        a, b = _param(rng, 5, 7), _param(rng, 7, 3)
        R = rng.standard_normal((5, 3))
        return lambda: T.sum((a @ b) * R), [a, b]

    def elementwise_case(rng):
        a, b, bias = _param(rng, 4, 6), _param(rng, 4, 6), _param(rng, 6)
        R = rng.standard_normal((4, 6))

        def build():
            y = T.sigmoid(a * b) + T.gelu(a - b) + T.abs(a) + T.scale(b, 0.7) + bias
            return T.sum(y * R) + T.mean(a) + T.max(b)
        return build, [a, b, bias]

    def softmax_case(rng):
        a = _param(rng, 4, 9)
        R = rng.standard_normal((4, 9))
        return lambda: T.sum(T.softmax_rows(a) * R), [a]

    def max_axis_case(rng):
        a = _param(rng, 3, 5)
        R = rng.standard_normal(3)
        return lambda: T.sum(T.max(a, axis=1) * R) + T.sum(T.transpose(a)[1:3] * 0.5), [a]

    def conv_case(rng):
        x, w, b = _param(rng, 3, 5, 4), _param(rng, 2, 3, 3, 3), _param(rng, 2)
        R = rng.standard_normal((2, 5, 4))
        return lambda: T.sum(ops.conv2d(x, w, b) * R), [x, w, b]

    def conv1x1_case(rng):
        x, w, b = _param(rng, 3, 4, 4), _param(rng, 5, 3, 1, 1), _param(rng, 5)
        R = rng.standard_normal((5, 4, 4))
        return lambda: T.sum(ops.conv2d(x, w, b) * R), [x, w, b]

    def depthwise_case(rng):
        x, w, b = _param(rng, 3, 4, 5), _param(rng, 3, 1, 3, 3), _param(rng, 3)
        R = rng.standard_normal((3, 4, 5))
        return lambda: T.sum(ops.depthwise_conv2d(x, w, b) * R), [x, w, b]

    def shuffle_window_case(rng):
        x = _param(rng, 8, 4, 4)
        R = rng.standard_normal((2, 8, 8))

        def build():
            y = ops.pixel_shuffle(x, 2)
            win, layout = ops.window_partition(y, 4)
            win = T.gelu(win)
            return T.sum(ops.window_merge(win, layout) * R)
        return build, [x]

    def gather_scatter_case(rng):
        x, acc = _param(rng, 6, 3), _param(rng, 6, 3)
        idx = np.array([4, 1, 1, 5])
        R = rng.standard_normal((6, 3))
        return lambda: T.sum(ops.scatter_add_rows(acc, idx, T.gelu(ops.gather_rows(x, idx))) * R), [x, acc]

    def pool_norm_case(rng):
        x, gain, shift = _param(rng, 5, 6), _param(rng, 6), _param(rng, 6)
        img = _param(rng, 3, 4, 4)
        R = rng.standard_normal((5, 6))
        Rp = rng.standard_normal(3)
        cg, cs = _param(rng, 3), _param(rng, 3)
        Rc = rng.standard_normal((3, 4, 4))
        return (lambda: T.sum(ops.layer_norm(x, gain, shift) * R) + T.sum(ops.global_avg_pool(img) * Rp)
                + T.sum(ops.channel_layer_norm(img, cg, cs) * Rc), [x, gain, shift, img, cg, cs])

    def routing_case(rng):
        tokens, wr = _param(rng, 2, 8, 4), _param(rng, 4, 2)
        R = rng.standard_normal((2, 2, 3))

        def build():
            s = T.sigmoid(tokens @ wr)
            idx = ops._kernels.topk_indices(s.data, 3)
            return T.sum(ops.take_along_tokens(s, idx) * R)
        return build, [tokens, wr]

    def fused_attention_case(rng):
        B, n, d, m, e, k = 2, 9, 4, 2, 3, 5
        tokens, gates = _param(rng, B, n, d), _param(rng, B, m, k)
        ws = [_param(rng, m, d, e, scale=0.5) for _ in range(3)] + [_param(rng, m, e, d, scale=0.5)]
        idx = np.stack([np.stack([rng.choice(n, k, replace=False) for _ in range(m)]) for _ in range(B)])
        R = rng.standard_normal((B, n, d))
        return lambda: T.sum(ops.sparse_window_attention(tokens, idx, gates, *ws) * R), [tokens, gates, *ws]

    def composed_carsa_case(rng):
        n, d, m, e, k = 8, 4, 2, 3, 4
        x, r_logits = _param(rng, n, d), _param(rng, n, m)
        store = {"wq": _param(rng, m, d, e, scale=0.5), "wk": _param(rng, m, d, e, scale=0.5),
                 "wv": _param(rng, m, d, e, scale=0.5), "wo": _param(rng, m, e, d, scale=0.5)}
        idx = np.stack([np.sort(rng.choice(n, k, replace=False)) for _ in range(m)])
        R = rng.standard_normal((n, d))

        def build():
            r = T.sigmoid(r_logits)
            gates = ops.take_along_tokens(r.reshape(1, n, m), idx[None]).reshape(m, k)
            return T.sum(carsa_window(x, store, RouterSelection(idx, gates)) * R)
        return build, [x, r_logits, *store.values()]

    def cab_case(rng):
        C = 4
        x = _param(rng, C, 4, 4)
        store = {"conv1.weight": _param(rng, 2, C, 3, 3, scale=0.5), "conv1.bias": _param(rng, 2),
                 "conv2.weight": _param(rng, C, 2, 3, 3, scale=0.5), "conv2.bias": _param(rng, C),
                 "se.w1": _param(rng, C, 2), "se.b1": _param(rng, 2),
                 "se.w2": _param(rng, 2, C), "se.b2": _param(rng, C)}
        R = rng.standard_normal((C, 4, 4))
        return lambda: T.sum(channel_attention(x, store) * R), [x, *store.values()]

    def glu_case(rng):
        C, hid = 4, 6
        x = _param(rng, C, 3, 3)
        store = {"value.weight": _param(rng, hid, C, 1, 1), "value.bias": _param(rng, hid),
                 "dw.weight": _param(rng, hid, 1, 3, 3), "dw.bias": _param(rng, hid),
                 "gate.weight": _param(rng, hid, C, 1, 1), "gate.bias": _param(rng, hid),
                 "out.weight": _param(rng, C, hid, 1, 1), "out.bias": _param(rng, C)}
        R = rng.standard_normal((C, 3, 3))
        return lambda: T.sum(conv_glu(x, store) * R), [x, *store.values()]

    def l1_case(rng):
        pred, target = _param(rng, 3, 4, 4), rng.standard_normal((3, 4, 4))
        return lambda: l1_loss(T.gelu(pred), target), [pred]

    def pipeline_case(rng):
        x, w, b = _param(rng, 3, 5, 5), _param(rng, 2, 3, 3, 3), _param(rng, 2)
        target = rng.standard_normal((2, 5, 5))
        return lambda: l1_loss(T.gelu(ops.conv2d(x, w, b)), target), [x, w, b]

    return {
        "matmul": matmul_case, "elementwise": elementwise_case, "softmax_rows": softmax_case,
        "max_axis/transpose/index": max_axis_case, "conv2d": conv_case, "conv2d_1x1": conv1x1_case,
        "depthwise_conv2d": depthwise_case, "pixel_shuffle/window": shuffle_window_case,
        "gather/scatter_add": gather_scatter_case, "layer_norm/channel_norm/avg_pool": pool_norm_case,
        "route_gates": routing_case, "sparse_window_attention": fused_attention_case,
        "carsa_window": composed_carsa_case, "channel_attention": cab_case, "conv_glu": glu_case,
        "l1_loss": l1_case, "conv->gelu->l1": pipeline_case,
    }


def network_grad_report(seed: int, coords_per_tensor: int = 8) -> OracleReport:
    """Finite-difference check of the composed 1-block network on sampled parameter coordinates."""
    cfg = small_network_config()
    rng = np.random.default_rng(seed)
    weights = init_weights(cfg, seed=seed)
    for p in weights.values():
        p.data = rng.standard_normal(p.shape) * 0.4
    img = rng.random((3, 4, 4))
    target = rng.random((3, 8, 8))
    base_route: list = []
    with T.no_grad():
        himosa_forward(img, cfg, weights, record=base_route)

    def build():
        return l1_loss(himosa_forward(img, cfg, weights), target)

    rep = grad_report(f"network_1block[seed={seed}]", build, list(weights.values()),
                      max_coords=coords_per_tensor, rng=rng)
    after: list = []
    with T.no_grad():
        himosa_forward(img, cfg, weights, record=after)
    for a, b in zip(base_route, after):
        if not np.array_equal(a["indices"], b["indices"]):
            raise AssertionError("token selection moved during the finite-difference sweep")
    return rep


def gradient_suite(seeds=SEEDS) -> list[OracleReport]:
    reports = []
    for name, case in _grad_cases().items():
        per_seed = []
        for s in seeds:
            rng = np.random.default_rng(1000 + s)
            build, inputs = case(rng)
            per_seed.append(grad_report(name, build, inputs))
        reports.append(_merge(per_seed, f"grad:{name}"))
    reports.append(_merge([network_grad_report(s) for s in seeds], "grad:network_1block"))
    return reports


# -- oracle suite -------------------------------------------------------------------------------------

def sparsity_one_equivalence(draws: int = 20, seed: int = 0) -> OracleReport:
    """carsa_window with rho=1 and unit gates against the dense multi-head oracle."""
    rng = np.random.default_rng(seed)
    reports = []
    for _ in range(draws):
        n = int(rng.integers(1, 65))
        d, e, m = (int(v) for v in rng.integers(1, 9, size=3))
        x = Tensor(rng.standard_normal((n, d)))
        w = {name: Tensor(rng.standard_normal(shape) / math.sqrt(shape[1]))
             for name, shape in (("wq", (m, d, e)), ("wk", (m, d, e)), ("wv", (m, d, e)), ("wo", (m, e, d)))}
        r = T.sigmoid(x @ Tensor(rng.standard_normal((d, m))))
        idx = ops._kernels.topk_indices(r.data.reshape(1, n, m), n)[0]
        got = carsa_window(x, w, RouterSelection(idx, None)).data
        want = dense_mha_oracle(x.data, *(w[k].data for k in ("wq", "wk", "wv", "wo")))
        reports.append(compare("sparsity1_vs_dense_mha", got, want, SAME_MATH_TOL))
    return _merge(reports, "oracle:sparsity1_vs_dense_mha")


def fused_vs_composed(seed: int = 0) -> OracleReport:
    rng = np.random.default_rng(seed)
    B, n, d, m, e, k = 3, 16, 5, 3, 4, 6
    tokens = Tensor(rng.standard_normal((B, n, d)))
    w = {"wq": Tensor(rng.standard_normal((m, d, e))), "wk": Tensor(rng.standard_normal((m, d, e))),
         "wv": Tensor(rng.standard_normal((m, d, e))), "wo": Tensor(rng.standard_normal((m, e, d)))}
    gates = Tensor(rng.random((B, m, k)))
    idx = ops._kernels.topk_indices(rng.random((B, n, m)), k)
    fused = ops.sparse_window_attention(tokens, idx, gates, w["wq"], w["wk"], w["wv"], w["wo"]).data
    composed = np.stack([carsa_window(tokens[b], w, RouterSelection(idx[b], gates[b])).data for b in range(B)])
    return compare("oracle:fused_vs_composed_attention", fused, composed, SAME_MATH_TOL)


def conv_vs_naive(seed: int = 0) -> OracleReport:
    rng = np.random.default_rng(seed)
    reports = []
    for k in (1, 3, 5):
        x = rng.standard_normal((3, 4, 5))
        w = rng.standard_normal((2, 3, k, k))
        b = rng.standard_normal(2)
        got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
        reports.append(compare("conv", got, naive_conv_oracle(x, w, b), SAME_MATH_TOL))
    return _merge(reports, "oracle:conv2d_vs_loops")


def pool_vs_naive(seed: int = 0) -> OracleReport:
    x = np.random.default_rng(seed).standard_normal((4, 5, 3))
    return compare("oracle:avg_pool_vs_loops", ops.global_avg_pool(Tensor(x)).data,
                   naive_avg_pool_oracle(x), SAME_MATH_TOL)


def bicubic_vs_naive(seed: int = 0) -> OracleReport:
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, size=(12, 8, 3), dtype=np.uint8)
    got = bicubic_downsample(ImageBuffer.from_array(img), 2).data
    want = naive_bicubic_oracle(img, 2)
    # exact-equality check reported as absolute byte error
    err = float(np.max(np.abs(got.astype(int) - want.astype(int))))
    return OracleReport("oracle:bicubic_vs_loops", err, err, 0.0)


def metrics_vs_naive(seed: int = 0, fixtures: int = 10) -> list[OracleReport]:
    rng = np.random.default_rng(seed)
    p_reports, s_reports = [], []
    for _ in range(fixtures):
        a = rng.integers(0, 256, size=(16, 18, 3), dtype=np.uint8)
        b = np.clip(a.astype(int) + rng.integers(-20, 21, size=a.shape), 0, 255).astype(np.uint8)
        err_p = abs(psnr(a, b, 2) - psnr_oracle(a, b, 2))
        err_s = abs(ssim(a, b, 2) - ssim_oracle(a, b, 2))
        p_reports.append(OracleReport("psnr", err_p, err_p, 1e-9))
        s_reports.append(OracleReport("ssim", err_s, err_s, 1e-9))
    return [_merge(p_reports, "oracle:psnr_vs_loops"), _merge(s_reports, "oracle:ssim_vs_loops")]


def oracle_suite() -> list[OracleReport]:
    return [sparsity_one_equivalence(), fused_vs_composed(), conv_vs_naive(), pool_vs_naive(),
            bicubic_vs_naive(), *metrics_vs_naive()]


def run_suite(name: str = "all") -> list[OracleReport]:
    if name == "grad":
        return gradient_suite()
    if name == "oracle":
        return oracle_suite()
    if name == "all":
        return oracle_suite() + gradient_suite()
    raise ValueError(f"unknown suite {name!r}")
