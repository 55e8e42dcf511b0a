"""Parameter / FLOP accounting and wall-clock timing.

FLOPs count 2 per multiply-accumulate of every matmul and convolution;
bias adds, normalization, softmax and activations are not counted.
"""

from __future__ import annotations

import os
import statistics
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .config import ModelConfig
from .model import k_schedule, window_size_schedule


# -- parameters --------------------------------------------------------------------

def conv_params(c_in: int, c_out: int, k: int, bias: bool = True) -> int:
    return k * k * c_in * c_out + (c_out if bias else 0)


def layer_params(cfg: ModelConfig) -> dict[str, int]:
    C, m, e = cfg.channels, cfg.n_experts, cfg.d_expert
    ch, sh, hid = cfg.cab_hidden, cfg.se_hidden, cfg.glu_hidden
    return {
        "norm": 4 * C if cfg.use_norm else 0,
        "carsa": C * m + 4 * m * C * e,
        "cab": conv_params(C, ch, 3) + conv_params(ch, C, 3) + (C * sh + sh) + (sh * C + C),
        "glu": 2 * conv_params(C, hid, 1) + conv_params(1, hid, 3) + conv_params(hid, C, 1),
    }


def count_params(cfg: ModelConfig) -> int:
    C = cfg.channels
    per_layer = sum(layer_params(cfg).values())
    per_block = cfg.n_layers * per_layer + conv_params(C, C, 3)
    return conv_params(3, C, 3) + cfg.n_blocks * per_block + conv_params(C, 3 * cfg.scale ** 2, 3)


# -- FLOPs -------------------------------------------------------------------------------

def carsa_window_flops(n: int, k: int, d: int, e: int, m: int) -> int:
    """Scoring plus, per expert, QKV projections, QK^T and AV, and the output projection."""
    return 2 * n * d * m + m * (3 * 2 * k * d * e + 2 * 2 * k * k * e + 2 * k * e * d)


def dense_window_flops(n: int, d: int, e: int, m: int) -> int:
    return m * (3 * 2 * n * d * e + 2 * 2 * n * n * e + 2 * n * e * d)


def attention_quadratic_flops(n_or_k: int, e: int, m: int) -> int:
    """The token-pair term (QK^T and AV) of one window: 2*2*k^2*e per expert."""
    return m * 2 * 2 * n_or_k * n_or_k * e


def conv_flops(c_in: int, c_out: int, k: int, hw: int) -> int:
    return 2 * k * k * c_in * c_out * hw


@dataclass
class CostReport:
    input_hw: tuple[int, int]
    padded_hw: tuple[int, int]
    modules: list[tuple[str, int, int]] = field(default_factory=list)
    dense_attention_flops: int = 0
    wall_ms: float | None = None

    @property
    def params(self) -> int:
        return sum(p for _, p, _ in self.modules)

    @property
    def flops(self) -> int:
        return sum(f for _, _, f in self.modules)

    def to_text(self) -> str:
        lines = [f"{name}\t{p}\t{f}" for name, p, f in self.modules]
        lines.append(f"total\t{self.params}\t{self.flops}")
        return "\n".join(lines) + "\n"


def count_flops(cfg: ModelConfig, h: int, w: int) -> CostReport:
    unit = cfg.pad_unit
    H, W = h + (-h) % unit, w + (-w) % unit
    HW = H * W
    C, m, e = cfg.channels, cfg.n_experts, cfg.d_expert
    ch, sh, hid = cfg.cab_hidden, cfg.se_hidden, cfg.glu_hidden
    lp = layer_params(cfg)
    rep = CostReport((h, w), (H, W))
    rep.modules.append(("shallow", conv_params(3, C, 3), conv_flops(3, C, 3, HW)))
    for b in range(cfg.n_blocks):
        for i in range(cfg.n_layers):
            ws = window_size_schedule(cfg, i)
            n = ws * ws
            k = k_schedule(cfg, i, n)
            nw = HW // n
            p = f"blocks.{b}.layers.{i}"
            rep.modules.append((f"{p}.carsa", lp["carsa"] + lp["norm"] // 2, nw * carsa_window_flops(n, k, C, e, m)))
            rep.dense_attention_flops += nw * dense_window_flops(n, C, e, m)
            cab = conv_flops(C, ch, 3, HW) + conv_flops(ch, C, 3, HW) + 2 * (C * sh + sh * C)
            rep.modules.append((f"{p}.cab", lp["cab"], cab))
            glu = 2 * conv_flops(C, hid, 1, HW) + conv_flops(1, hid, 3, HW) + conv_flops(hid, C, 1, HW)
            rep.modules.append((f"{p}.glu", lp["glu"] + lp["norm"] // 2, glu))
        rep.modules.append((f"blocks.{b}.conv", conv_params(C, C, 3), conv_flops(C, C, 3, HW)))
    c_head = 3 * cfg.scale ** 2
    rep.modules.append(("head", conv_params(C, c_head, 3), conv_flops(C, c_head, 3, HW)))
    return rep


# -- timing -------------------------------------------------------------------------------

def thread_count() -> int:
    """HIMOSA_THREADS, 0/unset meaning the machine's CPU count."""
    try:
        n = int(os.environ.get("HIMOSA_THREADS", "0"))
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


def time_inference(cfg: ModelConfig, weights, size: tuple[int, int], repeats: int = 5,
                   threads: int | None = None, seed: int = 0) -> dict:
    """Median and IQR wall time of a no-grad forward, after one untimed warm-up run."""
    from .model import super_resolve

    threads = threads or thread_count()
    img = np.random.default_rng(seed).random((3, *size)).astype(weights["shallow.weight"].dtype)
    samples = []
    with threadpool_limits(limits=threads):
        ref = super_resolve(img, cfg, weights)
        for _ in range(repeats):
            t0 = time.perf_counter()
            out = super_resolve(img, cfg, weights)
            samples.append((time.perf_counter() - t0) * 1e3)
            if not np.array_equal(out, ref):
                raise RuntimeError("non-deterministic forward output across timed runs")
    if len(samples) >= 2:
        q = statistics.quantiles(samples, n=4, method="inclusive")
        iqr = q[2] - q[0]
    else:
        iqr = 0.0
    return {"median_ms": statistics.median(samples), "iqr_ms": iqr,
            "samples_ms": samples, "threads": threads}
