"""L1 training loop: warmup + multistep LR, global-norm clipping, two optimizers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ModelConfig, TrainConfig
from .data import augment, sample_origin
from .errors import ContractError, DimensionError
from .model import HimosaWeights, himosa_forward
from .tensor import Tensor


class NonFiniteLossError(FloatingPointError):
    pass


def l1_loss(pred: Tensor, target) -> Tensor:
    target = T.as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"l1_loss shape mismatch: {pred.shape} vs {target.shape}")
    return T.mean(T.abs(pred - target))


def lr_at(cfg: TrainConfig, t: int) -> float:
    if t < cfg.warmup_iters:
        return cfg.base_lr * t / cfg.warmup_iters
    n_decays = sum(1 for p in cfg.decay_points if p <= t)
    return cfg.base_lr * cfg.decay_factor ** n_decays


# -- optimizers ---------------------------------------------------------------------

class SGDMomentum:
    name = "sgd_momentum"
    slots = ("momentum",)

    def __init__(self, momentum: float = 0.9):
        self.mu = momentum
        self.state: dict[str, dict[str, np.ndarray]] = {"momentum": {}}

    def step(self, params: HimosaWeights, lr: float, t: int) -> None:
        buf = self.state["momentum"]
        for name, p in params.items():
            if p.grad is None:
                continue
            v = buf.get(name)
            v = p.grad.copy() if v is None else self.mu * v + p.grad
            buf[name] = v
            p.data = p.data - lr * v


class AdamLike:
    """Bias-corrected first/second moment estimates (Adam)."""
    name = "adam_like"
    slots = ("m", "v")

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.state: dict[str, dict[str, np.ndarray]] = {"m": {}, "v": {}}

    def step(self, params: HimosaWeights, lr: float, t: int) -> None:
        # t is the 0-based iteration; bias correction uses the 1-based step count
        step = t + 1
        c1 = 1.0 - self.b1 ** step
        c2 = 1.0 - self.b2 ** step
        ms, vs = self.state["m"], self.state["v"]
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            m = ms.get(name, np.zeros_like(g))
            v = vs.get(name, np.zeros_like(g))
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            ms[name], vs[name] = m, v
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str):
    if name == "sgd_momentum":
        return SGDMomentum()
    if name == "adam_like":
        return AdamLike()
    raise ContractError(f"unknown optimizer {name!r}")


# -- state / steps -------------------------------------------------------------------------

@dataclass
class TrainState:
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    weights: HimosaWeights
    optimizer: object
    iteration: int = 0
    history: list[float] = field(default_factory=list)


def new_state(model_cfg: ModelConfig, train_cfg: TrainConfig, weights: HimosaWeights | None = None,
              dtype=np.float64) -> TrainState:
    from .model import init_weights

    if weights is None:
        weights = init_weights(model_cfg, seed=train_cfg.seed, dtype=dtype)
    return TrainState(model_cfg, train_cfg, weights, make_optimizer(train_cfg.optimizer))


def clip_grad_norm(weights: HimosaWeights, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in weights.values() if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in weights.values():
            if p.grad is not None:
                p.grad = p.grad * factor
    return total


def _first_nonfinite(weights: HimosaWeights) -> str | None:
    # a bad value poisons every upstream gradient, so values are checked before grads
    for name, p in weights.items():
        if not np.all(np.isfinite(p.data)):
            return f"{name} (value)"
    for name, p in weights.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            return f"{name} (grad)"
    return None


def train_step(state: TrainState, batch) -> tuple[TrainState, float]:
    """One optimizer step on ``batch``: a list of (lr (3,h,w), hr (3,rh,rw)) float pairs."""
    w = state.weights
    w.zero_grad()
    t = state.iteration
    total = 0.0
    for lr_img, hr_img in batch:
        pred = himosa_forward(lr_img, state.model_cfg, w, select_seed=t)
        loss = l1_loss(pred, hr_img)
        scaled = T.scale(loss, 1.0 / len(batch))
        T.backward(scaled)
        total += float(loss.data)
    value = total / len(batch)
    if not math.isfinite(value):
        culprit = _first_nonfinite(w)
        raise NonFiniteLossError(f"iteration {t}: loss is {value}; first non-finite parameter/grad: {culprit}")
    clip_grad_norm(w, state.train_cfg.clip_norm)
    state.optimizer.step(w, lr_at(state.train_cfg, t), t)
    state.iteration = t + 1
    state.history.append(value)
    return state, value


def sample_batch(pairs, cfg: TrainConfig, scale: int, t: int, dtype=np.float64):
    """Deterministic batch for iteration t: crops and augmentations drawn from rng(seed, t).

    ``pairs`` holds (hr, lr) ImageBuffers. Returns float (lr, hr) CHW arrays.
    """
    rng = np.random.default_rng([cfg.seed, t])
    batch = []
    for _ in range(cfg.batch_size):
        hr, lr = pairs[int(rng.integers(0, len(pairs)))]
        patch = min(cfg.patch, lr.height, lr.width)
        y, x = sample_origin((lr.height, lr.width), patch, rng)
        lr_p = lr.crop(y, x, patch, patch).to_float(dtype)
        hr_p = hr.crop(scale * y, scale * x, scale * patch, scale * patch).to_float(dtype)
        batch.append(augment((lr_p, hr_p), rng, axes=(1, 2)))
    return batch


def run_training(state: TrainState, pairs, n_steps: int | None = None, log=None, on_checkpoint=None):
    """Train until total_iters (or n_steps more). ``log(line)`` receives ``iter<TAB>loss<TAB>lr``."""
    cfg = state.train_cfg
    end = cfg.total_iters if n_steps is None else min(cfg.total_iters, state.iteration + n_steps)
    while state.iteration < end:
        t = state.iteration
        batch = sample_batch(pairs, cfg, state.model_cfg.scale, t, state.weights["shallow.weight"].dtype)
        _, loss = train_step(state, batch)
        if log is not None:
            log(f"{t}\t{loss!r}\t{lr_at(cfg, t)!r}")
        if on_checkpoint is not None and state.iteration % cfg.checkpoint_every == 0:
            on_checkpoint(state)
    return state
