"""``himosa`` command-line entry point."""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ModelConfig, load_config
from .data import ImageBuffer, load_image, load_manifest, save_image
from .errors import HimosaError
from .metrics import psnr, ssim
from .model import super_resolve, himosa_forward
from . import tensor as T

REPORTED_TOTAL_GFLOPS = 139.58
REPORTED_PARAMS_M = 3.26
SELECTION_REFERENCE = (("content_aware", 30.80), ("random", 30.74), ("sequential", 30.73))


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"size must be positive, got {text!r}")
    return h, w


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="himosa", description="Sparse-attention image super-resolution toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model from a manifest")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume")

    s = sub.add_parser("sr", help="super-resolve one image")
    s.add_argument("--config", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--scale", type=int)

    e = sub.add_parser("eval", help="PSNR/SSIM over a manifest")
    e.add_argument("--config", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)

    f = sub.add_parser("flops", help="parameter and FLOP report")
    f.add_argument("--config", required=True)
    f.add_argument("--size", type=_parse_size, default=(256, 256))

    a = sub.add_parser("ablate", help="train and compare configuration variants")
    a.add_argument("--config", required=True)
    a.add_argument("--sweep", required=True, choices=("sparsity", "experts", "selection"))
    a.add_argument("--data", required=True)

    c = sub.add_parser("check", help="run the verification suites")
    c.add_argument("--suite", choices=("grad", "oracle", "all"), default="all")

    r = sub.add_parser("routes", help="dump per-expert token selection masks")
    r.add_argument("--config", required=True)
    r.add_argument("--ckpt", required=True)
    r.add_argument("--in", dest="inp", required=True)
    r.add_argument("--out", required=True)
    return p


# -- commands ---------------------------------------------------------------------------

def _load_model(config: str, ckpt: str):
    model_cfg, _ = load_config(config)
    state = load_checkpoint(ckpt, model_cfg)
    return model_cfg, state.weights


def cmd_train(args) -> int:
    from .train import new_state, run_training

    model_cfg, train_cfg = load_config(args.config)
    pairs = load_manifest(args.data, model_cfg.scale).load_pairs()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        state = load_checkpoint(args.resume, model_cfg)
        # the config file's schedule governs the continuation
        state.train_cfg = train_cfg
        mode = "a"
    else:
        state = new_state(model_cfg, train_cfg)
        mode = "w"

    def on_checkpoint(st):
        save_checkpoint(st, out / f"ckpt_{st.iteration:06d}.himo")

    with open(out / "train.log", mode, encoding="utf-8") as log:
        def write(line):
            log.write(line + "\n")
            log.flush()
        run_training(state, pairs, log=write, on_checkpoint=on_checkpoint)
    save_checkpoint(state, out / "final.himo")
    last = state.history[-1] if state.history else float("nan")
    print(f"trained to iteration {state.iteration}; last loss {last:.6g}; outputs in {out}")
    return 0


def cmd_sr(args) -> int:
    model_cfg, weights = _load_model(args.config, args.ckpt)
    if args.scale is not None and args.scale != model_cfg.scale:
        raise HimosaError(f"--scale {args.scale} does not match the model scale {model_cfg.scale}")
    img = load_image(args.inp)
    sr = super_resolve(img.to_float(weights["shallow.weight"].dtype), model_cfg, weights)
    save_image(ImageBuffer.from_float(sr), args.out)
    return 0


def _evaluate(model_cfg: ModelConfig, weights, pairs):
    rows = []
    for hr, lr in pairs:
        sr = ImageBuffer.from_float(super_resolve(lr.to_float(weights["shallow.weight"].dtype), model_cfg, weights))
        rows.append((psnr(sr.data, hr.data, model_cfg.scale), ssim(sr.data, hr.data, model_cfg.scale)))
    return rows


def _fmt_psnr(v: float) -> str:
    return "inf" if v == float("inf") else f"{v:.4f}"


def cmd_eval(args) -> int:
    model_cfg, weights = _load_model(args.config, args.ckpt)
    manifest = load_manifest(args.data, model_cfg.scale)
    rows = _evaluate(model_cfg, weights, manifest.load_pairs())
    print("image\tpsnr\tssim")
    for (hr_path, _), (p, s) in zip(manifest.entries, rows):
        print(f"{hr_path.name}\t{_fmt_psnr(p)}\t{s:.6f}")
    print(f"mean\t{_fmt_psnr(float(np.mean([p for p, _ in rows])))}\t{float(np.mean([s for _, s in rows])):.6f}")
    return 0


def cmd_flops(args) -> int:
    from .profiler import attention_quadratic_flops, count_flops, count_params
    from .model import k_schedule, window_size_schedule

    model_cfg, _ = load_config(args.config)
    h, w = args.size
    rep = count_flops(model_cfg, h, w)
    sys.stdout.write(rep.to_text())
    print(f"# params {rep.params / 1e6:.3f}M (closed form {count_params(model_cfg) / 1e6:.3f}M); "
          f"reference {REPORTED_PARAMS_M}M")
    print(f"# flops {rep.flops / 1e9:.2f}G at {h}x{w} (padded {rep.padded_hw[0]}x{rep.padded_hw[1]}); "
          f"reference {REPORTED_TOTAL_GFLOPS}G; 2 FLOPs per multiply-accumulate")
    print(f"# dense-attention flops {rep.dense_attention_flops / 1e9:.2f}G")
    last = model_cfg.n_layers - 1
    ws = window_size_schedule(model_cfg, last)
    n = ws * ws
    k = k_schedule(model_cfg, last, n)
    ratio = attention_quadratic_flops(k, model_cfg.d_expert, model_cfg.n_experts) / \
        attention_quadratic_flops(n, model_cfg.d_expert, model_cfg.n_experts)
    print(f"# last layer ws={ws} n={n} k={k}: quadratic attention term {ratio:.6f} of dense")
    return 0


def _sweep_variants(sweep: str, cfg: ModelConfig) -> list[tuple[str, ModelConfig]]:
    if sweep == "selection":
        return [(s, cfg.replace(selection_strategy=s)) for s in ("content_aware", "random", "sequential")]
    if sweep == "experts":
        counts = sorted({1, max(1, cfg.n_experts // 2), cfg.n_experts, 2 * cfg.n_experts})
        return [(f"experts={m}", cfg.replace(n_experts=m)) for m in counts]
    variants = [("dense", cfg.replace(sparsity=(1,) * cfg.n_layers)),
                ("configured", cfg),
                ("sparser", cfg.replace(sparsity=tuple(2 * s for s in cfg.sparsity)))]
    seen, unique = set(), []
    for name, v in variants:
        if v.sparsity not in seen:
            seen.add(v.sparsity)
            unique.append((f"{name} rho={','.join(map(str, v.sparsity))}", v))
    return unique


def cmd_ablate(args) -> int:
    from .train import new_state, run_training

    model_cfg, train_cfg = load_config(args.config)
    pairs = load_manifest(args.data, model_cfg.scale).load_pairs()
    print(f"variant\tfinal_loss\tpsnr\tssim\t(iters={train_cfg.total_iters})")
    for name, cfg in _sweep_variants(args.sweep, model_cfg):
        cfg.validate()
        state = run_training(new_state(cfg, train_cfg), pairs)
        rows = _evaluate(cfg, state.weights, pairs)
        p = float(np.mean([r[0] for r in rows]))
        s = float(np.mean([r[1] for r in rows]))
        print(f"{name}\t{state.history[-1]:.6f}\t{_fmt_psnr(p)}\t{s:.6f}")
    if args.sweep == "selection":
        ref = " > ".join(f"{n} {v:.2f}" for n, v in SELECTION_REFERENCE)
        print(f"# full-scale reference (x4 PSNR, not a gate at this budget): {ref}")
    return 0


def cmd_check(args) -> int:
    from .checks import run_suite

    reports = run_suite(args.suite)
    for r in reports:
        print(r.line())
    failed = [r.op for r in reports if not r.passed]
    print(f"# {len(reports) - len(failed)}/{len(reports)} passed")
    return 1 if failed else 0


def route_masks(model_cfg: ModelConfig, weights, lr: ImageBuffer):
    """Yield (block, layer, expert, bool mask (h, w)) for the LR-resolution token grid."""
    record: list = []
    with T.no_grad():
        himosa_forward(lr.to_float(weights["shallow.weight"].dtype), model_cfg, weights, record=record)
    h, w = lr.height, lr.width
    for entry in record:
        layout, idx = entry["layout"], entry["indices"]
        ws = layout.window_size
        gh, gw = layout.grid
        for e in range(idx.shape[1]):
            sel = np.zeros((gh * gw, ws * ws), dtype=bool)
            np.put_along_axis(sel, idx[:, e, :], True, axis=1)
            full = sel.reshape(gh, gw, ws, ws).transpose(0, 2, 1, 3).reshape(gh * ws, gw * ws)
            yield entry["block"], entry["layer"], e, full[:h, :w]


def render_mask(lr: ImageBuffer, mask: np.ndarray) -> ImageBuffer:
    luma = lr.data.astype(np.float64) @ np.array([0.299, 0.587, 0.114])
    rgb = np.repeat(luma[..., None], 3, axis=2)
    red = np.array([255.0, 0.0, 0.0])
    rgb[mask] = 0.5 * rgb[mask] + 0.5 * red
    return ImageBuffer.from_array(np.clip(np.floor(rgb + 0.5), 0, 255).astype(np.uint8))


def cmd_routes(args) -> int:
    model_cfg, weights = _load_model(args.config, args.ckpt)
    lr = load_image(args.inp)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    count = 0
    for b, layer, e, mask in route_masks(model_cfg, weights, lr):
        save_image(render_mask(lr, mask), out / f"b{b}_l{layer}_e{e}.png")
        count += 1
    print(f"wrote {count} masks to {out}")
    return 0


COMMANDS = {"train": cmd_train, "sr": cmd_sr, "eval": cmd_eval, "flops": cmd_flops,
            "ablate": cmd_ablate, "check": cmd_check, "routes": cmd_routes}


def _threads() -> int | None:
    raw = os.environ.get("HIMOSA_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise HimosaError(f"HIMOSA_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise HimosaError(f"HIMOSA_THREADS must be >= 0, got {n}")
    return n or None


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        with threadpool_limits(limits=_threads()):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"himosa: error: {exc}", file=sys.stderr)
        return 2
    except (HimosaError, ValueError, OSError, FloatingPointError) as exc:
        msg = " ".join(str(exc).split())
        print(f"himosa: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
