"""memderain command line: gen-data, train, derain, eval, inspect-memory.

Exit codes: 0 success, 1 usage error, 2 I/O error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import synth
from .errors import CheckpointError, ContractError, DimensionError, NumericError

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("memderain")


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# gen-data
# --------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise InputError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise InputError(f"{out} is not empty; pass --force to overwrite")
        for d in synth.scene_dirs(out):
            shutil.rmtree(d)
    if args.frames < 2:
        raise UsageError(f"--frames must be at least 2 for pair sampling, got {args.frames}")
    if args.scenes < 1:
        raise UsageError("--scenes must be at least 1")
    params = synth.RainParams(density=args.density, length_px=args.length, width_px=args.width,
                              angle_deg=args.angle, intensity=args.intensity, jitter=args.jitter)
    for scene in synth.gen_dataset(args.scenes, args.frames, args.size, args.seed, params):
        d = synth.write_scene(out, scene)
        psnr_in = np.mean([_psnr(f, scene.background) for f in scene.frames])
        print(f"{d.name}: {scene.T} frames {args.size}x{args.size} seed={scene.seed} "
              f"rain_fraction={np.mean(scene.rain_layers > 0):.4f} input_psnr={psnr_in:.2f}dB")
    return EXIT_OK


def _psnr(a, b):
    from .metrics import psnr
    return psnr(a, b)


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------

_TRAIN_FLAGS = {  # flag dest -> config key
    "steps": "total_steps", "batch_size": "batch_size", "lr0": "lr0", "seed": "seed",
    "memory_items": "memory_items", "dtype": "dtype",
    "lambda_b": "lambda_b", "lambda_s": "lambda_s", "lambda_c": "lambda_c", "lambda_w": "lambda_w",
    "base_channels": "base_channels", "query_channels": "query_channels",
}


def resolve_train_configs(args, image_size: int):
    """Defaults, then the --config file, then explicit flags."""
    from .train import build_configs, parse_config_text

    overrides = {"input_size": str(image_size)}
    if args.config:
        overrides.update(parse_config_text(Path(args.config).read_text()))
    if args.no_memory:
        overrides["use_memory"] = "false"
    for dest, key in _TRAIN_FLAGS.items():
        v = getattr(args, dest, None)
        if v is not None:
            overrides[key] = str(v)
    return build_configs(overrides)


def cmd_train(args) -> int:
    from .train import (MetricsWriter, TimeLapseDataset, TrainState, echo_header, load_state,
                        save_state, train)

    data = Path(args.data)
    if not data.is_dir():
        raise FileNotFoundError(f"dataset directory {data} not found")
    dataset = TimeLapseDataset.from_dir(data)
    if args.resume:
        state, model_cfg, cfg = load_state(args.resume)
        if args.steps is not None:
            from dataclasses import replace
            cfg = replace(cfg, total_steps=args.steps)
    else:
        model_cfg, cfg = resolve_train_configs(args, dataset.image_size)
        state = TrainState.fresh(model_cfg, cfg)
    out = Path(args.out)
    metrics = Path(args.metrics) if args.metrics else out.with_suffix(".csv")
    print(f"# config {echo_header(model_cfg, cfg)}")
    w = cfg.weights
    print(f"# lambda_b={w.lambda_b} lambda_s={w.lambda_s} lambda_c={w.lambda_c} lambda_w={w.lambda_w}")
    if state.step >= cfg.total_steps:
        print(f"# checkpoint already at step {state.step} of {cfg.total_steps}; nothing to do")
    with MetricsWriter(metrics, append=bool(args.resume)) as writer:
        try:
            for step, lr, report in train(dataset, model_cfg, cfg, state):
                writer.write(step, lr, report)
                if step % args.log_every == 0 or step == cfg.total_steps:
                    print(f"step {step:5d} lr {lr:.3e} total {report.total:.6f} L_b {report.loss_b:.6f} "
                          f"L_s {report.loss_s:.6f} L_c {report.loss_c:.6f} L_w {report.loss_w:.3e}",
                          flush=True)
                if args.save_every and step % args.save_every == 0 and step != cfg.total_steps:
                    save_state(out.with_name(f"{out.stem}_step{step:06d}{out.suffix}"), state, model_cfg, cfg)
        finally:
            save_state(out, state, model_cfg, cfg)
    print(f"saved {out} at step {state.step}; metrics in {metrics}")
    return EXIT_OK


# --------------------------------------------------------------------------
# derain / eval / inspect-memory
# --------------------------------------------------------------------------

def _load_image_for(path, model_cfg) -> np.ndarray:
    img = synth.load_png(path)
    if img.shape[1:] != (model_cfg.input_size, model_cfg.input_size):
        raise InputError(f"{path} is {img.shape[2]}x{img.shape[1]}, the checkpoint expects "
                         f"{model_cfg.input_size}x{model_cfg.input_size}")
    return img


def cmd_derain(args) -> int:
    from .model import derain
    from .train import load_state

    state, model_cfg, _ = load_state(args.ckpt)
    img = _load_image_for(args.input, model_cfg)
    dtype = next(iter(state.params.values())).dtype
    x = img.astype(dtype)
    out = derain(x, state.memory, model_cfg, state.params)
    bg = out.derained(x)[0]
    # written rain layer is what was actually removed, so bg + rain == input up to quantization
    rain = np.clip(img - bg, -1.0, 1.0)
    synth.save_png(args.out_bg, bg)
    synth.save_png(args.out_rain, rain)
    print(f"wrote {args.out_bg} and {args.out_rain}")
    return EXIT_OK


def _scenes_with_backgrounds(root):
    dirs = synth.scene_dirs(root)
    if not dirs:
        raise FileNotFoundError(f"no scene_* directories under {root}")
    for d in dirs:
        if not (d / "background.png").exists():
            raise FileNotFoundError(f"{d / 'background.png'} missing; eval needs ground-truth backgrounds")
    for d in dirs:
        yield d.name, synth.load_frames(d), synth.load_background(d)


EVAL_COLUMNS = ["scene_id", "frame_id", "psnr_db", "ssim", "input_psnr_db", "input_ssim"]


def cmd_eval(args) -> int:
    from .metrics import evaluate, summarize

    data = Path(args.data)
    if not data.is_dir():
        raise FileNotFoundError(f"dataset directory {data} not found")
    if args.baseline_only:
        rows = evaluate(_scenes_with_backgrounds(data), baseline_only=True)
    else:
        if not args.ckpt:
            raise UsageError("eval needs --ckpt unless --baseline-only is given")
        from .train import load_state
        state, model_cfg, _ = load_state(args.ckpt)
        rows = evaluate(_scenes_with_backgrounds(data), model_cfg, state.params, state.memory)
    summary = summarize(rows)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(EVAL_COLUMNS)
        for r in rows:
            w.writerow([r.scene_id, r.frame_id] + [repr(float(getattr(r, k))) for k in EVAL_COLUMNS[2:]])
        w.writerow(["mean", ""] + [repr(summary[k]) for k in EVAL_COLUMNS[2:]])
    print(f"{len(rows)} frames: psnr {summary['psnr_db']:.3f} dB (input {summary['input_psnr_db']:.3f} dB), "
          f"ssim {summary['ssim']:.4f} (input {summary['input_ssim']:.4f})")
    return EXIT_OK


def cmd_inspect_memory(args) -> int:
    from .metrics import export_attention_maps
    from .train import load_state

    state, model_cfg, _ = load_state(args.ckpt)
    img = _load_image_for(args.input, model_cfg)
    dtype = next(iter(state.params.values())).dtype
    paths = export_attention_maps(model_cfg, state.params, state.memory, img.astype(dtype), args.out)
    for m, norm in enumerate(state.memory.norms()):
        print(f"item {m:03d} norm {norm:.6f}")
    print(f"wrote {len(paths)} attention maps to {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="memderain", description="Memory-guided single-image de-raining on synthetic time-lapse data.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="write a synthetic time-lapse dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, default=8)
    g.add_argument("--frames", type=int, default=8)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    d = synth.RainParams()
    g.add_argument("--density", type=float, default=d.density, help="streaks per pixel")
    g.add_argument("--length", type=float, default=d.length_px)
    g.add_argument("--width", type=float, default=d.width_px)
    g.add_argument("--angle", type=float, default=d.angle_deg, help="degrees from vertical")
    g.add_argument("--intensity", type=float, default=d.intensity)
    g.add_argument("--jitter", type=float, default=d.jitter, help="per-frame relative parameter jitter")
    g.add_argument("--force", action="store_true", help="overwrite an existing dataset")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model; flags > --config file > defaults",
                       description="Values are taken from explicit flags first, then the key=value "
                                   "--config file, then built-in defaults.")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--metrics", help="metrics CSV (default: checkpoint path with .csv)")
    t.add_argument("--config", help="flat key=value file")
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr0", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--memory-items", type=int)
    t.add_argument("--dtype", choices=["float32", "float64"])
    t.add_argument("--base-channels", type=int)
    t.add_argument("--query-channels", type=int)
    for name in ("b", "s", "c", "w"):
        t.add_argument(f"--lambda-{name}", type=float)
    t.add_argument("--no-memory", action="store_true", help="replace the memory read by zeros")
    t.add_argument("--save-every", type=int, default=0)
    t.add_argument("--log-every", type=int, default=10)
    t.add_argument("--resume", help="continue from a training checkpoint")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("derain", help="de-rain one PNG")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--in", dest="input", required=True)
    r.add_argument("--out-bg", required=True)
    r.add_argument("--out-rain", required=True)
    r.set_defaults(func=cmd_derain)

    e = sub.add_parser("eval", help="PSNR/SSIM against ground-truth backgrounds")
    e.add_argument("--ckpt")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--baseline-only", action="store_true", help="score the rainy inputs themselves")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("inspect-memory", help="export memory attention maps and item norms")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--in", dest="input", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_inspect_memory)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ContractError) as exc:
        print(f"memderain {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, CheckpointError, DimensionError, OSError) as exc:
        print(f"memderain {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"memderain {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
