"""Command-line entry point: summary, gendata, train, infer, eval, bench."""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .backbone import ConfigError
from .cost import analyze, emit_report
from .dataio import (
    DEFAULT_MEAN,
    CheckpointError,
    DataError,
    ParseError,
    generate_toy_dataset,
    load_checkpoint,
    load_image_ppm,
    mean_from_config,
    pad_to_multiple,
    quantize,
    read_dataset,
    read_meta,
    save_checkpoint,
    save_mask_ppm,
    write_dataset,
)
from .model import DFANet, build_dfanet
from .ops import LabelError
from .tensor import ContractError, NonFiniteError, ShapeError, Tensor, deterministic, no_grad
from .training import (
    TrainConfig,
    TrainingDiverged,
    evaluate,
    log_csv,
    predict,
    scaled_lr,
    train_loop,
)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


# Per-command defaults; also the set of keys a config file may set.
DEFAULTS: Dict[str, Dict[str, str]] = {
    "summary": {"variant": "A", "backbones": "3", "input": "1024x1024", "classes": "19",
                "format": "table", "part": "auto"},
    "gendata": {"out": "toy_data", "count": "128", "size": "64", "classes": "4", "seed": "0"},
    "train": {"data": "toy_data", "out": "model.dfac", "metrics": "metrics.csv", "variant": "B",
              "backbones": "2", "classes": "", "batch": "8", "iters": "500", "lr": "auto",
              "momentum": "0.9", "weight_decay": "1e-5", "power": "0.9", "crop": "64x64",
              "scale": "0.75,1.75", "hflip": "0.5", "eval_every": "0", "seed": "0",
              "attention_sigmoid": "1", "mean": ",".join(str(v) for v in DEFAULT_MEAN)},
    "infer": {"checkpoint": "model.dfac", "image": "", "out": "mask.ppm"},
    "eval": {"checkpoint": "model.dfac", "data": "toy_data", "batch": "8"},
    "bench": {"variant": "A", "backbones": "3", "input": "512x512", "classes": "19",
              "iters": "30", "warmup": "3", "seed": "0"},
}


def parse_hw(text: str) -> tuple:
    parts = str(text).lower().split("x")
    try:
        h, w = (int(p) for p in parts)
    except ValueError:
        raise UsageError(f"geometry must look like HxW, got {text!r}") from None
    if h <= 0 or w <= 0:
        raise UsageError(f"geometry must be positive, got {text!r}")
    return h, w


def parse_floats(text: str, count: int, what: str) -> tuple:
    try:
        vals = tuple(float(v) for v in str(text).split(","))
    except ValueError:
        raise UsageError(f"{what} must be {count} comma-separated numbers, got {text!r}") from None
    if len(vals) != count:
        raise UsageError(f"{what} must be {count} comma-separated numbers, got {text!r}")
    return vals


def read_config_file(path) -> Dict[str, str]:
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def resolve(command: str, flags: Dict[str, Optional[str]], config_path=None) -> Dict[str, str]:
    """Defaults, overlaid by the config file, overlaid by explicit flags."""
    cfg = dict(DEFAULTS[command])
    if config_path:
        for k, v in read_config_file(config_path).items():
            if k not in cfg:
                raise UsageError(f"unknown config key {k!r} for '{command}'")
            cfg[k] = v
    for k, v in flags.items():
        if v is not None:
            cfg[k] = str(v)
    return cfg


def _int(cfg, key) -> int:
    try:
        return int(cfg[key])
    except ValueError:
        raise UsageError(f"{key} must be an integer, got {cfg[key]!r}") from None


def _float(cfg, key) -> float:
    try:
        return float(cfg[key])
    except ValueError:
        raise UsageError(f"{key} must be a number, got {cfg[key]!r}") from None


def print_config(command: str, cfg: Dict[str, str], stream) -> None:
    print(f"# {command}: " + " ".join(f"{k}={v}" for k, v in cfg.items()), file=stream)


def apply_threads(threads: Optional[int]) -> Optional[int]:
    """Limit BLAS worker threads from ``--threads`` or ``DFA_THREADS``."""
    if threads is None:
        env = os.environ.get("DFA_THREADS")
        if env:
            try:
                threads = int(env)
            except ValueError:
                raise UsageError(f"DFA_THREADS must be an integer, got {env!r}") from None
    if threads is not None:
        if threads <= 0:
            raise UsageError("thread count must be positive")
        from threadpoolctl import threadpool_limits
        threadpool_limits(threads)
    return threads


# --- commands ----------------------------------------------------------------

def cmd_summary(cfg, out) -> int:
    spec = build_dfanet(cfg["variant"], _int(cfg, "backbones"), _int(cfg, "classes"))
    hw = parse_hw(cfg["input"])
    part = cfg["part"]
    if part == "auto":
        part = "backbone" if spec.num_backbones == 1 else "model"
    if part == "backbone":
        spec.check_input(*hw)
        report = analyze(spec.backbones[0], hw)
    elif part == "encoder":
        report = analyze(spec, hw, include_decoder=False)
    elif part == "model":
        report = analyze(spec, hw)
    else:
        raise UsageError(f"part must be auto, model, encoder or backbone; got {part!r}")
    if cfg["format"] not in ("table", "csv"):
        raise UsageError(f"format must be table or csv, got {cfg['format']!r}")
    out.write(emit_report(report, cfg["format"]))
    return EXIT_OK


def cmd_gendata(cfg, out) -> int:
    count, size, k, seed = (_int(cfg, key) for key in ("count", "size", "classes", "seed"))
    if count <= 0 or size <= 0:
        raise UsageError("count and size must be positive")
    samples = [quantize(s) for s in generate_toy_dataset(seed, count, size, k)]
    write_dataset(samples, cfg["out"], k)
    print(f"wrote {count} samples of {size}x{size} ({k} classes) to {cfg['out']}", file=out)
    return EXIT_OK


def train_config(cfg) -> TrainConfig:
    return TrainConfig(
        batch_size=_int(cfg, "batch"), momentum=_float(cfg, "momentum"),
        weight_decay=_float(cfg, "weight_decay"),
        base_lr=scaled_lr(_int(cfg, "batch")) if cfg["lr"] == "auto" else _float(cfg, "lr"),
        power=_float(cfg, "power"), max_iter=_int(cfg, "iters"), crop=parse_hw(cfg["crop"]),
        seed=_int(cfg, "seed"), eval_every=_int(cfg, "eval_every"),
        hflip_prob=_float(cfg, "hflip"), scale_range=parse_floats(cfg["scale"], 2, "scale"),
        mean=parse_floats(cfg["mean"], 3, "mean"))


def cmd_train(cfg, out) -> int:
    samples = read_dataset(cfg["data"])
    k = _int(cfg, "classes") if cfg["classes"] else int(read_meta(cfg["data"]).get("num_classes", 0))
    if not k:
        raise UsageError("number of classes unknown: pass --classes")
    tc = train_config(cfg)
    spec = build_dfanet(cfg["variant"], _int(cfg, "backbones"), k,
                        attention_sigmoid=bool(_int(cfg, "attention_sigmoid")))
    spec.check_input(*tc.crop)
    model = DFANet(spec, seed=tc.seed)
    start = time.perf_counter()

    def report(entry):
        if entry.iteration % 50 == 0 or entry.iteration + 1 == tc.max_iter or entry.miou is not None:
            extra = "" if entry.miou is None else f" miou={entry.miou:.4f}"
            print(f"iter {entry.iteration:5d} lr={entry.lr:.5f} loss={entry.loss:.4f}{extra} "
                  f"({time.perf_counter() - start:.1f}s)", file=out, flush=True)

    _, log = train_loop(model, samples, tc, num_classes=k, callback=report)
    save_checkpoint(model, cfg["out"], {"mean": cfg["mean"], "iterations": str(tc.max_iter)})
    Path(cfg["metrics"]).write_text(log_csv(log))
    print(f"saved {cfg['out']} and {cfg['metrics']}", file=out)
    return EXIT_OK


def cmd_infer(cfg, out) -> int:
    if not cfg["image"]:
        raise UsageError("--image is required")
    model, config = load_checkpoint(cfg["checkpoint"])
    model.eval()
    img = load_image_ppm(cfg["image"])
    padded, (h, w) = pad_to_multiple(img, model.spec.input_multiple)
    with deterministic(True):
        classes = predict(model, padded, mean_from_config(config))[0, :h, :w]
    save_mask_ppm(classes, cfg["out"], model.spec.num_classes)
    print(f"wrote {w}x{h} mask to {cfg['out']}", file=out)
    return EXIT_OK


def cmd_eval(cfg, out) -> int:
    model, config = load_checkpoint(cfg["checkpoint"])
    k = model.spec.num_classes
    samples = read_dataset(cfg["data"], k)
    with deterministic(True):
        ious, miou, _ = evaluate(model, samples, k, mean_from_config(config), _int(cfg, "batch"))
    for c, v in enumerate(ious):
        print(f"class {c:2d} iou={'n/a' if v is None else f'{v:.4f}'}", file=out)
    print(f"mIoU {'n/a' if miou is None else f'{miou:.4f}'}", file=out)
    return EXIT_OK


def bench_stats(times_ms: Sequence[float]) -> Dict[str, float]:
    arr = np.asarray(times_ms, np.float64)
    mean = float(arr.mean())
    return {"mean_ms": mean, "median_ms": float(np.median(arr)),
            "p95_ms": float(np.percentile(arr, 95)), "fps": 1000.0 / mean, "iters": len(arr)}


def run_bench(variant: str, backbones: int, hw, classes: int = 19, iters: int = 30,
              warmup: int = 3, seed: int = 0) -> Dict[str, float]:
    """Latency of eval-mode forwards on seeded random input."""
    if iters <= 0 or warmup < 0:
        raise UsageError("iters must be positive and warmup non-negative")
    spec = build_dfanet(variant, backbones, classes)
    spec.check_input(*hw)
    model = DFANet(spec, seed=seed).eval()
    x = Tensor(np.random.default_rng(seed).standard_normal((1, 3, *hw)).astype(np.float32))
    times = []
    with no_grad():
        for i in range(warmup + iters):
            t0 = time.perf_counter()
            model(x)
            dt = (time.perf_counter() - t0) * 1000.0
            if i >= warmup:
                times.append(dt)
    return bench_stats(times)


def cmd_bench(cfg, out) -> int:
    stats = run_bench(cfg["variant"], _int(cfg, "backbones"), parse_hw(cfg["input"]),
                      _int(cfg, "classes"), _int(cfg, "iters"), _int(cfg, "warmup"),
                      _int(cfg, "seed"))
    print(f"iters={stats['iters']} mean_ms={stats['mean_ms']:.3f} median_ms={stats['median_ms']:.3f} "
          f"p95_ms={stats['p95_ms']:.3f} fps={stats['fps']:.3f}", file=out)
    return EXIT_OK


COMMANDS = {"summary": cmd_summary, "gendata": cmd_gendata, "train": cmd_train,
            "infer": cmd_infer, "eval": cmd_eval, "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dfanet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, defaults in DEFAULTS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="file of key=value lines overlaid on the defaults")
        p.add_argument("--threads", type=int, help="BLAS worker threads (fallback: DFA_THREADS)")
        for key, default in defaults.items():
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None,
                           help=f"default: {default!r}" if default else None)
    return parser


def main(argv: Optional[List[str]] = None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    flags = {k: v for k, v in vars(args).items() if k in DEFAULTS[args.command]}
    try:
        apply_threads(args.threads)
        cfg = resolve(args.command, flags, args.config)
        print_config(args.command, cfg, stderr)
        return COMMANDS[args.command](cfg, stdout)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=stderr)
        return EXIT_NUMERIC
    except NonFiniteError as exc:
        print(f"error: {exc}", file=stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, ShapeError, ContractError, LabelError, ParseError,
            DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
