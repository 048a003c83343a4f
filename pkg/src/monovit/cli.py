"""Command-line front end: dataset generation, training, evaluation,
single-image inference, gradient verification, and throughput benchmarks.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
failure (non-finite loss or a failed gradient check).

Run configs are line-oriented ``key=value`` text under ``[section]``
headers; see `default_run_config` for every key and its default.  Unknown
sections or keys are rejected so a typo cannot silently fall back to a
default.  BLAS threading is capped at entry from MONOVIT_THREADS
(default 1) — single-threaded kernels keep every command bit-reproducible.
"""

import argparse
import csv
import os
import sys
import time

import numpy as np
import threadpoolctl

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import CheckpointError
from .encoder import EncoderConfig
from .geometry import DepthRange, disp_to_depth
from .gradcheck import run_cases
from .metrics import (MetricsReport, compute_metrics, format_table,
                      mean_report, median_scale)
from .synthdata import (Triplet, default_intrinsics, load_dataset,
                        make_dataset, read_ppm, write_pfm)
from .trainer import (AdamW, NumericError, TrainConfig, build_models, fit,
                      load_models, param_groups, train_step)


class UsageError(Exception):
    """Bad flags or a bad config file; maps to exit code 1."""


# ---------------------------------------------------------------- run config

def _to_int(text):
    return int(text)


def _to_float(text):
    return float(text)


def _to_bool(text):
    lowered = text.strip().lower()
    table = {"true": True, "false": False, "1": True, "0": False,
             "yes": True, "no": False}
    if lowered not in table:
        raise ValueError(f"expected a boolean, got {text!r}")
    return table[lowered]


def _to_ints(text):
    return tuple(int(part) for part in text.split(","))


def _to_size(text):
    h, sep, w = text.lower().partition("x")
    if not sep:
        raise ValueError(f"expected HxW, got {text!r}")
    return (int(h), int(w))


# (section, key) -> (converter, destination field)
_SCHEMA = {
    ("train", "data_dir"): (str, "data_dir"),
    ("train", "out_dir"): (str, "out_dir"),
    ("train", "epochs"): (_to_int, "epochs"),
    ("train", "batch_size"): (_to_int, "batch_size"),
    ("train", "lr_posenet_decoder"): (_to_float, "lr_posenet_decoder"),
    ("train", "lr_encoder"): (_to_float, "lr_encoder"),
    ("train", "seed"): (_to_int, "seed"),
    ("train", "lambda_smooth"): (_to_float, "lambda_smooth"),
    ("train", "ssim_alpha"): (_to_float, "ssim_alpha"),
    ("train", "checkpoint_every"): (_to_int, "checkpoint_every"),
    ("train", "clip_grad"): (_to_float, "clip_grad"),
    ("depth", "d_min"): (_to_float, "d_min"),
    ("depth", "d_max"): (_to_float, "d_max"),
    ("encoder", "stage_channels"): (_to_ints, "stage_channels"),
    ("encoder", "transformer_layers"): (_to_ints, "transformer_layers"),
    ("encoder", "num_transformer_paths"): (_to_int, "num_transformer_paths"),
    ("encoder", "use_conv_path"): (_to_bool, "use_conv_path"),
    ("encoder", "attention_heads"): (_to_int, "attention_heads"),
    ("encoder", "input_size"): (_to_size, "input_size"),
}


def default_run_config() -> str:
    """Commented template listing every recognized key with its default."""
    return """\
# monovit run config: key=value lines under [section] headers.
# Omitted keys keep the defaults shown; unknown keys are an error.

[train]
data_dir=                    # dataset directory (required for train)
out_dir=                     # checkpoints + log land here (required for train)
epochs=10
batch_size=2
lr_posenet_decoder=1e-4
lr_encoder=5e-5              # must not exceed lr_posenet_decoder
seed=0
lambda_smooth=1e-3
ssim_alpha=0.85
checkpoint_every=50          # steps between snapshots; 0 = final only
clip_grad=0                  # global-norm threshold; 0 disables

[depth]
d_min=0.1
d_max=100.0

[encoder]
stage_channels=32,48,64,96,128
transformer_layers=1,1,1,1
num_transformer_paths=3
use_conv_path=true
attention_heads=2
input_size=64x64             # train overrides this from the dataset
"""


def parse_run_config(path) -> TrainConfig:
    """Read a run config file into a TrainConfig (encoder nested inside).

    Every failure mode here — missing file, unknown key, malformed value,
    inconsistent fields — is a UsageError: the config is user input.
    """
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as e:
        raise UsageError(f"cannot read config: {e}") from None

    values: dict = {}
    section = None
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if not any(s == section for s, _ in _SCHEMA):
                raise UsageError(f"{path}:{lineno}: unknown section [{section}]")
            continue
        key, sep, text = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key = key.strip()
        text = text.split("#", 1)[0].strip()
        if section is None:
            raise UsageError(f"{path}:{lineno}: key {key!r} before any [section]")
        if (section, key) not in _SCHEMA:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r} in [{section}]")
        convert, dest = _SCHEMA[(section, key)]
        try:
            values[dest] = convert(text)
        except ValueError as e:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {e}") from None

    enc_fields = {dest for (sec, _), (_, dest) in _SCHEMA.items()
                  if sec == "encoder"}
    enc_kw = {k: v for k, v in values.items() if k in enc_fields}
    d_min = values.pop("d_min", 0.1)
    d_max = values.pop("d_max", 100.0)
    train_kw = {k: v for k, v in values.items()
                if k not in enc_fields and k not in ("d_min", "d_max")}
    for required in ("data_dir", "out_dir"):
        if not train_kw.get(required):
            raise UsageError(f"config must set train.{required}")
    try:
        return TrainConfig(depth_range=DepthRange(d_min, d_max),
                           encoder=EncoderConfig(**enc_kw), **train_kw)
    except ValueError as e:
        raise UsageError(f"inconsistent config: {e}") from None


# ---------------------------------------------------------------- helpers

def write_pgm(path, gray):
    """8-bit grayscale PGM from floats in [0,1]."""
    data = np.clip(np.rint(np.asarray(gray) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        f.write(data.tobytes())


def _predict_depth(models, target, drange):
    """Finest-scale disparity and depth for one [3,H,W] image."""
    with ad.no_grad():
        disp = models.decoder(models.encoder(Tensor(target[None])))[0]
        depth = disp_to_depth(disp, drange)
    return disp.data[0, 0], depth.data[0, 0]


def _check_image_size(models, shape, what):
    expect = tuple(models.encoder.cfg.input_size)
    if tuple(shape) != expect:
        raise ValueError(f"checkpoint expects {expect[0]}x{expect[1]} input, "
                         f"{what} is {shape[0]}x{shape[1]}")


# ---------------------------------------------------------------- commands

def cmd_gen(args) -> int:
    triplets, cert = make_dataset(args.out, seed=args.seed, n_triplets=args.n,
                                  size=args.size, motion=args.motion)
    print(f"wrote {len(triplets)} triplets to {args.out} "
          f"(certificate mean {cert:.3e})")
    return 0


def cmd_train(args) -> int:
    cfg = parse_run_config(args.config)
    models, ckpt_path = fit(cfg, resume=args.resume)
    n_params = sum(p.data.size for _, p in models.named_parameters())
    print(f"trained {cfg.epochs} epochs ({n_params} parameters)")
    print(f"checkpoint: {ckpt_path}")
    print(f"log: {os.path.join(cfg.out_dir, 'train_log.csv')}")
    return 0


def cmd_eval(args) -> int:
    models, drange, step = load_models(args.ckpt)
    triplets, _ = load_dataset(args.data)
    _check_image_size(models, triplets[0].target.shape[1:], "dataset")
    labels, reports = [], []
    for i, trip in enumerate(triplets):
        _, depth = _predict_depth(models, trip.target, drange)
        valid = np.ones(depth.shape, dtype=bool)
        scaled, _ = median_scale(depth, trip.gt_depth, valid)
        reports.append(compute_metrics(scaled, trip.gt_depth, valid, drange))
        labels.append(f"{i:04d}")
    mean = mean_report(reports)
    print(f"checkpoint step {step}, {len(reports)} images")
    print(format_table(reports + [mean], labels + ["mean"]))
    if args.out:
        with open(args.out, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["image", *MetricsReport.COLUMNS])
            for label, rep in zip(labels + ["mean"], reports + [mean]):
                writer.writerow([label] + [f"{v:.10g}" for v in rep.row()])
    return 0


def cmd_infer(args) -> int:
    models, drange, _ = load_models(args.ckpt)
    image = read_ppm(args.image)
    _check_image_size(models, image.shape[1:], "image")
    disp, depth = _predict_depth(models, image, drange)
    write_pfm(args.out, disp)
    print(f"disparity {disp.shape[1]}x{disp.shape[0]} -> {args.out} "
          f"(range {disp.min():.4f}..{disp.max():.4f}, "
          f"depth {depth.min():.2f}..{depth.max():.2f})")
    if args.attn:
        os.makedirs(args.attn, exist_ok=True)
        with ad.no_grad():
            pyramid = models.encoder(Tensor(image[None]))
        for stage, level in enumerate(pyramid, 1):
            act = level.data[0].mean(axis=0)      # channel-mean magnitude
            span = act.max() - act.min()
            gray = (act - act.min()) / span if span > 0 else np.zeros_like(act)
            out = os.path.join(args.attn, f"stage_{stage}.pgm")
            write_pgm(out, gray)
            print(f"stage {stage} activation {act.shape[1]}x{act.shape[0]} "
                  f"-> {out}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_cases(seed=args.seed, trials=args.trials)
    width = max(len(name) for name, _, _, _ in results)
    for name, err, tol, ok in results:
        status = "PASS" if ok else "FAIL"
        print(f"{status}  {name:<{width}}  max_rel_err={err:.3e}  tol={tol:.0e}")
    failures = [name for name, _, _, ok in results if not ok]
    if failures:
        print(f"gradcheck failed: {', '.join(failures)}", file=sys.stderr)
        return 3
    print(f"all {len(results)} cases passed ({args.trials} trials each)")
    return 0


def cmd_bench(args) -> int:
    cfg = parse_run_config(args.config)
    models = build_models(cfg)
    n_params = sum(p.data.size for _, p in models.named_parameters())
    h, w = cfg.encoder.input_size
    rng = np.random.default_rng(cfg.seed)
    k = default_intrinsics(h, w)
    batch = [Triplet(target=rng.uniform(0, 1, (3, h, w)),
                     src_fwd=rng.uniform(0, 1, (3, h, w)),
                     src_bwd=rng.uniform(0, 1, (3, h, w)),
                     gt_depth=np.ones((h, w)),
                     pose_fwd=np.zeros(6), pose_bwd=np.zeros(6), k=k)
             for _ in range(cfg.batch_size)]
    opt = AdamW(param_groups(models, cfg))
    train_step(batch, models, opt, cfg)      # warm-up, excluded from timing
    times = []
    for _ in range(args.trials):
        t0 = time.perf_counter()
        train_step(batch, models, opt, cfg)
        times.append(time.perf_counter() - t0)
    mean_s = float(np.mean(times))
    print(f"parameters: {n_params}")
    print(f"input: {cfg.batch_size}x3x{h}x{w}, {args.trials} trials")
    print(f"steps/sec: {1.0 / mean_s:.3f}")
    print(f"images/sec: {cfg.batch_size / mean_s:.3f}")
    return 0


# ---------------------------------------------------------------- plumbing

class _Parser(argparse.ArgumentParser):
    """argparse exits with code 2 on bad flags; here usage errors are 1."""

    def error(self, message):
        raise UsageError(message)


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _size_arg(text):
    try:
        return _to_size(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="monovit", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("gen", help="generate a synthetic triplet dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", required=True, type=_positive_int,
                   help="number of triplets")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=_size_arg, default=(128, 128),
                   metavar="HxW", help="image size (default 128x128)")
    p.add_argument("--motion", type=float, default=1.3,
                   help="camera step scale between frames")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train from a run config file")
    p.add_argument("--config", required=True, help="run config path")
    p.add_argument("--resume", action="store_true",
                   help="continue from out_dir's checkpoint if present")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", help="also write per-image metrics CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict disparity for one PPM image")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--image", required=True, help="input PPM image")
    p.add_argument("--out", required=True, help="output disparity PFM")
    p.add_argument("--attn", help="also write per-stage activation PGMs here")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=_positive_int, default=3,
                   help="random draws per case")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="training-step throughput for a config")
    p.add_argument("--config", required=True, help="run config path")
    p.add_argument("--trials", type=_positive_int, default=5,
                   help="timed steps (>= 5 for a stable mean)")
    p.set_defaults(func=cmd_bench)

    return parser


def _limit_threads():
    text = os.environ.get("MONOVIT_THREADS", "1")
    try:
        n = int(text)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"MONOVIT_THREADS must be a positive integer, "
                         f"got {text!r}") from None
    threadpoolctl.threadpool_limits(limits=n)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        _limit_threads()
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_usage(sys.stderr)
            return 1
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:              # argparse --help
        return int(e.code or 0)
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except (OSError, CheckpointError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
