"""Command-line interface: train, demosaic, eval and ablate subcommands.

Exit codes: 0 success, 2 usage or input error, 3 checkpoint mismatch,
4 numerical failure.  Every flag can also come from a ``key=value`` config
file (``--config``); explicit flags override file values.  The resolved
configuration is echoed and written next to the outputs, in the same
format, so a run can be reproduced from its own log.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .bayer import bilinear_demosaic, mosaic_rggb
from .data import load_dataset, load_rgb, save_rgb
from .figures import save_ablation_figure, save_loss_curve, save_report_figure
from .metrics import evaluate_dataset, write_report_csv
from .model import (
    ModelConfig,
    RstcaNet,
    build_variant,
    config_to_dict,
    param_count,
    variant_config,
)
from .training import (
    LR_PERIODS,
    CheckpointMismatchError,
    LrSchedule,
    NumericalError,
    load_checkpoint,
    train,
    write_loss_csv,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CHECKPOINT = 3
EXIT_NUMERICAL = 4

DATA_DIR_ENV = "RSTCA_DATA_DIR"

MODEL_OVERRIDES = (
    "channels", "num_blocks", "heads", "layers_per_block", "window",
    "ca_mode", "short_skip", "conv_in_block", "conv_in_dfe", "reduction",
    "attn_dim", "mlp_ratio",
)


class UsageError(RuntimeError):
    pass


def read_config_file(path) -> dict[str, str]:
    """Plain ``key=value`` lines, UTF-8, ``#`` comments and blanks ignored."""
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, _, val = line.partition("=")
            values[key.strip()] = val.strip()
    return values


def write_config_file(path, values: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, val in values.items():
            fh.write(f"{key}={'' if val is None else val}\n")


def _apply_config_defaults(args: argparse.Namespace, parser: argparse.ArgumentParser) -> None:
    """Fill arguments still at their subparser default from the config file."""
    if not getattr(args, "config", None):
        return
    converters = {}
    bool_dests = set()
    for action in parser._actions:
        if action.dest in ("help", "func", "subparser"):
            continue
        if isinstance(action.const, bool) or isinstance(action, argparse.BooleanOptionalAction):
            bool_dests.add(action.dest)
        converters[action.dest] = action.type
    file_values = read_config_file(args.config)
    for key, raw in file_values.items():
        dest = key.replace("-", "_")
        if dest not in converters:
            continue  # echoed configs carry extra bookkeeping keys; ignore them
        if getattr(args, dest) != parser.get_default(dest):
            continue  # explicit flag wins
        if dest in bool_dests:
            value = raw.lower() in ("1", "true", "yes")
        elif raw == "":
            value = None
        elif converters[dest] is not None:
            value = converters[dest](raw)
        else:
            value = raw
        setattr(args, dest, value)


def resolve_model_config(args: argparse.Namespace) -> ModelConfig:
    cfg = variant_config(args.variant)
    overrides = {}
    for name in MODEL_OVERRIDES:
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if overrides:
        cfg = replace(cfg, **overrides)
    return cfg.validate()


def _dataset_dir(args, attr: str):
    value = getattr(args, attr, None) or os.environ.get(DATA_DIR_ENV)
    if not value:
        raise UsageError(f"--{attr.replace('_', '-')} is required (or set ${DATA_DIR_ENV})")
    path = Path(value)
    if not path.is_dir():
        raise UsageError(f"dataset directory not found: {path}")
    return path


def echo_resolved(values: dict) -> None:
    for key, val in values.items():
        print(f"{key}={'' if val is None else val}")


# ---------------------------------------------------------------------------
# train


def cmd_train(args, parser) -> int:
    _apply_config_defaults(args, parser)
    data_dir = _dataset_dir(args, "data")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    cfg = resolve_model_config(args)
    period = args.lr_period or LR_PERIODS.get(args.variant, 40_000)
    schedule = LrSchedule(base=args.lr, period=period)

    resolved = dict(config_to_dict(cfg))
    resolved.update(
        variant=args.variant, data=str(data_dir), out=str(out_dir), iters=args.iters,
        seed=args.seed, batch=args.batch, patch=args.patch, lr=args.lr,
        lr_period=period, save_every=args.save_every, augment=args.augment,
    )
    echo_resolved(resolved)
    write_config_file(out_dir / "config.txt", resolved)

    samples = load_dataset(data_dir)
    if args.resume:
        net, optimizer, start, seed = load_checkpoint(args.resume)
        if seed != args.seed:
            log.warning("checkpoint seed %d differs from --seed %d; using --seed", seed, args.seed)
    else:
        net = RstcaNet(cfg, seed=args.seed)
        optimizer, start = None, 0

    result = train(
        net, samples, iterations=args.iters, seed=args.seed, out_dir=out_dir,
        batch=args.batch, patch=args.patch, schedule=schedule, augment=args.augment,
        save_every=args.save_every, start_iteration=start, optimizer=optimizer,
    )
    write_loss_csv(out_dir / "loss.csv", result.losses)
    if result.losses:
        save_loss_curve(result.losses, out_dir / "loss_curve.png")
        print(f"final loss {result.losses[-1][1]:.6f} after {len(result.losses)} iterations")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"loss log:   {out_dir / 'loss.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# demosaic


def cmd_demosaic(args, parser) -> int:
    _apply_config_defaults(args, parser)
    in_path = Path(args.input)
    if not in_path.is_file():
        raise UsageError(f"input image not found: {in_path}")
    if bool(args.checkpoint) == bool(args.baseline):
        raise UsageError("exactly one of --checkpoint or --baseline is required")

    if args.raw:
        from PIL import Image

        with Image.open(in_path) as img:
            mosaic = np.asarray(img.convert("L"), dtype=np.float32)[None] / 255.0
    else:
        mosaic = mosaic_rggb(load_rgb(in_path))

    if args.baseline:
        if args.baseline != "bilinear":
            raise UsageError(f"unknown baseline {args.baseline!r}")
        rgb = np.clip(bilinear_demosaic(mosaic), 0.0, 1.0)
    else:
        net, _, _, _ = load_checkpoint(args.checkpoint)
        rgb = net.demosaic(mosaic)
    save_rgb(args.output, rgb)
    print(f"wrote {args.output} ({rgb.shape[2]}x{rgb.shape[1]})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args, parser) -> int:
    _apply_config_defaults(args, parser)
    dataset = _dataset_dir(args, "dataset")
    if not args.self_test and bool(args.checkpoint) == bool(args.baseline):
        raise UsageError("exactly one of --checkpoint or --baseline is required")

    if args.self_test:
        method, demosaicer = "ground-truth", bilinear_demosaic
    elif args.baseline:
        if args.baseline != "bilinear":
            raise UsageError(f"unknown baseline {args.baseline!r}")
        method, demosaicer = "bilinear", bilinear_demosaic
    else:
        net, _, _, _ = load_checkpoint(args.checkpoint)
        method, demosaicer = f"rstcanet({Path(args.checkpoint).name})", net.demosaic

    report = evaluate_dataset(
        demosaicer, dataset, method=method, crop=args.crop,
        quantize=args.quantize_8bit, self_test=args.self_test,
    )
    if not report.per_image:
        raise UsageError(f"no scorable images in {dataset}")
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    write_report_csv(report, report_path)
    save_report_figure(report, report_path.with_suffix(".png"))
    for name in report.skipped:
        print(f"skipped unreadable image: {name}")
    print(f"{method} on {dataset}: mean cPSNR {report.mean_cpsnr:.4f} dB, "
          f"mean SSIM {report.mean_ssim:.4f} ({len(report.per_image)} images)")
    print(f"report: {report_path}")
    print(f"figure: {report_path.with_suffix('.png')}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate


ABLATION_BENCH = ModelConfig(channels=64, num_blocks=2, heads=4, layers_per_block=6,
                             window=8, attn_dim=192)


def ablation_grid(grid: str) -> list[tuple[str, ModelConfig]]:
    if grid == "ca":
        return [
            ("CA0", replace(ABLATION_BENCH, ca_mode="none")),
            ("CA1", replace(ABLATION_BENCH, ca_mode="single")),
            ("RSTCANet", replace(ABLATION_BENCH, ca_mode="per_pair")),
            ("CA6", replace(ABLATION_BENCH, ca_mode="per_layer")),
        ]
    if grid == "ssc":
        return [
            ("RSTCANet", replace(ABLATION_BENCH, short_skip=False)),
            ("RSTCANet-SSC", replace(ABLATION_BENCH, short_skip=True)),
        ]
    if grid == "heads":
        return [
            ("RSTCANet", replace(ABLATION_BENCH, heads=4)),
            ("RSTCANet-h2", replace(ABLATION_BENCH, heads=2)),
        ]
    if grid == "conv":
        base = variant_config("B")
        return [
            ("RSTCANet-B", replace(base, conv_in_block=1, conv_in_dfe=1)),
            ("RSTCANet-1", replace(base, conv_in_block=1, conv_in_dfe=2)),
            ("RSTCANet-2", replace(base, conv_in_block=2, conv_in_dfe=1)),
            ("RSTCANet-3", replace(base, conv_in_block=0, conv_in_dfe=1)),
        ]
    raise UsageError(f"unknown grid {grid!r}; choose from ca, ssc, conv, heads")


def cmd_ablate(args, parser) -> int:
    _apply_config_defaults(args, parser)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cases = ablation_grid(args.grid)

    samples = None
    if args.train_iters:
        samples = load_dataset(_dataset_dir(args, "data"))

    rng = np.random.default_rng(args.seed)
    probe = rng.uniform(0.0, 1.0, (1, 1, 64, 64)).astype(np.float32)
    rows = []
    for case, cfg in cases:
        net = RstcaNet(cfg.validate(), seed=args.seed)
        n = param_count(net)
        out = net.demosaic(probe)
        row = {
            "case": case,
            "ca_mode": cfg.ca_mode,
            "short_skip": cfg.short_skip,
            "conv_in_block": cfg.conv_in_block,
            "conv_in_dfe": cfg.conv_in_dfe,
            "heads": cfg.heads,
            "params": n,
            "size_mb": round(4 * n / 1e6, 3),
            "forward_finite": bool(np.all(np.isfinite(out))),
        }
        if samples is not None:
            result = train(net, samples, iterations=args.train_iters, seed=args.seed,
                           batch=args.batch, patch=args.patch, augment=False, log_every=0)
            row["final_loss"] = round(result.losses[-1][1], 6)
        rows.append(row)
        print(f"{case}: {n:,} params ({row['size_mb']} MB), forward finite: {row['forward_finite']}")

    csv_path = out_dir / f"ablation_{args.grid}.csv"
    columns = list(rows[0].keys())
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(str(row[c]) for c in columns) + "\n")
    save_ablation_figure(rows, csv_path.with_suffix(".png"))
    print(f"wrote {csv_path}")
    print(f"figure: {csv_path.with_suffix('.png')}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_model_overrides(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model overrides (default: from --variant)")
    g.add_argument("--channels", type=int, default=None, help="feature channels C")
    g.add_argument("--num-blocks", type=int, default=None, help="residual block count K")
    g.add_argument("--heads", type=int, default=None, help="attention heads")
    g.add_argument("--layers-per-block", type=int, default=None, help="transformer layers N per block")
    g.add_argument("--window", type=int, default=None, help="attention window M")
    g.add_argument("--ca-mode", choices=["none", "single", "per_pair", "per_layer"],
                   default=None, help="channel-attention placement")
    g.add_argument("--short-skip", action="store_true", default=None,
                   help="add a skip connection around every layer pair")
    g.add_argument("--conv-in-block", type=int, choices=[0, 1, 2], default=None,
                   help="trailing convs per block")
    g.add_argument("--conv-in-dfe", type=int, choices=[1, 2], default=None,
                   help="convs closing the deep module")
    g.add_argument("--reduction", type=int, default=None, help="channel-attention reduction")
    g.add_argument("--attn-dim", type=int, default=None, help="attention width (default: preset)")
    g.add_argument("--mlp-ratio", type=int, default=None, help="MLP expansion ratio")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rstcanet",
        description="Bayer demosaicing with windowed self-attention and shared channel attention.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("train", help="train a model", formatter_class=fmt)
    p.add_argument("--variant", choices=["B", "S", "L", "tiny"], default="tiny",
                   help="published preset or the desk-scale tiny model")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--data", default=None, help=f"training image dir (or ${DATA_DIR_ENV})")
    p.add_argument("--out", default="runs/train", help="output directory")
    p.add_argument("--iters", type=int, default=200, help="training iterations")
    p.add_argument("--seed", type=int, default=0, help="rng seed")
    p.add_argument("--batch", type=int, default=16, help="patches per batch")
    p.add_argument("--patch", type=int, default=64, help="square patch size")
    p.add_argument("--lr", type=float, default=1e-4, help="base learning rate")
    p.add_argument("--lr-period", type=int, default=None,
                   help="halving period (default: variant protocol)")
    p.add_argument("--save-every", type=int, default=0, help="checkpoint cadence (0: final only)")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=True,
                   help="random rotation/flip augmentation")
    _add_model_overrides(p)
    p.set_defaults(func=cmd_train, subparser=p)

    p = sub.add_parser("demosaic", help="demosaic one image", formatter_class=fmt)
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--checkpoint", default=None, help="trained model checkpoint")
    p.add_argument("--baseline", default=None, help="use a classical baseline (bilinear)")
    p.add_argument("--input", required=True, help="input image (RGB, mosaicked internally)")
    p.add_argument("--output", required=True, help="output PNG path")
    p.add_argument("--raw", action="store_true", default=False,
                   help="treat the input as a single-channel raw mosaic")
    p.set_defaults(func=cmd_demosaic, subparser=p)

    p = sub.add_parser("eval", help="score a method on a dataset directory", formatter_class=fmt)
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--checkpoint", default=None, help="trained model checkpoint")
    p.add_argument("--baseline", default=None, help="classical baseline (bilinear)")
    p.add_argument("--dataset", default=None, help=f"evaluation image dir (or ${DATA_DIR_ENV})")
    p.add_argument("--report", default="report.csv", help="output CSV (figure beside it)")
    p.add_argument("--self-test", action="store_true", default=False,
                   help="score ground truth against itself")
    p.add_argument("--crop", type=int, default=0, help="border crop before metrics")
    p.add_argument("--quantize-8bit", action="store_true", default=False,
                   help="round outputs to 8-bit before metrics")
    p.set_defaults(func=cmd_eval, subparser=p)

    p = sub.add_parser("ablate", help="construct and compare ablation variants", formatter_class=fmt)
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--grid", required=True, choices=["ca", "ssc", "conv", "heads"],
                   help="which ablation family to build")
    p.add_argument("--out", default="runs/ablate", help="output directory")
    p.add_argument("--seed", type=int, default=0, help="rng seed")
    p.add_argument("--train-iters", type=int, default=0,
                   help="optional short training per variant")
    p.add_argument("--data", default=None, help=f"training image dir (or ${DATA_DIR_ENV})")
    p.add_argument("--batch", type=int, default=16, help="patches per batch when training")
    p.add_argument("--patch", type=int, default=64, help="square patch size when training")
    p.set_defaults(func=cmd_ablate, subparser=p)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, args.subparser)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointMismatchError as exc:
        print(f"checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
