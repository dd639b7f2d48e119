"""Command-line interface.

Exit codes: 0 success, 1 input/configuration error (including bad flags),
2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import TrainConfig, desk_config, paper_config, resolve_seed
from .data import generate_synthetic, load_image, save_image, write_corpus
from .errors import ConfigError, InputError
from .metrics import MetricReport, evaluate_pair
from .pipeline import enhance
from .tdn import decompose
from .train import train_diffusion, train_tdn


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=str, default=None, help="JSON training config")
    p.add_argument("--seed", type=int, default=None, help="override the run seed")


def _add_train_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--out-dir", type=str, default=None)
    p.add_argument("--profile", choices=["desk", "paper"], default="desk",
                   help="built-in profile used when --config is absent")


def _load_config(args, stage: str) -> TrainConfig:
    if args.config:
        cfg = TrainConfig.load(args.config)
        if cfg.stage != stage:
            raise ConfigError(f"config stage {cfg.stage!r} does not match command {stage!r}")
    else:
        profile = getattr(args, "profile", "desk")
        cfg = (paper_config if profile == "paper" else desk_config)(stage)
    cfg.seed = resolve_seed(args.seed, cfg.seed if args.config else None)
    for attr, flag in (
        ("iterations", "iterations"),
        ("batch_size", "batch_size"),
        ("learning_rate", "lr"),
        ("out_dir", "out_dir"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, attr, value)
    return cfg


def _input_images(path_arg: str) -> list[Path]:
    path = Path(path_arg)
    if path.is_dir():
        files = sorted(
            p for p in path.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp")
        )
        if not files:
            raise InputError(f"{path}: no image files found")
        return files
    if path.is_file():
        return [path]
    raise InputError(f"{path}: no such file or directory")


def cmd_synth_data(args) -> int:
    cfg = _load_config(args, args.stage_for_config) if args.config else desk_config("tdn")
    synth = cfg.data.synth
    synth.seed = resolve_seed(args.seed, synth.seed if args.config else None)
    n = args.n if args.n is not None else cfg.data.n_samples
    samples = generate_synthetic(synth, n)
    write_corpus(samples, args.out)
    print(f"wrote {len(samples)} pairs to {args.out}")
    return 0


def cmd_train_tdn(args) -> int:
    cfg = _load_config(args, "tdn")
    result = train_tdn(cfg)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"trace: {result.trace_path}")
    print(f"final total loss: {result.trace[-1]['total']:.6f}")
    return 0


def cmd_train_diff(args) -> int:
    cfg = _load_config(args, args.stage)
    tdn_checkpoint = args.tdn_checkpoint or cfg.tdn_checkpoint
    if not tdn_checkpoint:
        raise ConfigError("train-diff needs --tdn-checkpoint (or tdn_checkpoint in the config)")
    result = train_diffusion(cfg, tdn_checkpoint)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"trace: {result.trace_path}")
    print(f"final total loss: {result.trace[-1]['total']:.6f}")
    return 0


def cmd_decompose(args) -> int:
    model = ckpt.load_decomposer(args.checkpoint)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in _input_images(args.input):
        image = load_image(path)
        dec = decompose(image, model)
        save_image(out_dir / f"{path.stem}_r.png", dec.reflectance)
        save_image(out_dir / f"{path.stem}_l.png", dec.illumination)
        print(f"{path.name}: wrote {path.stem}_r.png, {path.stem}_l.png")
    return 0


def cmd_enhance(args) -> int:
    decomposer = ckpt.load_decomposer(args.tdn)
    rda_denoiser, _, schedule_r, stage_r = ckpt.load_diffusion_stage(args.rda)
    ida_denoiser, _, schedule_i, stage_i = ckpt.load_diffusion_stage(args.ida)
    if stage_r != "rda" or stage_i != "ida":
        raise InputError(f"checkpoint stages are ({stage_r}, {stage_i}), expected (rda, ida)")
    seed = resolve_seed(args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in _input_images(args.input):
        image = load_image(path)
        result = enhance(
            image, decomposer, rda_denoiser, ida_denoiser, schedule_r, schedule_i, seed
        )
        save_image(out_dir / f"{path.stem}_enhanced.png", result.enhanced)
        if args.dump_intermediates:
            save_image(out_dir / f"{path.stem}_r_tdn.png", result.decomposition.reflectance)
            save_image(out_dir / f"{path.stem}_l_tdn.png", result.decomposition.illumination)
            save_image(out_dir / f"{path.stem}_r_adj.png", result.adjusted_reflectance)
            save_image(out_dir / f"{path.stem}_l_adj.png", result.adjusted_illumination)
        print(f"{path.name}: enhanced (seed {seed})")
    return 0


def cmd_eval(args) -> int:
    ref_files = {p.stem: p for p in _input_images(args.reference)}
    cand_files = {p.stem: p for p in _input_images(args.candidate)}
    missing = sorted(set(ref_files) ^ set(cand_files))
    if missing:
        raise InputError("unmatched filenames between directories: " + ", ".join(missing))
    report = MetricReport()
    for stem in sorted(ref_files):
        reference = load_image(ref_files[stem])
        candidate = load_image(cand_files[stem])
        report.add(*evaluate_pair(stem, reference, candidate))
    print(report.to_table())
    if args.out:
        Path(args.out).write_text(report.to_csv())
        print(f"report CSV: {args.out}")
    return 0


def cmd_plot_trace(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(args.trace)
    if not path.is_file():
        raise InputError(f"{path}: no such trace file")
    lines = path.read_text().strip().splitlines()
    columns = lines[0].split(",")
    rows = [line.split(",") for line in lines[1:]]
    iterations = [int(r[0]) for r in rows]
    fig, ax = plt.subplots(figsize=(8, 5))
    for j, col in enumerate(columns[1:], start=1):
        ax.plot(iterations, [float(r[j]) for r in rows], label=col)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    plt.close(fig)
    print(f"plot: {args.out}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="diffretinex", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", parents=[], help="generate a synthetic paired corpus")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--n", type=int, default=None, help="number of pairs")
    p.set_defaults(func=cmd_synth_data, stage_for_config="tdn")

    p = sub.add_parser("train-tdn", help="train the decomposition network")
    _add_config_args(p)
    _add_train_overrides(p)
    p.set_defaults(func=cmd_train_tdn)

    p = sub.add_parser("train-diff", help="train a diffusion adjustment path")
    _add_config_args(p)
    _add_train_overrides(p)
    p.add_argument("--stage", choices=["rda", "ida"], required=True)
    p.add_argument("--tdn-checkpoint", type=str, default=None)
    p.set_defaults(func=cmd_train_diff)

    p = sub.add_parser("decompose", help="decompose images with a trained checkpoint")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="image file or directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("enhance", help="run the full enhancement pipeline")
    _add_config_args(p)
    p.add_argument("--tdn", required=True, help="decomposer checkpoint")
    p.add_argument("--rda", required=True, help="reflectance-path checkpoint")
    p.add_argument("--ida", required=True, help="illumination-path checkpoint")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-intermediates", action="store_true",
                   help="also write the four intermediate maps per input")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("eval", help="PSNR/SSIM/LOE between two image directories")
    _add_config_args(p)
    p.add_argument("--reference", required=True)
    p.add_argument("--candidate", required=True)
    p.add_argument("--out", default=None, help="optional CSV report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot-trace", help="plot a loss-trace CSV")
    _add_config_args(p)
    p.add_argument("--trace", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot_trace)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (InputError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
