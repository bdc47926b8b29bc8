"""Command-line surface: train, infer, bench, metrics, synth.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.  Every
effective config key is echoed before execution; report paths write
tab-separated tables plus matplotlib figures alongside.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from .backbone import DehazeNet, count_macs, count_params
from .data import (
    ConfigError, NumericError, TrainConfig, make_pair, parse_config, train_loop,
)
from .image_ops import Image, ImageFormatError, MetricReport, load_image, save_image
from .rng import Rng
from .tensor import init_parameters
from .weights_io import WeightFormatError, load_weights

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

IMAGE_SUFFIXES = (".ppm", ".png")


def _echo_config(cfg: TrainConfig) -> None:
    for key in sorted(cfg.values):
        print(f"config: {key} = {cfg.values[key]}")


def _load_config(args) -> TrainConfig:
    text = ""
    if args.config is not None:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text(encoding="utf-8")
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        overrides[key.strip()] = val.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    cfg = TrainConfig(parse_config(text, overrides))
    _echo_config(cfg)
    return cfg


def load_inference_model(weights_path) -> tuple[DehazeNet, TrainConfig]:
    """Build the feed-forward model from a weight file.

    Loads `backbone.*` entries only; anything under the training-only
    prefixes (zipph., aux., opt.) is skipped, so stripped and unstripped
    files produce identical models.
    """
    cfg_text, entries = load_weights(weights_path)
    cfg = TrainConfig(parse_config(cfg_text))
    model = DehazeNet(cfg.backbone())
    for name, p in model.named_parameters().items():
        key = f"backbone.{name}"
        if key not in entries:
            raise WeightFormatError(f"{weights_path}: missing model parameter {key}")
        arr = entries[key]
        if arr.shape != p.shape:
            raise WeightFormatError(
                f"{weights_path}: parameter {key} has shape {arr.shape}, want {p.shape}")
        p.data = arr.astype(p.data.dtype)
    return model, cfg


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    weights, log_path, _ = train_loop(cfg, out, resume_from=args.resume, quiet=False)
    print(f"weights: {weights}")
    print(f"loss log: {log_path}")
    if cfg["figures"]:
        from .report import loss_figure
        fig_path = out / "loss_curves.png"
        loss_figure(log_path, fig_path)
        print(f"figure: {fig_path}")
    return EXIT_OK


def _pad_to_16(pixels: np.ndarray, mode: str) -> tuple[np.ndarray, int, int]:
    h, w = pixels.shape[:2]
    ph = (-h) % 16
    pw = (-w) % 16
    if ph == 0 and pw == 0:
        return pixels, 0, 0
    if mode != "auto":
        raise ImageFormatError(
            f"image {h}x{w} not divisible by 16 (use --pad auto)")
    return np.pad(pixels, ((0, ph), (0, pw), (0, 0)), mode="reflect"), ph, pw


def cmd_infer(args) -> int:
    model, cfg = load_inference_model(args.weights)
    _echo_config(cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    hf_kind = cfg["hf_kind"]
    for inp in args.inputs:
        img = load_image(inp)
        padded, ph, pw = _pad_to_16(img.pixels, args.pad)
        t0 = time.perf_counter()
        restored = model.dehaze_array(padded, hf_kind)
        elapsed_ms = (time.perf_counter() - t0) * 1000.0
        h, w = img.pixels.shape[:2]
        result = Image(restored[:h, :w])
        dest = out_dir / Path(inp).name
        save_image(result, dest)
        print(f"{Path(inp).name}\t{elapsed_ms:.2f} ms\t{dest}")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    bcfg = cfg.backbone()
    model = DehazeNet(bcfg)
    init_parameters(model, Rng(cfg["seed"]))
    params_m = count_params(model) / 1e6
    try:
        resolutions = [int(r) for r in str(cfg["bench_resolutions"]).split(",") if r.strip()]
    except ValueError as e:
        raise ConfigError(f"bad bench_resolutions {cfg['bench_resolutions']!r}") from e
    runs = cfg["bench_runs"]

    rows = []
    header = ("resolution\tparams_m\ttotal_gmac\tlgcb_attn_gmac\tspatial_oracle_gmac"
              "\tmean_ms\tmedian_ms")
    lines = [header]
    rng = Rng(cfg["seed"]).split("bench")
    for res in resolutions:
        macs = count_macs(bcfg, res, res)
        pixels = rng.split(res).uniform(0.0, 1.0, (res, res, 3))
        times = []
        for i in range(max(runs, 1) + 2):  # two warm-up passes
            t0 = time.perf_counter()
            model.dehaze_array(pixels, cfg["hf_kind"])
            if i >= 2:
                times.append((time.perf_counter() - t0) * 1000.0)
        row = {
            "resolution": res,
            "params_m": params_m,
            "total_gmac": macs["total"] / 1e9,
            "lgcb_attn_gmac": cfg["num_lgcb"] * macs["lgcb_attention_per_block"] / 1e9,
            "spatial_oracle_gmac": macs["spatial_attention_oracle"] / 1e9,
            "mean_ms": float(np.mean(times)),
            "median_ms": float(np.median(times)),
        }
        rows.append(row)
        lines.append(f"{res}\t{params_m:.4f}\t{row['total_gmac']:.6f}"
                     f"\t{row['lgcb_attn_gmac']:.6f}\t{row['spatial_oracle_gmac']:.6f}"
                     f"\t{row['mean_ms']:.2f}\t{row['median_ms']:.2f}")
    for prev, cur in zip(rows, rows[1:]):
        ratio = cur["total_gmac"] / prev["total_gmac"]
        attn_ratio = cur["lgcb_attn_gmac"] / prev["lgcb_attn_gmac"]
        oracle_ratio = cur["spatial_oracle_gmac"] / prev["spatial_oracle_gmac"]
        time_ratio = cur["mean_ms"] / prev["mean_ms"]
        lines.append(
            f"# ratio {prev['resolution']}->{cur['resolution']}: total_mac {ratio:.3f}"
            f" lgcb_attn {attn_ratio:.3f} spatial_oracle {oracle_ratio:.3f}"
            f" wall_time {time_ratio:.3f}")
    table = "\n".join(lines)
    print(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.tsv").write_text(table + "\n", encoding="utf-8")
        if cfg["figures"]:
            from .report import bench_figure
            bench_figure(rows, out / "bench.png")
            print(f"figure: {out / 'bench.png'}")
    return EXIT_OK


def _image_files(directory: Path) -> dict[str, Path]:
    return {p.name: p for p in sorted(directory.iterdir())
            if p.suffix.lower() in IMAGE_SUFFIXES}


def cmd_metrics(args) -> int:
    pred_dir, ref_dir = Path(args.pred_dir), Path(args.ref_dir)
    if not pred_dir.is_dir() or not ref_dir.is_dir():
        print(f"error: {pred_dir if not pred_dir.is_dir() else ref_dir} is not a directory",
              file=sys.stderr)
        return EXIT_DATA
    preds = _image_files(pred_dir)
    refs = _image_files(ref_dir)
    common = sorted(set(preds) & set(refs))
    for name in sorted(set(preds) ^ set(refs)):
        side = "prediction" if name in preds else "reference"
        print(f"unmatched {side}: {name}", file=sys.stderr)
    if not common:
        print("error: no matching file names between directories", file=sys.stderr)
        return EXIT_DATA

    lines = []
    reports = []
    for name in common:
        rep = MetricReport.compute(load_image(preds[name]), load_image(refs[name]))
        reports.append(rep)
        lines.append(rep.line(name))
    mean = MetricReport(
        psnr_db=float(np.mean([r.psnr_db for r in reports])),
        ssim=float(np.mean([r.ssim for r in reports])),
        delta_e_ab=float(np.mean([r.delta_e_ab for r in reports])),
        delta_e_00=float(np.mean([r.delta_e_00 for r in reports])),
    )
    lines.append(mean.line("mean"))
    table = "\n".join(lines)
    print(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.tsv").write_text(table + "\n", encoding="utf-8")
        from .report import metrics_figure
        metrics_figure(common, reports, out / "metrics.png")
        print(f"figure: {out / 'metrics.png'}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    if args.count < 1:
        raise ConfigError("synth needs n >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    size = cfg["source_size"]
    seed = cfg["seed"]
    for i in range(args.count):
        pair = make_pair(Rng(seed).split("synth", i), size, size)
        save_image(pair.clean, out / f"clean_{i}.ppm")
        save_image(pair.hazy, out / f"hazy_{i}.ppm")
        scene = pair.scene
        sidecar = (
            f"seed = {seed}\n"
            f"index = {i}\n"
            f"a = {scene.a[0]:.8f} {scene.a[1]:.8f} {scene.a[2]:.8f}\n"
            f"beta_scatter = {scene.beta_scatter:.8f}\n"
            f"depth_kind = {scene.depth_kind}\n"
            f"size = {size}\n"
        )
        (out / f"scene_{i}.txt").write_text(sidecar, encoding="utf-8")
    print(f"wrote {args.count} pairs to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zid", description="zero-inference dehazing: train, infer, benchmark")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="flat key = value config file")
        p.add_argument("--seed", type=int, default=None, help="override the seed")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--pad", choices=("auto", "strict"), default="auto",
                       help="reflect-pad inputs to multiples of 16, or reject")

    p_train = sub.add_parser("train", help="run the training loop")
    common(p_train)
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.add_argument("--resume", default=None, help="checkpoint to resume from")
    p_train.set_defaults(func=cmd_train)

    p_infer = sub.add_parser("infer", help="restore images with trained weights")
    common(p_infer)
    p_infer.add_argument("--weights", required=True)
    p_infer.add_argument("--out", required=True)
    p_infer.add_argument("inputs", nargs="+", help="input images (ppm/png)")
    p_infer.set_defaults(func=cmd_infer)

    p_bench = sub.add_parser("bench", help="params, MACs, and wall-time report")
    common(p_bench)
    p_bench.add_argument("--out", default=None, help="directory for bench.tsv + figure")
    p_bench.set_defaults(func=cmd_bench)

    p_metrics = sub.add_parser("metrics", help="PSNR/SSIM/color-difference table")
    common(p_metrics)
    p_metrics.add_argument("pred_dir")
    p_metrics.add_argument("ref_dir")
    p_metrics.add_argument("--out", default=None, help="directory for metrics.tsv + figure")
    p_metrics.set_defaults(func=cmd_metrics)

    p_synth = sub.add_parser("synth", help="emit synthetic hazy/clean pairs")
    common(p_synth)
    p_synth.add_argument("-n", "--count", type=int, required=True)
    p_synth.add_argument("--out", required=True)
    p_synth.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ImageFormatError, WeightFormatError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
