"""Batch entry point: generate / train / eval / analyze.

Every command is deterministic given (config, seed), writes its effective
settings to <out>/resolved.cfg, and uses exit codes 0 (ok), 2 (usage, config
or data error), 3 (numerical failure).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .config import ConfigError, RunConfig
from .data import DatasetManifest, generate_synthetic, load_split
from .metrics import MetricReport, evaluate_dataset
from .model import CaraNet
from .size_analysis import (EmptyFilterError, SizePoint, compare_curves,
                            comparison_csv, curve_csv, curves_svg,
                            filter_small, interval_average)
from .tensor import NumericalError
from .train import Adam, CheckpointError, load_checkpoint, save_checkpoint, train_model

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class DataError(ValueError):
    pass


def _write_text(path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(text)


def _emit_resolved(cfg: RunConfig, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    _write_text(os.path.join(out_dir, "resolved.cfg"), cfg.serialize())


def cmd_generate(args) -> int:
    cfg = RunConfig.from_file(args.spec, args.set)
    spec = cfg.synthetic_spec()
    os.makedirs(args.out, exist_ok=True)
    _emit_resolved(cfg, args.out)
    manifest, unchanged = generate_synthetic(spec, args.out, cfg["data.train_fraction"])
    total_files = 2 * spec.n_samples + 1
    if unchanged == total_files:
        print("up-to-date")
    ratios = np.array([e.size_ratio for e in manifest.entries])
    hist, edges = np.histogram(ratios, bins=10)
    print(f"generated {len(manifest)} samples "
          f"({len(manifest.split('train'))} train / {len(manifest.split('test'))} test)")
    print("size-ratio histogram:")
    for c, lo, hi in zip(hist, edges[:-1], edges[1:]):
        print(f"  [{lo * 100:6.3f}%, {hi * 100:6.3f}%): {c}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = RunConfig.from_file(args.config, args.set)
    if args.no_cfp:
        cfg.values["model.use_cfp"] = False
    if args.no_ara:
        cfg.values["model.use_ara"] = False
    mcfg = cfg.model_config()
    tcfg = cfg.train_config()
    manifest_path = cfg["data.manifest"]
    if not manifest_path:
        raise DataError("data.manifest is required for training")
    if not os.path.isabs(manifest_path):
        manifest_path = os.path.join(os.path.dirname(os.path.abspath(args.config)), manifest_path)
    try:
        manifest = DatasetManifest.load(manifest_path)
        _, images, masks = load_split(manifest, "train")
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from None
    if images.shape[2:] != tuple(mcfg.input_size):
        from .data import resize_batch
        images = resize_batch(images, mcfg.input_size)
        masks = (resize_batch(masks, mcfg.input_size) >= 0.5).astype(np.float32)

    os.makedirs(args.out, exist_ok=True)
    _emit_resolved(cfg, args.out)
    model = CaraNet(mcfg)
    opt = Adam(model.parameters(), lr=tcfg.learning_rate, beta1=tcfg.adam_beta1,
               beta2=tcfg.adam_beta2, eps=tcfg.adam_eps)
    log_rows: list[tuple] = []

    def checkpoint_fn(epoch: int) -> None:
        save_checkpoint(model, opt, os.path.join(args.out, f"epoch{epoch + 1:04d}.ckpt"))

    epoch_means = train_model(model, opt, images, masks, tcfg,
                              log_rows=log_rows, checkpoint_fn=checkpoint_fn)
    save_checkpoint(model, opt, os.path.join(args.out, "final.ckpt"))
    lines = ["epoch,step,scale,loss"]
    lines += [f"{e},{s},{sc!r},{lv!r}" for e, s, sc, lv in log_rows]
    _write_text(os.path.join(args.out, "loss.csv"), "\n".join(lines) + "\n")
    print(f"trained {tcfg.epochs} epochs on {images.shape[0]} samples; "
          f"first-epoch loss {epoch_means[0]:.4f}, last-epoch loss {epoch_means[-1]:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = RunConfig()
    for ov in args.set or []:
        key, _, raw = ov.partition("=")
        cfg.set_text(key.strip(), raw)
    try:
        model, _ = load_checkpoint(args.checkpoint)
    except (OSError, CheckpointError) as exc:
        raise DataError(f"cannot load checkpoint: {exc}") from None
    try:
        manifest = DatasetManifest.load(args.manifest)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from None
    os.makedirs(args.out, exist_ok=True)
    cfg.values["data.manifest"] = args.manifest
    _emit_resolved(cfg, args.out)
    pred_dir = os.path.join(args.out, "predictions")
    os.makedirs(pred_dir, exist_ok=True)
    try:
        report = evaluate_dataset(model, manifest, split=args.split,
                                  batch_size=cfg["eval.batch_size"], pred_out_dir=pred_dir)
    except (FileNotFoundError, ValueError) as exc:
        raise DataError(str(exc)) from None
    report.to_csv(os.path.join(args.out, "report.csv"))
    m = report.means()
    print(f"evaluated {len(report)} {args.split} samples: "
          f"mDice {m['dice']:.4f}, mIoU {m['iou']:.4f}, Fbw {m['fbw']:.4f}, "
          f"Salpha {m['salpha']:.4f}, Ephi {m['ephi']:.4f}, MAE {m['mae']:.4f}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    if not 1 <= len(args.reports) <= 2:
        raise DataError("analyze takes one or two report CSVs")
    reports = []
    for path in args.reports:
        try:
            reports.append(MetricReport.from_csv(path))
        except (OSError, ValueError) as exc:
            raise DataError(str(exc)) from None
    names = [os.path.splitext(os.path.basename(p))[0] for p in args.reports]
    if len(set(names)) != len(names):
        names = [f"{n}_{i}" for i, n in enumerate(names)]
    os.makedirs(args.out, exist_ok=True)
    cfg = RunConfig()
    _emit_resolved(cfg, args.out)

    all_ratios = [r.size_ratio for rep in reports for r in rep.rows]
    lo, hi = min(all_ratios), max(all_ratios)
    if hi <= lo:
        hi = lo + 1e-9
    curves = []
    for name, rep in zip(names, reports):
        points = [SizePoint(r.id, r.size_ratio, r.dice) for r in rep.rows]
        curve = interval_average(points, lo, hi, args.intervals)
        curves.append((name, curve))
        _write_text(os.path.join(args.out, f"curve_{name}.csv"), curve_csv(curve))
        _write_text(os.path.join(args.out, f"curve_{name}.svg"), curves_svg([(name, curve)]))

    if len(curves) == 2:
        cmp = compare_curves(curves[0][1], curves[1][1])
        _write_text(os.path.join(args.out, "comparison.csv"),
                    comparison_csv(curves[0][1], curves[1][1], cmp))
        _write_text(os.path.join(args.out, "comparison.svg"),
                    curves_svg(curves, shade_diff=True))
        print(f"red sum {cmp.sum_positive:.4f}, blue sum {cmp.sum_negative:.4f}")

    if args.cutoff is not None:
        lines = ["report,cutoff,n,dice,iou,fbw,salpha,ephi,mae"]
        for name, rep in zip(names, reports):
            try:
                small = filter_small(rep, args.cutoff)
            except EmptyFilterError as exc:
                raise DataError(str(exc)) from None
            m = small.means()
            lines.append(f"{name},{args.cutoff!r},{len(small)},{m['dice']:.6f},{m['iou']:.6f},"
                         f"{m['fbw']:.6f},{m['salpha']:.6f},{m['ephi']:.6f},{m['mae']:.6f}")
        _write_text(os.path.join(args.out, "filtered_means.csv"), "\n".join(lines) + "\n")
    print(f"analyzed {len(reports)} report(s) over [{lo:.6f}, {hi:.6f}] "
          f"with {args.intervals} intervals")
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="caranet",
                                     description="synthetic small-object segmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset and manifest")
    p.add_argument("--spec", required=True, help="config file with data.* keys")
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="train on a manifest's train split")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-cfp", action="store_true", help="ablation: drop the pyramid blocks")
    p.add_argument("--no-ara", action="store_true", help="ablation: drop the attention stages")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="run the six metrics over a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("analyze", help="size curves, comparison, small-sample means")
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--intervals", type=int, default=50)
    p.add_argument("--cutoff", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else EXIT_OK
    try:
        return args.fn(args)
    except (ConfigError, DataError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
