"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config, save_config
from .harness.ablation import run_ablation_suite
from .harness.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .harness.data import IdxFormatError
from .harness.pipeline import METHOD_ARMS, ARM_SETTINGS, load_datasets, obtain_baseline, quantize_run
from .harness.report import RunReport, write_curves_csv
from .harness.train import evaluate_top1
from .recon import NumericalError

log = logging.getLogger("pfcr")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def _load(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    pos = cfg.pos
    if getattr(args, "bits", None) is not None:
        pos = replace(pos, bits=args.bits)
        overrides["bits"] = args.bits
    for flag in ("w_bits", "a_bits"):
        value = getattr(args, flag, None)
        if value is not None:
            pos = replace(pos, **{flag: value})
            overrides[flag] = value
    if getattr(args, "method", None) is not None:
        granularity, stage1 = ARM_SETTINGS[METHOD_ARMS[args.method]]
        pos = replace(pos, granularity=granularity, stage1_enabled=stage1)
        overrides["method"] = args.method
    if getattr(args, "one_stage", False):
        pos = replace(pos, stage1_enabled=False)
        overrides["one_stage"] = True
    if getattr(args, "iters", None) is not None:
        pos = replace(pos, iter_0=args.iters)
        overrides["iters"] = args.iters
    if getattr(args, "lr", None) is not None:
        pos = replace(pos, lr_0=args.lr)
        overrides["lr"] = args.lr
    if getattr(args, "seed", None) is not None:
        pos = replace(pos, seed=args.seed)
        cfg = replace(cfg, seeds=[args.seed])
        overrides["seed"] = args.seed
    return replace(cfg, pos=pos, overrides={**cfg.overrides, **overrides})


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train_baseline(args) -> int:
    cfg = _load(args)
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    out = _out_dir(args, "runs/baseline")
    train, ev = load_datasets(cfg.data, cfg.model.image_size, cfg.model.in_chans)
    model, acc = obtain_baseline(replace(cfg, baseline_checkpoint=None), train, ev)
    ckpt = save_checkpoint(model, out / "baseline")
    save_config(replace(cfg, baseline_checkpoint=str(out / "baseline")), out / "config.json")
    RunReport(config=cfg.to_dict(), seed=cfg.train.seed, baseline_accuracy=acc).save(out / "report.json")
    print(json.dumps({"checkpoint": str(ckpt), "top1": acc}) if args.json else f"baseline top-1 {acc:.4f} -> {ckpt}")
    return EXIT_OK


def cmd_quantize(args) -> int:
    cfg = _load(args)
    if not cfg.baseline_checkpoint:
        raise ConfigError(f"config {args.config} has no baseline_checkpoint")
    out = _out_dir(args, "runs/quantize")
    save_config(cfg, out / "config.json")
    train, ev = load_datasets(cfg.data, cfg.model.image_size, cfg.model.in_chans)
    baseline, base_acc = obtain_baseline(cfg, train, ev)
    try:
        model, report = quantize_run(cfg, cfg.pos, baseline, train, ev, base_acc)
    except NumericalError as exc:
        report = getattr(exc, "report", None)
        if report is not None:
            report.save(out / "report.json")
            write_curves_csv(report, out / "curves.csv")
        raise
    report.save(out / "report.json")
    write_curves_csv(report, out / "curves.csv")
    save_checkpoint(model, out / "quantized")
    if args.json:
        print(json.dumps({"top1": report.quantized_accuracy, "baseline_top1": base_acc, "out": str(out)}))
    else:
        print(f"quantized top-1 {report.quantized_accuracy:.4f} (baseline {base_acc:.4f}) -> {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load(args)
    path = args.checkpoint or cfg.baseline_checkpoint
    if not path:
        raise ConfigError("evaluate needs --checkpoint or a config baseline_checkpoint")
    model = load_checkpoint(path)
    _, ev = load_datasets(cfg.data, cfg.model.image_size, cfg.model.in_chans)
    acc = evaluate_top1(model, ev)
    print(json.dumps({"checkpoint": str(path), "top1": acc}) if args.json else f"top-1 {acc:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, "runs/ablation")
    result = run_ablation_suite(cfg, jobs=args.jobs, out_dir=out)
    if args.json:
        print(json.dumps([r.__dict__ for r in result.all_rows()]))
    else:
        for r in result.summary:
            top1 = "-" if r.top1 is None else f"{r.top1:.4f}"
            print(f"{r.arm:12s} median top-1 {top1}  {r.status}")
    failed = [r for r in result.rows if r.status.startswith("numerical")]
    return EXIT_NUMERICAL if failed else EXIT_OK


def _scale_stats(scale: np.ndarray) -> dict:
    return {
        "min": float(scale.min()),
        "max": float(scale.max()),
        "mean": float(scale.mean()),
        "count": int(scale.size),
    }


def cmd_inspect(args) -> int:
    model = load_checkpoint(args.checkpoint)
    doc = {
        "config": model.config.to_dict(),
        "weight_quant_enabled": model.weight_quant_enabled,
        "act_quant_enabled": model.act_quant_enabled,
        "tensors": {name: list(t.shape) for name, t in model.params.items()},
        "quantizers": {
            name: {
                "scheme": q.spec.scheme,
                "bits": q.spec.bits,
                "granularity": q.spec.granularity,
                "role": q.spec.role,
                "scale": _scale_stats(np.asarray(q.params.scale.data)),
            }
            for name, q in model.quantizers.items()
        },
    }
    if args.json:
        print(json.dumps(doc))
        return EXIT_OK
    print(f"{len(doc['tensors'])} tensors, {len(doc['quantizers'])} quantizers")
    for name, shape in doc["tensors"].items():
        print(f"  {name:32s} {tuple(shape)}")
    for name, q in doc["quantizers"].items():
        s = q["scale"]
        print(f"  {name:32s} {q['scheme']:7s} {q['bits']}b  scale min {s['min']:.3g} max {s['max']:.3g} mean {s['mean']:.3g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pfcr", description="Fine-to-coarse PTQ for a toy ViT.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, quant=False):
        p.add_argument("--config", help="run configuration JSON")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--json", action="store_true", help="machine-readable output")
        if quant:
            p.add_argument("--bits", type=int, help="weight and activation bits")
            p.add_argument("--w-bits", dest="w_bits", type=int, help="weight bits (overrides --bits)")
            p.add_argument("--a-bits", dest="a_bits", type=int, help="activation bits (overrides --bits)")
            p.add_argument("--method", choices=sorted(METHOD_ARMS))
            p.add_argument("--one-stage", action="store_true", help="skip the activation-only stage")
            p.add_argument("--iters", type=int, help="base iterations per unit")
            p.add_argument("--lr", type=float, help="base learning rate")

    p = sub.add_parser("train-baseline", help="train the full-precision model")
    common(p)
    p.set_defaults(func=cmd_train_baseline)

    p = sub.add_parser("quantize", help="calibrate and reconstruct a quantized model")
    common(p, quant=True)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("evaluate", help="top-1 of a checkpoint on the eval split")
    common(p)
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run the ablation arms over seeds")
    common(p, quant=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect", help="summarize a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, IdxFormatError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure in {exc.stage or 'run'}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
