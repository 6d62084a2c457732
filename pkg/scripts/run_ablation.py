"""Desk-scale ablation: block-wise, PFCR, PFCR+POS (and friends) over seeds.

    python3 scripts/run_ablation.py --out runs/desk --jobs 1
"""
import argparse
import logging
from pathlib import Path

from pfcr.config import ARMS
from pfcr.harness.ablation import run_ablation_suite
from pfcr.harness.checkpoint import save_checkpoint
from pfcr.harness.desk import DESK_ARMS, desk_run_config
from pfcr.harness.pipeline import load_datasets, obtain_baseline


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--seeds", type=int, nargs="+", default=None)
    ap.add_argument("--arms", nargs="+", choices=ARMS, default=DESK_ARMS)
    ap.add_argument("--iters", type=int, default=None, help="base iterations per unit")
    ap.add_argument("--lr", type=float, default=None)
    ap.add_argument("--bits", type=int, default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = desk_run_config(arms=args.arms)
    if args.seeds:
        cfg.seeds = args.seeds
    if args.iters:
        cfg.pos.iter_0 = args.iters
    if args.lr:
        cfg.pos.lr_0 = args.lr
    if args.bits:
        cfg.pos.bits = args.bits
    out = Path(args.out)
    train, ev = load_datasets(cfg.data, cfg.model.image_size, cfg.model.in_chans)
    baseline = obtain_baseline(cfg, train, ev)
    save_checkpoint(baseline[0], out / "baseline")
    print(f"baseline top-1 {baseline[1]:.4f}")
    result = run_ablation_suite(cfg, jobs=args.jobs, out_dir=out, baseline=baseline)
    for row in result.all_rows():
        top1 = "-" if row.top1 is None else f"{row.top1:.4f}"
        loss = "-" if row.last_block_loss is None else f"{row.last_block_loss:.5f}"
        print(f"{row.arm:12s} {str(row.seed):7s} top1 {top1}  last-block {loss}  {row.status}")


if __name__ == "__main__":
    main()
