"""Block-wise vs PFCR (one stage) across learning-rate / iteration regimes.

Used to check whether the fine-to-coarse advantage depends on the
optimization budget at desk scale. Prints one line per (regime, seed).

    python3 scripts/sweep_regimes.py --regimes 1e-3:10 4e-5:100 1e-4:30 3e-3:30 --seeds 0 1
"""
import argparse
from dataclasses import replace

from pfcr.harness.desk import desk_run_config
from pfcr.harness.pipeline import arm_pos_config, load_datasets, obtain_baseline, quantize_run


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--regimes", nargs="+", default=["1e-3:10", "4e-5:100", "1e-4:30", "3e-3:30"], help="LR:ITER_0")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1])
    ap.add_argument("--bits", type=int, default=3)
    args = ap.parse_args()

    cfg = desk_run_config()
    train, ev = load_datasets(cfg.data, cfg.model.image_size, cfg.model.in_chans)
    baseline, acc = obtain_baseline(cfg, train, ev)
    print(f"baseline top-1 {acc:.4f}")
    for regime in args.regimes:
        lr, it = regime.split(":")
        run_cfg = replace(cfg, pos=replace(cfg.pos, bits=args.bits, lr_0=float(lr), iter_0=int(it)))
        for seed in args.seeds:
            cells = []
            for arm in ("blockwise", "pfcr_only"):
                _, rep = quantize_run(run_cfg, arm_pos_config(run_cfg, arm, seed), baseline, train, ev, acc)
                cells.append(f"{arm} {rep.quantized_accuracy:.3f} last-block {rep.block_losses[-1]:.4f}")
            print(f"lr {lr} iter_0 {it} seed {seed}: " + " | ".join(cells), flush=True)


if __name__ == "__main__":
    main()
