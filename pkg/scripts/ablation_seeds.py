"""Run the full ladder for several seeds and write per-seed and median rows.

    python3 scripts/ablation_seeds.py --seeds 0 1 2 3 4 --out runs/ablation_seeds.csv
"""

import argparse
import csv
import statistics
from pathlib import Path

from afmrl.pipeline import LADDER, ExperimentConfig, run_ladder

COLUMNS = [f"recall@1_{name}" for name in LADDER] + [
    "reward_sft", "reward_rl", "purity_pre_cit", "purity_post_cit", "sft_first_attr_acc", "seconds_total",
]


def row_of(res):
    return [res.recall_at_1[n] for n in LADDER] + [
        res.reward_sft, res.reward_rl, res.purity_pre, res.purity_post, res.sft_first_attr_acc,
        sum(res.seconds.values()),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--out", type=Path, default=Path("runs/ablation_seeds.csv"))
    args = ap.parse_args()
    rows = []
    for seed in args.seeds:
        res = run_ladder(ExperimentConfig().with_seed(seed))
        rows.append(row_of(res))
        print(f"seed {seed}: " + ", ".join(f"{c}={v:.4f}" for c, v in zip(COLUMNS, rows[-1])), flush=True)
    medians = [statistics.median(col) for col in zip(*rows)]
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["seed"] + COLUMNS)
        for seed, r in zip(args.seeds, rows):
            w.writerow([seed] + [repr(v) for v in r])
        w.writerow(["median"] + [repr(v) for v in medians])
    print("median: " + ", ".join(f"{c}={v:.4f}" for c, v in zip(COLUMNS, medians)))


if __name__ == "__main__":
    main()
