"""Reward saturation over k: mean reward and within-group std per k and reward kind.

Trains an AGCL encoder and an SFT generator for one seed, then scores the same
rollouts at every k.

    python3 scripts/reward_k_study.py --seed 0 --out runs/reward_k.csv
"""

import argparse
import csv
from pathlib import Path

from afmrl.pipeline import Experiment, ExperimentConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--policy", choices=("sft", "rl"), default="sft")
    ap.add_argument("--out", type=Path, default=Path("runs/reward_k.csv"))
    args = ap.parse_args()
    ex = Experiment(ExperimentConfig().with_seed(args.seed))
    enc, _ = ex.train_encoder("agcl", probe=False)
    policy, _ = ex.train_sft()
    if args.policy == "rl":
        policy, _ = ex.train_rl(policy, enc)
    _, summary = ex.reward_sweep(policy, enc)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["reward_kind", "k", "mean_reward", "mean_group_std", "frac_valid_raw_one"])
        for kind, per_k in summary.items():
            for k, s in per_k.items():
                w.writerow([kind, k, repr(s["mean_reward"]), repr(s["mean_group_std"]), repr(s["frac_valid_raw_one"])])
                print(f"{kind:9s} k={k:3d}  mean={s['mean_reward']:.4f}  std={s['mean_group_std']:.4f}  "
                      f"raw==1: {s['frac_valid_raw_one']:.3f}")


if __name__ == "__main__":
    main()
