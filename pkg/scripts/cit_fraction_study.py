"""Downstream clustering before and after CIT for a range of covered fractions.

    python3 scripts/cit_fraction_study.py --seed 0 --fractions 0 0.3 0.6 1.0
"""

import argparse
import csv
from dataclasses import replace
from pathlib import Path

from afmrl.pipeline import Experiment, ExperimentConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--fractions", type=float, nargs="+", default=[0.0, 0.3, 0.6, 1.0])
    ap.add_argument("--out", type=Path, default=Path("runs/cit_fraction.csv"))
    args = ap.parse_args()
    base = ExperimentConfig().with_seed(args.seed)
    ex = Experiment(base)
    enc, _ = ex.train_encoder("agcl", probe=False)
    sft, _ = ex.train_sft()
    rl, _ = ex.train_rl(sft, enc)
    pre = ex.evaluate_downstream(enc, rl)
    rows = [("pre", "", m, v) for m, v in pre.items()]
    for frac in args.fractions:
        ex_f = Experiment(replace(base, cit=replace(base.cit, fraction=frac)), ex.universe, ex.pairs)
        res = ex_f.cit(rl)
        post = ex_f.evaluate_downstream(res.encoder, rl)
        rows += [("post", frac, m, v) for m, v in post.items()]
        print(f"fraction {frac:.2f}: purity {pre['purity']:.4f} -> {post['purity']:.4f}, "
              f"nmi {pre['nmi']:.4f} -> {post['nmi']:.4f}, valid {res.valid_fraction:.3f}", flush=True)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["stage", "fraction", "metric", "value"])
        for stage, frac, m, v in rows:
            w.writerow([stage, frac, m, repr(v)])


if __name__ == "__main__":
    main()
