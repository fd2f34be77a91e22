"""Train ablation variants on the synthetic corpus and write a comparison table.

    python scripts/ablation.py --variants full late_average radar_only --epochs 6 --seeds 1
"""
import argparse
import csv
import json
import logging
from pathlib import Path

import torch

from fallfusion.data.corpus import CorpusConfig, build_corpus
from fallfusion.data.windows import split_subjects
from fallfusion.nn.model import ABLATIONS
from fallfusion.train.experiments import SUMMARY_KEYS, run_ablation
from fallfusion.train.trainer import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--variants", nargs="+", default=["full", "early_concat", "late_average", "no_cross_condition",
                                                      "vibration_only", "radar_only"], choices=sorted(ABLATIONS))
    ap.add_argument("--epochs", type=int, default=6)
    ap.add_argument("--seeds", type=int, nargs="+", default=[1])
    ap.add_argument("--cache", default="/tmp/ffcache")
    ap.add_argument("--out", default="ablation_out")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)

    recs = build_corpus(CorpusConfig(), cache_dir=args.cache)
    man = split_subjects(recs, (0.6, 0.2, 0.2), 0)
    tr, va, te = (man.select(recs, s) for s in ("train", "val", "test"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    table = {}
    for name in args.variants:
        res = run_ablation(ABLATIONS[name], tr, va, te, TrainConfig(epochs=args.epochs), seeds=tuple(args.seeds),
                           name=name)
        table[name] = res.to_dict()
        m = res.mean()
        print(f"{name:20s} " + " ".join(f"{k} {m[k]:.2f}" for k in SUMMARY_KEYS if m[k] is not None), flush=True)
        (out / "ablation.json").write_text(json.dumps(table, indent=2))

    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", *SUMMARY_KEYS, "seconds"])
        for name, d in table.items():
            w.writerow([name, *(d["mean"][k] for k in SUMMARY_KEYS), round(d["seconds"], 1)])


if __name__ == "__main__":
    main()
