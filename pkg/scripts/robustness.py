"""Train (or load) the full model and score the test split under timing shift and modality dropout.

    python scripts/robustness.py --epochs 6
    python scripts/robustness.py --checkpoint runs/model.fmdl
"""
import argparse
import csv
import logging
from pathlib import Path

import torch

from fallfusion.data.corpus import CorpusConfig, build_corpus
from fallfusion.data.windows import split_subjects
from fallfusion.nn.checkpoint import load_checkpoint
from fallfusion.nn.model import ABLATIONS, build_model
from fallfusion.train.experiments import robustness_suite
from fallfusion.train.trainer import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--checkpoint", help="skip training and load this FMDL file")
    ap.add_argument("--epochs", type=int, default=6)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--cache", default="/tmp/ffcache")
    ap.add_argument("--out", default="robustness_out")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)

    recs = build_corpus(CorpusConfig(), cache_dir=args.cache)
    man = split_subjects(recs, (0.6, 0.2, 0.2), 0)
    tr, va, te = (man.select(recs, s) for s in ("train", "val", "test"))
    model = build_model(ABLATIONS["full"], seed=args.seed)
    if args.checkpoint:
        load_checkpoint(model, args.checkpoint)
    else:
        train(model, tr, va, TrainConfig(epochs=args.epochs, seed=args.seed))

    rows = robustness_suite(model.eval(), te)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "robustness.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["condition", "accuracy", "macro_f1", "fall_precision", "fall_recall", "auc"])
        for name, rep in rows:
            w.writerow([name, rep.accuracy, rep.macro_f1, rep.fall_precision, rep.fall_recall, rep.auc])
            print(f"{name:22s} acc {rep.accuracy:6.2f}  F1 {rep.macro_f1:6.2f}  "
                  f"drop {rows[0][1].accuracy - rep.accuracy:5.2f}")


if __name__ == "__main__":
    main()
