"""Whole pipeline through the command line entry point, then an in-process gateway replay.

synth -> preprocess -> train -> eval -> robust -> bench, and finally one held-out session is
streamed to a gateway and compared against offline scoring.

    python scripts/end_to_end.py --work runs/e2e --epochs 30
"""
import argparse
import json
import threading
import time
from pathlib import Path

import numpy as np

from fallfusion.cli import main as cli
from fallfusion.gateway.protocol import RADAR, VIBRATION
from fallfusion.gateway.replay import node_replay
from fallfusion.gateway.scoring import score_offline
from fallfusion.gateway.server import Gateway, GatewayConfig, GatewayThread, read_detection_log
from fallfusion.nn.checkpoint import checkpoint_extra, load_checkpoint
from fallfusion.nn.model import AblationSpec, ModelConfig, build_model
from fallfusion.signal.recording import read_recording


def step(*argv):
    argv = [str(a) for a in argv]
    print("$ fallfusion " + " ".join(argv), flush=True)
    t0 = time.perf_counter()
    if cli(argv) != 0:
        raise SystemExit(f"step failed: {argv[0]}")
    print(f"  done in {time.perf_counter() - t0:.0f} s", flush=True)


def load_trained(path: Path):
    extra = checkpoint_extra(path)
    model = build_model(AblationSpec.from_dict(extra["spec"]), ModelConfig(**extra["model_config"]))
    load_checkpoint(model, path)
    return model.eval()


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--work", default="e2e_out")
    ap.add_argument("--subjects", type=int, default=10)
    ap.add_argument("--duration", type=float, default=72.0)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    work = Path(args.work)

    step("synth", "--subjects", args.subjects, "--duration", args.duration, "--out", work / "rec", "--seed", args.seed)
    step("preprocess", "--data", work / "rec", "--out", work / "pre")
    step("train", "--data", work / "pre", "--out", work / "model", "--epochs", args.epochs, "--seed", args.seed + 1)
    step("eval", "--checkpoint", work / "model" / "model.fmdl", "--data", work / "pre", "--report", work / "report",
         "--split-file", work / "model" / "split.json", "--split", "test")
    step("robust", "--checkpoint", work / "model" / "model.fmdl", "--data", work / "pre", "--out", work / "robust",
         "--split-file", work / "model" / "split.json", "--split", "test")
    step("bench", "--checkpoint", work / "model" / "model.fmdl", "--windows", 200, "--out", work / "bench")

    # stream one test-subject session through a live gateway
    split = json.loads((work / "model" / "split.json").read_text())
    test_subjects = set(split["test"])
    session = next(p for p in sorted((work / "rec").iterdir())
                   if (p / "meta.json").exists()
                   and json.loads((p / "meta.json").read_text())["subject_id"] in test_subjects)
    rec = read_recording(session)
    model = load_trained(work / "model" / "model.fmdl")
    offline = {d.t0_us: d.p_fall for d in score_offline(model, rec)}
    gw = Gateway(model, work / "gateway" / "detections.jsonl", GatewayConfig(port=0, fallback_timeout_s=30))
    with GatewayThread(gw) as g:
        th = [threading.Thread(target=node_replay, args=(rec, ("127.0.0.1", g.port), k)) for k in (VIBRATION, RADAR)]
        for t in th:
            t.start()
        for t in th:
            t.join()
        while gw.stats["connections"] < 2:
            time.sleep(0.05)
    det = read_detection_log(work / "gateway" / "detections.jsonl")
    dev = max(abs(d["p_fall"] - offline[d["t0_us"]]) for d in det)
    print(f"gateway replay of {session.name}: {len(det)}/{len(offline)} windows, max |p_online - p_offline| = {dev:.1e}")
    m = json.loads((work / "report" / "metrics.json").read_text())
    print(f"test macro F1 {m['macro_f1']:.2f}, fall recall {m['fall_recall']:.2f}, accuracy {m['accuracy']:.2f}")
    print("latency median ms", np.round(json.loads((work / "bench" / "latency.json").read_text())["end_ms"]["median"], 2))


if __name__ == "__main__":
    main()
