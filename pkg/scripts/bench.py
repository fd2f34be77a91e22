"""Single-threaded per-window latency, parameter and MAC counts at several channel widths.

    python scripts/bench.py --channels 32 64 --windows 200
"""
import argparse
import json

from fallfusion.data.scenarios import make_script
from fallfusion.data.synth import generate_scenario
from fallfusion.gateway.protocol import RADAR, VIBRATION
from fallfusion.gateway.scoring import node_windows
from fallfusion.nn.model import ABLATIONS, ModelConfig, build_model
from fallfusion.train.experiments import latency_bench

REFERENCE = {"params": 2.1e6, "macs": 310e6}


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--channels", type=int, nargs="+", default=[64])
    ap.add_argument("--windows", type=int, default=200)
    ap.add_argument("--out", help="write all results to this JSON file")
    args = ap.parse_args()

    rec = generate_scenario(make_script("walking", 0, 0, duration_s=40.0), 0)
    vib, rad = dict(node_windows(rec, VIBRATION)), dict(node_windows(rec, RADAR))
    wins = [(vib[t], rad[t]) for t in sorted(vib) if t in rad]
    results = {}
    for c in args.channels:
        res = latency_bench(build_model(ABLATIONS["full"], ModelConfig(channels=c)), args.windows, wins)
        res["reference"] = REFERENCE
        results[c] = res
        print(f"C={c:3d}  end-to-end median {res['end_ms']['median']:6.2f} ms "
              f"(pre {res['pre_ms']['median']:.2f}, inference {res['inf_ms']['median']:.2f})  "
              f"params {res['params'] / 1e6:.2f} M  MACs {res['macs'] / 1e6:.1f} M")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
