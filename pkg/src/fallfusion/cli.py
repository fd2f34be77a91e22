"""Command-line entry point: ``fallfusion <subcommand> [flags]``.

Every subcommand accepts ``--config FILE`` (JSON object or ``key = value`` lines, keys named after the
long flags with dashes or underscores). Explicit flags win over file values. The resolved settings are
written as ``config.json`` next to the outputs.

Exit status: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import threading
from dataclasses import asdict
from pathlib import Path

from . import __version__

log = logging.getLogger("fallfusion")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
# "fall" is not a scenario of its own: every scenario interleaves fall trials, walking is the canonical one
SCENARIO_ALIASES = {"fall": "walking"}
TABLE_PARAMS, TABLE_MACS = 2.1e6, 310e6


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n\n{self.format_usage()}")


# ---------------------------------------------------------------- config files

def load_config_file(path) -> dict:
    text = Path(path).read_text()
    stripped = text.strip()
    if stripped.startswith("{"):
        data = json.loads(stripped)
    else:
        data = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line and ":" not in line:
                raise UsageError(f"{path}:{n}: expected 'key = value'")
            key, val = (line.split("=", 1) if "=" in line else line.split(":", 1))
            val = val.strip()
            try:
                data[key.strip()] = json.loads(val)
            except json.JSONDecodeError:
                data[key.strip()] = val
    return {k.replace("-", "_"): v for k, v in data.items()}


def _apply_config(parser: argparse.ArgumentParser, command: str, path) -> None:
    """Install file values as subcommand defaults, so explicit flags still override them."""
    values = load_config_file(path)
    known = {a.dest: a for a in parser._actions}
    unknown = sorted(set(values) - set(known) - {"config", "command"})
    if unknown:
        raise UsageError(f"unknown config keys for '{command}': {', '.join(unknown)}")
    defaults = {}
    for k, v in values.items():
        if k in ("config", "command"):
            continue
        act = known[k]
        if act.type is not None and v is not None and not isinstance(v, (list, bool)):
            try:
                v = act.type(v)
            except (TypeError, ValueError) as e:
                raise UsageError(f"config key {k}: {e}") from None
        if act.nargs in ("+", "*") and not isinstance(v, list):
            v = [v]
        if act.choices is not None:
            for item in (v if isinstance(v, list) else [v]):
                if item not in act.choices:
                    raise UsageError(f"config key {k}: {item!r} not in {sorted(act.choices)}")
        defaults[k] = v
    parser.set_defaults(**defaults)
    for act in parser._actions:
        if act.dest in defaults:
            act.required = False


def _write_resolved(out_dir, args: argparse.Namespace, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    cfg["version"] = __version__
    if extra:
        cfg.update(extra)
    path = out / "config.json"
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}") from None


# ---------------------------------------------------------------- shared helpers

def _pre_cfg(args):
    from .signal.pipeline import PreprocessConfig
    return PreprocessConfig()


def _load_model(path):
    from .nn.checkpoint import checkpoint_extra, load_checkpoint
    from .nn.model import AblationSpec, ModelConfig, build_model

    extra = checkpoint_extra(path) or {}
    spec = AblationSpec.from_dict(extra["spec"]) if "spec" in extra else None
    mcfg = ModelConfig(**extra["model_config"]) if "model_config" in extra else None
    model = build_model(spec, mcfg)
    load_checkpoint(model, path)
    return model.eval(), extra


def _split(records, args):
    from .data.windows import SplitManifest, split_subjects

    if getattr(args, "split_file", None):
        return SplitManifest.from_dict(json.loads(Path(args.split_file).read_text()))
    return split_subjects(records, tuple(args.ratios), args.seed)


def _train_cfg(args):
    from .train.trainer import TrainConfig

    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, weight_decay=args.weight_decay,
                       seed=args.seed, augment=not args.no_augment, max_minutes=args.max_minutes)


def _select_eval(records, args):
    if args.split == "all":
        return records
    return _split(records, args).select(records, args.split)


# ---------------------------------------------------------------- subcommands

def cmd_synth(args) -> int:
    from .data.scenarios import SCENARIOS, make_script
    from .data.synth import generate_scenario
    from .signal.recording import write_recording

    names = []
    for s in args.scenario:
        if s == "all":
            names += list(SCENARIOS)
        else:
            names.append(SCENARIO_ALIASES.get(s, s))
    subjects = args.subject if args.subject is not None else list(range(args.subjects))
    out = Path(args.out)
    written = []
    for subject in subjects:
        for name in names:
            for k in range(args.sessions):
                script = make_script(name, subject, k, seed=args.seed, duration_s=args.duration)
                rec = generate_scenario(script, args.seed)
                written.append(str(write_recording(rec, out / script.session_id).name))
    _write_resolved(out, args, {"recordings": written})
    print(f"wrote {len(written)} recordings to {out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    from .data.corpus import load_windows, save_windows

    records = load_windows(args.data, _pre_cfg(args))
    path = save_windows(records, Path(args.out) / "windows.fwin")
    n_fall = sum(r.label for r in records)
    _write_resolved(args.out, args, {"windows": len(records), "fall_windows": n_fall})
    print(f"wrote {len(records)} windows ({n_fall} fall) to {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    import torch

    from .data.corpus import load_windows
    from .nn.model import ABLATIONS, ModelConfig, build_model, count_params
    from .train.metrics import scenario_rows, write_csv, write_curve_csv, write_json
    from .train.trainer import evaluate, train

    torch.set_num_threads(1)
    out = Path(args.out)
    records = load_windows(args.data, _pre_cfg(args))
    man = _split(records, args)
    tr, va, te = (man.select(records, s) for s in ("train", "val", "test"))
    cfg = _train_cfg(args)
    mcfg = ModelConfig(channels=args.channels)
    _write_resolved(out, args, {"train_config": cfg.to_dict(), "model_config": asdict(mcfg)})
    write_json(man.to_dict(), out / "split.json")
    model = build_model(ABLATIONS[args.ablation], mcfg, seed=args.seed)
    log.info("training %s (%d params) on %d/%d/%d windows", args.ablation, count_params(model), len(tr), len(va), len(te))
    res = train(model, tr, va or None, cfg, out)
    write_json({"best_epoch": res.best_epoch, "seconds": res.seconds, "history": res.history}, out / "history.json")
    if te:
        ev = evaluate(model, te, cfg)
        write_json(ev["report"].to_dict(), out / "test_metrics.json")
        write_csv(scenario_rows(ev["report"]), out / "test_metrics.csv")
        write_curve_csv(ev["probs"], [r.label for r in te], out / "test_curve.csv")
        print(f"test macro F1 {ev['report'].macro_f1:.2f}  fall recall {ev['report'].fall_recall:.2f}")
    print(f"checkpoint: {res.checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data.corpus import load_windows
    from .train.metrics import compute_metrics, scenario_rows, write_csv, write_curve_csv, write_json
    from .train.trainer import evaluate

    model, _ = _load_model(args.checkpoint)
    records = _select_eval(load_windows(args.data, _pre_cfg(args)), args)
    ev = evaluate(model, records)
    rep = compute_metrics(ev["probs"], [r.label for r in records], [r.scenario for r in records], args.threshold)
    out = Path(args.report)
    write_json(rep.to_dict(), out / "metrics.json")
    write_csv(scenario_rows(rep), out / "metrics.csv")
    write_curve_csv(ev["probs"], [r.label for r in records], out / "curve.csv")
    _write_resolved(out, args)
    print(json.dumps(rep.row(), indent=2))
    return EXIT_OK


def cmd_ablate(args) -> int:
    import torch

    from .data.corpus import load_windows
    from .nn.model import ABLATIONS, ModelConfig
    from .train.experiments import run_ablation
    from .train.metrics import write_csv, write_json

    torch.set_num_threads(1)
    out = Path(args.out)
    records = load_windows(args.data, _pre_cfg(args))
    man = _split(records, args)
    tr, va, te = (man.select(records, s) for s in ("train", "val", "test"))
    cfg = _train_cfg(args)
    _write_resolved(out, args, {"train_config": cfg.to_dict()})
    rows, full = [], {}
    for name in args.variants:
        res = run_ablation(ABLATIONS[name], tr, va, te, cfg, seeds=tuple(args.seeds),
                           model_cfg=ModelConfig(channels=args.channels), name=name)
        full[name] = res.to_dict()
        rows.append({"variant": name, **res.mean()})
        write_json(full, out / "ablation.json")       # rewritten after each variant so partial runs survive
        write_csv(rows, out / "ablation.csv")
        print(f"{name:22s} macro F1 {res.mean()['macro_f1']:.2f}  precision {res.mean()['fall_precision']:.2f}")
    return EXIT_OK


def cmd_robust(args) -> int:
    from .data.corpus import load_windows
    from .train.experiments import robustness_suite
    from .train.metrics import write_csv, write_json

    model, _ = _load_model(args.checkpoint)
    records = _select_eval(load_windows(args.data, _pre_cfg(args)), args)
    rows = robustness_suite(model, records, args.seed)
    out = Path(args.out)
    write_json({name: rep.to_dict() for name, rep in rows}, out / "robustness.json")
    write_csv([{"condition": name, **rep.row()} for name, rep in rows], out / "robustness.csv")
    _write_resolved(out, args)
    for name, rep in rows:
        print(f"{name:22s} accuracy {rep.accuracy:.2f}  macro F1 {rep.macro_f1:.2f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    import numpy as np

    from .data.scenarios import make_script
    from .data.synth import generate_scenario
    from .gateway.protocol import RADAR, VIBRATION
    from .gateway.scoring import node_windows
    from .nn.model import ABLATIONS, ModelConfig, build_model
    from .train.experiments import latency_bench
    from .train.metrics import write_json

    if args.checkpoint:
        model, _ = _load_model(args.checkpoint)
    else:
        model = build_model(ABLATIONS[args.ablation], ModelConfig(channels=args.channels), seed=args.seed)
    rec = generate_scenario(make_script("walking", 0, 0, seed=args.seed, duration_s=40.0), args.seed)
    pre = _pre_cfg(args)
    vib = node_windows(rec, VIBRATION, pre)
    rad = node_windows(rec, RADAR, pre)
    windows = [(v.astype(np.float64), r.astype(np.float64)) for (_, v), (_, r) in zip(vib, rad)]
    res = latency_bench(model, args.windows, windows, pre)
    res["reference"] = {"params": TABLE_PARAMS, "macs": TABLE_MACS,
                        "params_ratio": res["params"] / TABLE_PARAMS, "macs_ratio": res["macs"] / TABLE_MACS}
    out = Path(args.out)
    write_json(res, out / "latency.json")
    _write_resolved(out, args)
    print(f"end-to-end median {res['end_ms']['median']:.2f} ms  p95 {res['end_ms']['p95']:.2f} ms  "
          f"params {res['params']:,}  MACs {res['macs']:,}")
    return EXIT_OK


def cmd_serve(args) -> int:
    import torch

    from .gateway.server import GatewayConfig, serve

    torch.set_num_threads(1)
    model, _ = _load_model(args.checkpoint)
    host, port = args.listen
    cfg = GatewayConfig(host, port, args.pair_tolerance, args.fallback_timeout, args.read_deadline, args.threshold)
    if args.stats:
        _write_resolved(Path(args.stats).parent, args)
    summary = serve(model, args.log, cfg, _pre_cfg(args), args.stats)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_replay(args) -> int:
    from .gateway.protocol import RADAR, VIBRATION
    from .gateway.replay import node_replay
    from .signal.recording import read_recording

    rec = read_recording(args.recording)
    kinds = {"vibration": [VIBRATION], "radar": [RADAR], "both": [VIBRATION, RADAR]}[args.node]
    results, errors = {}, []

    def run(kind):
        try:
            results[kind] = node_replay(rec, args.target, kind, args.realtime, args.node_id, args.corrupt,
                                        args.drop, args.seed, args.time_scale)
        except ConnectionError as e:
            errors.append(str(e))

    threads = [threading.Thread(target=run, args=(k,)) for k in kinds]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise ConnectionError("; ".join(errors))
    for kind, r in sorted(results.items()):
        name = "vibration" if kind == VIBRATION else "radar"
        print(f"{name}: sent {r['sent']}/{r['frames']} frames, corrupted {len(r['corrupted'])}, "
              f"dropped {len(r['dropped'])}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _common(p, seed=True):
    p.add_argument("--config", help="JSON or 'key = value' file supplying defaults for this subcommand")
    if seed:
        p.add_argument("--seed", type=int, default=0, help="seed for every stochastic step")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def _training_flags(p):
    p.add_argument("--data", required=True, help="FWIN file, preprocess output dir, or recordings dir")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=1e-2)
    p.add_argument("--max-minutes", type=float, default=None, help="stop after the epoch that crosses this budget")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--ratios", type=float, nargs=3, default=[0.6, 0.2, 0.2], metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--split-file", help="reuse a split.json instead of drawing one from --seed")


def _eval_flags(p):
    p.add_argument("--checkpoint", required=True, help="FMDL checkpoint (sidecar .json describes the architecture)")
    p.add_argument("--data", required=True, help="FWIN file, preprocess output dir, or recordings dir")
    p.add_argument("--split", default="all", choices=["all", "train", "val", "test"],
                   help="score only one subject split (drawn from --seed or --split-file)")
    p.add_argument("--split-file")
    p.add_argument("--ratios", type=float, nargs=3, default=[0.6, 0.2, 0.2], metavar=("TRAIN", "VAL", "TEST"))


def build_parser() -> argparse.ArgumentParser:
    from .data.scenarios import SCENARIOS
    from .nn.model import ABLATIONS

    parser = _Parser(prog="fallfusion", description="Radar and floor-vibration fall detection toolkit.")
    parser.add_argument("--version", action="version", version=f"fallfusion {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate synthetic recordings")
    _common(p)
    p.add_argument("--scenario", nargs="+", default=["all"],
                   choices=["all", *SCENARIOS, *SCENARIO_ALIASES], help="scenario names, 'all', or 'fall'")
    p.add_argument("--subjects", type=int, default=1, help="subjects 0..N-1")
    p.add_argument("--subject", type=int, nargs="+", help="explicit subject ids (overrides --subjects)")
    p.add_argument("--sessions", type=int, default=1, help="sessions per subject and scenario")
    p.add_argument("--duration", type=float, default=72.0, help="seconds per session")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="align, denoise and window recordings into an FWIN file")
    _common(p)
    p.add_argument("--data", required=True, help="recording container or a directory of them")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model on a subject-independent split")
    _common(p)
    _training_flags(p)
    p.add_argument("--ablation", default="full", choices=sorted(ABLATIONS))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint and write JSON/CSV reports")
    _common(p)
    _eval_flags(p)
    p.add_argument("--report", required=True, help="report output directory")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare ablation variants")
    _common(p)
    _training_flags(p)
    p.add_argument("--variants", nargs="+", default=sorted(ABLATIONS), choices=sorted(ABLATIONS))
    p.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("robust", help="evaluate under time shift and dropout perturbations")
    _common(p)
    _eval_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_robust)

    p = sub.add_parser("bench", help="per-window latency, parameter and MAC counts")
    _common(p)
    p.add_argument("--checkpoint", help="FMDL checkpoint; a freshly initialized model otherwise")
    p.add_argument("--ablation", default="full", choices=sorted(ABLATIONS))
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--windows", type=int, default=200)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("serve", help="run the detection gateway until interrupted")
    _common(p, seed=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--listen", type=_addr, default=("127.0.0.1", 7700), help="host:port")
    p.add_argument("--log", required=True, help="JSON-lines detection log")
    p.add_argument("--stats", help="write connection and frame counters here on shutdown")
    p.add_argument("--pair-tolerance", type=float, default=0.2, help="seconds between paired window starts")
    p.add_argument("--fallback-timeout", type=float, default=5.0, help="seconds before scoring a lone window")
    p.add_argument("--read-deadline", type=float, default=10.0)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("replay", help="stream a recording to a gateway as sensor nodes")
    _common(p)
    p.add_argument("--recording", required=True, help="recording container directory")
    p.add_argument("--target", type=_addr, default=("127.0.0.1", 7700), help="gateway host:port")
    p.add_argument("--node", default="both", choices=["vibration", "radar", "both"])
    p.add_argument("--node-id", type=int, default=0)
    p.add_argument("--realtime", action="store_true", help="pace frames at the window stride")
    p.add_argument("--time-scale", type=float, default=1.0, help="stride multiplier in realtime mode")
    p.add_argument("--corrupt", type=float, default=0.0, help="fraction of frames with a flipped bit")
    p.add_argument("--drop", type=float, default=0.0, help="fraction of frames never sent")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        parser = build_parser()
        subs = parser._subparsers._group_actions[0].choices
        # the top-level parser takes no valued options, so the first bare word is the subcommand
        cmd = next((a for a in argv if not a.startswith("-")), None)
        if cmd in subs:
            pre = argparse.ArgumentParser(add_help=False)
            pre.add_argument("--config")
            known, _ = pre.parse_known_args(argv[argv.index(cmd) + 1:])
            if known.config:
                _apply_config(subs[cmd], cmd, known.config)
        args = parser.parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:           # --help / --version
        return EXIT_OK if not e.code else EXIT_USAGE
    except (OSError, ValueError) as e:
        print(f"fallfusion: cannot read config: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:
        log.debug("failure", exc_info=True)
        print(f"fallfusion {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
