"""Binary detection metrics with per-scenario breakdowns and threshold curves."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..errors import InvalidLabel, ShapeMismatch


def _pct(num: float, den: float) -> float:
    return 100.0 * num / den if den else 0.0


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r else 0.0


@dataclass
class MetricsReport:
    n: int
    tp: int
    fp: int
    tn: int
    fn: int
    fall_precision: float
    fall_recall: float
    fall_f1: float
    nonfall_precision: float
    nonfall_recall: float
    nonfall_f1: float
    accuracy: float
    balanced_accuracy: float
    macro_f1: float
    auc: float | None
    threshold: float = 0.5
    per_scenario: dict = field(default_factory=dict)

    def to_dict(self, with_scenarios: bool = True) -> dict:
        d = asdict(self)
        d["per_scenario"] = ({k: v.to_dict(False) for k, v in self.per_scenario.items()}
                             if with_scenarios else {})
        return d

    def row(self) -> dict:
        """Flat summary row for CSV tables."""
        return {k: getattr(self, k) for k in ("n", "accuracy", "balanced_accuracy", "macro_f1", "fall_precision",
                                               "fall_recall", "auc", "tp", "fp", "tn", "fn")}


def confusion(pred: np.ndarray, labels: np.ndarray) -> tuple[int, int, int, int]:
    tp = int(np.sum((pred == 1) & (labels == 1)))
    fp = int(np.sum((pred == 1) & (labels == 0)))
    tn = int(np.sum((pred == 0) & (labels == 0)))
    fn = int(np.sum((pred == 0) & (labels == 1)))
    return tp, fp, tn, fn


def report_from_confusion(tp: int, fp: int, tn: int, fn: int, auc=None, threshold: float = 0.5) -> MetricsReport:
    fp_ = _pct(tp, tp + fp)
    fr = _pct(tp, tp + fn)
    np_ = _pct(tn, tn + fn)
    nr = _pct(tn, tn + fp)
    ff, nf = _f1(fp_, fr), _f1(np_, nr)
    n = tp + fp + tn + fn
    return MetricsReport(n, tp, fp, tn, fn, fp_, fr, ff, np_, nr, nf, _pct(tp + tn, n), (fr + nr) / 2,
                         (ff + nf) / 2, auc, threshold)


def curve_points(probs, labels) -> list[dict]:
    """One point per distinct score, sweeping the threshold from high to low (predict p >= threshold)."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    order = np.argsort(-probs, kind="mergesort")
    p, y = probs[order], labels[order]
    P, N = int(y.sum()), int(len(y) - y.sum())
    last = np.r_[np.nonzero(np.diff(p))[0], len(p) - 1]     # final index of each tie group
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    pts = []
    for thr, tp, fp in zip(p[last], tps, fps):
        pts.append({"threshold": float(thr), "precision": tp / (tp + fp) if tp + fp else 1.0,
                    "recall": tp / P if P else 0.0, "fpr": fp / N if N else 0.0, "tpr": tp / P if P else 0.0})
    return pts


def roc_auc(probs, labels) -> float | None:
    """Exact trapezoidal area under the ROC over all distinct thresholds; None for one class."""
    labels = np.asarray(labels).astype(int)
    if labels.min(initial=0) == labels.max(initial=0):
        return None
    pts = curve_points(probs, labels)
    fpr = np.r_[0.0, [q["fpr"] for q in pts]]
    tpr = np.r_[0.0, [q["tpr"] for q in pts]]
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


def compute_metrics(probs, labels, scenarios=None, threshold: float = 0.5) -> MetricsReport:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape != labels.shape:
        raise ShapeMismatch(f"{probs.shape} probabilities vs {labels.shape} labels")
    if not np.all((labels == 0) | (labels == 1)):
        raise InvalidLabel("labels must be 0 or 1")
    labels = labels.astype(int)
    pred = (probs >= threshold).astype(int)
    rep = report_from_confusion(*confusion(pred, labels), auc=roc_auc(probs, labels) if len(labels) else None,
                                threshold=threshold)
    if scenarios is not None:
        scenarios = np.asarray(scenarios)
        for s in sorted(set(scenarios.tolist())):
            m = scenarios == s
            rep.per_scenario[s] = compute_metrics(probs[m], labels[m], None, threshold)
    return rep


# ---------------------------------------------------------------- report files

def write_json(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, tuple)):
        return sorted(o) if isinstance(o, set) else list(o)
    if hasattr(o, "to_dict"):
        return o.to_dict()
    raise TypeError(f"not serializable: {type(o)}")


def write_csv(rows: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = list(rows[0]) if rows else []
    for r in rows[1:]:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
    return path


def write_curve_csv(probs, labels, path) -> Path:
    return write_csv(curve_points(probs, labels), path)


def scenario_rows(rep: MetricsReport) -> list[dict]:
    rows = [{"scenario": s, **r.row()} for s, r in rep.per_scenario.items()]
    rows.append({"scenario": "all", **rep.row()})
    return rows
