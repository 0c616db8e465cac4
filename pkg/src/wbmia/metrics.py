"""
Attack metrics and report files.

A record is predicted *member* when its score is at or above the decision
threshold; "positive" means "member". ROC thresholds are the midpoints
between consecutive distinct scores plus +inf and -inf (score > threshold
counts as positive), so the curve runs from (0, 0) to (1, 1).
"""

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from wbmia.errors import ArgumentError


@dataclass
class EvalResult:
    attack_accuracy: float
    tpr: float
    fpr: float
    threshold: float
    tp: int
    tn: int
    fp: int
    fn: int
    roc_points: list
    auc: float
    per_class_accuracy: dict | None = None
    gradient_norm_summary: dict | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["roc_points"] = [list(p) for p in self.roc_points]
        return d


def confusion(pred, membership) -> tuple[int, int, int, int]:
    pred = np.asarray(pred, dtype=bool)
    m = np.asarray(membership, dtype=bool)
    return (int(np.sum(pred & m)), int(np.sum(~pred & ~m)), int(np.sum(pred & ~m)), int(np.sum(~pred & m)))


def roc_curve(scores, membership) -> list[tuple[float, float]]:
    s = np.asarray(scores, dtype=np.float64)
    m = np.asarray(membership, dtype=bool)
    P, N = int(m.sum()), int((~m).sum())
    if P == 0 or N == 0:
        raise ArgumentError("ROC needs both members and non-members")
    order = np.argsort(-s, kind="stable")
    s, m = s[order], m[order]
    # walking down the sorted scores, a threshold just below each distinct value
    last = np.r_[np.flatnonzero(s[1:] != s[:-1]), len(s) - 1]
    tp = np.cumsum(m)[last]
    fp = np.cumsum(~m)[last]
    pts = [(0.0, 0.0)] + [(f / N, t / P) for f, t in zip(fp, tp)]
    return pts


def roc_thresholds(scores) -> list[float]:
    """Thresholds matching :func:`roc_curve` points, from +inf down to -inf."""
    u = np.unique(np.asarray(scores, dtype=np.float64))[::-1]
    return [np.inf] + [float(0.5 * (a + b)) for a, b in zip(u[:-1], u[1:])] + [-np.inf]


def auc(points) -> float:
    """Trapezoid area under a sequence of (fpr, tpr) points."""
    pts = np.asarray(points, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


def evaluate(scores, membership, threshold: float = 0.5, labels=None) -> EvalResult:
    """Accuracy/TPR/FPR at ``threshold`` plus the full ROC.

    ``labels`` (class indices), when given, adds per-class attack accuracy.
    """
    s = np.asarray(scores, dtype=np.float64)
    m = np.asarray(membership, dtype=bool)
    if s.shape != m.shape or s.ndim != 1:
        raise ArgumentError(f"{s.size} scores vs {m.size} membership flags")
    if len(s) == 0:
        raise ArgumentError("nothing to evaluate")
    pred = s >= threshold
    tp, tn, fp, fn = confusion(pred, m)
    P, N = tp + fn, tn + fp
    pts = roc_curve(s, m)
    per_class = None
    if labels is not None:
        labels = np.asarray(labels)
        per_class = {int(c): float(np.mean(pred[labels == c] == m[labels == c])) for c in np.unique(labels)}
    return EvalResult(
        attack_accuracy=(tp + tn) / len(s),
        tpr=tp / P if P else float("nan"),
        fpr=fp / N if N else float("nan"),
        threshold=float(threshold), tp=tp, tn=tn, fp=fp, fn=fn,
        roc_points=pts, auc=auc(pts), per_class_accuracy=per_class)


def evaluate_predictions(pred_member, membership) -> EvalResult:
    """Evaluate hard member/non-member predictions (e.g. from clustering)."""
    pred = np.asarray(pred_member, dtype=float)
    return evaluate(pred, membership, threshold=0.5)


@dataclass
class GradNormReport:
    rows: list
    bin_edges: np.ndarray
    separation: dict = field(default_factory=dict)

    def to_csv(self, path) -> Path:
        path = Path(path)
        nb = len(self.bin_edges) - 1
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["group", "epoch", "count", "mean", "std"] + [f"bin{i}" for i in range(nb)]
                       + ["separated"])
            for r in self.rows:
                sep = self.separation.get(r["epoch"])
                w.writerow([r["group"], r["epoch"], r["count"], repr(r["mean"]), repr(r["std"])]
                           + list(r["hist"]) + ["" if sep is None else int(sep)])
        return path

    def summary(self) -> dict:
        return {f"{r['group']}@{r['epoch']}": {"mean": r["mean"], "std": r["std"], "count": r["count"]}
                for r in self.rows}


def separated(members, nonmembers) -> bool:
    """Non-member mean exceeds member mean by more than half the pooled std."""
    a = np.asarray(members, dtype=np.float64)
    b = np.asarray(nonmembers, dtype=np.float64)
    pooled = np.sqrt((a.var() + b.var()) / 2.0)
    return bool(b.mean() - a.mean() > pooled / 2.0)


def grad_norm_report(groups: dict, bins: int = 20) -> GradNormReport:
    """Per-(group, epoch) mean, std and histogram of gradient norms.

    ``groups`` maps ``(group_name, epoch)`` to a 1-D array. All histograms
    share ``bins`` equal-width bins over the pooled range. When both
    ``"member"`` and ``"non-member"`` exist for an epoch the report flags
    whether they are separated (see :func:`separated`).
    """
    if not groups:
        raise ArgumentError("no groups to report")
    vals = {k: np.asarray(v, dtype=np.float64).ravel() for k, v in groups.items()}
    for k, v in vals.items():
        if v.size == 0:
            raise ArgumentError(f"group {k} is empty")
    pooled = np.concatenate(list(vals.values()))
    lo, hi = float(pooled.min()), float(pooled.max())
    if hi == lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    rows = []
    for (g, ep), v in sorted(vals.items(), key=lambda kv: (kv[0][1], str(kv[0][0]))):
        hist, _ = np.histogram(v, bins=edges)
        rows.append({"group": str(g), "epoch": ep, "count": int(v.size), "mean": float(v.mean()),
                     "std": float(v.std()), "hist": hist.tolist()})
    sep = {}
    for (g, ep) in vals:
        if g == "member" and ("non-member", ep) in vals:
            sep[ep] = separated(vals[("member", ep)], vals[("non-member", ep)])
    return GradNormReport(rows, edges, sep)


def write_scores_csv(path, ids, scores, membership=None) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["example", "score"] + (["member"] if membership is not None else []))
        for i, (k, s) in enumerate(zip(ids, scores)):
            row = [int(k), repr(float(s))]
            if membership is not None:
                row.append(int(membership[i]))
            w.writerow(row)
    return path


def read_scores_csv(path):
    """Returns ``(ids, scores, membership or None)``."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    ids = np.array([int(r["example"]) for r in rows], dtype=np.int64)
    scores = np.array([float(r["score"]) for r in rows])
    mem = None
    if rows and "member" in rows[0]:
        mem = np.array([int(r["member"]) for r in rows], dtype=bool)
    return ids, scores, mem


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=_jsonable)
    return hashlib.sha256(blob.encode()).hexdigest()


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, float) and not np.isfinite(o):
        return str(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def write_summary(path, experiment_id: str, config: dict, headline: dict, extra: dict | None = None) -> Path:
    """JSON summary: id, config hash, headline numbers. No timestamps, stable key order."""
    doc = {"experiment_id": experiment_id, "config_hash": config_hash(config), **headline}
    if extra:
        doc.update(extra)
    path = Path(path)
    path.write_text(json.dumps(_clean(doc), indent=2, sort_keys=True) + "\n")
    return path


def _clean(o):
    if isinstance(o, dict):
        return {str(k): _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    if isinstance(o, np.ndarray):
        return _clean(o.tolist())
    if isinstance(o, np.generic):
        o = o.item()
    if isinstance(o, float) and not np.isfinite(o):
        return "inf" if o > 0 else ("-inf" if o < 0 else "nan")
    return o
