"""ROC/AUC evaluation and report assembly for attack score sets.

The ROC construction sweeps all distinct score thresholds with tied
scores grouped (samples sharing a score enter the positive set
together), so constant scores yield exactly the diagonal.
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np

REPORT_SCHEMA_VERSION = 1


class DegenerateScoresError(ValueError):
    """Raised when a score set has only one class."""


@dataclass
class RocCurve:
    points: np.ndarray        # (M, 2) array of (fpr, tpr), (0,0) to (1,1)

    @property
    def fpr(self):
        return self.points[:, 0]

    @property
    def tpr(self):
        return self.points[:, 1]


def _split_scores(scores):
    vals = np.array([s for s, _ in scores], dtype=np.float64)
    labels = np.array([bool(m) for _, m in scores])
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == len(labels):
        raise DegenerateScoresError(
            "need at least one member and one non-member")
    return vals, labels, n_pos


def roc_curve(scores) -> RocCurve:
    """scores: iterable of (score, is_member); higher = more member-like."""
    vals, labels, n_pos = _split_scores(scores)
    n_neg = len(labels) - n_pos
    order = np.argsort(-vals, kind="stable")
    vals, labels = vals[order], labels[order]
    tps = np.cumsum(labels)
    fps = np.cumsum(~labels)
    # keep only the last entry of each tie group
    last = np.nonzero(np.diff(vals, append=-np.inf))[0]
    points = [(0.0, 0.0)]
    points += [(fps[i] / n_neg, tps[i] / n_pos) for i in last]
    return RocCurve(points=np.array(points, dtype=np.float64))


def auc(curve: RocCurve) -> float:
    """Trapezoidal area; equals P(member > non-member) + 0.5 P(tie)."""
    fpr, tpr = curve.fpr, curve.tpr
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) * 0.5))


def fpr_at_tpr(curve: RocCurve, target_tpr: float) -> float:
    """Smallest achievable FPR with TPR >= target, interpolating linearly
    between adjacent curve vertices."""
    if not 0.0 < target_tpr <= 1.0:
        raise ValueError(f"target TPR must be in (0, 1], got {target_tpr}")
    fpr, tpr = curve.fpr, curve.tpr
    for i in range(len(tpr)):
        if tpr[i] >= target_tpr:
            if i == 0 or tpr[i] == tpr[i - 1]:
                return float(fpr[i])
            t = (target_tpr - tpr[i - 1]) / (tpr[i] - tpr[i - 1])
            return float(fpr[i - 1] + t * (fpr[i] - fpr[i - 1]))
    return 1.0  # unreachable: curve ends at TPR 1


def accuracy_at_best_threshold(scores):
    """Best (TP+TN)/total over swept thresholds; returns (acc, threshold).

    Prediction rule: member iff score >= threshold.  The threshold is
    chosen on the evaluation scores themselves (oracle-threshold
    accuracy); accuracy ties resolve toward the lower threshold.
    """
    vals, labels, _ = _split_scores(scores)
    best_acc, best_thr = -1.0, None
    for thr in np.unique(vals):
        pred = vals >= thr
        acc = float(np.mean(pred == labels))
        if acc > best_acc:
            best_acc, best_thr = acc, float(thr)
    return best_acc, best_thr


def per_client_auc(records, attack="resmia"):
    """AUC of each client's members against the full non-member pool."""
    non_member = [(r.scores[attack], False) for r in records
                  if not r.is_member]
    if not non_member:
        raise DegenerateScoresError("no non-member records")
    by_client = {}
    for r in records:
        if r.is_member:
            by_client.setdefault(r.client_id, []).append(
                (r.scores[attack], True))
    if not by_client:
        raise DegenerateScoresError("no member records")
    return {cid: auc(roc_curve(member + non_member))
            for cid, member in sorted(by_client.items())}


@dataclass
class MetricsReport:
    attacks: dict             # name -> {auc, accuracy, fpr_at_tpr80, threshold}
    per_client: dict          # client id -> resmia AUC
    client_auc_std: float
    query_counts: dict        # name -> queries per sample
    timing: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_json(self) -> str:
        payload = {
            "schema_version": self.schema_version,
            "attacks": self.attacks,
            "per_client_auc": {str(k): v for k, v in self.per_client.items()},
            "client_auc_std": self.client_auc_std,
            "query_counts": self.query_counts,
            "timing": self.timing,
            "metadata": self.metadata,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str):
        payload = json.loads(text)
        return cls(attacks=payload["attacks"],
                   per_client={int(k): v for k, v
                               in payload["per_client_auc"].items()},
                   client_auc_std=payload["client_auc_std"],
                   query_counts=payload["query_counts"],
                   timing=payload.get("timing", {}),
                   metadata=payload.get("metadata", {}),
                   schema_version=payload["schema_version"])


def build_report(records, erosion_steps, timing=None, metadata=None,
                 target_tpr=0.8) -> MetricsReport:
    """Assemble the full metrics report from scored attack records."""
    attacks = {}
    for name in sorted(records[0].scores):
        scores = [(r.scores[name], r.is_member) for r in records]
        curve = roc_curve(scores)
        acc, thr = accuracy_at_best_threshold(scores)
        attacks[name] = {
            "auc": auc(curve),
            "accuracy": acc,
            "fpr_at_tpr80": fpr_at_tpr(curve, target_tpr),
            "threshold": thr,
        }
    clients = per_client_auc(records)
    return MetricsReport(
        attacks=attacks,
        per_client=clients,
        client_auc_std=float(np.std(list(clients.values()))),
        query_counts={"resmia": erosion_steps + 1, "loss": 1, "entropy": 1},
        timing=timing or {},
        metadata=metadata or {})


def write_roc_csv(path, curves_by_attack, metadata=None):
    """ROC polylines as CSV rows (attack, fpr, tpr)."""
    with open(path, "w", newline="") as fh:
        for key in sorted(metadata or {}):
            fh.write(f"# {key}={metadata[key]}\n")
        writer = csv.writer(fh)
        writer.writerow(["attack", "fpr", "tpr"])
        for name in sorted(curves_by_attack):
            for fpr, tpr in curves_by_attack[name].points:
                writer.writerow([name, repr(float(fpr)), repr(float(tpr))])
