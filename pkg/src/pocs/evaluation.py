"""Detector evaluation: AUROC, AUPR, FPR@TPR, histograms, reports.

OOD is the positive class throughout. The classification rule is
"score >= threshold means flagged OOD", thresholds are enumerated at the
distinct score values, AUROC uses mid-rank tie correction, and AUPR uses
step-wise interpolation (precision held between recall points). All
internal metric values live in [0, 1]; percent formatting belongs to
presentation layers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .scoring import ScoreRecord

SCHEMA_VERSION = 1

CONVENTIONS = {
    "positive_class": "ood",
    "decision_rule": "score >= threshold flags OOD",
    "auroc_ties": "midrank",
    "aupr_interpolation": "stepwise",
    "fpr_threshold_rule": "largest threshold with TPR >= target",
}


def _validate_scores(id_scores, ood_scores) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(id_scores, dtype=np.float64).ravel()
    b = np.asarray(ood_scores, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("score lists must be non-empty")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("scores contain non-finite values")
    return a, b


def _threshold_counts(a: np.ndarray, b: np.ndarray):
    """False/true positive counts at each distinct threshold, descending."""
    thresholds = np.unique(np.concatenate([a, b]))[::-1]
    sorted_id = np.sort(a)
    sorted_ood = np.sort(b)
    fp = a.size - np.searchsorted(sorted_id, thresholds, side="left")
    tp = b.size - np.searchsorted(sorted_ood, thresholds, side="left")
    return thresholds, fp, tp


def auroc(id_scores, ood_scores) -> float:
    """P(ood > id) + P(tie)/2 over all pairs, via tie-corrected ranks."""
    a, b = _validate_scores(id_scores, ood_scores)
    ranks = rankdata(np.concatenate([a, b]))
    rank_sum_ood = ranks[a.size :].sum()
    u_statistic = rank_sum_ood - b.size * (b.size + 1) / 2.0
    return float(u_statistic / (a.size * b.size))


def aupr(id_scores, ood_scores) -> float:
    """Area under precision-recall with OOD positive, step-wise."""
    a, b = _validate_scores(id_scores, ood_scores)
    _, fp, tp = _threshold_counts(a, b)
    recall = tp / b.size
    precision = tp / (tp + fp)
    previous_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - previous_recall) * precision))


def fpr_at_tpr(id_scores, ood_scores, tpr_target: float = 0.95) -> float:
    """FPR on ID at the largest threshold whose TPR reaches the target."""
    if not 0.0 < tpr_target <= 1.0:
        raise ValueError(f"tpr_target must be in (0, 1], got {tpr_target}")
    a, b = _validate_scores(id_scores, ood_scores)
    _, fp, tp = _threshold_counts(a, b)
    reached = (tp / b.size) >= tpr_target
    idx = int(np.argmax(reached))  # thresholds descend, so this is the largest
    return float(fp[idx] / a.size)


@dataclass(frozen=True, eq=False)
class EvalReport:
    """Metrics plus plot-ready curve and histogram data for one scorer."""

    scorer: str
    auroc: float
    aupr: float
    fpr_at_95: float
    tpr_target: float
    n_id: int
    n_ood: int
    bin_edges: np.ndarray
    id_counts: np.ndarray
    ood_counts: np.ndarray
    roc_points: list[dict]
    pr_points: list[dict]

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "scorer": self.scorer,
            "auroc": self.auroc,
            "aupr": self.aupr,
            "fpr_at_95": self.fpr_at_95,
            "tpr_target": self.tpr_target,
            "n_id": self.n_id,
            "n_ood": self.n_ood,
            "histogram": {
                "bin_edges": self.bin_edges.tolist(),
                "id_counts": self.id_counts.tolist(),
                "ood_counts": self.ood_counts.tolist(),
            },
            "roc_points": self.roc_points,
            "pr_points": self.pr_points,
            "conventions": dict(CONVENTIONS),
        }


def make_report(
    id_records: Sequence[ScoreRecord],
    ood_records: Sequence[ScoreRecord],
    bins: int = 40,
    tpr_target: float = 0.95,
) -> EvalReport:
    """Build the full report for one scorer's ID and OOD score sets.

    Histograms share a common equal-width binning over the pooled score
    range, so per-class counts always sum to n_id + n_ood.
    """
    if not id_records or not ood_records:
        raise ValueError("record lists must be non-empty")
    scorers = {rec.scorer for rec in id_records} | {rec.scorer for rec in ood_records}
    if len(scorers) != 1:
        raise ValueError(f"records mix scorers: {sorted(scorers)}")
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")

    a = np.array([rec.value for rec in id_records])
    b = np.array([rec.value for rec in ood_records])

    lo = float(min(a.min(), b.min()))
    hi = float(max(a.max(), b.max()))
    if lo == hi:
        lo -= 0.5
        hi += 0.5
    edges = np.linspace(lo, hi, bins + 1)
    id_counts, _ = np.histogram(a, bins=edges)
    ood_counts, _ = np.histogram(b, bins=edges)

    thresholds, fp, tp = _threshold_counts(a, b)
    roc_points = [
        {"threshold": float(t), "fpr": float(f / a.size), "tpr": float(p / b.size)}
        for t, f, p in zip(thresholds, fp, tp)
    ]
    pr_points = [
        {
            "threshold": float(t),
            "recall": float(p / b.size),
            "precision": float(p / (p + f)),
        }
        for t, f, p in zip(thresholds, fp, tp)
    ]

    return EvalReport(
        scorer=scorers.pop(),
        auroc=auroc(a, b),
        aupr=aupr(a, b),
        fpr_at_95=fpr_at_tpr(a, b, tpr_target),
        tpr_target=tpr_target,
        n_id=a.size,
        n_ood=b.size,
        bin_edges=edges,
        id_counts=id_counts,
        ood_counts=ood_counts,
        roc_points=roc_points,
        pr_points=pr_points,
    )


def write_report(report: EvalReport, out_dir: str | Path) -> Path:
    """Write report.json plus CSV exports of the curves and histogram."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    (out_dir / "report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    )

    roc_lines = ["threshold,fpr,tpr"]
    roc_lines += [
        f"{p['threshold']:.17g},{p['fpr']:.17g},{p['tpr']:.17g}" for p in report.roc_points
    ]
    (out_dir / "roc_curve.csv").write_text("\n".join(roc_lines) + "\n")

    pr_lines = ["threshold,recall,precision"]
    pr_lines += [
        f"{p['threshold']:.17g},{p['recall']:.17g},{p['precision']:.17g}"
        for p in report.pr_points
    ]
    (out_dir / "pr_curve.csv").write_text("\n".join(pr_lines) + "\n")

    hist_lines = ["bin_left,bin_right,id_count,ood_count"]
    for i in range(report.id_counts.size):
        hist_lines.append(
            f"{report.bin_edges[i]:.17g},{report.bin_edges[i + 1]:.17g},"
            f"{report.id_counts[i]},{report.ood_counts[i]}"
        )
    (out_dir / "histogram.csv").write_text("\n".join(hist_lines) + "\n")
    return out_dir
