"""ROC curves and low-FPR metrics; validation-only configuration selection."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .detectors.attack import VALIDATION, ScoreTable
from .model_zoo import GROUP_NAMES

REPORT_COLUMNS = (
    "detector", "boosted", "auc", "tpr_at_1pct", "tpr_at_0p1pct", "pauc_at_1pct",
    "n_members", "n_nonmembers", "seed",
)


@dataclass(frozen=True)
class RocCurve:
    """Operating points from (0, 0) to (1, 1).

    ``fp`` / ``tp`` are integer counts, so areas can be accumulated exactly;
    ``thresholds[i]`` is the score cut (predict member iff score >= cut).
    """

    fp: np.ndarray
    tp: np.ndarray
    n_pos: int
    n_neg: int
    thresholds: np.ndarray

    @property
    def fpr(self) -> np.ndarray:
        return self.fp / self.n_neg

    @property
    def tpr(self) -> np.ndarray:
        return self.tp / self.n_pos

    def points(self) -> List[Tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def roc_curve(scores, is_member) -> RocCurve:
    """Sweep thresholds over distinct scores in descending order; ties share a point."""
    s = np.asarray(scores, dtype=np.float64)
    m = np.asarray(is_member, dtype=bool)
    if len(s) != len(m):
        raise ValueError("scores and labels differ in length")
    n_pos = int(m.sum())
    n_neg = int((~m).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one member and one non-member")
    order = np.argsort(-s, kind="stable")
    s, m = s[order], m[order]
    last_of_group = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(m)[last_of_group]
    fp = np.cumsum(~m)[last_of_group]
    thresholds = np.r_[np.inf, s[last_of_group]]
    return RocCurve(np.r_[0, fp].astype(np.int64), np.r_[0, tp].astype(np.int64), n_pos, n_neg, thresholds)


def _area_numerator(curve: RocCurve, upto: Optional[int] = None) -> int:
    """Twice the area times n_pos * n_neg over the first ``upto`` segments (exact integer)."""
    dfp = np.diff(curve.fp)[:upto]
    stp = (curve.tp[1:] + curve.tp[:-1])[:upto]
    return int(sum(int(a) * int(b) for a, b in zip(dfp, stp)))


def auc(curve: RocCurve) -> float:
    return _area_numerator(curve) / (2 * curve.n_pos * curve.n_neg)


def tpr_at(curve: RocCurve, c: float) -> float:
    """TPR at FPR = c: best TPR reachable with FPR <= c, then linear to c."""
    fpr, tpr = curve.fpr, curve.tpr
    i = int(np.searchsorted(fpr, c, side="right")) - 1
    if i >= len(fpr) - 1 or fpr[i] == c:
        return float(tpr[i])
    f0, f1 = fpr[i], fpr[i + 1]
    return float(tpr[i] + (c - f0) * (tpr[i + 1] - tpr[i]) / (f1 - f0))


def pauc(curve: RocCurve, c: float) -> float:
    """Unnormalised area under the ROC over FPR in [0, c]."""
    if c <= 0:
        return 0.0
    fpr, tpr = curve.fpr, curve.tpr
    full = int(np.searchsorted(fpr, c, side="right")) - 1  # last point with fpr <= c
    area = _area_numerator(curve, full) / (2 * curve.n_pos * curve.n_neg)
    if full < len(fpr) - 1 and fpr[full] < c:
        t_c = tpr_at(curve, c)
        area += (c - fpr[full]) * (tpr[full] + t_c) / 2.0
    return float(area)


@dataclass(frozen=True)
class MetricsReport:
    auc: float
    tpr_at_1pct: float
    tpr_at_0p1pct: float
    pauc_at_1pct: float
    n_members: int
    n_nonmembers: int


def metrics(curve: RocCurve) -> MetricsReport:
    return MetricsReport(
        auc=auc(curve),
        tpr_at_1pct=tpr_at(curve, 0.01),
        tpr_at_0p1pct=tpr_at(curve, 0.001),
        pauc_at_1pct=pauc(curve, 0.01),
        n_members=curve.n_pos,
        n_nonmembers=curve.n_neg,
    )


def evaluate(scores, is_member) -> MetricsReport:
    return metrics(roc_curve(scores, is_member))


def report_rows(table: ScoreTable, seed: int) -> List[Dict[str, object]]:
    rows = []
    for det, boosted in table.keys():
        rep = evaluate(*table.select(det, boosted))
        rows.append({
            "detector": det, "boosted": int(boosted), "auc": rep.auc, "tpr_at_1pct": rep.tpr_at_1pct,
            "tpr_at_0p1pct": rep.tpr_at_0p1pct, "pauc_at_1pct": rep.pauc_at_1pct,
            "n_members": rep.n_members, "n_nonmembers": rep.n_nonmembers, "seed": seed,
        })
    return rows


def report_csv(rows: Sequence[Dict[str, object]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([repr(float(r[c])) if isinstance(r[c], (float, np.floating)) else r[c] for c in REPORT_COLUMNS])
    return buf.getvalue()


# --------------------------------------------------------------------------
# Hyperparameter selection
# --------------------------------------------------------------------------


def _tie_key(cfg) -> tuple:
    group = cfg.group if getattr(cfg, "layers", None) is None else "All"
    return (cfg.steps, cfg.lr, not cfg.clip, GROUP_NAMES.index(group))


def tune_select(candidates, detector: str = "GLiR", boosted: bool = True):
    """Pick the candidate config with the highest pAUC@1% on attack-validation.

    ``candidates`` is a sequence of ``(config, ScoreTable)``; every table must
    be an attack-validation table. Ties go to fewer steps, then lower lr, then
    clipping on, then Early < Mid < Late < All.
    """
    candidates = list(candidates)
    if not candidates:
        raise ValueError("no candidate configurations")
    scored = []
    for cfg, table in candidates:
        if not isinstance(table, ScoreTable) or table.split != VALIDATION:
            raise ValueError(f"tune_select only accepts {VALIDATION} tables, got split={getattr(table, 'split', None)!r}")
        value = pauc(roc_curve(*table.select(detector, boosted)), 0.01)
        scored.append((-value, _tie_key(cfg), cfg, value))
    scored.sort(key=lambda t: (t[0], t[1]))
    return scored[0][2]
