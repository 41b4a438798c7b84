"""Benchmark criteria for comparing estimated and true precision matrices.

Three criteria are reported per component pair:

* relative difference  (1/d^2) sum |a_ij - b_ij| / (|a_ij| |b_ij|),
  skipping (and counting) entries whose denominator underflows;
* Frobenius norm of the difference between partial correlations;
* edge-recovery AUC, computed as the Mann-Whitney rank statistic of
  |estimated off-diagonal| scores against the true support labels.

When K > 1 the estimated components are matched to the true ones by a
minimum-total-cost assignment under the partial-correlation Frobenius
distance before any per-component statistic is computed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from ._numutil import is_spd
from .datamodel import partial_correlation
from .errors import DomainError

__all__ = [
    "relative_difference", "relative_difference_stats", "frobenius_pc_diff",
    "auc_edge_recovery", "match_components", "EvalReport", "evaluate_model",
]

DENOM_EPS = 1e-12


def relative_difference_stats(a, b):
    """(value, n_skipped): the criterion plus how many entries were skipped.

    Entries with |a_ij| * |b_ij| < 1e-12 are excluded from the sum but the
    d^2 normalizer is kept; nan is returned when everything is skipped.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DomainError("matrices must share a shape")
    denom = np.abs(a) * np.abs(b)
    ok = denom >= DENOM_EPS
    n_skipped = int((~ok).sum())
    if not ok.any():
        return float("nan"), n_skipped
    total = float(np.sum(np.abs(a[ok] - b[ok]) / denom[ok]))
    return total / a.size, n_skipped


def relative_difference(a, b) -> float:
    return relative_difference_stats(a, b)[0]


def frobenius_pc_diff(a, b) -> float:
    """||pc(A) - pc(B)||_F; both inputs must be SPD."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if not is_spd(a) or not is_spd(b):
        raise DomainError("both matrices must be SPD")
    return float(np.linalg.norm(partial_correlation(a) - partial_correlation(b)))


def auc_edge_recovery(true_precision, est_precision) -> float:
    """AUC of ranking true edges by |estimated precision| (upper triangle).

    Equivalent to sweeping a threshold over the scores; ties get midranks.
    Returns 0.5 when the truth has no edges or no non-edges.
    """
    t = np.asarray(true_precision, dtype=float)
    e = np.asarray(est_precision, dtype=float)
    if t.shape != e.shape:
        raise DomainError("matrices must share a shape")
    d = t.shape[0]
    if d < 2:
        raise DomainError("need d >= 2")
    iu = np.triu_indices(d, k=1)
    labels = np.abs(t[iu]) > 0
    scores = np.abs(e[iu])
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return 0.5
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def match_components(true_list, est_list):
    """Permutation p with p[l] = estimated index assigned to true component l.

    Optimal assignment under pairwise Frobenius distance between partial
    correlations (not greedy nearest).
    """
    if len(true_list) != len(est_list):
        raise DomainError("component counts differ")
    k = len(true_list)
    pc_true = [partial_correlation(np.asarray(m, dtype=float)) for m in true_list]
    pc_est = [partial_correlation(np.asarray(m, dtype=float)) for m in est_list]
    cost = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            cost[i, j] = np.linalg.norm(pc_true[i] - pc_est[j])
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(k, dtype=int)
    perm[rows] = cols
    return perm


@dataclass(frozen=True)
class EvalReport:
    pairing: tuple                      # pairing[l] = est index matched to true l
    relative_difference: tuple
    rd_skipped: tuple
    frobenius_pc: tuple
    auc: tuple
    mean_relative_difference: float
    mean_frobenius_pc: float
    mean_auc: float

    def rows(self):
        for l in range(len(self.pairing)):
            yield {
                "component": l,
                "matched_est": int(self.pairing[l]),
                "relative_difference": self.relative_difference[l],
                "rd_skipped": self.rd_skipped[l],
                "frobenius_pc": self.frobenius_pc[l],
                "auc": self.auc[l],
            }


def evaluate_model(true_precisions, est_precisions) -> EvalReport:
    """Match components, then report all three criteria per pair and means."""
    perm = match_components(true_precisions, est_precisions)
    rd, skipped, fro, auc = [], [], [], []
    for l, j in enumerate(perm):
        t = np.asarray(true_precisions[l], dtype=float)
        e = np.asarray(est_precisions[j], dtype=float)
        value, n_skip = relative_difference_stats(t, e)
        rd.append(value)
        skipped.append(n_skip)
        fro.append(frobenius_pc_diff(t, e))
        auc.append(auc_edge_recovery(t, e))
    return EvalReport(
        pairing=tuple(int(v) for v in perm),
        relative_difference=tuple(rd),
        rd_skipped=tuple(skipped),
        frobenius_pc=tuple(fro),
        auc=tuple(auc),
        mean_relative_difference=float(np.nanmean(rd)),
        mean_frobenius_pc=float(np.mean(fro)),
        mean_auc=float(np.mean(auc)),
    )
