"""Detection metrics over verification scores: equal error rate,
minimum normalized detection cost, and actual cost at the Bayes
threshold.

One convention, used everywhere: a trial is accepted when its score is
>= the threshold. So P_miss(t) is the fraction of target scores below
t, P_fa(t) is the fraction of nontarget scores at or above t, and a
nontarget tied with the threshold counts as a false accept.

detection_metrics sweeps every distinct score plus +inf, which visits
every achievable (P_miss, P_fa) operating point exactly once. The EER
is linearly interpolated between the two operating points bracketing
the P_miss = P_fa crossing. metrics_oracle is an independent
brute-force path (midpoints between sorted scores plus both
infinities, explicit counting per threshold) that must agree with the
fast path to 1e-12; it exists to check the fast path, not to be fast.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataError

__all__ = ["DcfParams", "MetricsReport", "detection_metrics", "metrics_oracle"]


@dataclass(frozen=True)
class DcfParams:
    """Detection-cost parameters: target prior and error costs."""

    p_target: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self):
        problems = []
        if not 0.0 < self.p_target < 1.0:
            problems.append(f"p_target must lie in (0, 1), got {self.p_target}")
        if self.c_miss <= 0:
            problems.append(f"c_miss must be positive, got {self.c_miss}")
        if self.c_fa <= 0:
            problems.append(f"c_fa must be positive, got {self.c_fa}")
        if problems:
            raise ConfigurationError("; ".join(problems))

    def bayes_threshold(self) -> float:
        """Optimal accept threshold when scores are calibrated
        log-likelihood ratios."""
        return math.log(self.c_fa * (1.0 - self.p_target) / (self.c_miss * self.p_target))

    def normalizer(self) -> float:
        return min(self.c_miss * self.p_target, self.c_fa * (1.0 - self.p_target))


@dataclass
class MetricsReport:
    eer: float
    min_dcf: float
    act_dcf: float
    threshold_at_eer: float
    num_target: int
    num_nontarget: int

    def format_table(self) -> str:
        header = f"{'EER%':>7}  {'minDCF':>7}  {'actDCF':>7}"
        row = f"{100.0 * self.eer:7.2f}  {self.min_dcf:7.4f}  {self.act_dcf:7.4f}"
        return header + "\n" + row

    def to_csv(self) -> str:
        rows = [
            ("eer", repr(self.eer)),
            ("min_dcf", repr(self.min_dcf)),
            ("act_dcf", repr(self.act_dcf)),
            ("threshold_at_eer", repr(self.threshold_at_eer)),
            ("num_target", str(self.num_target)),
            ("num_nontarget", str(self.num_nontarget)),
        ]
        return "metric,value\n" + "".join(f"{k},{v}\n" for k, v in rows)


def _validated(target_scores, nontarget_scores) -> tuple[np.ndarray, np.ndarray]:
    if nontarget_scores is None:
        score_set = target_scores
        target_scores = score_set.target_scores()
        nontarget_scores = score_set.nontarget_scores()
    t = np.sort(np.asarray(target_scores, dtype=np.float64).ravel())
    nt = np.sort(np.asarray(nontarget_scores, dtype=np.float64).ravel())
    if t.size == 0:
        raise DataError("no target trials; metrics need at least one of each class")
    if nt.size == 0:
        raise DataError("no nontarget trials; metrics need at least one of each class")
    if not (np.isfinite(t).all() and np.isfinite(nt).all()):
        raise DataError("scores must be finite")
    return t, nt


def _dcf(p_miss, p_fa, params: DcfParams):
    raw = params.c_miss * params.p_target * p_miss \
        + params.c_fa * (1.0 - params.p_target) * p_fa
    return raw / params.normalizer()


def _interpolate_eer(p_miss: np.ndarray, p_fa: np.ndarray,
                     thresholds: np.ndarray) -> tuple[float, float]:
    # diff is non-decreasing, starts at -1 and ends at +1, so a bracket
    # always exists and idx >= 1.
    diff = p_miss - p_fa
    idx = int(np.argmax(diff >= 0.0))
    if diff[idx] == 0.0:
        eer = float(p_miss[idx])
        thr = float(thresholds[idx])
    else:
        lam = -diff[idx - 1] / (diff[idx] - diff[idx - 1])
        eer = float(p_miss[idx - 1] + lam * (p_miss[idx] - p_miss[idx - 1]))
        thr = float(thresholds[idx - 1] + lam * (thresholds[idx] - thresholds[idx - 1]))
    if math.isinf(thr):
        # crossing leans on the +inf endpoint; report the last real one
        thr = float(thresholds[idx - 1])
    return eer, thr


def detection_metrics(target_scores, nontarget_scores=None,
                      params: DcfParams = DcfParams()) -> MetricsReport:
    """Compute EER / minDCF / actDCF.

    Accepts two arrays (target scores, nontarget scores) or a single
    object exposing target_scores() / nontarget_scores().
    """
    t, nt = _validated(target_scores, nontarget_scores)
    thresholds = np.concatenate([np.unique(np.concatenate([t, nt])), [np.inf]])
    p_miss = np.searchsorted(t, thresholds, side="left") / t.size
    p_fa = (nt.size - np.searchsorted(nt, thresholds, side="left")) / nt.size

    eer, thr_eer = _interpolate_eer(p_miss, p_fa, thresholds)
    min_dcf = float(np.min(_dcf(p_miss, p_fa, params)))
    beta = params.bayes_threshold()
    pm_b = np.searchsorted(t, beta, side="left") / t.size
    pf_b = (nt.size - np.searchsorted(nt, beta, side="left")) / nt.size
    act_dcf = float(_dcf(pm_b, pf_b, params))
    return MetricsReport(eer=eer, min_dcf=min_dcf, act_dcf=act_dcf,
                         threshold_at_eer=thr_eer,
                         num_target=int(t.size), num_nontarget=int(nt.size))


def metrics_oracle(target_scores, nontarget_scores=None,
                   params: DcfParams = DcfParams()) -> MetricsReport:
    """Quadratic-cost reference implementation of detection_metrics."""
    t, nt = _validated(target_scores, nontarget_scores)
    merged = np.unique(np.concatenate([t, nt]))
    thresholds = np.concatenate([[-np.inf], 0.5 * (merged[:-1] + merged[1:]), [np.inf]])

    p_miss = np.empty(thresholds.size)
    p_fa = np.empty(thresholds.size)
    for i, thr in enumerate(thresholds):
        p_miss[i] = np.count_nonzero(t < thr) / t.size
        p_fa[i] = np.count_nonzero(nt >= thr) / nt.size

    diff = p_miss - p_fa
    idx = int(np.argmax(diff >= 0.0))
    if diff[idx] == 0.0:
        eer = float(p_miss[idx])
        lo = hi = thresholds[idx]
        gap = 0.0
    else:
        gap = (p_fa[idx - 1] - p_miss[idx - 1]) / ((p_fa[idx - 1] - p_miss[idx - 1])
                                                   + (p_miss[idx] - p_fa[idx]))
        pm_x = p_miss[idx - 1] + gap * (p_miss[idx] - p_miss[idx - 1])
        pf_x = p_fa[idx - 1] + gap * (p_fa[idx] - p_fa[idx - 1])
        eer = float(0.5 * (pm_x + pf_x))
        lo, hi = thresholds[idx - 1], thresholds[idx]
    # the bracket may touch an infinite sentinel; report a real number
    if math.isinf(lo) and math.isinf(hi):
        thr_eer = float(merged[0])
    elif math.isinf(lo):
        thr_eer = float(hi)
    elif math.isinf(hi):
        thr_eer = float(lo)
    else:
        thr_eer = float(lo + gap * (hi - lo))

    min_dcf = min(float(_dcf(pm, pf, params)) for pm, pf in zip(p_miss, p_fa))
    beta = params.bayes_threshold()
    act_dcf = float(_dcf(np.count_nonzero(t < beta) / t.size,
                         np.count_nonzero(nt >= beta) / nt.size, params))
    return MetricsReport(eer=eer, min_dcf=min_dcf, act_dcf=act_dcf,
                         threshold_at_eer=thr_eer,
                         num_target=int(t.size), num_nontarget=int(nt.size))
