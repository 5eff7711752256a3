"""Detection metrics and brute-force oracles.

An episode is positive when it ends in the catastrophic state (label != 0
in the 0-based API).  A detector raises an alarm the first time the risk
score reaches the threshold strictly before the censoring time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .emission import segment_log_density
from .model import ParameterSet, sojourn_cdf, sojourn_sf, transition_row


@dataclass(frozen=True)
class DetectionOutcome:
    id: str
    label: int
    crossed: bool
    crossing_time: float | None
    censor_time: float

    @property
    def positive(self) -> bool:
        return self.label != 0


@dataclass
class RocCurve:
    thresholds: np.ndarray
    tpr: np.ndarray
    ppv: np.ndarray
    auc: float
    omitted: list

    def rows(self):
        return list(zip(self.thresholds.tolist(), self.tpr.tolist(), self.ppv.tolist()))


@dataclass
class ScoredEpisode:
    id: str
    label: int
    censor_time: float
    times: np.ndarray
    risk: np.ndarray

    @classmethod
    def from_snapshots(cls, episode, snapshots):
        return cls(
            episode.id, episode.label, episode.censor_time,
            np.array([s.t for s in snapshots], dtype=float),
            np.array([s.risk for s in snapshots], dtype=float),
        )


def detect(scored: ScoredEpisode, threshold: float) -> DetectionOutcome:
    before = scored.times < scored.censor_time
    hits = np.flatnonzero(before & (scored.risk >= threshold))
    if hits.size == 0:
        return DetectionOutcome(scored.id, scored.label, False, None, scored.censor_time)
    return DetectionOutcome(scored.id, scored.label, True, float(scored.times[hits[0]]), scored.censor_time)


def rates(outcomes):
    """(TPR, PPV) for one threshold; None where the denominator is zero."""
    pos = sum(o.positive for o in outcomes)
    flagged = sum(o.crossed for o in outcomes)
    tp = sum(o.positive and o.crossed for o in outcomes)
    tpr = tp / pos if pos else None
    ppv = tp / flagged if flagged else None
    return tpr, ppv


def default_thresholds(scored, max_points: int = 400) -> np.ndarray:
    vals = np.unique(np.concatenate([s.risk for s in scored if s.risk.size] or [np.zeros(1)]))
    if vals.size > max_points:
        vals = np.unique(np.quantile(vals, np.linspace(0, 1, max_points)))
    return np.concatenate([[np.inf], vals[::-1]])


def roc_curve(scored, thresholds=None) -> RocCurve:
    """TPR/PPV sweep over strictly decreasing thresholds and the area under
    PPV as a function of TPR.  The curve is extended flat to TPR = 0 so that a
    constant score has area equal to the prevalence."""
    scored = list(scored)
    if thresholds is None:
        thresholds = default_thresholds(scored)
    thresholds = np.unique(np.asarray(thresholds, dtype=float))[::-1]
    th, tprs, ppvs, omitted = [], [], [], []
    for thr in thresholds:
        tpr, ppv = rates([detect(s, thr) for s in scored])
        if tpr is None or ppv is None:
            omitted.append(float(thr))
            continue
        th.append(thr)
        tprs.append(tpr)
        ppvs.append(ppv)
    if not th:
        raise ValueError("no threshold produced both a positive and a flagged episode")
    tprs, ppvs = np.array(tprs), np.array(ppvs)
    return RocCurve(np.array(th), tprs, ppvs, auc_tpr_ppv(tprs, ppvs), omitted)


def auc_tpr_ppv(tpr, ppv) -> float:
    tpr = np.asarray(tpr, float)
    ppv = np.asarray(ppv, float)
    order = np.lexsort((-ppv, tpr))
    x = np.concatenate([[0.0], tpr[order]])
    y = np.concatenate([[ppv[order][0]], ppv[order]])
    return float(np.clip(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(x)), 0.0, 1.0))


def timeliness(outcomes) -> float | None:
    """Mean (crossing time - censor time) over positives that crossed."""
    d = [o.crossing_time - o.censor_time for o in outcomes if o.positive and o.crossed]
    return float(np.mean(d)) if d else None


def operating_point(scored, curve: RocCurve, target_tpr: float = 0.5):
    """Highest threshold whose TPR reaches ``target_tpr``; returns
    (threshold, tpr, ppv, timeliness)."""
    ok = np.flatnonzero(curve.tpr >= target_tpr)
    if ok.size == 0:
        return None
    k = ok[0]
    thr = float(curve.thresholds[k])
    outs = [detect(s, thr) for s in scored]
    return thr, float(curve.tpr[k]), float(curve.ppv[k]), timeliness(outs)


# -- oracles --------------------------------------------------------------------

def oracle_ctmc(params: ParameterSet, taus, terms: int = 30) -> np.ndarray:
    """exp(L tau) on a grid by scaling and squaring a truncated Taylor series."""
    if np.any(params.shape != 1.0) or np.any(params.beta != 0.0):
        raise ValueError("the CTMC oracle needs unit shapes and zero beta")
    n = params.n_states
    L = np.zeros((n, n))
    for i in params.transient:
        L[i] = params.rate[i] * transition_row(params, int(i), [0.0])[0]
        L[i, i] = -params.rate[i]
    out = []
    for tau in np.atleast_1d(np.asarray(taus, float)):
        M = L * tau
        norm = np.abs(M).sum(axis=1).max()
        sq = max(0, int(np.ceil(np.log2(norm))) + 1) if norm > 0 else 0
        M = M / 2.0**sq
        term = np.eye(n)
        acc = np.eye(n)
        for k in range(1, terms + 1):
            term = term @ M / k
            acc = acc + term
        for _ in range(sq):
            acc = acc @ acc
        out.append(acc)
    return np.array(out)


class BudgetExceeded(RuntimeError):
    pass


def _state_sequences(params: ParameterSet, max_len: int):
    n = params.n_states
    tr = [int(i) for i in params.transient]
    starts = [i for i in range(n) if params.initial[i] > 0]
    for x1 in starts:
        if params.is_absorbing(x1):
            yield (x1,)
            continue
        stack = [(x1,)]
        while stack:
            seq = stack.pop()
            yield seq
            if params.is_absorbing(seq[-1]) or len(seq) >= max_len:
                continue
            for nxt in tr + [0, n - 1]:
                if nxt != seq[-1]:
                    stack.append(seq + (nxt,))


def oracle_enumerate(params: ParameterSet, episode, grid_step: float = 1.0, max_len: int = 6,
                     budget: float = 1e7, censor_aware: bool = True) -> np.ndarray:
    """Posterior over the current state at the last observation by exhaustive
    enumeration of state sequences, with sojourns on a grid of ``grid_step``.

    Entry times are multiples of the step; a sojourn ``k * h`` has mass
    ``V(k h) - V((k - 1) h)`` and jumps with ``g(k h - h / 2)``.  For every
    state sequence the sum over sojourn combinations is done exactly by
    dynamic programming over entry cells.  The state current at the last
    observation must survive past it.
    """
    times = np.asarray(episode.times, float)
    m = times.size
    if m == 0 or m > 6:
        raise ValueError("oracle_enumerate handles 1..6 observations")
    n = params.n_states
    h = float(grid_step)
    t_last = times[-1]
    K = int(np.floor(t_last / h + 1e-12))
    entries = np.arange(K + 1) * h
    seqs = list(_state_sequences(params, max_len))
    if len(seqs) * (K + 1) ** 2 > budget:
        raise BudgetExceeded(f"{len(seqs)} sequences x {(K + 1) ** 2} cell pairs exceeds the budget")

    # emission log densities for every observation range [a, b)
    logE = np.zeros((n, m + 1, m + 1))
    for j in range(n):
        for a in range(m + 1):
            for b in range(a + 1, m + 1):
                logE[j, a, b] = segment_log_density(params.emission[j], episode.segment(a, b))
    first_obs = np.searchsorted(times, entries, side="left")  # first obs at or after each entry

    ks = np.arange(1, K + 1)
    log_step = {}
    for i in range(n):
        if params.is_absorbing(i):
            continue
        pmf = sojourn_cdf(params, i, ks * h) - sojourn_cdf(params, i, (ks - 1) * h)
        g = transition_row(params, i, ks * h - 0.5 * h)
        with np.errstate(divide="ignore"):
            log_step[i] = np.log(pmf)[:, None] + np.log(g)

    log_post = np.full(n, -np.inf)
    for seq in seqs:
        with np.errstate(divide="ignore"):
            f = np.full(K + 1, -np.inf)
            f[0] = np.log(params.initial[seq[0]])
        for u, v in zip(seq[:-1], seq[1:]):
            nf = np.full(K + 1, -np.inf)
            for e1 in range(1, K + 1):
                e0 = np.arange(e1)
                terms = f[e0] + log_step[u][e1 - e0 - 1, v] + logE[u, first_obs[e0], first_obs[e1]]
                nf[e1] = np.logaddexp.reduce(terms) if terms.size else -np.inf
            f = nf
        last = seq[-1]
        surv = sojourn_sf(params, last, t_last - entries)
        if params.is_absorbing(last) and not censor_aware:
            surv = np.ones_like(surv)
        with np.errstate(divide="ignore"):
            tot = f + np.log(surv) + logE[last, first_obs, m]
        log_post[last] = np.logaddexp(log_post[last], np.logaddexp.reduce(tot))
    if not np.any(np.isfinite(log_post)):
        raise ValueError("no admissible trajectory")
    post = np.exp(log_post - log_post.max())
    return post / post.sum()


def oracle_enumerate_steps(params, episode, grid_step=1.0, **kw):
    return [oracle_enumerate(params, episode.prefix(k), grid_step, **kw) for k in range(1, episode.n_obs + 1)]


def total_variation(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())
