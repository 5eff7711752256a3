"""Forward filtering and risk scoring over irregularly sampled episodes.

The filter keeps one record per (current state, first observation of the
current segment).  A record also remembers the interval in which its entry
time lies, which is what the transition table needs as elapsed-time bounds.

Between consecutive observations at ``t_prev`` and ``t``:

* a record in state ``i`` either stays (probability ``stay_i`` from the
  table, or the sojourn survival ratio for absorbing states) and gains the
  GP predictive density of the new observation, or
* it leaves, and the mass arriving in each ``j`` through at least one jump
  is ``p_ij(delta) - [i == j] stay_i(delta)``; all such mass starts a new
  record at the current observation.

Absorbing states keep a survival factor because an observation at ``t``
implies the episode has not been censored yet (``censor_aware``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .emission import prefix_log_densities
from .model import ParameterSet, sojourn_quantile, sojourn_sf
from .volterra import FingerprintMismatch, TransitionTable

log = logging.getLogger(__name__)


class FilterError(RuntimeError):
    pass


@dataclass
class PosteriorSnapshot:
    t: float
    posterior: np.ndarray
    map_state: int
    risk: float

    def to_dict(self, ep_id=None) -> dict:
        d = {
            "t": float(self.t),
            "posterior": [float(x) for x in self.posterior],
            "map_state": int(self.map_state) + 1,
            "risk": float(self.risk),
        }
        if ep_id is not None:
            d = {"id": ep_id, **d}
        return d


@dataclass
class ForwardMessageMatrix:
    """Normalised log messages; ``log_alpha[m]`` has shape ``(N, m + 1)`` and
    column ``w - 1`` holds lag ``w`` (segment covering the last ``w``
    observations up to and including step ``m``, 0-based)."""

    log_alpha: list
    log_norm: np.ndarray
    t_max: float | None
    snapshots: list = field(default_factory=list)

    @property
    def log_likelihood(self) -> float:
        return float(np.sum(self.log_norm))


def lag_horizon(params: ParameterSet, quantile: float | None) -> float | None:
    if quantile is None:
        return None
    return max(sojourn_quantile(params, i, quantile) for i in range(params.n_states))


class ForwardFilter:
    """Online filter; feed observations one at a time with :meth:`update`."""

    def __init__(self, params: ParameterSet, table: TransitionTable, t_max_quantile: float | None = 0.9,
                 censor_aware: bool = True, risk: bool = True):
        if table.fingerprint != params.fingerprint():
            raise FingerprintMismatch("transition table does not match the parameter set")
        self.params = params
        self.table = table
        self.t_max = lag_horizon(params, t_max_quantile)
        self.censor_aware = censor_aware
        n = params.n_states
        self.absorbing = np.zeros(n, bool)
        self.absorbing[[0, n - 1]] = True
        self.absorb_n = table.absorption()[:, -1] if risk else None
        self.times = []
        self.values = []
        self.m = -1
        self.saturated = 0
        self._rev_cache = {}
        # record arrays
        self.state = np.zeros(0, int)
        self.start = np.zeros(0, int)
        self.lo = np.zeros(0)
        self.hi = np.zeros(0)
        self.la = np.zeros(0)
        self.log_norm = []

    # -- emissions ----------------------------------------------------------
    def _rev(self, j, w0, last):
        key = (j, w0, last)
        if key not in self._rev_cache:
            t = np.asarray(self.times[w0 : last + 1])
            y = np.column_stack(self.values[w0 : last + 1])
            self._rev_cache[key] = prefix_log_densities(self.params.emission[j], t, y, reverse=True)
        return self._rev_cache[key]

    def _window_start(self, t):
        if self.t_max is None:
            return 0
        return int(np.searchsorted(np.asarray(self.times), t - self.t_max, side="left"))

    def _single(self, m):
        return np.array([self._rev(j, m, m)[0] for j in range(self.params.n_states)])

    # -- survival helpers -----------------------------------------------------
    def _log_sf(self, j, s):
        with np.errstate(divide="ignore"):
            return np.log(sojourn_sf(self.params, j, s))

    def update(self, t: float, y) -> PosteriorSnapshot:
        y = np.asarray(y, dtype=float).reshape(-1)
        if self.times and t <= self.times[-1]:
            raise FilterError(f"observation times must be strictly increasing (got {t} after {self.times[-1]})")
        if t < 0:
            raise FilterError("observation times must be nonnegative")
        self.times.append(float(t))
        self.values.append(y)
        self.m += 1
        m = self.m
        if m == 0:
            self._init_step(t)
        else:
            self._step(t)
        c = logsumexp(self.la)
        if not np.isfinite(c):
            raise FilterError(f"all forward mass vanished at observation {m + 1} (t={t})")
        self.la = self.la - c
        self.log_norm.append(float(c))
        keep = np.isfinite(self.la)
        self._select(keep)
        if self.t_max is not None:
            self._fold(t)
        # keep only cache entries that the next step can reuse
        self._rev_cache = {k: v for k, v in self._rev_cache.items() if k[2] == m}
        return self.snapshot()

    def _select(self, keep):
        self.state, self.start = self.state[keep], self.start[keep]
        self.lo, self.hi, self.la = self.lo[keep], self.hi[keep], self.la[keep]

    def _init_step(self, t1):
        p = self.params
        n = p.n_states
        tb = self.table
        E = self._single(0)
        with np.errstate(divide="ignore"):
            logp0 = np.log(p.initial)
        rows, stay, sat = tb.lookup(np.arange(n), np.full(n, t1), np.zeros(n), np.zeros(n))
        self.saturated += int(np.sum(sat))
        init = logp0.copy()
        with np.errstate(divide="ignore"):
            init[~self.absorbing] += np.log(stay[~self.absorbing])
            jump = rows - np.diag(stay)
            entered = np.log(np.clip(p.initial @ np.clip(jump, 0.0, None), 0.0, None))
        if self.censor_aware:
            for j in (0, n - 1):
                init[j] += self._log_sf(j, t1)
                entered[j] += self._log_sf(j, 0.5 * t1)
        states = np.arange(n)
        self.state = np.concatenate([states, states])
        self.start = np.zeros(2 * n, int)
        self.lo = np.concatenate([np.zeros(n), np.zeros(n)])
        self.hi = np.concatenate([np.zeros(n), np.full(n, t1)])
        self.la = np.concatenate([init, entered]) + np.concatenate([E, E])

    def _step(self, t):
        p = self.params
        n = p.n_states
        m = self.m
        tp = self.times[m - 1]
        delta = t - tp
        st = self.state
        rows, stay, sat = self.table.lookup(st, np.full(st.shape, delta), tp - self.hi, tp - self.lo)
        self.saturated += int(np.sum(sat))

        # mass that jumps at least once, landing in each state
        jump = rows.copy()
        jump[np.arange(st.size), st] -= stay
        with np.errstate(divide="ignore"):
            log_jump = np.log(np.clip(jump, 0.0, None))
        new_la = logsumexp(self.la[:, None] + log_jump, axis=0)
        if self.censor_aware:
            for j in (0, n - 1):
                new_la[j] += self._log_sf(j, 0.5 * delta)
        new_la += self._single(m)

        # continuing records
        cont = self.la.copy()
        ab = self.absorbing[st]
        with np.errstate(divide="ignore"):
            cont[~ab] += np.log(stay[~ab])
        if self.censor_aware and np.any(ab):
            mid = 0.5 * (self.lo[ab] + self.hi[ab])
            for j in (0, n - 1):
                sel = st[ab] == j
                if np.any(sel):
                    idx = np.flatnonzero(ab)[sel]
                    cont[idx] += self._log_sf(j, t - mid[sel]) - self._log_sf(j, tp - mid[sel])
        w0 = self._window_start(t)
        for j in np.unique(st):
            sel = st == j
            eff = np.maximum(self.start[sel], w0)
            rev_new = self._rev(j, w0, m)
            # the window used for the previous observation's conditioning
            rev_old = self._rev(j, w0, m - 1) if w0 <= m - 1 else None
            inc = rev_new[m - eff]
            if rev_old is not None:
                only_new = eff > m - 1
                inc = inc - np.where(only_new, 0.0, rev_old[np.clip(m - 1 - eff, 0, None)])
            cont[sel] += inc

        self.state = np.concatenate([st, np.arange(n)])
        self.start = np.concatenate([self.start, np.full(n, m)])
        self.lo = np.concatenate([self.lo, np.full(n, tp)])
        self.hi = np.concatenate([self.hi, np.full(n, t)])
        self.la = np.concatenate([cont, new_la])

    def _fold(self, t):
        """Merge records whose entry is certainly older than ``t_max`` into the
        oldest retained record of the same state."""
        cutoff = t - self.t_max
        old = self.hi < cutoff
        if not np.any(old):
            return
        keep = np.ones(self.la.size, bool)
        la = self.la.copy()
        for j in np.unique(self.state[old]):
            idx_old = np.flatnonzero(old & (self.state == j))
            idx_new = np.flatnonzero(~old & (self.state == j))
            if idx_new.size:
                target = idx_new[np.argmin(self.start[idx_new])]
                fold = idx_old
            else:
                target = idx_old[np.argmax(self.start[idx_old])]
                fold = idx_old[idx_old != target]
            if fold.size:
                la[target] = logsumexp(np.concatenate([[la[target]], la[fold]]))
                keep[fold] = False
        self.la = la
        self._select(keep)

    # -- outputs ---------------------------------------------------------------
    def posterior(self) -> np.ndarray:
        n = self.params.n_states
        post = np.zeros(n)
        np.add.at(post, self.state, np.exp(self.la))
        return post / post.sum()

    def message_row(self) -> np.ndarray:
        n = self.params.n_states
        out = np.full((n, self.m + 1), -np.inf)
        lag = self.m - self.start  # lag w - 1
        np.logaddexp.at(out, (self.state, lag), self.la)
        return out

    def snapshot(self) -> PosteriorSnapshot:
        post = self.posterior()
        risk = float(np.clip(post @ self.absorb_n, 0.0, 1.0)) if self.absorb_n is not None else float("nan")
        return PosteriorSnapshot(self.times[-1], post, int(np.argmax(post)), risk)


def forward_messages(params: ParameterSet, table: TransitionTable, episode, t_max_quantile: float | None = 0.9,
                     censor_aware: bool = True, keep_messages: bool = True) -> ForwardMessageMatrix:
    filt = ForwardFilter(params, table, t_max_quantile, censor_aware)
    rows, snaps = [], []
    for m in range(episode.n_obs):
        snaps.append(filt.update(episode.times[m], episode.values[:, m]))
        if keep_messages:
            rows.append(filt.message_row())
    if filt.saturated:
        log.debug("episode %s: %d table queries clamped at the grid edge", getattr(episode, "id", "?"), filt.saturated)
    return ForwardMessageMatrix(rows, np.asarray(filt.log_norm), filt.t_max, snaps)


def state_posterior(msgs: ForwardMessageMatrix, m: int) -> np.ndarray:
    """Posterior over states after observation ``m`` (1-based)."""
    if not 1 <= m <= len(msgs.log_alpha):
        raise IndexError(f"step {m} outside 1..{len(msgs.log_alpha)}")
    la = msgs.log_alpha[m - 1]
    per_state = logsumexp(la, axis=1)
    return np.exp(per_state - logsumexp(per_state))


def risk_score(msgs: ForwardMessageMatrix, table: TransitionTable, m: int) -> float:
    post = state_posterior(msgs, m)
    return float(np.clip(post @ table.absorption()[:, -1], 0.0, 1.0))


def stream_filter(params: ParameterSet, table: TransitionTable, episode, t_max_quantile: float | None = 0.9,
                  censor_aware: bool = True):
    """Generator of snapshots, one per arriving observation."""
    filt = ForwardFilter(params, table, t_max_quantile, censor_aware)
    for m in range(episode.n_obs):
        yield filt.update(episode.times[m], episode.values[:, m])


def score_episodes(params: ParameterSet, table: TransitionTable, episodes, t_max_quantile: float | None = 0.9,
                   censor_aware: bool = True) -> list:
    """List (per episode) of snapshot lists."""
    return [list(stream_filter(params, table, ep, t_max_quantile, censor_aware)) for ep in episodes]
