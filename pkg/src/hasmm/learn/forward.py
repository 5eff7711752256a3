"""Entry-time messages on a time grid, used for backward sampling.

The censoring time is split into ``K`` cells of width ``h = T_c / K``.
``logF[u, k]`` (k >= 1) is the log probability that a segment of state
``u`` starts inside cell ``((k - 1) h, k h]`` jointly with every
observation before that cell; ``logF[u, 0]`` is the initial state at time
0.  A source entry is represented by its cell centre; the sojourn cell of a
jump from centre ``k'`` to cell ``k = k' + d`` is ``((d - 1/2) h, (d + 1/2) h]``
for ``d >= 2`` and ``[0, 3 h / 2]`` for ``d = 1`` (jumps within the source
cell are lumped into the next one).  The same recursion closed by the
absorbing label gives an estimate of the observed-data log-likelihood.
"""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from ..emission import block_log_densities
from ..model import ParameterSet, sojourn_cdf, sojourn_logpdf


def emission_table(params: ParameterSet, episode) -> np.ndarray:
    """``logE[u, a, b]`` = log density of observations ``a .. b-1`` under ``u``."""
    n = params.n_states
    m = episode.n_obs
    out = np.zeros((n, m + 1, m + 1))
    for u in range(n):
        out[u] = block_log_densities(params.emission[u], episode.times, episode.values)
    return out


class GridMessages:
    def __init__(self, params: ParameterSet, episode, step: float = 0.5, logE=None):
        self.params = params
        self.episode = episode
        t_c = float(episode.censor_time)
        if t_c <= 0:
            raise ValueError(f"episode {episode.id}: censor time must be positive")
        self.K = max(1, int(np.ceil(t_c / step)))
        self.h = t_c / self.K
        self.t_c = t_c
        self.edges = np.arange(self.K + 1) * self.h  # cell k is (edges[k-1], edges[k]]
        self.edges[-1] = t_c
        self.centres = np.concatenate([[0.0], self.edges[1:] - 0.5 * self.h])
        self.first_obs = np.searchsorted(episode.times, self.centres, side="left")
        self.logE = emission_table(params, episode) if logE is None else logE
        self._forward()

    def _jump_table(self):
        """log pi[u, v, d] for the two source kinds (node 0 and cell centres)."""
        p = self.params
        n = p.n_states
        K, h = self.K, self.h
        d = np.arange(1, K + 1)
        lo_c = np.where(d == 1, 0.0, (d - 0.5) * h)
        hi_c = (d + 0.5) * h
        lo_0 = (d - 1) * h
        hi_0 = d * h
        pi_c = np.zeros((n, n, K))
        pi_0 = np.zeros((n, n, K))
        kt = p.kernel()
        for u in p.transient:
            pi_c[u] = (kt.cdf_kernel(u, hi_c) - kt.cdf_kernel(u, lo_c)).T
            pi_0[u] = (kt.cdf_kernel(u, hi_0) - kt.cdf_kernel(u, lo_0)).T
        with np.errstate(divide="ignore"):
            return np.log(np.clip(pi_0, 0, None)), np.log(np.clip(pi_c, 0, None))

    def _forward(self):
        p = self.params
        n = p.n_states
        K = self.K
        log_pi0, log_pic = self._jump_table()
        fo = self.first_obs
        logF = np.full((n, K + 1), -np.inf)
        with np.errstate(divide="ignore"):
            logF[:, 0] = np.log(p.initial)
        tr = p.transient
        for k in range(1, K + 1):
            src = np.arange(k)
            d = k - src  # 1..k
            # (u, k') terms: logF[u, k'] + logE[u, fo(k'), fo(k)]
            base = logF[tr][:, src] + self.logE[tr][:, fo[src], fo[k]]
            jumps = np.empty((len(tr), n, k))
            jumps[:, :, 1:] = log_pic[tr][:, :, d[1:] - 1]
            jumps[:, :, 0] = log_pi0[tr][:, :, d[0] - 1]
            tot = base[:, None, :] + jumps
            logF[:, k] = logsumexp(tot.reshape(-1, n, k).transpose(1, 0, 2).reshape(n, -1), axis=1)
        self.logF = logF
        self.log_likelihood = self._terminal()

    def terminal_log_weights(self, label: int) -> np.ndarray:
        """log of entry mass x sojourn density x emissions for the absorbing segment."""
        p = self.params
        h = self.h
        s_hi = self.t_c - self.edges[:-1]  # sojourn if entry at the left edge of cell k
        s_lo = self.t_c - self.edges[1:]
        with np.errstate(divide="ignore"):
            cell = np.log(np.clip(sojourn_cdf(p, label, s_hi) - sojourn_cdf(p, label, np.clip(s_lo, 0, None)), 0, None)) - np.log(h)
            term = np.concatenate([[sojourn_logpdf(p, label, self.t_c)], cell])
        m = self.episode.n_obs
        return self.logF[label] + term + self.logE[label, self.first_obs, m]

    def _terminal(self) -> float:
        return float(logsumexp(self.terminal_log_weights(self.episode.label)))


def episode_log_likelihood(params: ParameterSet, episode, step: float = 0.5) -> float:
    return GridMessages(params, episode, step).log_likelihood
