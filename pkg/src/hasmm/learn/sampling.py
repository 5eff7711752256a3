"""Truncated and bivariate rejection samplers and backward trajectory sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from ..generate import LatentTrajectory
from ..model import ParameterSet, sojourn_cdf, sojourn_logpdf, transition_row
from .forward import GridMessages

MAX_STEPS = 10_000


class SamplerError(RuntimeError):
    pass


def truncated_gamma(params: ParameterSet, state: int, a, b, rng: np.random.Generator, size=None):
    """Inverse-CDF draws from Gamma(state) restricted to (a, b]; b may be inf."""
    k, r = params.shape[state], params.rate[state]
    a, b = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
    u = rng.uniform(size=a.shape if size is None else size)
    finite_b = np.where(np.isinf(b), 0.0, b)
    cdf_a = special.gammainc(k, r * a)
    cdf_b = np.where(np.isinf(b), 1.0, special.gammainc(k, r * finite_b))
    sf_a = special.gammaincc(k, r * a)
    sf_b = np.where(np.isinf(b), 0.0, special.gammaincc(k, r * finite_b))
    # work from whichever end keeps precision
    via_cdf = special.gammaincinv(k, cdf_a + u * (cdf_b - cdf_a)) / r
    via_sf = special.gammainccinv(k, sf_a - u * (sf_a - sf_b)) / r
    w = np.where(cdf_a > 0.5, via_sf, via_cdf)
    return np.clip(w, a, b)


def tr_sampler(params: ParameterSet, state: int, s_bar: float, rng: np.random.Generator,
               max_tries: int = 1000) -> float:
    """Gamma(state) conditioned on s < s_bar.

    Plain rejection while the acceptance probability V(s_bar) is at least
    0.01, exact inverse CDF below that.
    """
    if not s_bar > 0:
        raise ValueError("s_bar must be positive")
    k, r = params.shape[state], params.rate[state]
    if np.isinf(s_bar):
        return float(rng.gamma(k, 1.0 / r))
    if sojourn_cdf(params, state, s_bar) >= 0.01:
        for _ in range(max_tries):
            s = rng.gamma(k, 1.0 / r)
            if s < s_bar:
                return float(s)
    return float(truncated_gamma(params, state, 0.0, s_bar, rng, size=()))


@dataclass
class BarStats:
    proposals: int = 0
    accepted: int = 0


def bar_sampler(messages, params: ParameterSet, next_state, s_bar: float, rng: np.random.Generator,
                edges=None, stats: BarStats | None = None, batch: int = 32, max_proposals: int = 100_000):
    """Draw (state, duration) with density proportional to
    ``alpha(u, cell(w)) * v_u(w) * g_{u, next_state}(w)`` for ``w < s_bar``.

    ``messages`` is a vector over states (a single duration cell
    ``[0, s_bar)``) or an ``(N, C)`` matrix of cell weights with duration
    cells ``edges`` of shape ``(C, 2)`` or ``(N, C, 2)``.  A proposal draws
    (state, cell) from the weights times the sojourn mass of the cell and a
    duration from the truncated Gamma; it is accepted when a next state
    drawn from g equals ``next_state``.  ``next_state=None`` drops the jump
    factor and accepts every proposal.
    """
    if not s_bar > 0:
        raise ValueError("s_bar must be positive")
    msg = np.asarray(messages, float)
    n = params.n_states
    if msg.ndim == 1:
        msg = msg[:, None]
        edges = np.array([[0.0, s_bar]])
    edges = np.asarray(edges, float)
    if edges.ndim == 2:
        edges = np.broadcast_to(edges, (n,) + edges.shape)
    lo, hi = edges[..., 0], edges[..., 1]
    mass = np.zeros_like(msg)
    for u in range(n):
        if np.any(msg[u] > 0):
            mass[u] = msg[u] * np.clip(sojourn_cdf(params, u, hi[u]) - sojourn_cdf(params, u, lo[u]), 0, None)
    tot = mass.sum()
    if not tot > 0:
        raise SamplerError("bar_sampler: proposal has no mass")
    cdf = np.cumsum(mass.ravel() / tot)
    cdf[-1] = 1.0
    stats = stats if stats is not None else BarStats()
    tried = 0
    while tried < max_proposals:
        idx = np.minimum(np.searchsorted(cdf, rng.uniform(size=batch), side="right"), cdf.size - 1)
        u, c = np.divmod(idx, msg.shape[1])
        w = np.empty(batch)
        for st in np.unique(u):
            sel = u == st
            w[sel] = truncated_gamma(params, int(st), lo[st, c[sel]], hi[st, c[sel]], rng)
        if next_state is None:
            stats.proposals += 1
            stats.accepted += 1
            return int(u[0]), float(w[0])
        g = np.empty(batch)
        for st in np.unique(u):
            sel = u == st
            g[sel] = transition_row(params, int(st), w[sel])[:, next_state]
        hit = np.flatnonzero(rng.uniform(size=batch) < g)
        if hit.size:
            b = int(hit[0])
            tried += b + 1
            stats.proposals += b + 1
            stats.accepted += 1
            return int(u[b]), float(w[b])
        tried += batch
        stats.proposals += batch
    raise SamplerError(
        f"bar_sampler: acceptance below {1 / max_proposals:g} after {tried} proposals "
        f"(next_state={next_state}, s_bar={s_bar:.4g})"
    )


def _fit_budget(soj: np.ndarray, total: float) -> np.ndarray:
    """Adjust the first sojourn so the floating-point sum equals ``total``."""
    soj = soj.copy()
    soj[0] = total - soj[1:].sum()
    # rounding can make the target unreachable through one entry; walk the
    # entries one ulp at a time until the sum lands on it
    for k in range(min(soj.size, 4)):
        for _ in range(4):
            err = soj.sum() - total
            if err == 0.0:
                return soj
            soj[k] = np.nextafter(soj[k], -np.inf if err > 0 else np.inf)
    return soj


class BackwardSampler:
    """Reverse-time trajectory sampler driven by :class:`GridMessages`.

    Starting from the absorbing label at the censoring time, each step
    decides whether the state being sampled is the first one (Bernoulli on
    the initial versus continuation mass), then either draws the initial
    state or a (state, sojourn) pair with :func:`bar_sampler` on entry-time
    cells that are split at observation times so emissions are constant
    within a cell.
    """

    def __init__(self, msgs: GridMessages):
        self.msgs = msgs
        self.params = msgs.params
        self.episode = msgs.episode
        self.stats = BarStats()
        self.steps = 0
        self._terminal_weights = None

    def _subcells(self, s_bar):
        m = self.msgs
        k_last = int(np.clip(np.ceil(s_bar / m.h - 1e-9), 1, m.K))
        left = m.edges[:k_last]
        right = np.minimum(m.edges[1 : k_last + 1], s_bar)
        node = np.arange(1, k_last + 1)
        keep = right > left
        left, right, node = left[keep], right[keep], node[keep]
        obs = self.episode.times
        cut = obs[(obs > 0) & (obs < s_bar)]
        if cut.size and left.size:
            pts = np.unique(np.concatenate([left, right, cut]))
            sub_l, sub_r = pts[:-1], pts[1:]
            owner = np.searchsorted(right, 0.5 * (sub_l + sub_r), side="left")
            return sub_l, sub_r, node[owner]
        return left, right, node

    def _weights(self, next_state, s_bar, terminal: bool):
        p = self.params
        m = self.msgs
        n = p.n_states
        times = self.episode.times
        fo_end = self.episode.n_obs if terminal else int(np.searchsorted(times, s_bar, side="left"))
        cand = [next_state] if terminal else [int(u) for u in p.transient if u != next_state]

        log_init = np.full(n, -np.inf)
        for u in cand:
            with np.errstate(divide="ignore"):
                lg = 0.0 if terminal else np.log(transition_row(p, u, [s_bar])[0][next_state])
                log_init[u] = np.log(p.initial[u]) + sojourn_logpdf(p, u, s_bar) + lg + m.logE[u, 0, fo_end]

        sub_l, sub_r, node = self._subcells(s_bar)
        fo = np.searchsorted(times, 0.5 * (sub_l + sub_r), side="left")
        w_lo = np.clip(s_bar - sub_r, 0.0, None)
        w_hi = s_bar - sub_l
        base = np.full((n, sub_l.size), -np.inf)  # entry density x emissions
        target = np.full((n, sub_l.size), -np.inf)  # ... x jump/sojourn mass of the cell
        kt = p.kernel()
        for u in cand:
            if terminal:
                mass = sojourn_cdf(p, u, w_hi) - sojourn_cdf(p, u, w_lo)
            else:
                mass = kt.cdf_kernel(u, w_hi)[:, next_state] - kt.cdf_kernel(u, w_lo)[:, next_state]
            with np.errstate(divide="ignore"):
                base[u] = m.logF[u, node] - np.log(m.h) + m.logE[u, fo, fo_end]
                target[u] = base[u] + np.log(np.clip(mass, 0.0, None))
        return log_init, base, target, np.stack([w_lo, w_hi], axis=-1)

    @staticmethod
    def _split(log_init, target):
        a = np.logaddexp.reduce(log_init)
        b = np.logaddexp.reduce(target.ravel()) if target.size else -np.inf
        return a, b

    def initiality_probability(self, next_state, s_bar, terminal=False) -> float:
        log_init, _, target, _ = self._weights(next_state, s_bar, terminal)
        a, b = self._split(log_init, target)
        if not (np.isfinite(a) or np.isfinite(b)):
            raise SamplerError(f"episode {self.episode.id}: no admissible predecessor (s_bar={s_bar:.4g})")
        return float(np.exp(a - np.logaddexp(a, b)))

    def sample(self, rng: np.random.Generator) -> LatentTrajectory:
        p = self.params
        t_c = self.msgs.t_c
        states, sojourns = [], []
        nxt = self.episode.label
        s_bar = t_c
        terminal = True
        for _ in range(MAX_STEPS):
            self.steps += 1
            if terminal:
                # the first reverse step is the same for every draw
                if self._terminal_weights is None:
                    self._terminal_weights = self._weights(nxt, s_bar, True)
                log_init, base, target, edges = self._terminal_weights
            else:
                log_init, base, target, edges = self._weights(nxt, s_bar, terminal)
            a, b = self._split(log_init, target)
            if not (np.isfinite(a) or np.isfinite(b)):
                raise SamplerError(f"episode {self.episode.id}: no admissible predecessor (s_bar={s_bar:.4g})")
            if rng.uniform() < np.exp(a - np.logaddexp(a, b)):
                w = np.exp(log_init - a)
                states.append(int(rng.choice(p.n_states, p=w / w.sum())))
                sojourns.append(s_bar)
                break
            finite = np.isfinite(target)
            weights = np.where(finite, np.exp(base - np.max(base[finite])), 0.0)
            u, w = bar_sampler(weights, p, None if terminal else nxt, s_bar, rng, edges=edges, stats=self.stats)
            w = float(np.clip(w, 1e-9, s_bar))
            states.append(u)
            sojourns.append(w)
            s_bar -= w
            nxt = u
            terminal = False
            if s_bar <= 1e-9:
                # entry landed on time zero: the sampled state is the first one
                sojourns[-1] += s_bar
                break
        else:
            raise SamplerError(f"episode {self.episode.id}: backward sampling exceeded {MAX_STEPS} steps")
        soj = np.array(sojourns[::-1])
        return LatentTrajectory(states[::-1], _fit_budget(soj, t_c))


def backward_sampling(msgs: GridMessages, rng: np.random.Generator, count: int | None = None):
    """One trajectory (``count=None``) or a list of ``count`` trajectories."""
    sampler = BackwardSampler(msgs)
    if count is None:
        return sampler.sample(rng)
    return [sampler.sample(rng) for _ in range(count)]


def initiality_probability(msgs: GridMessages, next_state: int, s_bar: float, terminal: bool = False) -> float:
    return BackwardSampler(msgs).initiality_probability(next_state, s_bar, terminal)
