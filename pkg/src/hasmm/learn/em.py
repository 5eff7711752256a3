"""Forward-filtering backward-sampling Monte Carlo EM.

Trajectories are drawn once per episode under a sampling parameter set and
reweighted by importance weights for every later iterate; the M-step is a
block-wise maximisation of the weighted complete-data log-likelihood.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special
from scipy.cluster.vq import kmeans2
from scipy.special import logsumexp

from ..emission import GpHyper, segment_log_density
from ..model import ParameterSet, absorption_probabilities, sojourn_logpdf, transition_log_prob
from .forward import GridMessages
from .sampling import BackwardSampler

log = logging.getLogger(__name__)


@dataclass
class EmConfig:
    G: int = 50
    eps: float = 1e-3
    max_iter: int = 30
    seed: int = 0
    grid_step: float = 0.5
    ess_refresh: bool = False
    refresh_fraction: float = 0.5
    loglik_every: int = 0  # 0: only at the start and the end
    learn_jitter: bool = True
    n_jobs: int = 1
    init_clusters_seed: int | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "EmConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown EM config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EmIterate:
    iteration: int
    params: ParameterSet
    q_hat: float
    q_hat_prev: float
    est_loglik: float
    min_ess: float
    wall_time: float
    refreshed: bool = False
    reverted: list = field(default_factory=list)


# -- sampled trajectories -------------------------------------------------------

def _segments(traj, episode):
    """Observation ranges [a, b) of every occupancy (empty ones included)."""
    entry = traj.entry_times
    a = np.searchsorted(episode.times, entry, side="left")
    b = np.append(a[1:], episode.n_obs)
    return a, b


class SampledTrajectorySet:
    """Flattened trajectories with the index structure needed to evaluate
    complete-data log densities under any parameter set quickly."""

    def __init__(self, episodes, trajectories, G: int):
        self.episodes = episodes
        self.G = G
        self.trajectories = trajectories  # list (per episode) of lists
        ti = 0
        traj_ep, init_state = [], []
        soj = ([], [], [])
        jump = ([], [], [], [])
        seg_key, seg_traj = [], []
        for d, (ep, trajs) in enumerate(zip(episodes, trajectories)):
            for tr in trajs:
                traj_ep.append(d)
                init_state.append(tr.states[0])
                soj[0].extend(tr.states)
                soj[1].extend(tr.sojourns)
                soj[2].extend([ti] * len(tr.states))
                jump[0].extend(tr.states[:-1])
                jump[1].extend(tr.states[1:])
                jump[2].extend(tr.sojourns[:-1])
                jump[3].extend([ti] * (len(tr.states) - 1))
                a, b = _segments(tr, ep)
                for x, lo, hi in zip(tr.states, a, b):
                    if hi > lo:
                        seg_key.append((d, int(x), int(lo), int(hi)))
                        seg_traj.append(ti)
                ti += 1
        self.n_traj = ti
        self.traj_ep = np.asarray(traj_ep, int)
        self.init_state = np.asarray(init_state, int)
        self.soj_state = np.asarray(soj[0], int)
        self.soj_dur = np.asarray(soj[1], float)
        self.soj_traj = np.asarray(soj[2], int)
        self.jump_from = np.asarray(jump[0], int)
        self.jump_to = np.asarray(jump[1], int)
        self.jump_dur = np.asarray(jump[2], float)
        self.jump_traj = np.asarray(jump[3], int)
        uniq = {}
        seg_id = []
        for k in seg_key:
            seg_id.append(uniq.setdefault(k, len(uniq)))
        self.useg = np.array(list(uniq.keys()), dtype=int).reshape(-1, 4)
        self.seg_id = np.asarray(seg_id, int)
        self.seg_traj = np.asarray(seg_traj, int)
        self._groups = self._group_segments()
        self.base_logdens = None

    def _group_segments(self):
        """Per state: batches of equal-length complete segments plus the
        leftovers with missing values."""
        groups = {}
        for sid, (d, x, a, b) in enumerate(self.useg):
            ep = self.episodes[d]
            vals = ep.values[:, a:b]
            key = (x, b - a) if not np.isnan(vals).any() else (x, -1)
            groups.setdefault(key, []).append(sid)
        out = {}
        for (x, n), sids in groups.items():
            sids = np.asarray(sids)
            if n < 0:
                out.setdefault(x, []).append(("ragged", sids, None, None))
                continue
            t = np.stack([self.episodes[d].times[a:b] for d, _, a, b in self.useg[sids]])
            y = np.stack([self.episodes[d].values[:, a:b].T for d, _, a, b in self.useg[sids]])
            out.setdefault(x, []).append(("batch", sids, t, y))
        return out

    # -- densities -----------------------------------------------------------------
    def segment_logdens(self, params: ParameterSet, states=None) -> np.ndarray:
        out = np.zeros(len(self.useg))
        for x, groups in self._groups.items():
            if states is not None and x not in states:
                continue
            hyper = params.emission[x]
            for kind, sids, t, y in groups:
                if kind == "batch":
                    out[sids] = batched_logdens(hyper, t, y)
                else:
                    for sid in sids:
                        d, _, a, b = self.useg[sid]
                        out[sid] = segment_log_density(hyper, self.episodes[d].segment(a, b))
        return out

    def parts(self, params: ParameterSet, seg=None):
        """Per-trajectory log-density components (init, sojourn, jump, emission)."""
        with np.errstate(divide="ignore"):
            init = np.log(params.initial)[self.init_state]
        soj = np.bincount(self.soj_traj, sojourn_logpdf(params, self.soj_state, self.soj_dur), self.n_traj)
        if self.jump_from.size:
            jl = transition_log_prob(params, self.jump_from, self.jump_to, self.jump_dur)
            jump = np.bincount(self.jump_traj, jl, self.n_traj)
        else:
            jump = np.zeros(self.n_traj)
        if seg is None:
            seg = self.segment_logdens(params)
        emis = np.bincount(self.seg_traj, seg[self.seg_id], self.n_traj) if self.seg_id.size else np.zeros(self.n_traj)
        return init, soj, jump, emis

    def complete_logdens(self, params: ParameterSet, seg=None) -> np.ndarray:
        init, soj, jump, emis = self.parts(params, seg)
        return init + soj + jump + emis

    def weights(self, logdens: np.ndarray):
        """Self-normalised importance weights (sum G per episode) and ESS."""
        lw = logdens - self.base_logdens
        n_ep = len(self.episodes)
        w = np.zeros(self.n_traj)
        ess = np.zeros(n_ep)
        for d in range(n_ep):
            sel = self.traj_ep == d
            if not np.any(sel):
                continue
            x = lw[sel]
            if not np.any(np.isfinite(x)):
                raise FloatingPointError(f"episode {self.episodes[d].id}: all importance weights vanish")
            p = np.exp(x - logsumexp(x))
            w[sel] = p * sel.sum()
            ess[d] = 1.0 / np.sum(p * p)
        return w, ess


def batched_logdens(hyper: GpHyper, t: np.ndarray, y: np.ndarray) -> np.ndarray:
    """GP log densities of a batch of complete segments: ``t`` (B, n), ``y`` (B, n, Q)."""
    B, n = t.shape
    q = hyper.n_streams
    cov = _batched_cov(hyper, t)
    r = (y - hyper.mean).reshape(B, n * q)
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        return np.array([
            segment_log_density(hyper, _Seg(t[b], y[b].T)) for b in range(B)
        ])
    z = np.linalg.solve(L, r[..., None])[..., 0]
    logdet = np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
    return -0.5 * np.sum(z * z, axis=1) - logdet - 0.5 * n * q * np.log(2 * np.pi)


class _Seg:
    def __init__(self, times, values):
        self.times = times
        self.values = values

    def __len__(self):
        return len(self.times)


def _batched_cov(hyper: GpHyper, t):
    B, n = t.shape
    q = hyper.n_streams
    d = t[:, :, None] - t[:, None, :]
    k = hyper.amplitude**2 * np.exp(-0.5 * (d / hyper.length_scale) ** 2)
    cov = (k[:, :, None, :, None] * hyper.task_cov[None, None, :, None, :]).reshape(B, n * q, n * q)
    cov = cov + hyper.jitter * np.eye(n * q)[None]
    return cov


# -- M-step blocks ----------------------------------------------------------------

def _weighted_gamma_mle(s, w, k0):
    """Weighted Gamma MLE: Newton on log k - digamma(k) = log mean - mean log."""
    sw = w.sum()
    mean = np.sum(w * s) / sw
    mlog = np.sum(w * np.log(s)) / sw
    c = np.log(mean) - mlog
    if not c > 1e-10:
        return None
    k = (3 - c + np.sqrt((c - 3) ** 2 + 24 * c)) / (12 * c)
    for _ in range(100):
        f = np.log(k) - special.digamma(k) - c
        fp = 1.0 / k - special.polygamma(1, k)
        step = f / fp
        k_new = k - step
        if k_new <= 0:
            k_new = k / 2
        if abs(k_new - k) < 1e-12 * k:
            k = k_new
            break
        k = k_new
    return k, k / mean


def _gamma_objective(s, w, k, r):
    return float(np.sum(w * (k * np.log(r) + (k - 1) * np.log(s) - r * s - special.gammaln(k))))


def _transition_objective(theta, others, s, to_idx, w, n_out):
    eta = theta[:n_out]
    beta = theta[n_out:]
    logits = eta[None, :] + beta[None, :] * s[:, None]
    lse = logsumexp(logits, axis=1)
    ll = logits[np.arange(s.size), to_idx] - lse
    p = np.exp(logits - lse[:, None])
    resid = -p
    resid[np.arange(s.size), to_idx] += 1.0
    g_eta = (w[:, None] * resid).sum(0)
    g_beta = (w[:, None] * resid * s[:, None]).sum(0)
    return -float(np.sum(w * ll)), -np.concatenate([g_eta, g_beta])


def _gp_objective(hyper, groups, wseg, episodes, useg):
    tot = 0.0
    for kind, sids, t, y in groups:
        ws = wseg[sids]
        if not np.any(ws > 0):
            continue
        if kind == "batch":
            vals = batched_logdens(hyper, t, y)
        else:
            vals = np.array([segment_log_density(hyper, episodes[useg[s][0]].segment(useg[s][2], useg[s][3])) for s in sids])
        tot += float(np.sum(ws * vals))
    return tot


def _gls_mean(hyper, groups, wseg, episodes, useg):
    q = hyper.n_streams
    A = np.zeros((q, q))
    b = np.zeros(q)
    for kind, sids, t, y in groups:
        ws = wseg[sids]
        if not np.any(ws > 0):
            continue
        if kind == "batch":
            B, n = t.shape
            cov = _batched_cov(hyper, t)
            H = np.tile(np.eye(q), (n, 1))
            rhs = np.concatenate([np.broadcast_to(H, (B, n * q, q)), y.reshape(B, n * q, 1)], axis=2)
            X = np.linalg.solve(cov, rhs)
            A += np.einsum("b,kl,bkm->lm", ws, H, X[:, :, :q])
            b += np.einsum("b,kl,bk->l", ws, H, X[:, :, q])
        else:
            for s, wv in zip(sids, ws):
                d, _, a0, b0 = useg[s]
                ep = episodes[d]
                flat = ep.values[:, a0:b0].T.reshape(-1)
                mask = ~np.isnan(flat)
                n = b0 - a0
                from ..emission import build_covariance
                cov = build_covariance(hyper, ep.times[a0:b0])[np.ix_(mask, mask)]
                H = np.tile(np.eye(q), (n, 1))[mask]
                Kinv = np.linalg.pinv(cov, hermitian=True)
                A += wv * H.T @ Kinv @ H
                b += wv * H.T @ Kinv @ flat[mask]
    try:
        return np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        return None


def _moment_task_cov(hyper, groups, wseg):
    """Cross-stream covariance of residuals at equal times, minus the noise."""
    q = hyper.n_streams
    S = np.zeros((q, q))
    tot = 0.0
    for kind, sids, t, y in groups:
        if kind != "batch":
            continue
        ws = wseg[sids]
        r = y - hyper.mean
        S += np.einsum("b,bnl,bnm->lm", ws, r, r)
        tot += float(np.sum(ws) * y.shape[1])
    if tot <= 0:
        return None
    S /= tot
    S = S - hyper.jitter * np.eye(q)
    S = 0.5 * (S + S.T)
    w, v = np.linalg.eigh(S)
    floor = 1e-3 * max(np.trace(S) / q, 1e-6)
    w = np.maximum(w, floor)
    return (v * w) @ v.T / hyper.amplitude**2


class MStep:
    def __init__(self, bank: SampledTrajectorySet, learn_jitter: bool = True):
        self.bank = bank
        self.learn_jitter = learn_jitter

    def run(self, prev: ParameterSet, w: np.ndarray):
        bank = self.bank
        G = bank.G
        n = prev.n_states
        wt = w / G
        reverted = []

        # (a) initial distribution
        counts = np.bincount(bank.init_state, wt, n)
        initial = counts / counts.sum()
        with np.errstate(divide="ignore", invalid="ignore"):
            old = np.sum(counts * np.where(counts > 0, np.log(prev.initial), 0.0))
            new = np.sum(counts * np.where(counts > 0, np.log(initial), 0.0))
        if not new >= old - 1e-9 * abs(old):
            initial = prev.initial
            reverted.append("initial")
        # guard rounding so the sum is exactly one
        initial = initial / initial.sum()

        # (b) sojourns
        shape, rate = prev.shape.copy(), prev.rate.copy()
        sw = w[bank.soj_traj] / G
        for i in range(n):
            sel = (bank.soj_state == i) & (sw > 0)
            if sel.sum() < 2:
                continue
            s, ws = bank.soj_dur[sel], sw[sel]
            est = _weighted_gamma_mle(s, ws, shape[i])
            if est is None:
                continue
            old = _gamma_objective(s, ws, shape[i], rate[i])
            newv = _gamma_objective(s, ws, *est)
            if newv >= old - 1e-9 * abs(old):
                shape[i], rate[i] = est
            else:
                reverted.append(f"sojourn{i}")

        # (c) transitions
        eta, beta = prev.eta.copy(), prev.beta.copy()
        jw = w[bank.jump_traj] / G
        for i in prev.transient:
            sel = (bank.jump_from == i) & (jw > 0)
            if not np.any(sel):
                continue
            others = np.array([j for j in range(n) if j != i])
            pos = {j: k for k, j in enumerate(others)}
            to_idx = np.array([pos[j] for j in bank.jump_to[sel]])
            s, ws = bank.jump_dur[sel], jw[sel]
            m = others.size
            theta0 = np.concatenate([eta[i, others], beta[i, others]])
            theta0 = np.clip(theta0, [-20] * m + [0] * m, [20] * m + [5] * m)
            f0, _ = _transition_objective(theta0, others, s, to_idx, ws, m)
            res = optimize.minimize(
                _transition_objective, theta0, args=(others, s, to_idx, ws, m), jac=True,
                method="L-BFGS-B", bounds=[(-20, 20)] * m + [(0, 5)] * m,
            )
            if res.fun <= f0 + 1e-9 * abs(f0):
                e_new, b_new = res.x[:m], res.x[m:]
                # canonical representative: first free logit 0, smallest slope 0
                e_new = e_new - e_new[0]
                b_new = b_new - b_new.min()
                eta[i, others], beta[i, others] = e_new, b_new
            else:
                reverted.append(f"transition{i}")

        # (d) emissions
        seg_w = np.bincount(bank.seg_id, w[bank.seg_traj] / G, len(bank.useg)) if bank.seg_id.size else np.zeros(0)
        emission = list(prev.emission)
        for x, groups in bank._groups.items():
            emission[x], rev = self._gp_block(prev.emission[x], groups, seg_w)
            reverted.extend(f"gp{x}:{r}" for r in rev)

        out = ParameterSet(n, shape, rate, initial, eta, beta, emission, prev.zeta)
        return out, reverted

    def _gp_block(self, hyper: GpHyper, groups, seg_w):
        bank = self.bank
        rev = []

        def obj(h):
            return _gp_objective(h, groups, seg_w, bank.episodes, bank.useg)

        best = obj(hyper)

        def attempt(cand, name):
            nonlocal hyper, best
            if cand is None:
                return
            try:
                val = obj(cand)
            except (np.linalg.LinAlgError, ValueError, FloatingPointError):
                val = -np.inf
            if np.isfinite(val) and val >= best - 1e-9 * abs(best):
                hyper, best = cand, val
            else:
                rev.append(name)

        def rebuild(**kw):
            d = dict(mean=hyper.mean, amplitude=hyper.amplitude, length_scale=hyper.length_scale,
                     task_cov=hyper.task_cov, jitter=hyper.jitter)
            d.update(kw)
            try:
                return GpHyper(**d)
            except ValueError:
                return None

        mean = _gls_mean(hyper, groups, seg_w, bank.episodes, bank.useg)
        attempt(rebuild(mean=mean) if mean is not None else None, "mean")
        tc = _moment_task_cov(hyper, groups, seg_w)
        attempt(rebuild(task_cov=tc) if tc is not None else None, "task_cov")
        names = ["amplitude", "length_scale"] + (["jitter"] if self.learn_jitter else [])
        for name in names:
            cur = getattr(hyper, name)
            if cur <= 0:
                continue
            x0 = np.log(cur)

            def f(x, name=name):
                h = rebuild(**{name: float(np.exp(x))})
                if h is None:
                    return np.inf
                try:
                    v = obj(h)
                except (np.linalg.LinAlgError, ValueError, FloatingPointError):
                    return np.inf
                return -v if np.isfinite(v) else np.inf

            res = optimize.minimize_scalar(f, bounds=(x0 - np.log(4), x0 + np.log(4)), method="bounded",
                                           options={"xatol": 1e-3})
            if res.success and np.isfinite(res.fun):
                attempt(rebuild(**{name: float(np.exp(res.x))}), name)
        return hyper, rev


# -- initialisation and canonical form -------------------------------------------------

def initialize(episodes, n_states: int, seed: int = 0, n_streams: int | None = None) -> ParameterSet:
    """Data-driven starting point: k-means on 3-observation window means."""
    n = n_states
    q = n_streams or episodes[0].values.shape[0]
    feats, owner, final = [], [], []
    for d, ep in enumerate(episodes):
        m = ep.n_obs
        for a in range(max(m - 2, 0)):
            with np.errstate(invalid="ignore"), _quiet():
                f = np.nanmean(ep.values[:, a : a + 3], axis=1)
            if np.all(np.isfinite(f)):
                feats.append(f)
                owner.append(d)
                final.append(a == m - 3)
    feats = np.asarray(feats).reshape(-1, q)
    owner = np.asarray(owner, int)
    final = np.asarray(final, bool)
    if feats.shape[0] < n:
        raise ValueError("not enough observations to initialise")
    rng = np.random.default_rng(seed)
    centres, lab = kmeans2(feats, n, minit="++", seed=rng)
    labels = np.array([ep.label for ep in episodes])
    cat = labels[owner] != 0
    # absorbing clusters from the last window of each episode
    def most_common(mask, exclude=()):
        cnt = np.bincount(lab[mask], minlength=n).astype(float)
        cnt[list(exclude)] = -1
        return int(np.argmax(cnt))
    safe_c = most_common(final & ~cat) if np.any(final & ~cat) else most_common(~cat)
    cat_c = most_common(final & cat, exclude=[safe_c]) if np.any(final & cat) else most_common(cat, exclude=[safe_c])
    rest = [c for c in range(n) if c not in (safe_c, cat_c)]
    frac = [np.mean(cat[lab == c]) if np.any(lab == c) else 0.5 for c in rest]
    order = [safe_c] + [rest[k] for k in np.argsort(frac, kind="stable")] + [cat_c]

    gaps = np.concatenate([np.diff(ep.times) for ep in episodes if ep.n_obs > 1] or [np.ones(1)])
    mean_gap = float(np.mean(gaps)) if gaps.size else 1.0
    all_obs = np.concatenate([ep.values.T for ep in episodes], axis=0)
    all_obs = all_obs[~np.isnan(all_obs).any(axis=1)]
    assign = np.argmin(((all_obs[:, None, :] - centres[None]) ** 2).sum(-1), axis=1)
    pooled = np.cov(all_obs.T).reshape(q, q)
    emission = []
    for c in order:
        pts = all_obs[assign == c]
        C = np.cov(pts.T).reshape(q, q) if pts.shape[0] > q + 1 else pooled
        C = 0.5 * (C + C.T)
        noise = 0.3 * np.trace(C) / q
        S = C - noise * np.eye(q)
        w, v = np.linalg.eigh(S)
        S = (v * np.maximum(w, 0.05 * noise)) @ v.T
        sigma = float(np.sqrt(np.trace(S) / q))
        emission.append(GpHyper(centres[c], sigma, 3.0 * mean_gap, S / sigma**2, noise))
    shape = np.full(n, 2.0)
    rate = np.full(n, 2.0 / (5.0 * mean_gap))
    initial = np.zeros(n)
    initial[1:-1] = 1.0 / (n - 2)
    zeta = sum(ep.n_obs for ep in episodes) / sum(ep.censor_time for ep in episodes)
    return ParameterSet(n, shape, rate, initial, np.zeros((n, n)), np.zeros((n, n)), emission, zeta)


class _quiet:
    def __enter__(self):
        import warnings
        self._w = warnings.catch_warnings()
        self._w.__enter__()
        warnings.simplefilter("ignore", RuntimeWarning)

    def __exit__(self, *exc):
        return self._w.__exit__(*exc)


def permute_states(params: ParameterSet, perm) -> ParameterSet:
    """New parameter set whose state k is the old state perm[k]."""
    perm = np.asarray(perm, int)
    return ParameterSet(
        params.n_states,
        params.shape[perm], params.rate[perm], params.initial[perm],
        params.eta[np.ix_(perm, perm)], params.beta[np.ix_(perm, perm)],
        [params.emission[k] for k in perm], params.zeta,
    )


def canonicalize(params: ParameterSet) -> ParameterSet:
    """Order transient states by eventual absorption probability into N."""
    absn = absorption_probabilities(params)
    tr = params.transient
    perm = np.concatenate([[0], tr[np.argsort(absn[tr], kind="stable")], [params.n_states - 1]])
    return permute_states(params, perm)


def param_vector(params: ParameterSet) -> np.ndarray:
    parts = [np.log(params.shape), np.log(params.rate), params.initial, params.eta.ravel(), params.beta.ravel()]
    for e in params.emission:
        parts += [e.mean, [np.log(e.amplitude), np.log(e.length_scale), np.log(max(e.jitter, 1e-300))],
                  (e.amplitude**2 * e.task_cov).ravel()]
    return np.concatenate([np.atleast_1d(np.asarray(p, float)) for p in parts])


def parameter_count(n_states: int, n_streams: int) -> int:
    n, q = n_states, n_streams
    return (n - 1) + 2 * n + 2 * (n - 2) ** 2 + n * (q + 2 + q * (q + 1) // 2)


# -- driver ----------------------------------------------------------------------------

def _episode_seed(seed, round_, d):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(round_), int(d)]))


def _sample_episode(args):
    params, ep, G, step, seed, round_, d = args
    msgs = GridMessages(params, ep, step)
    sampler = BackwardSampler(msgs)
    rng = _episode_seed(seed, round_, d)
    trajs = [sampler.sample(rng) for _ in range(G)]
    return trajs, msgs.log_likelihood, sampler.stats.proposals, sampler.steps


def draw_trajectories(params, episodes, G, step, seed, round_=0, n_jobs=1):
    jobs = [(params, ep, G, step, seed, round_, d) for d, ep in enumerate(episodes)]
    if n_jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(n_jobs) as ex:
            res = list(ex.map(_sample_episode, jobs, chunksize=max(1, len(jobs) // (4 * n_jobs))))
    else:
        res = [_sample_episode(j) for j in jobs]
    trajs = [r[0] for r in res]
    loglik = float(sum(r[1] for r in res))
    return trajs, loglik


def estimated_loglik(params, episodes, step=0.5) -> float:
    return float(sum(GridMessages(params, ep, step).log_likelihood for ep in episodes))


@dataclass
class EmResult:
    params: ParameterSet
    trace: list
    initial_params: ParameterSet
    initial_loglik: float
    final_loglik: float
    bank: SampledTrajectorySet | None = None


def mc_e_step(bank: SampledTrajectorySet, params: ParameterSet, weights=None) -> float:
    """Monte Carlo estimate of the expected complete log-likelihood."""
    ld = bank.complete_logdens(params)
    if not np.all(np.isfinite(ld)):
        bad = int(np.flatnonzero(~np.isfinite(ld))[0])
        raise FloatingPointError(
            f"non-finite complete log density for episode {bank.episodes[bank.traj_ep[bad]].id}, "
            f"trajectory {bad - np.flatnonzero(bank.traj_ep == bank.traj_ep[bad])[0]}"
        )
    w = np.ones(bank.n_traj) if weights is None else weights
    return float(np.sum(ld * w) / bank.G)


def m_step(bank: SampledTrajectorySet, prev: ParameterSet, weights=None, learn_jitter: bool = True):
    w = np.ones(bank.n_traj) if weights is None else weights
    return MStep(bank, learn_jitter).run(prev, w)


def relabel(episodes, n_states: int):
    """Map catastrophic labels onto the last state of an ``n_states`` model.

    Labels only carry the safe/catastrophic distinction, so data generated
    with one state count can be fitted with another.
    """
    out = []
    for ep in episodes:
        if ep.label < 0:
            raise ValueError(f"episode {ep.id}: negative label")
        target = 0 if ep.label == 0 else n_states - 1
        out.append(ep if target == ep.label else dataclasses.replace(ep, label=target, truth=None))
    return out


def ffbs_mcem(episodes, n_states: int = 3, config: EmConfig | None = None, init: ParameterSet | None = None,
              callback=None) -> EmResult:
    cfg = config or EmConfig()
    episodes = list(episodes)
    episodes = relabel(episodes, n_states)
    t0 = time.perf_counter()
    params = init if init is not None else initialize(episodes, n_states, cfg.init_clusters_seed or cfg.seed)
    if params.n_states != n_states:
        raise ValueError("initial parameter set has the wrong number of states")
    zeta = sum(ep.n_obs for ep in episodes) / max(sum(ep.censor_time for ep in episodes), 1e-12)
    params = params.replace(zeta=zeta)
    start = params
    round_ = 0
    trajs, ll0 = draw_trajectories(params, episodes, cfg.G, cfg.grid_step, cfg.seed, round_, cfg.n_jobs)
    bank = SampledTrajectorySet(episodes, trajs, cfg.G)
    bank.base_logdens = bank.complete_logdens(params)
    trace = [EmIterate(0, params, mc_e_step(bank, params), float("nan"), ll0, float(cfg.G), time.perf_counter() - t0)]
    if callback:
        callback(trace[-1])
    mstep = MStep(bank, cfg.learn_jitter)
    for z in range(1, cfg.max_iter + 1):
        w, ess = bank.weights(bank.complete_logdens(params))
        refreshed = False
        if cfg.ess_refresh and ess.min() < cfg.refresh_fraction * cfg.G:
            round_ += 1
            trajs, _ = draw_trajectories(params, episodes, cfg.G, cfg.grid_step, cfg.seed, round_, cfg.n_jobs)
            bank = SampledTrajectorySet(episodes, trajs, cfg.G)
            bank.base_logdens = bank.complete_logdens(params)
            mstep = MStep(bank, cfg.learn_jitter)
            w, ess = np.ones(bank.n_traj), np.full(len(episodes), float(cfg.G))
            refreshed = True
        q_prev = float(np.sum(bank.complete_logdens(params) * w) / cfg.G)
        new, reverted = mstep.run(params, w)
        q_new = float(np.sum(bank.complete_logdens(new) * w) / cfg.G)
        ll = float("nan")
        if cfg.loglik_every and z % cfg.loglik_every == 0:
            ll = estimated_loglik(new, episodes, cfg.grid_step)
        change = float(np.max(np.abs(param_vector(new) - param_vector(params))))
        params = new
        trace.append(EmIterate(z, params, q_new, q_prev, ll, float(ess.min()), time.perf_counter() - t0,
                               refreshed, reverted))
        if callback:
            callback(trace[-1])
        log.info("iter %d: Q=%.4f (prev %.4f) minESS=%.1f change=%.3g", z, q_new, q_prev, ess.min(), change)
        if change <= cfg.eps:
            break
    final = canonicalize(params)
    ll_final = estimated_loglik(final, episodes, cfg.grid_step)
    trace[-1].est_loglik = ll_final
    return EmResult(final, trace, start, ll0, ll_final, bank)


def bic_score(loglik: float, n_states: int, n_streams: int, n_scalar_obs: int) -> float:
    return -2.0 * loglik + parameter_count(n_states, n_streams) * np.log(max(n_scalar_obs, 2))


def bic_select(episodes, candidates, config: EmConfig | None = None):
    """Fit each candidate state count and return (N, params, scores)."""
    cfg = config or EmConfig()
    episodes = list(episodes)
    q = episodes[0].values.shape[0]
    n_scalar = int(sum(np.sum(~np.isnan(ep.values)) for ep in episodes))
    scores = {}
    fits = {}
    for n in sorted(set(candidates)):
        try:
            res = ffbs_mcem(episodes, n, cfg)
        except Exception as exc:  # noqa: BLE001 - candidate skipped, reported
            log.warning("candidate N=%d failed: %s", n, exc)
            continue
        scores[n] = bic_score(res.final_loglik, n, q, n_scalar)
        fits[n] = res.params
    if not scores:
        raise RuntimeError("every BIC candidate failed")
    best = min(scores, key=lambda k: (scores[k], k))
    return best, fits[best], scores
