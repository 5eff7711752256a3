"""Parameter set, sojourn distributions, transition functions and kernels.

States are indexed from 0 in the Python API: state 0 is the safe absorbing
state, state ``N - 1`` the catastrophic absorbing state and everything in
between is transient.  Serialised formats (episode labels, trajectories,
CLI output) use 1-based indices.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from .emission import GpHyper

SURVIVAL_FLOOR = 1e-12


class StateClass(enum.Enum):
    SafeAbsorbing = "safe"
    Transient = "transient"
    CatastrophicAbsorbing = "catastrophic"


@dataclass(frozen=True, eq=False)
class ParameterSet:
    """Full HASMM parameter bundle."""

    n_states: int
    shape: np.ndarray
    rate: np.ndarray
    initial: np.ndarray
    eta: np.ndarray
    beta: np.ndarray
    emission: tuple
    zeta: float = 1.0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        n = int(self.n_states)
        if n < 3:
            raise ValueError("need at least 3 states (two absorbing + one transient)")
        conv = {
            "shape": np.asarray(self.shape, dtype=float).reshape(-1),
            "rate": np.asarray(self.rate, dtype=float).reshape(-1),
            "initial": np.asarray(self.initial, dtype=float).reshape(-1),
            "eta": np.asarray(self.eta, dtype=float),
            "beta": np.asarray(self.beta, dtype=float),
        }
        for key in ("shape", "rate", "initial"):
            if conv[key].shape != (n,):
                raise ValueError(f"{key} must have length {n}")
        for key in ("eta", "beta"):
            if conv[key].shape != (n, n):
                raise ValueError(f"{key} must be {n}x{n}")
        if np.any(conv["shape"] <= 0) or np.any(conv["rate"] <= 0):
            raise ValueError("Gamma shapes and rates must be strictly positive")
        if not np.all(np.isfinite(conv["eta"])) or not np.all(np.isfinite(conv["beta"])):
            raise ValueError("eta and beta must be finite")
        if np.any(conv["beta"] < 0):
            raise ValueError("beta entries must be nonnegative")
        p0 = conv["initial"]
        if np.any(p0 < 0) or abs(p0.sum() - 1.0) > 1e-12:
            raise ValueError("initial distribution must be nonnegative and sum to 1")
        emission = tuple(
            e if isinstance(e, GpHyper) else GpHyper.from_dict(e) for e in self.emission
        )
        if len(emission) != n:
            raise ValueError(f"need {n} emission blocks, got {len(emission)}")
        if len({e.n_streams for e in emission}) != 1:
            raise ValueError("all states must emit the same number of streams")
        if not self.zeta > 0:
            raise ValueError("zeta must be positive")
        for key, val in conv.items():
            val.setflags(write=False)
            object.__setattr__(self, key, val)
        object.__setattr__(self, "n_states", n)
        object.__setattr__(self, "emission", emission)
        object.__setattr__(self, "zeta", float(self.zeta))

    # -- structure -------------------------------------------------------
    @property
    def n_streams(self) -> int:
        return self.emission[0].n_streams

    @property
    def transient(self) -> np.ndarray:
        return np.arange(1, self.n_states - 1)

    def is_absorbing(self, i: int) -> bool:
        return i == 0 or i == self.n_states - 1

    def state_class(self, i: int) -> StateClass:
        self._check_state(i)
        if i == 0:
            return StateClass.SafeAbsorbing
        if i == self.n_states - 1:
            return StateClass.CatastrophicAbsorbing
        return StateClass.Transient

    def _check_state(self, i):
        if not (isinstance(i, (int, np.integer)) and 0 <= i < self.n_states):
            raise ValueError(f"invalid state index {i!r} for N={self.n_states}")

    @property
    def mean_sojourn(self) -> np.ndarray:
        return self.shape / self.rate

    # -- serialisation ---------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "sojourn": [{"shape": float(k), "rate": float(r)} for k, r in zip(self.shape, self.rate)],
            "initial": self.initial.tolist(),
            "eta": self.eta.tolist(),
            "beta": self.beta.tolist(),
            "emission": [e.to_dict() for e in self.emission],
            "zeta": self.zeta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParameterSet":
        allowed = {"n_states", "sojourn", "initial", "eta", "beta", "emission", "zeta"}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown parameter keys: {sorted(unknown)}")
        missing = allowed - set(d)
        if missing:
            raise ValueError(f"missing parameter keys: {sorted(missing)}")
        for s in d["sojourn"]:
            if set(s) != {"shape", "rate"}:
                raise ValueError("sojourn entries must have exactly the keys shape, rate")
        return cls(
            n_states=d["n_states"],
            shape=[s["shape"] for s in d["sojourn"]],
            rate=[s["rate"] for s in d["sojourn"]],
            initial=d["initial"],
            eta=d["eta"],
            beta=d["beta"],
            emission=[GpHyper.from_dict(e) for e in d["emission"]],
            zeta=d["zeta"],
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ParameterSet":
        return cls.from_dict(json.loads(text))

    def fingerprint(self) -> str:
        """sha256 of the canonical JSON encoding (floats via repr)."""
        if "fingerprint" not in self._cache:
            blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
            self._cache["fingerprint"] = hashlib.sha256(blob.encode()).hexdigest()
        return self._cache["fingerprint"]

    def replace(self, **changes) -> "ParameterSet":
        kw = dict(
            n_states=self.n_states, shape=self.shape, rate=self.rate, initial=self.initial,
            eta=self.eta, beta=self.beta, emission=self.emission, zeta=self.zeta,
        )
        kw.update(changes)
        return ParameterSet(**kw)

    def kernel(self, step: float = 0.1) -> "KernelTable":
        key = ("kernel", float(step))
        if key not in self._cache:
            self._cache[key] = KernelTable(self, step)
        return self._cache[key]


# -- sojourns ----------------------------------------------------------------

def _check_duration(s):
    s = np.asarray(s, dtype=float)
    if np.any(s < 0) or np.any(np.isnan(s)):
        raise ValueError("durations must be nonnegative")
    return s


def sojourn_pdf(params: ParameterSet, state: int, s):
    params._check_state(state)
    s = _check_duration(s)
    return stats.gamma.pdf(s, params.shape[state], scale=1.0 / params.rate[state])


def sojourn_logpdf(params: ParameterSet, state, s):
    """Vectorised over ``state`` and ``s`` (broadcast); no validation."""
    k = params.shape[state]
    r = params.rate[state]
    s = np.asarray(s, dtype=float)
    with np.errstate(divide="ignore"):
        return k * np.log(r) + special.xlogy(k - 1, s) - r * s - special.gammaln(k)


def sojourn_cdf(params: ParameterSet, state: int, s):
    params._check_state(state)
    s = _check_duration(s)
    return special.gammainc(params.shape[state], params.rate[state] * s)


def sojourn_sf(params: ParameterSet, state: int, s):
    """Survival 1 - V, accurate in the tail."""
    s = np.maximum(np.asarray(s, dtype=float), 0.0)
    return special.gammaincc(params.shape[state], params.rate[state] * s)


def sojourn_quantile(params: ParameterSet, state: int, q: float) -> float:
    return float(special.gammaincinv(params.shape[state], q) / params.rate[state])


# -- transitions -------------------------------------------------------------

def transition_row(params: ParameterSet, i: int, s) -> np.ndarray:
    """g_i.(s) for an array of durations; returns shape ``(len(s), N)``."""
    s = np.atleast_1d(np.asarray(s, dtype=float))
    n = params.n_states
    out = np.zeros((s.shape[0], n))
    if params.is_absorbing(i):
        out[:, i] = 1.0
        return out
    others = np.array([j for j in range(n) if j != i])
    logits = params.eta[i, others][None, :] + params.beta[i, others][None, :] * s[:, None]
    out[:, others] = special.softmax(logits, axis=1)
    return out


def transition_fn(params: ParameterSet, i: int, j: int, s):
    params._check_state(i)
    params._check_state(j)
    s = _check_duration(s)
    vals = transition_row(params, i, np.ravel(s))[:, j]
    return vals.reshape(np.shape(s)) if np.ndim(s) else float(vals[0])


def transition_log_prob(params: ParameterSet, i, j, s):
    """log g_ij(s), vectorised over equal-length arrays of (i, j, s)."""
    i = np.asarray(i)
    j = np.asarray(j)
    s = np.asarray(s, dtype=float)
    n = params.n_states
    logits = params.eta[i] + params.beta[i] * s[..., None]
    mask = np.arange(n)[None, :] == np.asarray(i)[..., None]
    logits = np.where(mask, -np.inf, logits)
    lse = special.logsumexp(logits, axis=-1)
    picked = np.take_along_axis(logits, j[..., None], axis=-1)[..., 0]
    out = picked - lse
    absorbing = (i == 0) | (i == n - 1)
    return np.where(absorbing, np.where(i == j, 0.0, -np.inf), out)


# -- kernels -----------------------------------------------------------------

class KernelTable:
    """Quadrature of Q_ij(s) = int_0^s g_ij(u) v_i(u) du on a fixed step.

    Each cell contributes ``g(midpoint) * (V(right) - V(left))`` with exact
    Gamma increments, so the result is exact whenever g is constant in s and
    second order otherwise.  A second table with shape + 1 carries the first
    moment needed for antiderivatives of the kernel tail.
    """

    def __init__(self, params: ParameterSet, step: float = 0.1):
        if step <= 0:
            raise ValueError("kernel step must be positive")
        self.params = params
        self.h = float(step)
        n = params.n_states
        self._fwd = {}
        self._tail = {}
        self._tail1 = {}
        self._xmax = np.zeros(n)
        for i in params.transient:
            k, r = params.shape[i], params.rate[i]
            xmax = max(special.gammainccinv(k, 1e-18), special.gammainccinv(k + 1, 1e-18)) / r
            nc = int(np.ceil(xmax / self.h)) + 1
            x = np.arange(nc + 1) * self.h
            mid = 0.5 * (x[:-1] + x[1:])
            g = transition_row(params, i, mid)
            sf = special.gammaincc(k, r * x)
            sf1 = special.gammaincc(k + 1, r * x)
            mass = g * (sf[:-1] - sf[1:])[:, None]
            mass1 = g * (sf1[:-1] - sf1[1:])[:, None]
            self._fwd[i] = np.vstack([np.zeros((1, n)), np.cumsum(mass, axis=0)])
            # tail[c] = int_{x_c}^inf; beyond the grid the residual is g(x_max) * sf
            end = transition_row(params, i, x[-1:])[0]
            tail = np.cumsum(mass[::-1], axis=0)[::-1]
            self._tail[i] = np.vstack([tail, np.zeros((1, n))]) + end * sf[-1]
            tail1 = np.cumsum(mass1[::-1], axis=0)[::-1]
            self._tail1[i] = np.vstack([tail1, np.zeros((1, n))]) + end * sf1[-1]
            self._xmax[i] = x[-1]

    def _locate(self, i, s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        capped = np.minimum(s, self._xmax[i] + self.h)
        c = np.minimum(np.floor(capped / self.h).astype(int), len(self._fwd[i]) - 2)
        c = np.maximum(c, 0)
        return s, c

    def cdf_kernel(self, i: int, s) -> np.ndarray:
        """Q_i.(s), shape ``(len(s), N)``."""
        p = self.params
        s = np.atleast_1d(np.asarray(s, dtype=float))
        if p.is_absorbing(i):
            return np.zeros((s.shape[0], p.n_states))
        s, c = self._locate(i, s)
        x = c * self.h
        k, r = p.shape[i], p.rate[i]
        s_eff = np.minimum(s, self._xmax[i])
        part = transition_row(p, i, 0.5 * (x + s_eff)) * (
            special.gammainc(k, r * s_eff) - special.gammainc(k, r * x)
        )[:, None]
        out = self._fwd[i][c] + part
        beyond = s > self._xmax[i]
        if np.any(beyond):
            out[beyond] = self.tail(i, np.zeros(1))[0] - self.tail(i, s[beyond])
        return out

    def _tail_generic(self, i, s, table, shape):
        p = self.params
        s = np.atleast_1d(np.asarray(s, dtype=float))
        if p.is_absorbing(i):
            return np.zeros((s.shape[0], p.n_states))
        s, c = self._locate(i, s)
        r = p.rate[i]
        inside = s <= self._xmax[i]
        x1 = (c + 1) * self.h
        sf_s = special.gammaincc(shape, r * s)
        mid = 0.5 * (np.where(np.isfinite(s), s, x1) + x1)
        part = transition_row(p, i, mid) * (sf_s - special.gammaincc(shape, r * x1))[:, None]
        out = table[c + 1] + part
        far = ~inside & np.isfinite(s)
        if np.any(far):
            out[far] = transition_row(p, i, s[far]) * sf_s[far, None]
        out[np.isinf(s)] = 0.0
        return out

    def tail(self, i: int, s) -> np.ndarray:
        """int_s^inf g_i.(u) v_i(u) du."""
        return self._tail_generic(i, s, self._tail.get(i), self.params.shape[i])

    def tail_antiderivative(self, i: int, s) -> np.ndarray:
        """CT(s) = int_s^inf tail(e) de = int_s^inf g v (u - s) du."""
        p = self.params
        k, r = p.shape[i], p.rate[i]
        s = np.atleast_1d(np.asarray(s, dtype=float))
        first = (k / r) * self._tail_generic(i, s, self._tail1.get(i), k + 1)
        with np.errstate(invalid="ignore"):
            out = first - s[:, None] * self.tail(i, s)
        out[np.isinf(s)] = 0.0
        return out


def survival_antiderivative(params: ParameterSet, i: int, s) -> np.ndarray:
    """int_s^inf (1 - V_i(u)) du."""
    k, r = params.shape[i], params.rate[i]
    s = np.atleast_1d(np.asarray(s, dtype=float))
    return (k / r) * special.gammaincc(k + 1, r * s) - s * special.gammaincc(k, r * s)


def semi_markov_kernel(params: ParameterSet, i: int, j: int, s, step: float = 0.1):
    params._check_state(i)
    params._check_state(j)
    s = _check_duration(s)
    vals = params.kernel(step).cdf_kernel(i, np.ravel(s))[:, j]
    return vals.reshape(np.shape(s)) if np.ndim(s) else float(vals[0])


def mean_transition_fn(params: ParameterSet, i: int, j: int, s, step: float = 0.1):
    """E[g_ij(S) | S <= s] for transient i; s = 0 gives the limit g_ij(0)."""
    params._check_state(i)
    params._check_state(j)
    if params.is_absorbing(i):
        raise ValueError("mean_transition_fn is defined for transient states")
    s = _check_duration(s)
    flat = np.ravel(s)
    q = params.kernel(step).cdf_kernel(i, flat)[:, j]
    v = special.gammainc(params.shape[i], params.rate[i] * flat)
    g0 = transition_row(params, i, np.where(np.isfinite(flat), flat, 0.0))[:, j]
    with np.errstate(invalid="ignore", divide="ignore"):
        vals = np.where(v > 1e-300, q / np.where(v > 1e-300, v, 1.0), g0)
    return vals.reshape(np.shape(s)) if np.ndim(s) else float(vals[0])


def embedded_limit(params: ParameterSet, step: float = 0.1) -> np.ndarray:
    """Embedded jump-chain matrix: P(next = j | current = i) = g_bar_ij(inf)."""
    n = params.n_states
    P = np.eye(n)
    kt = params.kernel(step)
    for i in params.transient:
        P[i] = kt.tail(i, np.zeros(1))[0]
    return P


def absorption_probabilities(params: ParameterSet, step: float = 0.1) -> np.ndarray:
    """P(eventual absorption in N | start in i) from the embedded chain."""
    P = embedded_limit(params, step)
    n = params.n_states
    tr = params.transient
    A = np.eye(len(tr)) - P[np.ix_(tr, tr)]
    b = P[tr, n - 1]
    out = np.zeros(n)
    out[n - 1] = 1.0
    out[tr] = np.linalg.solve(A, b)
    return out


def truncated_kernel_row(params: ParameterSet, i: int, tau, s_lo, s_hi, step: float = 0.1):
    """Q_bar_i.(tau; s_lo, s_hi), broadcasting over tau / s_lo / s_hi.

    Probability of a jump out of transient state ``i`` within ``tau``, landing
    in each destination, given that the time already spent in ``i`` lies in
    ``[s_lo, s_hi]`` with entry time a priori uniform (posterior weight on the
    elapsed time proportional to the survival 1 - V_i).  When the interval
    collapses this is the point conditional (Q(s + tau) - Q(s)) / (1 - V(s)).
    Returns an array of shape ``broadcast_shape + (N,)``.
    """
    tau, s_lo, s_hi = np.broadcast_arrays(
        np.asarray(tau, float), np.asarray(s_lo, float), np.asarray(s_hi, float)
    )
    shp = tau.shape
    n = params.n_states
    if params.is_absorbing(i):
        return np.zeros(shp + (n,))
    tau, s_lo, s_hi = tau.ravel(), s_lo.ravel(), s_hi.ravel()
    kt = params.kernel(step)
    width = s_hi - s_lo
    point = width <= 1e-6 * np.maximum(1.0, s_hi)
    out = np.zeros((tau.size, n))

    # interval conditioning via antiderivatives of the tails
    num = (kt.tail_antiderivative(i, s_lo) - kt.tail_antiderivative(i, s_hi)) - (
        kt.tail_antiderivative(i, s_lo + tau) - kt.tail_antiderivative(i, s_hi + tau)
    )
    den = survival_antiderivative(params, i, s_lo) - survival_antiderivative(params, i, s_hi)
    weak = den < 1e-9 * np.maximum(width, 1e-300)
    use_point = point | weak
    ok = ~use_point
    out[ok] = num[ok] / den[ok, None]

    if np.any(use_point):
        s = s_lo[use_point]
        t = tau[use_point]
        sf = sojourn_sf(params, i, s)
        diff = kt.tail(i, s) - kt.tail(i, s + t)
        alive = sf > SURVIVAL_FLOOR
        res = np.zeros_like(diff)
        res[alive] = diff[alive] / sf[alive, None]
        out[use_point] = res
    out = np.clip(out, 0.0, 1.0)
    tot = out.sum(axis=1)
    over = tot > 1.0
    out[over] /= tot[over, None]
    return out.reshape(shp + (n,))


def truncated_stay(params: ParameterSet, i: int, tau, s_lo, s_hi):
    """P(no jump out of i within tau | elapsed in [s_lo, s_hi]); 1 for absorbing."""
    tau, s_lo, s_hi = np.broadcast_arrays(
        np.asarray(tau, float), np.asarray(s_lo, float), np.asarray(s_hi, float)
    )
    shp = tau.shape
    if params.is_absorbing(i):
        return np.ones(shp)
    tau, s_lo, s_hi = tau.ravel(), s_lo.ravel(), s_hi.ravel()
    width = s_hi - s_lo
    num = survival_antiderivative(params, i, s_lo + tau) - survival_antiderivative(params, i, s_hi + tau)
    den = survival_antiderivative(params, i, s_lo) - survival_antiderivative(params, i, s_hi)
    use_point = (width <= 1e-6 * np.maximum(1.0, s_hi)) | (den < 1e-9 * np.maximum(width, 1e-300))
    out = np.ones(tau.size)
    ok = ~use_point
    out[ok] = num[ok] / den[ok]
    if np.any(use_point):
        sf0 = sojourn_sf(params, i, s_lo[use_point])
        sf1 = sojourn_sf(params, i, s_lo[use_point] + tau[use_point])
        alive = sf0 > SURVIVAL_FLOOR
        res = np.ones_like(sf0)
        res[alive] = sf1[alive] / sf0[alive]
        out[use_point] = res
    return np.clip(out, 0.0, 1.0).reshape(shp)


def truncated_kernel(params: ParameterSet, i: int, j: int, tau, s_lo, s_hi, step: float = 0.1):
    params._check_state(i)
    params._check_state(j)
    for v in (tau, s_lo, s_hi):
        _check_duration(v)
    if np.any(np.asarray(s_lo) > np.asarray(s_hi)):
        raise ValueError("s_lo must not exceed s_hi")
    vals = truncated_kernel_row(params, i, tau, s_lo, s_hi, step)[..., j]
    return vals if np.ndim(vals) else float(vals)


def reference_instance(n_states: int = 3, n_streams: int = 2, kind: str = "default") -> ParameterSet:
    """Small well-separated instances shared by tests, demos and the CLI selftest.

    ``kind`` is "default" (Gamma sojourns, elapsed-time dependent escalation),
    "ctmc" (exponential sojourns, constant transitions) or "toy" (a fixed
    4-state, 1-stream instance small enough for brute-force enumeration;
    ``n_states`` and ``n_streams`` are ignored).
    """
    if kind == "toy":
        return _toy_instance()
    n = n_states
    means = np.linspace(-3.0, 3.0, n)
    emission = []
    for i in range(n):
        mean = np.full(n_streams, means[i])
        if n_streams > 1:
            mean[1:] = means[i] * 0.5
        task = 0.5 * np.eye(n_streams) + 0.1 * np.ones((n_streams, n_streams))
        emission.append(GpHyper(mean=mean, amplitude=0.7, length_scale=3.0, task_cov=task, jitter=0.25))
    shape = np.full(n, 2.0)
    rate = np.full(n, 0.2)
    eta = np.zeros((n, n))
    beta = np.zeros((n, n))
    initial = np.zeros(n)
    initial[1:-1] = 1.0 / (n - 2)
    if kind == "ctmc":
        shape[:] = 1.0
        rate = np.linspace(0.15, 0.3, n)
    elif kind == "default":
        rate[0], rate[-1] = 0.5, 0.5
        eta[1:-1, -1] = -0.5
        beta[1:-1, -1] = 0.08
    else:
        raise ValueError(f"unknown reference kind {kind!r}")
    return ParameterSet(n, shape, rate, initial, eta, beta, emission, zeta=1.0)


def _toy_instance() -> ParameterSet:
    # two transient states, one stream, short sojourns: small enough to enumerate
    means = (-2.0, -0.5, 0.5, 2.0)
    emission = [GpHyper([m], 1.0, 1.0, [[1.0]], 0.3) for m in means]
    eta = np.zeros((4, 4))
    beta = np.zeros((4, 4))
    eta[1, 2], eta[2, 1], eta[2, 3] = 1.0, 0.5, 0.3
    beta[1, 3] = 0.3
    return ParameterSet(4, [1.5, 2.0, 2.5, 1.5], [1.0, 1.5, 1.2, 1.0], [0.0, 0.6, 0.4, 0.0], eta, beta, emission)


def truncated_kernel_grid(params: ParameterSet, i: int, tau, s_lo, s_hi, step: float = 0.1):
    """Q_bar and stay on a product grid, exploiting that every antiderivative
    term depends on two of the three axes only.

    Returns ``(qbar, stay)`` with shapes ``(A, B, C, N)`` and ``(A, B, C)``.
    Cells with ``s_lo > s_hi`` use the point conditional at ``s_hi``.
    Agrees with :func:`truncated_kernel_row` cell by cell.
    """
    tau, s_lo, s_hi = (np.asarray(x, dtype=float).reshape(-1) for x in (tau, s_lo, s_hi))
    A, B, C = tau.size, s_lo.size, s_hi.size
    n = params.n_states
    if params.is_absorbing(i):
        return np.zeros((A, B, C, n)), np.ones((A, B, C))
    kt = params.kernel(step)
    ct_lo = kt.tail_antiderivative(i, s_lo)
    ct_hi = kt.tail_antiderivative(i, s_hi)
    ct_lo_t = kt.tail_antiderivative(i, (s_lo[None, :] + tau[:, None]).ravel()).reshape(A, B, n)
    ct_hi_t = kt.tail_antiderivative(i, (s_hi[None, :] + tau[:, None]).ravel()).reshape(A, C, n)
    cs_lo = survival_antiderivative(params, i, s_lo)
    cs_hi = survival_antiderivative(params, i, s_hi)
    cs_lo_t = survival_antiderivative(params, i, (s_lo[None, :] + tau[:, None]).ravel()).reshape(A, B)
    cs_hi_t = survival_antiderivative(params, i, (s_hi[None, :] + tau[:, None]).ravel()).reshape(A, C)

    width = s_hi[None, :] - s_lo[:, None]
    den = cs_lo[:, None] - cs_hi[None, :]
    point = width <= 1e-6 * np.maximum(1.0, s_hi[None, :])
    weak = den < 1e-9 * np.maximum(width, 1e-300)
    interval = ~(point | weak) & (width > 0)
    safe_den = np.where(interval, den, 1.0)

    num = (ct_lo[None, :, None, :] - ct_hi[None, None, :, :]) - (
        ct_lo_t[:, :, None, :] - ct_hi_t[:, None, :, :]
    )
    qbar = num / safe_den[None, :, :, None]
    stay = (cs_lo_t[:, :, None] - cs_hi_t[:, None, :]) / safe_den[None]

    def point_values(s):
        sf = sojourn_sf(params, i, s)
        tail_s = kt.tail(i, s)
        tail_st = kt.tail(i, (s[None, :] + tau[:, None]).ravel()).reshape(A, s.size, n)
        alive = sf > SURVIVAL_FLOOR
        q = np.where(alive[None, :, None], (tail_s[None] - tail_st) / np.where(alive, sf, 1.0)[None, :, None], 0.0)
        sf_t = sojourn_sf(params, i, (s[None, :] + tau[:, None]).ravel()).reshape(A, s.size)
        st = np.where(alive[None, :], sf_t / np.where(alive, sf, 1.0)[None, :], 1.0)
        return q, st

    q_lo, st_lo = point_values(s_lo)
    q_hi, st_hi = point_values(s_hi)
    use_lo = (point | weak) & (width >= 0)
    use_hi = width < 0
    qbar = np.where(use_lo[None, :, :, None], q_lo[:, :, None, :], qbar)
    qbar = np.where(use_hi[None, :, :, None], q_hi[:, None, :, :], qbar)
    stay = np.where(use_lo[None], st_lo[:, :, None], stay)
    stay = np.where(use_hi[None], st_hi[:, None, :], stay)

    qbar = np.clip(qbar, 0.0, 1.0)
    tot = qbar.sum(axis=-1, keepdims=True)
    qbar = np.where(tot > 1.0, qbar / np.where(tot > 0, tot, 1.0), qbar)
    return qbar, np.clip(stay, 0.0, 1.0)
