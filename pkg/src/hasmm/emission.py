"""Multi-task Gaussian-process segment emissions.

Each latent state owns a GP with a constant per-stream mean, a squared
exponential temporal kernel and a free-form inter-stream covariance.  The
joint covariance of a segment observed at times ``t`` is::

    cov[(t, l), (t', v)] = task_cov[l, v] * sigma**2 * exp(-(t - t')**2 / (2 ell**2))
                           + jitter * [t == t' and l == v]

Rows are ordered time-major (all streams of the first sample, then the
second, ...).  Missing values are NaN and are marginalised out by deleting
their rows and columns.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class GpHyper:
    """GP hyper-parameters of one latent state."""

    mean: np.ndarray
    amplitude: float
    length_scale: float
    task_cov: np.ndarray
    jitter: float | None = None

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        task_cov = np.atleast_2d(np.asarray(self.task_cov, dtype=float))
        q = mean.shape[0]
        if task_cov.shape != (q, q):
            raise ValueError(f"task_cov must be {q}x{q}, got {task_cov.shape}")
        if not np.allclose(task_cov, task_cov.T, atol=1e-10, rtol=0.0):
            raise ValueError("task_cov must be symmetric")
        if np.linalg.eigvalsh(task_cov).min() < -1e-8:
            raise ValueError("task_cov must be positive semidefinite")
        if not (self.amplitude > 0 and self.length_scale > 0):
            raise ValueError("amplitude and length_scale must be positive")
        jitter = 1e-6 * self.amplitude**2 if self.jitter is None else float(self.jitter)
        if jitter < 0:
            raise ValueError("jitter must be nonnegative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "task_cov", task_cov)
        object.__setattr__(self, "amplitude", float(self.amplitude))
        object.__setattr__(self, "length_scale", float(self.length_scale))
        object.__setattr__(self, "jitter", jitter)

    @property
    def n_streams(self) -> int:
        return self.mean.shape[0]

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "sigma": self.amplitude,
            "length_scale": self.length_scale,
            "task_cov": self.task_cov.tolist(),
            "jitter": self.jitter,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GpHyper":
        allowed = {"mean", "sigma", "length_scale", "task_cov", "jitter"}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown emission keys: {sorted(unknown)}")
        return cls(
            mean=d["mean"],
            amplitude=d["sigma"],
            length_scale=d["length_scale"],
            task_cov=d["task_cov"],
            jitter=d.get("jitter"),
        )


@dataclass(frozen=True)
class Segment:
    """Observations attributed to one state occupancy.

    ``values`` has shape ``(Q, len(times))``; NaN marks a missing entry.
    """

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values.reshape(1, -1)
        if values.shape[1] != times.shape[0]:
            raise ValueError("values must have one column per timestamp")
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise ValueError("segment times must be strictly increasing")
        if times.size and np.all(np.isnan(values)):
            raise ValueError("non-empty segment needs at least one observed value")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.times.shape[0]


@dataclass
class Diagnostics:
    """Counters for numerical fallbacks; shared by callers that care."""

    pinv_fallbacks: int = 0
    eig_fallbacks: int = 0
    messages: list = field(default_factory=list)


DIAGNOSTICS = Diagnostics()


def temporal_kernel(hyper: GpHyper, t1, t2) -> np.ndarray:
    d = np.subtract.outer(np.asarray(t1, float), np.asarray(t2, float))
    return hyper.amplitude**2 * np.exp(-0.5 * (d / hyper.length_scale) ** 2)


def build_covariance(hyper: GpHyper, times) -> np.ndarray:
    """Dense ``(Q*n, Q*n)`` covariance of a segment at ``times`` (time-major)."""
    times = np.asarray(times, dtype=float).reshape(-1)
    if times.size == 0:
        raise ValueError("build_covariance needs at least one timestamp")
    k = temporal_kernel(hyper, times, times)
    cov = np.kron(k, hyper.task_cov)
    cov[np.diag_indices_from(cov)] += hyper.jitter
    return 0.5 * (cov + cov.T)


def _flatten(values: np.ndarray):
    """Time-major flattening; returns (vector, observed mask, owner sample index)."""
    flat = values.T.reshape(-1)
    owner = np.repeat(np.arange(values.shape[1]), values.shape[0])
    mask = ~np.isnan(flat)
    return flat, mask, owner


def _pinv_logpdf(resid: np.ndarray, cov: np.ndarray) -> float:
    # Density restricted to the numerically supported subspace.
    w, v = np.linalg.eigh(cov)
    keep = w > 1e-10 * max(w.max(), 0.0)
    if not np.any(keep):
        return -np.inf
    z = v[:, keep].T @ resid
    w = w[keep]
    return float(-0.5 * (np.sum(z * z / w) + np.sum(np.log(w)) + keep.sum() * LOG_2PI))


def segment_log_density(hyper: GpHyper, seg: Segment) -> float:
    """Log density of the observed entries of ``seg`` under ``hyper``.

    An empty segment carries no evidence and has log density 0.
    """
    if len(seg) == 0:
        return 0.0
    flat, mask, _ = _flatten(seg.values)
    if not mask.any():
        return 0.0
    cov = build_covariance(hyper, seg.times)[np.ix_(mask, mask)]
    resid = flat[mask] - np.tile(hyper.mean, len(seg))[mask]
    try:
        chol = linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError:
        DIAGNOSTICS.pinv_fallbacks += 1
        return _pinv_logpdf(resid, cov)
    z = linalg.solve_triangular(chol, resid, lower=True)
    return float(-0.5 * (z @ z) - np.log(np.diag(chol)).sum() - 0.5 * mask.sum() * LOG_2PI)


def prefix_log_densities(hyper: GpHyper, times, values, reverse: bool = False) -> np.ndarray:
    """Log densities of every prefix (or suffix) of a run of samples.

    Returns ``out`` of length ``n`` where ``out[b]`` is the log density of
    samples ``0..b`` (``reverse=False``) or samples ``n-1-b..n-1``
    (``reverse=True``).  One Cholesky factorisation serves all prefixes
    because the density of a leading block only involves the leading block
    of the triangular factor.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    n = times.shape[0]
    if n == 0:
        return np.zeros(0)
    if reverse:
        times = times[::-1]
        values = values[:, ::-1]
    flat, mask, owner = _flatten(values)
    out = np.zeros(n)
    if not mask.any():
        return out
    cov = build_covariance(hyper, times)[np.ix_(mask, mask)]
    resid = flat[mask] - np.tile(hyper.mean, n)[mask]
    owner = owner[mask]
    try:
        chol = linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError:
        DIAGNOSTICS.pinv_fallbacks += 1
        for b in range(n):
            sel = owner <= b
            out[b] = _pinv_logpdf(resid[sel], cov[np.ix_(sel, sel)]) if sel.any() else 0.0
        return out
    z = linalg.solve_triangular(chol, resid, lower=True)
    terms = -0.5 * z * z - np.log(np.diag(chol)) - 0.5 * LOG_2PI
    cum = np.cumsum(terms)
    # last observed row belonging to each sample (or earlier)
    last_row = np.searchsorted(owner, np.arange(n), side="right") - 1
    out = np.where(last_row >= 0, cum[np.maximum(last_row, 0)], 0.0)
    return out


def block_log_densities(hyper: GpHyper, times, values, max_batch: float = 2e7) -> np.ndarray:
    """``out[a, b]`` = log density of samples ``a .. b-1`` (``out[a, a] = 0``).

    Every suffix is factorised in one batched Cholesky call: rows before the
    suffix, and missing entries, are replaced by unit diagonal entries with
    zero residual and their terms dropped.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    n = times.shape[0]
    q = hyper.n_streams
    out = np.zeros((n + 1, n + 1))
    if n == 0:
        return out
    size = n * q
    if n * size * size > max_batch:
        for a in range(n):
            out[a, a + 1 :] = prefix_log_densities(hyper, times[a:], values[:, a:])
        return out
    flat, mask, owner = _flatten(values)
    resid = np.where(mask, flat - np.tile(hyper.mean, n), 0.0)
    cov = build_covariance(hyper, times)
    act = (owner[None, :] >= np.arange(n)[:, None]) & mask[None, :]
    both = act[:, :, None] & act[:, None, :]
    eye = np.eye(size)
    batch = np.where(both, cov[None], eye[None])
    try:
        chol = np.linalg.cholesky(batch)
    except np.linalg.LinAlgError:
        for a in range(n):
            out[a, a + 1 :] = prefix_log_densities(hyper, times[a:], values[:, a:])
        return out
    r = np.where(act, resid[None, :], 0.0)
    z = np.linalg.solve(chol, r[..., None])[..., 0]
    terms = -0.5 * z * z - np.log(np.diagonal(chol, axis1=1, axis2=2)) - 0.5 * LOG_2PI
    cum = np.cumsum(np.where(act, terms, 0.0), axis=1)
    ends = cum[:, q - 1 :: q]  # density up to the end of each sample
    upper = np.triu(np.ones((n, n), bool))
    out[:n, 1:] = np.where(upper, ends, 0.0)
    return out


def sample_segment(hyper: GpHyper, times, rng: np.random.Generator) -> Segment:
    """Draw one GP segment at ``times``."""
    times = np.asarray(times, dtype=float).reshape(-1)
    q = hyper.n_streams
    if times.size == 0:
        return Segment(times, np.zeros((q, 0)))
    cov = build_covariance(hyper, times)
    z = rng.standard_normal(cov.shape[0])
    try:
        chol = linalg.cholesky(cov, lower=True)
        draw = chol @ z
    except linalg.LinAlgError:
        w, v = np.linalg.eigh(cov)
        DIAGNOSTICS.eig_fallbacks += 1
        log.debug("covariance not PD, sampling with clamped eigenvalues (min %.3g)", w.min())
        draw = v @ (np.sqrt(np.clip(w, 0.0, None)) * z)
    draw = draw + np.tile(hyper.mean, times.size)
    return Segment(times, draw.reshape(times.size, q).T)
