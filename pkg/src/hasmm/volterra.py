"""Interval transition probabilities by successive approximation.

The table holds p[i, j, a, b, c], the probability of being in ``j`` after
``a * dt_tau`` hours given the chain is in ``i`` now and has been there for
somewhere between ``b * dt_lo`` and ``c * dt_hi`` hours.  It is the fixed
point of the renewal equation

    p(tau; lo, hi) = diag(stay_i(tau; lo, hi))
                     + sum_k int_0^tau dQbar_ik(u; lo, hi) p_kj(tau - u; 0, 0)

The (0, 0) slice only depends on itself and is solved first by iterating
the operator with FFT convolutions; every other slice is then a single
application of the operator to the converged (0, 0) slice.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .model import (
    ParameterSet,
    sojourn_quantile,
    truncated_kernel_grid,
    embedded_limit,
)

log = logging.getLogger(__name__)

MAGIC = b"HASMMTBL"
VERSION = 1
_HEADER = struct.Struct("<8sIIIII3d64sI")


class TableError(Exception):
    """Corrupt or unreadable table file."""


class FingerprintMismatch(TableError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, msg, residuals):
        super().__init__(msg)
        self.residuals = list(residuals)


class PlateauError(RuntimeError):
    pass


@dataclass(frozen=True)
class Grid:
    dt_tau: float = 1.0
    dt_lo: float = 1.0
    dt_hi: float = 1.0
    A: int = 200
    B: int = 20
    C: int = 20

    def __post_init__(self):
        if min(self.dt_tau, self.dt_lo, self.dt_hi) <= 0:
            raise ValueError("grid steps must be positive")
        if self.A < 1 or self.B < 0 or self.C < 0:
            raise ValueError("grid counts must be A >= 1, B >= 0, C >= 0")


def default_grid(params: ParameterSet, dt: float = 1.0, elapsed_quantile: float = 0.99,
                 horizon_factor: float = 8.0) -> Grid:
    """Grid with the elapsed axes covering the ``elapsed_quantile`` sojourn
    quantile and a horizon of several mean absorption times."""
    tr = params.transient
    smax = max(sojourn_quantile(params, int(i), elapsed_quantile) for i in tr)
    bc = int(np.ceil(smax / dt))
    P = embedded_limit(params)
    mu = params.mean_sojourn[tr]
    t_abs = np.linalg.solve(np.eye(len(tr)) - P[np.ix_(tr, tr)], mu)
    sd = np.sqrt((params.shape / params.rate**2)[tr]).max()
    horizon = horizon_factor * t_abs.max() + 6 * sd
    A = int(np.ceil(horizon / dt)) + 10
    return Grid(dt, dt, dt, A, bc, bc)


@dataclass
class TransitionTable:
    p: np.ndarray  # (N, N, A+1, B+1, C+1)
    stay: np.ndarray  # (N, A+1, B+1, C+1)
    grid: Grid
    fingerprint: str
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_states(self) -> int:
        return self.p.shape[0]

    # -- lookup ------------------------------------------------------------
    def indices(self, tau, lo, hi):
        """Nearest grid indices with ties toward the smaller index."""
        g = self.grid
        tau, lo, hi = (np.asarray(x, dtype=float) for x in (tau, lo, hi))
        a = np.ceil(tau / g.dt_tau - 0.5).astype(np.int64)
        b = np.ceil(lo / g.dt_lo - 0.5).astype(np.int64)
        c = np.ceil(hi / g.dt_hi - 0.5).astype(np.int64)
        sat = (a > g.A) | (b > g.B) | (c > g.C)
        a = np.clip(a, 0, g.A)
        b = np.clip(b, 0, g.B)
        c = np.clip(c, 0, g.C)
        return a, b, c, sat

    def lookup(self, i, tau, lo, hi):
        """Vectorised rows p[i, :, a, b, c] and stay[i, a, b, c]."""
        a, b, c, sat = self.indices(tau, lo, hi)
        i = np.asarray(i)
        rows = self.p[i, :, a, b, c]
        return rows, self.stay[i, a, b, c], sat

    def absorption(self) -> np.ndarray:
        """(N, N) matrix of p[:, :, A, 0, 0]; raises when the plateau check failed."""
        if not self.diagnostics.get("plateau_ok", False):
            raise PlateauError(
                f"absorbing mass has not plateaued (change {self.diagnostics.get('plateau_change'):.3g}); "
                "rebuild with a larger A"
            )
        return self.p[:, :, -1, 0, 0]


def query(table: TransitionTable, tau: float, s_lo: float, s_hi: float):
    """Row of interval transition probabilities for every start state.

    Returns ``(rows, saturated)`` where ``rows`` is ``(N, N)``.
    """
    if min(tau, s_lo, s_hi) < 0:
        raise ValueError("query arguments must be nonnegative")
    a, b, c, sat = table.indices(tau, s_lo, s_hi)
    return table.p[:, :, int(a), int(b), int(c)].copy(), bool(sat)


def absorption_row(table: TransitionTable, i: int):
    """(p_i,safe, p_i,catastrophic) at the horizon with zero elapsed time."""
    m = table.absorption()
    return float(m[i, 0]), float(m[i, -1])


# -- construction -------------------------------------------------------------

def _kernel_tensors(params: ParameterSet, grid: Grid, kernel_step: float):
    n = params.n_states
    g = grid
    tau = np.arange(g.A + 2) * g.dt_tau
    lo = np.arange(g.B + 1) * g.dt_lo
    hi = np.arange(g.C + 1) * g.dt_hi
    qbar = np.zeros((n, n, g.A + 2, g.B + 1, g.C + 1))
    stay = np.ones((n, g.A + 1, g.B + 1, g.C + 1))
    for i in params.transient:
        q, st = truncated_kernel_grid(params, int(i), tau, lo, hi, kernel_step)
        qbar[i] = np.moveaxis(q, -1, 0)
        stay[i] = st[:-1]
    return qbar, stay


def _next_pow2(n: int) -> int:
    return 1 << int(np.ceil(np.log2(max(n, 1))))


class _Operator:
    """Discrete renewal operator acting on the (0, 0) slice.

    The Stieltjes integral uses the trapezoid average of the two endpoint
    values of each cell: sum_x dQ[x] * (p[a - x] + p[a - x + 1]) / 2.
    """

    def __init__(self, A: int):
        self.A = A
        self.L = _next_pow2(2 * (A + 2))

    def spectrum(self, dq):
        return np.fft.rfft(dq, n=self.L, axis=-1)

    def apply(self, dq, dq_hat, p00_hat, p00):
        # conv[..., i, j, m] = sum_k sum_x dq[..., i, k, x] p00[k, j, m - x]
        conv = np.fft.irfft(np.einsum("...ikf,kjf->...ijf", dq_hat, p00_hat), n=self.L, axis=-1)
        A = self.A
        term1 = conv[..., : A + 1]
        term2 = conv[..., 1 : A + 2] - np.einsum("...ikx,kj->...ijx", dq[..., 1 : A + 2], p00[:, :, 0])
        return 0.5 * (term1 + term2)


def _project00(p):
    # p: (N, N, A+1); rows are over axis 1
    np.clip(p, 0.0, 1.0, out=p)
    s = p.sum(axis=1, keepdims=True)
    return p / np.where(s > 0, s, 1.0)


def build_table(params: ParameterSet, grid: Grid | None = None, eps: float = 1e-8,
                max_iter: int = 200, kernel_step: float = 0.1, chunk: int = 64) -> TransitionTable:
    grid = grid or default_grid(params)
    n = params.n_states
    A = grid.A
    qbar, stay = _kernel_tensors(params, grid, kernel_step)
    dq = np.zeros_like(qbar)
    dq[:, :, 1:] = np.diff(qbar, axis=2)
    eye = np.eye(n)

    op = _Operator(A)
    dq00 = dq[:, :, :, 0, 0]
    dq00_hat = op.spectrum(dq00)
    diag00 = eye[:, :, None] * stay[:, None, :, 0, 0]
    # start inside the admissible set: one jump at most
    p = qbar[:, :, : A + 1, 0, 0] * (1 - eye[:, :, None]) + diag00
    p = _project00(p)
    residuals = []
    for it in range(max_iter):
        new = diag00 + op.apply(dq00, dq00_hat, np.fft.rfft(p, n=op.L, axis=-1), p)
        new = _project00(new)
        r = float(np.max(np.abs(new - p)))
        residuals.append(r)
        p = new
        if r <= eps:
            break
    else:
        raise ConvergenceError(
            f"successive approximation did not reach eps={eps:g} in {max_iter} iterations "
            f"(last residual {residuals[-1]:.3g})",
            residuals,
        )
    log.debug("(0,0) slice converged in %d iterations", len(residuals))

    # all slices: one operator application against the converged (0, 0) slice
    B1, C1 = grid.B + 1, grid.C + 1
    p00_hat = np.fft.rfft(p, n=op.L, axis=-1)
    dq_s = np.moveaxis(dq.reshape(n, n, A + 2, B1 * C1), -1, 0)  # (S, N, N, A+2)
    stay_s = np.moveaxis(stay.reshape(n, A + 1, B1 * C1), -1, 0)  # (S, N, A+1)
    out = np.empty((B1 * C1, n, n, A + 1))
    for s0 in range(0, B1 * C1, chunk):
        blk = dq_s[s0 : s0 + chunk]
        val = op.apply(blk, op.spectrum(blk), p00_hat, p)
        val += eye[None, :, :, None] * stay_s[s0 : s0 + chunk, :, None, :]
        np.clip(val, 0.0, 1.0, out=val)
        val /= val.sum(axis=2, keepdims=True)
        out[s0 : s0 + chunk] = val
    table_p = np.moveaxis(out, 0, -1).reshape(n, n, A + 1, B1, C1)
    table_p = np.ascontiguousarray(table_p)

    # fixed-point residual of the final (0, 0) slice
    fin = table_p[:, :, :, 0, 0]
    again = _project00(diag00 + op.apply(dq00, dq00_hat, np.fft.rfft(fin, n=op.L, axis=-1), fin))
    final_residual = float(np.max(np.abs(again - fin)))
    k = min(10, A)
    plateau = float(np.max(np.abs(fin[:, :, A] - fin[:, :, A - k])))
    diag = {
        "iterations": len(residuals),
        "residuals": residuals,
        "final_residual": final_residual,
        "eps": eps,
        "plateau_change": plateau,
        "plateau_ok": plateau <= 1e-3,
        "kernel_step": kernel_step,
    }
    if not diag["plateau_ok"]:
        log.warning("absorption plateau check failed (change %.3g); increase A", plateau)
    return TransitionTable(table_p, np.ascontiguousarray(stay), grid, params.fingerprint(), diag)


def fixed_point_residual(table: TransitionTable, params: ParameterSet, kernel_step: float | None = None) -> np.ndarray:
    """|B(p) - p| over the whole tensor, with B the renewal operator built
    from ``params`` and applied to the table's own (0, 0) slice."""
    grid = table.grid
    n = params.n_states
    ks = kernel_step or table.diagnostics.get("kernel_step", 0.1)
    qbar, stay = _kernel_tensors(params, grid, ks)
    dq = np.zeros_like(qbar)
    dq[:, :, 1:] = np.diff(qbar, axis=2)
    op = _Operator(grid.A)
    p00 = table.p[:, :, :, 0, 0]
    p00_hat = np.fft.rfft(p00, n=op.L, axis=-1)
    res = np.zeros(table.p.shape)
    eye = np.eye(n)
    for b in range(grid.B + 1):
        blk = np.moveaxis(dq[:, :, :, b, :], -1, 0)
        val = op.apply(blk, op.spectrum(blk), p00_hat, p00)
        val += eye[None, :, :, None] * np.moveaxis(stay[:, None, :, b, :], -1, 0)
        res[:, :, :, b, :] = np.abs(np.moveaxis(val, 0, -1) - table.p[:, :, :, b, :])
    return res


# -- persistence --------------------------------------------------------------

def save_table(table: TransitionTable, path) -> None:
    g = table.grid
    n = table.n_states
    diag = {k: v for k, v in table.diagnostics.items()}
    diag_blob = json.dumps(diag, sort_keys=True).encode()
    header = _HEADER.pack(
        MAGIC, VERSION, n, g.A, g.B, g.C, g.dt_tau, g.dt_lo, g.dt_hi,
        table.fingerprint.encode("ascii"), len(diag_blob),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(diag_blob)
        fh.write(np.ascontiguousarray(table.p, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(table.stay, dtype="<f8").tobytes())


def load_table(path, params: ParameterSet | None = None) -> TransitionTable:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise TableError(f"cannot read table {path}: {exc}") from exc
    if len(blob) < _HEADER.size:
        raise TableError("table file truncated inside the header")
    magic, version, n, A, B, C, dta, dtb, dtc, fp, dlen = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise TableError("not a transition table (bad magic)")
    if version != VERSION:
        raise TableError(f"unsupported table version {version}")
    off = _HEADER.size
    try:
        diag = json.loads(blob[off : off + dlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TableError("corrupt diagnostics block") from exc
    off += dlen
    n_p = n * n * (A + 1) * (B + 1) * (C + 1)
    n_s = n * (A + 1) * (B + 1) * (C + 1)
    need = off + 8 * (n_p + n_s)
    if len(blob) != need:
        raise TableError(f"table payload has {len(blob) - off} bytes, expected {need - off}")
    p = np.frombuffer(blob, dtype="<f8", count=n_p, offset=off).reshape(n, n, A + 1, B + 1, C + 1)
    stay = np.frombuffer(blob, dtype="<f8", count=n_s, offset=off + 8 * n_p).reshape(n, A + 1, B + 1, C + 1)
    fingerprint = fp.decode("ascii")
    if params is not None and params.fingerprint() != fingerprint:
        raise FingerprintMismatch("table was built from a different parameter set")
    try:
        grid = Grid(dta, dtb, dtc, A, B, C)
    except ValueError as exc:
        raise TableError(f"corrupt grid metadata: {exc}") from exc
    return TransitionTable(p.astype(float), stay.astype(float), grid, fingerprint, diag)
