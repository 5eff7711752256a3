"""Built-in oracle checks behind ``hasmm selftest``."""

from __future__ import annotations

import sys
import time

import numpy as np
from scipy import stats

from .eval import oracle_ctmc, oracle_enumerate_steps, total_variation
from .filter import forward_messages, state_posterior
from .generate import Episode
from .learn.sampling import tr_sampler
from .model import reference_instance, sojourn_cdf
from .volterra import Grid, build_table, default_grid


def check_ctmc(quick=True):
    p = reference_instance(5, 1, kind="ctmc")
    dt = 0.5
    A = 200  # tau up to 100 hours
    table = build_table(p, Grid(dt, dt, dt, A, 1, 1), eps=1e-10)
    taus = np.arange(A + 1) * dt
    err = np.abs(table.p[:, :, :, 0, 0].transpose(2, 0, 1) - oracle_ctmc(p, taus)).max()
    return err <= 5e-3, f"max |p - exp(L tau)| = {err:.2e} (limit 5e-3)"


def check_enumeration(quick=True):
    p = reference_instance(kind="toy")
    ep = Episode("toy", [0.6, 1.3, 2.1, 2.9], [[-0.4, 0.3, 0.9, 1.8]], 5.0, 3)
    table = build_table(p, default_grid(p, dt=0.1 if not quick else 0.2))
    msgs = forward_messages(p, table, ep, t_max_quantile=None)
    ref = oracle_enumerate_steps(p, ep, grid_step=0.05 if not quick else 0.1)
    tv = max(total_variation(state_posterior(msgs, m + 1), r) for m, r in enumerate(ref))
    limit = 0.02 if not quick else 0.04
    return tv <= limit, f"max posterior TV vs enumeration = {tv:.4f} (limit {limit})"


def check_sampler(quick=True):
    p = reference_instance(3).replace(shape=[2.0, 2.0, 2.0], rate=[1.0, 1.0, 1.0])
    rng = np.random.default_rng(0)
    n = 10_000 if quick else 100_000
    draws = np.array([tr_sampler(p, 1, 1.0, rng) for _ in range(n)])
    v1 = sojourn_cdf(p, 1, 1.0)
    ks = stats.kstest(draws, lambda s: sojourn_cdf(p, 1, np.clip(s, 0, 1)) / v1).statistic
    limit = 0.01 if not quick else 0.02
    return ks <= limit, f"truncated Gamma KS = {ks:.4f} over {n} draws (limit {limit})"


CHECKS = (("ctmc", check_ctmc), ("enumeration", check_enumeration), ("sampler", check_sampler))


def run_selftest(quick: bool = True, stream=sys.stdout) -> bool:
    ok_all = True
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            ok, msg = fn(quick)
        except Exception as exc:  # noqa: BLE001 - reported as a failed check
            ok, msg = False, f"{type(exc).__name__}: {exc}"
        ok_all &= bool(ok)
        stream.write(f"{'PASS' if ok else 'FAIL'} {name}: {msg} [{time.perf_counter() - t0:.1f}s]\n")
    return ok_all
