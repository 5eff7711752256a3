"""Acceptance criteria 1-11 at their stated tolerances.

Each test records a PASS/FAIL line that is printed in the terminal summary
(see conftest.py).  The learning criteria take several minutes each.
"""

import json
import time

import numpy as np
import pytest
from scipy import stats

from conftest import ACCEPTANCE
from hasmm.cli import main as cli_main
from hasmm.emission import GpHyper
from hasmm.eval import (
    ScoredEpisode,
    oracle_ctmc,
    oracle_enumerate_steps,
    operating_point,
    roc_curve,
    total_variation,
)
from hasmm.filter import forward_messages, state_posterior, stream_filter
from hasmm.generate import Episode, generate_dataset, sample_trajectory
from hasmm.learn import EmConfig, bic_select, ffbs_mcem
from hasmm.learn.forward import GridMessages
from hasmm.learn.sampling import backward_sampling, bar_sampler, tr_sampler
from hasmm.model import reference_instance, sojourn_cdf
from hasmm.volterra import Grid, build_table, default_grid, fixed_point_residual, query

pytestmark = pytest.mark.acceptance


def record(key, ok, detail):
    ACCEPTANCE[key] = (bool(ok), detail)
    print(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# -- tables -------------------------------------------------------------------------

def test_01_ctmc_oracle():
    p = reference_instance(3, 1, kind="ctmc")
    t0 = time.perf_counter()
    table = build_table(p, Grid(0.5, 0.5, 0.5, 200, 1, 1), eps=1e-10)
    wall = time.perf_counter() - t0
    taus = np.arange(201) * 0.5
    err = np.abs(table.p[:, :, :, 0, 0].transpose(2, 0, 1) - oracle_ctmc(p, taus)).max()
    record(1, err <= 5e-3 and wall <= 60, f"max error {err:.2e} (<= 5e-3), build {wall:.1f}s (<= 60s)")


def test_02_monte_carlo_oracle(ref3, ref3_table):
    rng = np.random.default_rng(2)
    n = 100_000
    taus = (5.0, 20.0, 50.0)
    worst = 0.0
    t0 = time.perf_counter()
    for i in (1,):
        states = np.empty((n, len(taus)), int)
        for k in range(n):
            tr = sample_trajectory(ref3, rng, start=i)
            states[k] = [tr.state_at(t) for t in taus]
        for c, tau in enumerate(taus):
            freq = np.bincount(states[:, c], minlength=3) / n
            worst = max(worst, np.abs(query(ref3_table, tau, 0.0, 0.0)[0][i] - freq).max())
    wall = time.perf_counter() - t0
    record(2, worst <= 0.02 and wall <= 300,
           f"max |p - freq| = {worst:.4f} over tau in {taus} (<= 0.02), {wall:.0f}s")


def test_03_table_invariants(ref3, ref3_table):
    p = ref3_table.p
    rows = np.abs(p.sum(axis=1) - 1).max()
    ident = np.abs(p[:, :, 0] - np.eye(3)[:, :, None, None]).max()
    absorbing = max(np.abs(p[0, 0] - 1).max(), np.abs(p[2, 2] - 1).max())
    eps = ref3_table.diagnostics["eps"]
    resid = np.max(fixed_point_residual(ref3_table, ref3))
    ok = rows <= 1e-6 and ident <= 1e-12 and absorbing <= 1e-12 and resid <= 2 * eps
    record(3, ok, f"row sums {rows:.1e}, identity {ident:.1e}, absorbing {absorbing:.1e}, "
                  f"residual {resid:.1e} (<= {2 * eps:.0e})")


# -- filter -------------------------------------------------------------------------

def _toy_episodes(toy):
    eps = [Episode("fixed", [0.6, 1.3, 2.1, 2.9], [[-0.4, 0.3, 0.9, 1.8]], 5.0, 3)]
    for ep in generate_dataset(toy, 12, 44):
        if ep.n_obs >= 2 and ep.times[min(ep.n_obs, 4) - 1] < 6.0:
            eps.append(ep.prefix(min(ep.n_obs, 4)))
        if len(eps) == 4:
            break
    return eps


def test_04_filter_vs_enumeration(toy):
    t0 = time.perf_counter()
    # a 0.1 h lag step leaves a worst TV of about 0.023; halving it gives 0.011
    table = build_table(toy, default_grid(toy, dt=0.05))
    worst = 0.0
    episodes = _toy_episodes(toy)
    for ep in episodes:
        msgs = forward_messages(toy, table, ep, t_max_quantile=None)
        for m, ref in enumerate(oracle_enumerate_steps(toy, ep, grid_step=0.05), 1):
            worst = max(worst, total_variation(state_posterior(msgs, m), ref))
    wall = time.perf_counter() - t0
    record(4, worst <= 0.02 and wall <= 120,
           f"max TV {worst:.4f} over {len(episodes)} episodes (<= 0.02), {wall:.0f}s incl. table build")


def test_05_filter_complexity(toy, toy_table):
    rng = np.random.default_rng(5)
    ms = np.array([50, 100, 200, 400])
    walls = []
    for m in ms:
        times = np.cumsum(rng.exponential(0.05, m))
        ep = Episode("c", times, rng.normal(size=(1, m)), times[-1] + 1.0, 3)
        best = np.inf
        for _ in range(3):
            t0 = time.perf_counter()
            for _ in stream_filter(toy, toy_table, ep):
                pass
            best = min(best, time.perf_counter() - t0)
        walls.append(best)
    slope = np.polyfit(np.log(ms), np.log(walls), 1)[0]
    record(5, slope <= 2.3, f"wall-time exponent {slope:.2f} (<= 2.3), times {np.round(walls, 3).tolist()}")


# -- samplers -----------------------------------------------------------------------

def _bar_target(params, msg, next_state, edges):
    kt = params.kernel(0.001)
    out = np.zeros((params.n_states, len(edges) - 1))
    for u in range(params.n_states):
        if msg[u] > 0:
            out[u] = msg[u] * np.diff(kt.cdf_kernel(u, edges)[:, next_state])
    return out / out.sum()


def _zero_obs_oracle(p, t_c, label, rng, need=10_000, half=0.05):
    """Forward rejection: prior trajectories whose absorption label matches
    and whose total length is within ``half`` of ``t_c``; returns the first
    sojourns of the accepted ones."""
    got = []
    while sum(len(g) for g in got) < need:
        n = 2_000_000
        s1 = rng.gamma(p.shape[1], 1 / p.rate[1], n)
        from hasmm.model import transition_row

        to_label = rng.uniform(size=n) < transition_row(p, 1, s1)[:, label]
        s2 = rng.gamma(p.shape[label], 1 / p.rate[label], n)
        keep = to_label & (np.abs(s1 + s2 - t_c) < half)
        got.append(s1[keep])
    return np.concatenate(got)


def test_06_samplers(ref3, toy):
    rng = np.random.default_rng(6)
    # truncated Gamma
    p = ref3.replace(shape=[2.0, 2.0, 2.0], rate=[1.0, 1.0, 1.0])
    n = 100_000
    draws = np.array([tr_sampler(p, 1, 1.0, rng) for _ in range(n)])
    v1 = sojourn_cdf(p, 1, 1.0)
    ks = stats.kstest(draws, lambda s: sojourn_cdf(p, 1, np.clip(s, 0, 1)) / v1).statistic

    # joint (state, duration) histogram
    msg = np.array([0.0, 0.7, 0.3, 0.0])
    edges = np.linspace(0, 3.0, 13)
    target = _bar_target(toy, msg, 3, edges)
    counts = np.zeros_like(target)
    for _ in range(n):
        u, w = bar_sampler(msg, toy, 3, 3.0, rng)
        counts[u, min(np.searchsorted(edges, w, side="right") - 1, 11)] += 1
    tv_bar = total_variation(counts.ravel() / n, target.ravel())

    # backward sampling without observations vs forward rejection
    t_c = 12.0
    ep = Episode("z", [], np.zeros((2, 0)), t_c, 2)
    oracle = _zero_obs_oracle(ref3, t_c, 2, rng)
    trajs = backward_sampling(GridMessages(ref3, ep, 0.5), rng, count=10_000)
    assert all(list(tr.states) == [1, 2] for tr in trajs)
    first = np.array([tr.sojourns[0] for tr in trajs])
    bins = np.linspace(0, t_c, 13)
    h_b = np.histogram(first, bins)[0] / first.size
    h_o = np.histogram(oracle, bins)[0] / oracle.size
    tv_back = total_variation(h_b, h_o)

    ok = ks <= 0.01 and tv_bar <= 0.02 and tv_back <= 0.05 and oracle.size >= 10_000
    record(6, ok, f"tr_sampler KS {ks:.4f} (<= 0.01); bar_sampler TV {tv_bar:.4f} (<= 0.02); "
                  f"backward TV {tv_back:.4f} (<= 0.05, {oracle.size} oracle samples)")


# -- learning -----------------------------------------------------------------------

def test_07_mcem_ascent(ref3):
    violations, improved, lines = 0, 0, []
    for s in range(5):
        eps = generate_dataset(ref3, 200, 100 + s)
        res = ffbs_mcem(eps, 3, EmConfig(G=50, max_iter=30, seed=s, eps=0.0))
        bad = [it.iteration for it in res.trace[1:] if it.q_hat < it.q_hat_prev - 1e-6 * abs(it.q_hat_prev)]
        violations += len(bad)
        improved += res.final_loglik > res.initial_loglik
        lines.append(f"{res.initial_loglik:.0f}->{res.final_loglik:.0f}")
    record(7, violations == 0 and improved >= 4,
           f"Q decreases: {violations}; loglik improved in {improved}/5 seeds ({', '.join(lines)})")


def _separated_instance():
    # the reference instance with means moved away from zero so relative
    # errors are defined; consecutive states stay >= 3 sd apart
    p = reference_instance(3)
    em = [GpHyper(e.mean + np.array([5.0, 3.0]), e.amplitude, e.length_scale, e.task_cov, e.jitter)
          for e in p.emission]
    return p.replace(emission=em)


@pytest.fixture(scope="module")
def recovered():
    truth = _separated_instance()
    eps = generate_dataset(truth, 500, 1)
    res = ffbs_mcem(eps, 3, EmConfig(G=10, max_iter=30, seed=1, ess_refresh=True))
    return truth, res.params


def test_08_recovery(recovered):
    truth, fit = recovered
    e0 = truth.emission[0]
    cov = e0.amplitude**2 * e0.task_cov + e0.jitter * np.eye(2)
    gaps = [np.sqrt(d @ np.linalg.solve(cov, d))
            for d in (truth.emission[1].mean - truth.emission[0].mean, truth.emission[2].mean - truth.emission[1].mean)]
    soj_err = np.abs(fit.mean_sojourn / truth.mean_sojourn - 1).max()
    mean_err = max(np.abs(f.mean / t.mean - 1).max() for f, t in zip(fit.emission, truth.emission))
    nonzero = truth.beta != 0
    off = ~np.eye(3, dtype=bool) & ~nonzero
    off[[0, 2]] = False  # absorbing rows carry no slopes
    beta_zero = np.abs(fit.beta[off]).max()
    beta_sign = np.all(np.sign(fit.beta[nonzero]) == np.sign(truth.beta[nonzero])) and np.all(np.abs(fit.beta[nonzero]) >= 0.05)
    ok = min(gaps) >= 3 and soj_err <= 0.2 and mean_err <= 0.1 and beta_zero < 0.05 and beta_sign
    record(8, ok, f"separation {min(gaps):.1f} sd; sojourn means err {soj_err:.1%} (<= 20%); "
                  f"GP means err {mean_err:.1%} (<= 10%); max |beta| at zeros {beta_zero:.3f} (< 0.05); "
                  f"nonzero beta {np.round(fit.beta[nonzero], 3).tolist()}")


def test_09_end_to_end_detection(recovered):
    truth, fit = recovered
    held = generate_dataset(truth, 300, 9_009)
    table = build_table(fit)
    scored = [ScoredEpisode.from_snapshots(ep, list(stream_filter(fit, table, ep))) for ep in held]
    curve = roc_curve(scored)
    prevalence = float(np.mean([ep.label != 0 for ep in held]))
    op = operating_point(scored, curve, 0.5)
    tl = op[3] if op else None
    ok = curve.auc >= prevalence + 0.2 and tl is not None and tl < 0
    record(9, ok, f"AUC {curve.auc:.3f} vs prevalence {prevalence:.3f} (+0.2 needed); "
                  f"timeliness at TPR 0.5: {tl if tl is None else round(tl, 2)} h (< 0)")


def test_10_bic_selection(ref3):
    picks = []
    for s in range(5):
        eps = generate_dataset(ref3, 300, 200 + s)
        n, _, _ = bic_select(eps, [3, 4, 5], EmConfig(G=20, max_iter=20, seed=s))
        picks.append(n)
    hits = sum(n == 3 for n in picks)
    record(10, hits >= 4, f"selected {picks}; N=3 in {hits}/5 seeds (>= 4)")


# -- determinism --------------------------------------------------------------------

def test_11_determinism(tmp_path):
    params = tmp_path / "p.json"
    params.write_text(reference_instance(3).to_json())
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"G": 4, "max_iter": 3}))
    runs = []
    for k in range(2):
        d = tmp_path / f"run{k}"
        d.mkdir()
        assert cli_main(["generate", "--params", str(params), "--count", "20", "--out", str(d / "eps.jsonl"),
                         "--seed", "11", "--deterministic"]) == 0
        assert cli_main(["learn", "--episodes", str(d / "eps.jsonl"), "--config", str(cfg), "--out",
                         str(d / "fit.json"), "--trace", str(d / "trace.csv"), "--seed", "11",
                         "--deterministic"]) == 0
        assert cli_main(["score", "--params", str(params), "--episodes", str(d / "eps.jsonl"),
                         "--out", str(d / "scores.jsonl"), "--deterministic"]) == 0
        names = ["eps.jsonl", "fit.json", "fit.json.provenance.json", "trace.csv", "scores.jsonl"]
        runs.append({n: (d / n).read_bytes() for n in names})
    same = [n for n in runs[0] if runs[0][n] == runs[1][n]]
    record(11, len(same) == len(runs[0]), f"byte-identical: {same}")
