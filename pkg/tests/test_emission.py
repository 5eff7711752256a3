import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hasmm.emission import (
    GpHyper,
    Segment,
    block_log_densities,
    build_covariance,
    prefix_log_densities,
    sample_segment,
    segment_log_density,
)


def _hyper(q=2, jitter=0.2, ell=2.0):
    task = np.eye(q) * 0.6 + 0.2
    return GpHyper(np.linspace(-1, 1, q), 0.8, ell, task, jitter)


def _dense_logpdf(y, mean, cov):
    inv = np.linalg.inv(cov)
    r = y - mean
    _, logdet = np.linalg.slogdet(cov)
    return -0.5 * (r @ inv @ r + logdet + len(y) * np.log(2 * np.pi))


class TestHyper:
    def test_rejects_asymmetric_task(self):
        with pytest.raises(ValueError):
            GpHyper([0, 0], 1.0, 1.0, [[1, 0.5], [0.2, 1]])

    def test_rejects_indefinite_task(self):
        with pytest.raises(ValueError):
            GpHyper([0, 0], 1.0, 1.0, [[1, 2], [2, 1]])

    def test_rejects_nonpositive_scales(self):
        with pytest.raises(ValueError):
            GpHyper([0], 0.0, 1.0, [[1]])

    def test_default_jitter(self):
        assert GpHyper([0], 2.0, 1.0, [[1]]).jitter == pytest.approx(4e-6)

    def test_dict_round_trip(self):
        h = _hyper()
        back = GpHyper.from_dict(h.to_dict())
        np.testing.assert_array_equal(back.task_cov, h.task_cov)
        assert back.jitter == h.jitter


class TestCovariance:
    def test_single_time_scalar(self):
        h = GpHyper([0.0], 1.5, 1.0, [[1.0]], 0.3)
        assert build_covariance(h, [2.0])[0, 0] == pytest.approx(1.5**2 + 0.3)

    def test_far_apart_times_decouple(self):
        h = _hyper(ell=1.0)
        cov = build_covariance(h, [0.0, 100.0])
        assert np.abs(cov[:2, 2:]).max() < 1e-10

    def test_identity_task_is_block_diagonal(self):
        h = GpHyper([0, 0], 1.0, 2.0, np.eye(2), 0.1)
        cov = build_covariance(h, [0.0, 1.0, 2.5])
        # cross-stream entries vanish
        assert np.abs(cov[0::2, 1::2]).max() == 0.0


class TestDensity:
    def test_standard_normal_at_mean(self):
        h = GpHyper([0.5], np.sqrt(0.5), 1.0, [[1.0]], 0.5)
        seg = Segment([1.0], [[0.5]])
        assert segment_log_density(h, seg) == pytest.approx(-0.5 * np.log(2 * np.pi))

    def test_empty_segment(self):
        assert segment_log_density(_hyper(), Segment([], np.zeros((2, 0)))) == 0.0

    def test_matches_dense_oracle(self, rng):
        h = _hyper()
        t = np.array([0.0, 0.7, 2.0])
        y = rng.normal(size=(2, 3))
        ref = _dense_logpdf(y.T.ravel(), np.tile(h.mean, 3), build_covariance(h, t))
        assert segment_log_density(h, Segment(t, y)) == pytest.approx(ref, abs=1e-8)

    def test_missing_values_marginalised(self, rng):
        h = _hyper()
        t = np.array([0.0, 1.0])
        y = rng.normal(size=(2, 2))
        y[1, 0] = np.nan
        cov = build_covariance(h, t)
        keep = [0, 2, 3]
        ref = _dense_logpdf(y.T.ravel()[keep], np.tile(h.mean, 2)[keep], cov[np.ix_(keep, keep)])
        assert segment_log_density(h, Segment(t, y)) == pytest.approx(ref, abs=1e-8)

    def test_all_missing_segment_rejected(self):
        with pytest.raises(ValueError):
            Segment([0.0], [[np.nan], [np.nan]])

    def test_prefixes_and_suffixes(self, rng):
        h = _hyper()
        t = np.sort(rng.uniform(0, 10, 6))
        y = rng.normal(size=(2, 6))
        fwd = prefix_log_densities(h, t, y)
        rev = prefix_log_densities(h, t, y, reverse=True)
        for b in range(6):
            assert fwd[b] == pytest.approx(segment_log_density(h, Segment(t[: b + 1], y[:, : b + 1])), abs=1e-9)
            assert rev[b] == pytest.approx(segment_log_density(h, Segment(t[5 - b :], y[:, 5 - b :])), abs=1e-9)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 7), st.integers(0, 2**31 - 1), st.floats(0.0, 0.4))
    def test_block_table_matches_direct(self, n, seed, miss):
        r = np.random.default_rng(seed)
        h = _hyper()
        t = np.cumsum(r.uniform(0.1, 3.0, n))
        y = r.normal(size=(2, n))
        y[r.uniform(size=y.shape) < miss] = np.nan
        y[0, np.all(np.isnan(y), axis=0)] = 0.0
        table = block_log_densities(h, t, y)
        for a in range(n):
            for b in range(a + 1, n + 1):
                direct = segment_log_density(h, Segment(t[a:b], y[:, a:b]))
                assert table[a, b] == pytest.approx(direct, abs=1e-8)
        assert np.all(np.diag(table) == 0)


class TestSampling:
    def test_empty_times(self, rng):
        seg = sample_segment(_hyper(), [], rng)
        assert len(seg) == 0

    def test_deterministic(self):
        h = _hyper()
        a = sample_segment(h, [0.0, 1.0], np.random.default_rng(3))
        b = sample_segment(h, [0.0, 1.0], np.random.default_rng(3))
        np.testing.assert_array_equal(a.values, b.values)

    def test_single_time_moments(self, rng):
        h = GpHyper([1.5], 0.9, 1.0, [[1.0]], 0.19)
        draws = np.array([sample_segment(h, [0.0], rng).values[0, 0] for _ in range(10_000)])
        var = 0.9**2 + 0.19
        assert abs(draws.mean() - 1.5) < 4 * np.sqrt(var / draws.size)
        assert draws.var() == pytest.approx(var, rel=0.05)
