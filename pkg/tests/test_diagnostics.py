import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from fracbayes.diagnostics import (
    BUCKET_EDGES,
    acf,
    gaussian_kl,
    iact_ess,
    intervals,
    moments,
    weight_histogram,
    write_table,
)

from oracles import ar1_acf


def _ar1(phi, n, seed, dim=1):
    rng = np.random.default_rng(seed)
    e = rng.standard_normal((n, dim)) * np.sqrt(1 - phi**2)
    x = np.empty((n, dim))
    x[0] = rng.standard_normal(dim)
    for t in range(1, n):
        x[t] = phi * x[t - 1] + e[t]
    return x


def test_acf_basic():
    x = np.random.default_rng(0).standard_normal(10_000)
    r = acf(x, 20)
    assert r[0] == 1.0
    assert np.all(np.abs(r[1:]) < 0.05)
    with pytest.raises(ValueError, match="zero variance"):
        acf(np.ones(50), 3)
    with pytest.raises(ValueError):
        acf(x[:5], 5)


def test_acf_ar1_matches_analytic():
    r = acf(_ar1(0.8, 100_000, 1), 10)
    assert np.all(np.abs(r - ar1_acf(0.8, 10)) < 0.05)


def test_acf_vector_state():
    x = _ar1(0.5, 50_000, 2, dim=3)
    assert np.all(np.abs(acf(x, 4) - ar1_acf(0.5, 4)) < 0.03)


def test_iact():
    tau, n_eff = iact_ess(np.random.default_rng(3).standard_normal((20_000, 2)))
    assert abs(tau - 1) < 0.1 and abs(n_eff - 20_000) < 2000
    tau, _ = iact_ess(_ar1(0.8, 100_000, 4))
    assert abs(tau - 9.0) < 0.9  # (1 + 0.8) / (1 - 0.8)
    with pytest.raises(ValueError):
        iact_ess(np.zeros((100, 1)))


def test_kl_examples():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((3000, 2))
    assert gaussian_kl(a, a).value == 0.0
    x = rng.standard_normal(200_000)
    y = rng.standard_normal(200_000) + 1
    assert abs(gaussian_kl(x, y).value - 0.5) < 0.02
    wide = 2 * rng.standard_normal(50_000)
    assert abs(gaussian_kl(x, wide).value - gaussian_kl(wide, x).value) > 0.1


def test_kl_weighted_matches_resampled():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((4000, 2))
    w = np.exp(-0.5 * (x[:, 0] - 0.5) ** 2)
    w /= w.sum()
    ref = rng.standard_normal((4000, 2))
    kl_w = gaussian_kl(x, ref, weights_a=w).value
    kl_r = gaussian_kl(x[rng.choice(4000, 40_000, p=w)], ref).value
    assert abs(kl_w - kl_r) < 0.03


def test_kl_singular_fit_regularized_and_errors():
    rng = np.random.default_rng(7)
    t = rng.standard_normal(100)
    degenerate = np.column_stack([t, 2 * t])
    res = gaussian_kl(degenerate, rng.standard_normal((100, 2)))
    assert res.regularized and np.isfinite(res.value)
    with pytest.raises(ValueError):
        gaussian_kl(np.zeros((3, 2)), np.zeros((10, 2)))
    with pytest.raises(ValueError):
        gaussian_kl(np.zeros((10, 2)), np.zeros((10, 3)))


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_kl_nonnegative(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((30, 3)) @ rng.normal(size=(3, 3))
    b = rng.standard_normal((40, 3)) + rng.normal(size=3)
    assert gaussian_kl(a, b).value >= 0


def test_moments():
    m = moments(np.array([-1.0, 1.0, -1.0, 1.0]))
    assert m.skewness[0] == 0.0
    x = np.random.default_rng(8).standard_normal((100_000, 2))
    m = moments(x)
    assert np.all(np.abs(m.skewness) < 0.05) and np.all(np.abs(m.kurtosis) < 0.05)
    g = np.random.default_rng(9).gamma(2.0, size=(500, 1))
    m = moments(g)
    assert np.isclose(m.skewness[0], stats.skew(g[:, 0]), rtol=1e-12)
    assert np.isclose(m.kurtosis[0], stats.kurtosis(g[:, 0]), rtol=1e-12)
    assert np.isclose(m.std[0], g.std(), rtol=1e-12)
    with pytest.raises(ValueError):
        moments(np.ones(10))
    with pytest.raises(ValueError):
        moments(np.arange(3.0))


def test_weighted_moments_equal_repetition():
    x = np.array([0.0, 1.0, 3.0, 7.0])
    m_w = moments(x, weights=[1, 2, 1, 3])
    m_r = moments(np.repeat(x, [1, 2, 1, 3]))
    for a, b in zip((m_w.mean, m_w.std, m_w.skewness, m_w.kurtosis), (m_r.mean, m_r.std, m_r.skewness, m_r.kurtosis)):
        assert np.allclose(a, b)


def test_weight_histogram_examples():
    assert weight_histogram(np.full(5000, 1 / 5000)).tolist() == [0, 0, 0, 5000, 0, 0, 0]
    assert weight_histogram(np.eye(100)[5]).tolist() == [99, 0, 0, 0, 0, 0, 1]
    # bucket edges are closed on the left
    assert weight_histogram(BUCKET_EDGES[1:-1]).tolist() == [0, 1, 1, 1, 1, 1, 1]


@given(arrays(float, st.integers(1, 300), elements=st.floats(0, 1)))
def test_weight_histogram_exhaustive(w):
    assert weight_histogram(w).sum() == w.size


def test_intervals():
    y = np.tile([1.0, 2.0, -3.0], (200, 1))
    b = intervals(y, 0.0, seed=0)
    assert np.all(b.credible_lower == b.credible_upper) and np.allclose(b.prediction_upper, y[0])
    b = intervals(np.tile([1.0], (20_000, 1)), 0.1, seed=1)
    assert np.allclose([b.prediction_lower[0], b.prediction_upper[0]], [1 - 0.196, 1 + 0.196], atol=0.01)
    with pytest.raises(ValueError):
        intervals(y[:50], 0.1)


def test_interval_band_containment_and_coverage():
    rng = np.random.default_rng(2)
    mean = np.linspace(-1, 1, 30)
    real = mean + 0.05 * rng.standard_normal((2000, 30))
    b = intervals(real, 0.02, seed=3)
    assert np.all(b.prediction_lower <= b.credible_lower) and np.all(b.prediction_upper >= b.credible_upper)
    assert np.all(b.credible_lower <= b.credible_upper)
    fresh = mean + 0.05 * rng.standard_normal((5000, 30)) + 0.02 * rng.standard_normal((5000, 30))
    inside = (fresh >= b.prediction_lower) & (fresh <= b.prediction_upper)
    assert inside.mean() >= 0.90


def test_write_table(tmp_path):
    write_table(tmp_path / "t.csv", ["a", "b"], [(1, 0.1), ("x", np.float64(2.5))])
    assert (tmp_path / "t.csv").read_text().splitlines() == ["a,b", "1,0.1", "x,2.5"]
