import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.integrate import quad

from fracbayes.diagnostics import iact_ess
from fracbayes.sampling import (
    Chain,
    draw_samples,
    ess,
    evaluate,
    factor_inverse,
    hessian_gaussian,
    hessian_laplace,
    implicit_sampling,
    lmap_samples,
    make_surrogate,
    pcn_mcmc,
    select_theta,
    sus_resample,
    tempered_weights,
)

from oracles import gaussian_posterior, two_point_ess


def _spd(rng, n):
    X = rng.normal(size=(n, n))
    return X @ X.T + n * np.eye(n)


# --- Hessian and factor --------------------------------------------------------

def test_hessian_gaussian_trivial_cases():
    C = np.diag([2.0, 3.0])
    hinv, L = hessian_gaussian(np.zeros((4, 2)), C, np.eye(4))
    assert np.allclose(hinv, C) and np.allclose(L.T @ L, C)
    c, h, g = 2.0, 3.0, 0.5
    hinv, _ = hessian_gaussian([[h]], [[c]], [[g]])
    assert np.isclose(hinv[0, 0], c * g / (h * h * c + g))


def test_hessian_gaussian_woodbury():
    rng = np.random.default_rng(0)
    H, C, G = rng.normal(size=(5, 5)), _spd(rng, 5), _spd(rng, 5)
    hinv, L = hessian_gaussian(H, C, G)
    ref = np.linalg.inv(H.T @ np.linalg.inv(G) @ H + np.linalg.inv(C))
    assert np.allclose(hinv, ref, rtol=0, atol=1e-10 * np.abs(ref).max())
    assert np.allclose(L.T @ L, hinv, atol=1e-12)


def test_hessian_laplace():
    rng = np.random.default_rng(1)
    w = rng.uniform(0.5, 2, 4)
    hess, L = hessian_laplace(np.zeros((3, 4)), np.eye(3), 0.7, w)
    assert np.allclose(hess, np.diag(1.4 * w))
    H, G = rng.normal(size=(6, 4)), _spd(rng, 6)
    hess, L = hessian_laplace(H, G, 0.3, w)
    ref = H.T @ np.linalg.inv(G) @ H + 0.6 * np.diag(w)
    lam, U = np.linalg.eigh(ref)
    assert np.allclose(hess, ref, atol=1e-12)
    assert np.allclose(L.T @ L, (U / lam) @ U.T, rtol=0, atol=1e-10)


def test_hessian_laplace_errors():
    with pytest.raises(ValueError):
        hessian_laplace(np.eye(2), np.eye(2), 1.0, [1.0, 0.0])
    with pytest.raises(np.linalg.LinAlgError):
        hessian_laplace(np.ones((3, 2)), np.eye(3), 1e-30, [1.0, 1.0])


def test_factor_inverse_clips_roundoff():
    rng = np.random.default_rng(2)
    U = np.linalg.qr(rng.normal(size=(4, 4)))[0]
    M = (U * np.array([-1e-18, 1e-3, 1.0, 2.0])) @ U.T
    L = factor_inverse(M)
    assert np.all(np.linalg.eigvalsh(L.T @ L) > 0)
    assert np.allclose(L.T @ L, M, atol=1e-10)
    with pytest.raises(np.linalg.LinAlgError):
        factor_inverse(-np.eye(2))


# --- draws ---------------------------------------------------------------------

def _surrogate(seed=3, dim=3):
    rng = np.random.default_rng(seed)
    hinv = np.linalg.inv(_spd(rng, dim))
    return make_surrogate(rng.normal(size=dim), 1.5, hinv=hinv), hinv


def test_draws_zero_xi_and_surrogate_consistency():
    s, hinv = _surrogate()
    assert np.allclose(draw_samples(s, 2, xi=np.zeros((2, 3))), s.theta_map)
    assert np.isclose(s.fhat(s.theta_map)[0], s.phi_F)
    assert np.allclose(s.hess @ hinv, np.eye(3), atol=1e-10)
    assert np.allclose(s.covariance, hinv)
    with pytest.raises(ValueError):
        draw_samples(s, 0)


def test_draw_moments():
    s, hinv = _surrogate()
    n = 100_000
    x = draw_samples(s, n, seed=4)
    assert np.all(np.abs(x.mean(0) - s.theta_map) < 3 * np.sqrt(np.diag(hinv) / n))
    cov = np.cov(x.T)
    assert np.linalg.norm(cov - hinv) / np.linalg.norm(hinv) < 0.05
    assert np.array_equal(draw_samples(s, 5, seed=9), draw_samples(s, 5, seed=9))


# --- weights -------------------------------------------------------------------

def test_weight_examples():
    w = tempered_weights([0.0, np.log(4.0)], [0.0, 0.0], 2.0)
    assert np.allclose(w, [1 / 3, 2 / 3])
    x = np.array([0.3, -1.0, 2.0])
    assert np.allclose(tempered_weights(x, 0.0, 1.0), np.exp(x) / np.exp(x).sum())
    assert np.allclose(tempered_weights(x, 0.0, 1e12), 1 / 3)
    with pytest.raises(ValueError):
        tempered_weights(x, 0.0, 0.5)


def test_nonfinite_F_gets_zero_weight():
    with pytest.warns(RuntimeWarning, match="1 samples"):
        w = tempered_weights([0.0, 0.0, 0.0], [1.0, np.inf, 2.0])
    assert w[1] == 0.0 and np.isclose(w.sum(), 1.0)
    with pytest.raises(ValueError):
        tempered_weights([0.0], [np.nan])


def test_weights_shift_invariant_and_safe():
    rng = np.random.default_rng(5)
    fh, f = rng.normal(size=50) * 1e3, rng.normal(size=50) * 1e3
    w = tempered_weights(fh, f, 3.0)
    assert np.all(np.isfinite(w))
    # a constant added to every F leaves the normalized weights unchanged
    assert np.allclose(w, tempered_weights(fh, f - 123.0, 3.0), rtol=1e-9, atol=0)
    assert np.allclose(w, tempered_weights(fh, f + 1e4, 3.0), rtol=1e-9, atol=0)


@given(arrays(float, st.integers(2, 60), elements=st.floats(-50, 50)), st.floats(1.0, 100.0))
@settings(max_examples=80, deadline=None)
def test_weight_order_preserved(delta, theta):
    w = tempered_weights(delta, np.zeros_like(delta), theta)
    i, j = np.triu_indices(delta.size, 1)
    gt = delta[i] > delta[j]
    assert np.all(w[i][gt] >= w[j][gt])
    lt = delta[i] < delta[j]
    assert np.all(w[i][lt] <= w[j][lt])


@given(arrays(float, st.integers(2, 40), elements=st.floats(-30, 30)))
@settings(max_examples=50, deadline=None)
def test_tempering_flattens(delta):
    ws = [tempered_weights(delta, 0.0, t) for t in (1.0, 2.0, 5.0, 20.0)]
    tol = 1e-12
    assert all(a.max() >= b.max() - tol for a, b in zip(ws, ws[1:]))
    assert all(a.min() <= b.min() + tol for a, b in zip(ws, ws[1:]))


def test_ess_identities():
    assert np.isclose(ess(np.full(40, 1 / 40)), 40)
    assert ess(np.eye(7)[3]) == 1.0
    assert ess([0.5, 0.5]) == 2.0


@pytest.mark.parametrize("delta", [1.0, 5.0, 10.0, 25.0])
def test_two_point_ess_monotone_vs_oracle(delta):
    e = [ess(tempered_weights([0.0, delta], 0.0, t)) for t in range(1, 51)]
    ref = [two_point_ess(delta, t) for t in range(1, 51)]
    assert np.allclose(e, ref, rtol=1e-12)
    assert np.all(np.diff(e) >= 0)


# --- scale search --------------------------------------------------------------

def test_select_theta_two_point_oracle():
    ref = next(t for t in range(1, 51) if two_point_ess(10.0, t) >= 1.8)
    assert ref == 15  # oracle scan, frozen
    for method in ("increment", "bisect"):
        r = select_theta([0.0, 10.0], [0.0, 0.0], 1.8, method=method)
        assert r.theta == 15.0 and r.reached
        assert np.isclose(r.ess, 1.8126278598544447, rtol=1e-12)


def test_select_theta_immediate_and_unreached():
    r = select_theta(np.full(10, 2.0), np.zeros(10), 10)
    assert r.theta == 1.0 and np.isclose(r.ess, 10)
    with pytest.warns(RuntimeWarning, match="not reached"):
        r = select_theta([0.0, 1e4], [0.0, 0.0], 1.99, max_iter=5)
    assert not r.reached and r.theta == 6.0
    with pytest.raises(ValueError):
        select_theta([0.0, 1.0], [0.0, 0.0], 3)
    with pytest.raises(ValueError):
        select_theta([0.0, 1.0], [0.0, 0.0], 1.5, method="golden")


@given(arrays(float, 30, elements=st.floats(-40, 40)), st.floats(1.0, 29.0))
@settings(max_examples=40, deadline=None)
def test_bisect_agrees_with_increment(delta, target):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        a = select_theta(delta, np.zeros(30), target, max_iter=60)
        b = select_theta(delta, np.zeros(30), target, max_iter=60, method="bisect")
    assert a.theta == b.theta and a.reached == b.reached


# --- resampling ----------------------------------------------------------------

def test_sus_examples():
    assert np.array_equal(np.bincount(sus_resample(np.full(8, 1 / 8), 0), minlength=8), np.ones(8))
    assert np.array_equal(sus_resample(np.eye(6)[4], 1), np.full(6, 4))
    w = np.r_[0.7, 0.3, np.zeros(8)]
    assert np.bincount(sus_resample(w, 2), minlength=10)[:2].tolist() == [7, 3]


def test_sus_counts_within_one():
    rng = np.random.default_rng(6)
    w = rng.dirichlet(np.ones(25) * 0.3)
    n = w.size
    total = np.zeros(n)
    for trial in range(1000):
        c = np.bincount(sus_resample(w, rng), minlength=n)
        assert c.sum() == n
        assert np.all(np.abs(c - n * w) < 1.0)
        total += c
    # unbiased: mean copy count approaches n * w
    assert np.allclose(total / 1000, n * w, atol=0.05)


# --- ensembles -----------------------------------------------------------------

def test_quadratic_target_uniform_weights():
    s, _ = _surrogate(7, 4)
    ens = implicit_sampling(s, lambda x: float(s.fhat(x)[0]), 200, seed=1)
    assert np.allclose(ens.weights, 1 / 200, rtol=1e-12)
    assert np.isclose(ens.ess, 200)
    assert np.array_equal(np.sort(ens.resampled), np.arange(200))


def test_ensemble_threads_identical_and_lmap_matches(tmp_path):
    s, _ = _surrogate(8, 3)
    F = lambda x: float(s.fhat(x)[0] + 0.3 * np.sin(x).sum())
    a = implicit_sampling(s, F, 64, seed=3, workers=1)
    b = implicit_sampling(s, F, 64, seed=3, workers=4)
    assert np.array_equal(a.weights, b.weights) and np.array_equal(a.resampled, b.resampled)
    assert np.isclose(a.weights.sum(), 1.0, rtol=0, atol=1e-12)
    lm = lmap_samples(s, 64, seed=3)
    assert np.array_equal(lm.samples, a.samples)
    assert np.all(lm.weights == 1 / 64)
    a.write_csv(tmp_path / "e.csv")
    rows = (tmp_path / "e.csv").read_text().splitlines()
    assert rows[0] == "sample_id,weight,F,Fhat,v_1,v_2,v_3" and len(rows) == 65


def test_ensemble_target_ess_and_failures():
    s, _ = _surrogate(9, 2)

    def F(x):
        if x[0] > s.theta_map[0] + 2 * np.sqrt(s.covariance[0, 0]):
            raise RuntimeError("diverged")
        return float(s.fhat(x)[0] + 5 * (x - s.theta_map).sum() ** 2)

    with pytest.warns(RuntimeWarning):
        ens = implicit_sampling(s, F, 300, seed=2, target_ess=150)
    assert ens.ess >= 150 and ens.scale >= 1
    assert ens.invalid.any() and np.all(ens.weights[ens.invalid] == 0)
    assert np.all(evaluate(lambda x: 1 / 0, np.zeros((2, 1))) == np.inf)


def _quad_skewness(F):
    z = quad(lambda t: np.exp(-F(t)), -np.inf, np.inf)[0]
    m = [quad(lambda t: t**k * np.exp(-F(t)), -np.inf, np.inf)[0] / z for k in (1, 2, 3)]
    var = m[1] - m[0] ** 2
    return (m[2] - 3 * m[0] * m[1] + 2 * m[0] ** 3) / var**1.5


def test_skewed_target_implicit_vs_lmap():
    # minimum at 0 with unit curvature; the quartic keeps the weights bounded
    F1 = lambda t: 0.5 * t**2 + 0.2 * t**3 + 0.03 * t**4
    ref = _quad_skewness(F1)
    assert ref < -0.3
    s = make_surrogate([0.0], 0.0, hinv=[[1.0]])
    ens = implicit_sampling(s, lambda x: float(F1(x[0])), 20000, seed=5, resample=False)
    x, w = ens.samples[:, 0], ens.weights
    m = w @ x
    skew = (w @ (x - m) ** 3) / (w @ (x - m) ** 2) ** 1.5
    assert abs(skew - ref) < 0.1
    lm = lmap_samples(s, 20000, seed=5).samples[:, 0]
    assert abs(((lm - lm.mean()) ** 3).mean() / lm.std() ** 3) < 0.05


# --- pCN -----------------------------------------------------------------------

def test_pcn_trivial_cases(tmp_path):
    prior = lambda rng: rng.standard_normal(3)
    ch = pcn_mcmc(lambda v: 0.0, prior, 0.4, 200, seed=1)
    assert ch.accepted.all() and ch.acceptance_rate == 1.0
    ch = pcn_mcmc(lambda v: float(v @ v), prior, 0.0, 50, seed=1, v0=np.ones(3))
    assert np.all(ch.samples == 1.0)
    ch.write_csv(tmp_path / "c.csv")
    rows = (tmp_path / "c.csv").read_text().splitlines()
    assert rows[0] == "step,accepted,v_1,v_2,v_3" and len(rows) == 52
    with pytest.raises(ValueError):
        pcn_mcmc(lambda v: 0.0, prior, 1.0, 10)


def test_pcn_conjugate_gaussian_mean():
    rng = np.random.default_rng(10)
    M = rng.normal(size=(8, 2))
    sigma = 0.5
    d = M @ np.array([0.7, -0.4]) + sigma * rng.normal(size=8)
    mean, cov = gaussian_posterior(M, d, sigma, 1.0)
    phi = lambda v: float(np.sum((M @ v - d) ** 2)) / (2 * sigma**2)
    ch = pcn_mcmc(phi, lambda r: r.standard_normal(2), 0.3, 40000, seed=11, v0=np.zeros(2))
    x = ch.samples[2000:]
    for j in range(2):
        tau, _ = iact_ess(x[:, [j]])
        se = np.sqrt(cov[j, j] * tau / x.shape[0])
        assert abs(x[:, j].mean() - mean[j]) < 3 * se
    assert isinstance(ch, Chain) and 0 < ch.acceptance_rate < 1
