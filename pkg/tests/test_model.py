import numpy as np
import pytest

from fracbayes.fields import CovarianceSpec, field_from_coeffs, inverse_bounded_transform, kl_decompose
from fracbayes.mesh import build_rect_grid, side_edges
from fracbayes.model import Affine, ForwardModel, boundary_probes, gaussian_field, reduced_basis


def test_affine():
    f = Affine.parse({"const": 2.0, "x": 2.0})
    assert np.allclose(f(np.array([0.0, 0.5]), np.zeros(2)), [2.0, 3.0])
    assert Affine.parse(10) == Affine(10.0)
    assert Affine.parse({"const": 1, "x": -1})(1.0, 0.3) == 0.0


def test_boundary_probes():
    g = build_rect_grid(30, 30)
    p = boundary_probes(g, ["left", "right"], [0.4, 1.0], 0.02)
    assert p.shape == (120, 2)
    assert set(p[:, 1]) == {20, 50}
    assert set(p[:60, 0]) == set(side_edges(g, "left")) | set(side_edges(g, "right"))
    with pytest.raises(ValueError, match="time grid"):
        boundary_probes(g, ["left"], [0.41], 0.02)


def test_gaussian_field_statistics():
    g = build_rect_grid(6, 6)
    draws = np.array([gaussian_field(g, 0.5, 0.3, 0.3, seed=s, mean=1.0) for s in range(3000)])
    assert np.array_equal(draws[7], gaussian_field(g, 0.5, 0.3, 0.3, seed=7, mean=1.0))
    assert np.allclose(draws.mean(0), 1.0, atol=0.05)
    assert np.allclose(draws.var(0), 0.25, rtol=0.12)
    # neighbouring cells are correlated as exp(-h^2 / 2 l^2)
    c = np.corrcoef(draws[:, 0], draws[:, 1])[0, 1]
    assert abs(c - np.exp(-0.5 * (1 / 6 / 0.3) ** 2)) < 0.05


def _setup(n=12, **kw):
    g = build_rect_grid(n, n)
    probes = boundary_probes(g, ["left", "right"], [0.2, 0.4], 0.05)
    base = dict(fine=g, dt=0.05, steps=8, gammas=(0.2, 0.8), f=10.0, g=1.0, probes=probes, k=1.0, q=1.0)
    base.update(kw)
    return g, base


def test_parameter_layout_and_split():
    g, kw = _setup()
    kl = kl_decompose(CovarianceSpec(1.0, 0.2, 0.2), g, 5)
    H = ForwardModel(**{**kw, "k": kl})
    assert H.n_params == 7 and H.n_obs == 48
    v = np.r_[inverse_bounded_transform([0.3, 0.6]), np.linspace(-1, 1, 5)]
    orders, k, q = H.split(v)
    assert np.isclose(orders.alpha1, 0.3) and np.isclose(orders.alpha2, 0.6)
    assert np.allclose(k, field_from_coeffs(kl, v[2:])) and np.all(q == 1.0)
    with pytest.raises(ValueError):
        H.split(v[:5])
    # the KL path and an explicit field give the same observations
    H_known = ForwardModel(**{**kw, "k": k})
    assert np.allclose(H(v), H_known(v[:2]), rtol=1e-12)


def test_fixed_orders_have_no_alpha_params():
    g, kw = _setup()
    H = ForwardModel(**kw, alpha=(0.3, 0.6))
    assert H.n_params == 0
    assert H(np.zeros(0)).shape == (48,)


def test_forward_validation():
    g, kw = _setup()
    with pytest.raises(ValueError, match="solver"):
        ForwardModel(**kw, solver="coarse")
    with pytest.raises(ValueError, match="basis"):
        ForwardModel(**kw, solver="gmsfem")
    interior = int(np.flatnonzero(~g.is_boundary)[0])
    with pytest.raises(ValueError, match="boundary"):
        ForwardModel(**{**kw, "probes": [(interior, 1)]})
    with pytest.raises(ValueError, match="steps"):
        ForwardModel(**{**kw, "probes": [(0, 9)]})


def test_reduced_model_close_to_fine_and_consistent():
    g, kw = _setup(n=16)
    k = np.exp(gaussian_field(g, 0.5, 0.2, 0.2, seed=3))
    kw["k"] = k
    v = inverse_bounded_transform([0.3, 0.6])
    fine = ForwardModel(**kw)(v)
    basis = reduced_basis(g, (4, 4), k, 4)
    Hc = ForwardModel(**kw, solver="gmsfem", basis=basis)
    coarse = Hc(v)
    assert np.linalg.norm(coarse - fine) / np.linalg.norm(fine) < 0.05
    sigma, beta = Hc.trajectory(v)
    p = kw["probes"]
    assert np.allclose(sigma[p[:, 1], p[:, 0]], coarse, rtol=1e-12, atol=1e-12)
    assert sigma.shape == (9, g.n_edges) and beta.shape == (9, g.n_cells)


def test_orders_move_observations():
    g, kw = _setup()
    H = ForwardModel(**kw)
    a = H(inverse_bounded_transform([0.3, 0.6]))
    b = H(inverse_bounded_transform([0.5, 0.6]))
    assert np.linalg.norm(a - b) > 1e-3
