import numpy as np
import pytest
from scipy.special import expit

from mnar_debias.core import MaskMatrix, ObservedMatrix
from mnar_debias.propensity import (
    LinkFunction,
    LinkSaturationError,
    OneBitConfig,
    bayes_propensity,
    bernoulli_loglik,
    fit_1bitmc,
    fit_1bitmc_modified,
    fit_logistic_regression,
    fit_naive_bayes,
    select_tau,
)
from mnar_debias.synthetic import gen_user_item, sample_mar_ratings, sample_observations


def fd_gradient(f, x, h=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        g[idx] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def feasible_point(rng, mask, gamma):
    """Random point away from the piecewise link's kinks; M=0 cells stay below gamma."""
    x = rng.uniform(-1.5 * gamma, 1.5 * gamma, mask.shape)
    near = np.abs(np.abs(x) - gamma) < 0.05
    x[near] += 0.1
    x[(mask == 0) & (x >= gamma - 0.05)] = 0.5 * gamma
    return x


# -- links ----------------------------------------------------------------------

def test_piecewise_link_shape():
    link = LinkFunction("piecewise", 2.0)
    assert link(np.array(2.0)) == pytest.approx(1.0)
    assert link(np.array(5.0)) == 1.0
    assert link(np.array(-3.0)) == pytest.approx(expit(-3.0))
    # continuous at -gamma, monotone inside
    assert link(np.array(-2.0 + 1e-12)) == pytest.approx(expit(-2.0), abs=1e-10)
    xs = np.linspace(-4, 4, 401)
    assert np.all(np.diff(link(xs)) >= 0)
    assert np.allclose(link(xs) + link.complement(xs), 1.0)


def test_piecewise_sigma_zero():
    link = LinkFunction("piecewise", 2.0)
    assert float(link(np.array(0.0))) == pytest.approx(0.5 + 0.5 * (1 - expit(2.0)))


def test_link_inverse_roundtrip():
    for link in (LinkFunction(), LinkFunction("piecewise", 3.0)):
        xs = np.array([-5.0, -2.0, 0.3, 2.5])
        assert np.allclose(link.inverse(link(xs)), xs, atol=1e-9)


def test_link_derivative_fd(rng):
    link = LinkFunction("piecewise", 2.0)
    xs = np.array([-3.0, -1.0, 0.0, 1.5, 3.0])
    fd = (link(xs + 1e-6) - link(xs - 1e-6)) / 2e-6
    assert np.allclose(link.derivative(xs), fd, atol=1e-8)


# -- likelihood -----------------------------------------------------------------

def test_loglik_at_zero(rng):
    m = (rng.random((4, 3)) < 0.5).astype(int)
    v, g = bernoulli_loglik(np.zeros((4, 3)), m)
    assert v == pytest.approx(12 * np.log(0.5))
    assert np.allclose(g, m - 0.5)


@pytest.mark.parametrize("kind", ["logistic", "piecewise"])
def test_loglik_gradient_fd(rng, kind):
    gamma = 2.0
    link = LinkFunction(kind, gamma if kind == "piecewise" else None)
    worst = 0.0
    for _ in range(20):
        mask = (rng.random((5, 4)) < 0.5).astype(int)
        x = feasible_point(rng, mask, gamma)
        _, g = bernoulli_loglik(x, mask, link)
        fd = fd_gradient(lambda z: bernoulli_loglik(z, mask, link)[0], x)
        rel = np.abs(g - fd) / np.maximum(np.abs(fd), 1e-12)
        worst = max(worst, float(rel.max()))
    assert worst <= 1e-6


def test_loglik_saturation():
    link = LinkFunction("piecewise", 1.0)
    with pytest.raises(LinkSaturationError, match="link saturation at infeasible point"):
        bernoulli_loglik(np.array([[2.0]]), np.array([[0]]), link)


def test_loglik_dimension_mismatch():
    with pytest.raises(ValueError):
        bernoulli_loglik(np.zeros((2, 2)), np.zeros((2, 3)))


# -- 1bitMC ---------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        OneBitConfig(tau=0)
    with pytest.raises(ValueError):
        OneBitConfig(gamma=-1)
    with pytest.raises(ValueError):
        OneBitConfig(gamma=1.0, phi=2.0)


def test_decoupled_identity_mask():
    m = np.array([[1, 0], [0, 1]])
    fit = fit_1bitmc(m, OneBitConfig(tau=1e3, gamma=2.0))
    want = np.where(m == 1, expit(2.0), expit(-2.0))
    assert np.allclose(fit.P_hat.data, want, atol=1e-6)
    assert fit.converged


def test_all_ones_mask_constant():
    m = np.ones((4, 6), int)
    fit = fit_1bitmc(m, OneBitConfig(tau=0.5, gamma=2.0))
    p = fit.P_hat.data
    assert np.allclose(p, p[0, 0])
    # nuclear constraint binds: A = tau * ones, capped by gamma
    assert fit.A_hat[0, 0] == pytest.approx(0.5, abs=1e-6)
    assert fit.objective == pytest.approx(24 * np.log(expit(fit.A_hat[0, 0])), rel=1e-10)


def test_objective_monotone(rng):
    truth = gen_user_item(30, 40, 5, seed=1)
    m = (rng.random((30, 40)) < truth.P).astype(int)
    fit = fit_1bitmc(m, OneBitConfig(tau=1.0, gamma=4.0))
    assert np.all(np.diff(fit.trace) >= -1e-9)
    assert fit.P_hat.data.min() >= expit(-4.0) - 1e-12
    assert fit.to_record()["converged"] is True


def test_modified_full_column_reaches_one():
    m = np.zeros((6, 4), int)
    m[:, 0] = 1
    fit = fit_1bitmc_modified(m, OneBitConfig(tau=1e3, gamma=2.0, phi=0.0))
    assert np.allclose(fit.P_hat.data[:, 0], 1.0, atol=1e-9)
    sigma_phi = float(LinkFunction("piecewise", 2.0)(np.array(0.0)))
    assert np.all(fit.P_hat.data[:, 1:] <= sigma_phi + 1e-9)


def test_modified_all_zero_mask_capped():
    fit = fit_1bitmc_modified(np.zeros((5, 5), int), OneBitConfig(tau=2.0, gamma=2.0, phi=0.5))
    cap = float(LinkFunction("piecewise", 2.0)(np.array(0.5)))
    assert np.all(fit.P_hat.data <= cap + 1e-9)


def test_modified_needs_phi():
    with pytest.raises(ValueError):
        fit_1bitmc_modified(np.ones((2, 2), int), OneBitConfig())


def test_select_tau_deterministic(rng):
    truth = gen_user_item(20, 25, 3, seed=2)
    m = (rng.random((20, 25)) < truth.P).astype(int)
    a = select_tau(m, (0.5, 2.0), folds=3, seed=4, max_iter=50)
    b = select_tau(m, (0.5, 2.0), folds=3, seed=4, max_iter=50)
    assert a == b
    assert a[0] in (0.5, 2.0)


# -- naive Bayes ------------------------------------------------------------------

def test_bayes_identity():
    assert bayes_propensity(0.5, 0.4, 0.25) == pytest.approx(0.8)


def test_naive_bayes_identical_distributions():
    vals = np.array([[1.0, 2.0, 3.0, 1.0], [2.0, 3.0, 1.0, 2.0]])
    present = np.array([[1, 1, 1, 0], [0, 0, 0, 1]], bool)  # observed values 1,2,3,2
    x = ObservedMatrix(vals, present)
    fit = fit_naive_bayes(x, np.array([1.0, 2.0, 3.0, 2.0]))
    assert np.allclose(fit.P_hat[present], 4 / 8)
    assert np.all(fit.P_hat[~present] == 0)


def test_naive_bayes_full_matrix_map():
    x = ObservedMatrix(np.array([[5.0, 1.0]]), np.array([[True, False]]))
    fit = fit_naive_bayes(x, np.array([1.0, 5.0]))
    full = fit.apply(np.array([[5.0, 1.0]]))
    assert full[0, 0] > full[0, 1]
    with pytest.raises(ValueError):
        fit.apply(np.array([[4.0]]))


def test_naive_bayes_empty_mar():
    x = ObservedMatrix(np.array([[5.0]]), np.array([[True]]))
    with pytest.raises(ValueError):
        fit_naive_bayes(x, np.array([]))


def test_naive_bayes_clip_floor():
    x = ObservedMatrix(np.array([[5.0, 1.0]]), np.array([[True, False]]))
    fit = fit_naive_bayes(x, np.array([1.0] * 1000 + [5.0]), eps=1e-6)
    assert all(1e-6 <= p <= 1.0 for p in fit.value_map.values())


# -- logistic regression ----------------------------------------------------------

def test_logistic_zero_features(rng):
    m = (rng.random((8, 9)) < 0.3).astype(int)
    fit = fit_logistic_regression(m, np.zeros((8, 0)), np.zeros((9, 0)))
    assert np.allclose(fit.P_hat.data, m.mean(), atol=1e-6)


def test_logistic_recovers_generator():
    truth = gen_user_item(100, 120, 20, seed=3)
    s = sample_observations(truth, seed=3)
    fit = fit_logistic_regression(s.M, truth.factors["U2"], truth.factors["V2"], l2=0.0)
    assert np.mean((fit.P_hat.data - truth.P) ** 2) < 0.003


def test_logistic_modes_need_features():
    m = np.array([[0, 1], [1, 0]])
    with pytest.raises(ValueError):
        fit_logistic_regression(m, None, np.zeros((2, 1)), mode="U")
    with pytest.raises(ValueError):
        fit_logistic_regression(m, np.zeros((2, 1)), None, mode="both")


def test_logistic_degenerate_mask():
    fit = fit_logistic_regression(np.ones((3, 3), int), np.eye(3), np.eye(3))
    assert fit.degenerate
    assert np.allclose(fit.P_hat.data, 1.0)
