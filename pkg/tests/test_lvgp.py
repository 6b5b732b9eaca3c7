import numpy as np
import pytest
from scipy.stats import qmc

from lvmf import lvgp
from lvmf.exceptions import InvalidInputError
from lvmf.kernel import correlation_matrix


def _fd_grad(f, theta, h=1e-6):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


def _projected(grad, theta, bounds, tol=1e-7):
    # at an active bound only the inward-pointing part of the gradient counts
    g = grad.copy()
    for i, (lo, hi) in enumerate(bounds):
        if theta[i] <= lo + tol and g[i] < 0:
            g[i] = 0.0
        if theta[i] >= hi - tol and g[i] > 0:
            g[i] = 0.0
    return g


def _plain_gp(X, y, Xq, phi, jitter):
    """Independent constant-mean GP written with dense inverses."""
    n = len(y)
    D = ((X[:, None, :] - X[None, :, :]) ** 2 * phi).sum(-1)
    R = np.exp(-D) + jitter * np.eye(n)
    Ri = np.linalg.inv(R)
    one = np.ones(n)
    mu = one @ Ri @ y / (one @ Ri @ one)
    s2 = (y - mu) @ Ri @ (y - mu) / n
    r = np.exp(-((X[:, None, :] - Xq[None, :, :]) ** 2 * phi).sum(-1))
    mean = mu + r.T @ Ri @ (y - mu)
    var = s2 * (1 - np.einsum("ij,ik,kj->j", r, Ri, r))
    return mean, var, mu, s2


def test_training_set_validation():
    b = [[0.0, 1.0]]
    with pytest.raises(InvalidInputError):
        lvgp.TrainingSet(np.array([[0.5]]), [0], [1.0], b, 1)
    with pytest.raises(InvalidInputError):
        lvgp.TrainingSet(np.array([[0.5], [2.0]]), [0, 0], [1.0, 2.0], b, 1)
    with pytest.raises(InvalidInputError):
        lvgp.TrainingSet(np.array([[0.5], [0.6]]), [0, 3], [1.0, 2.0], b, 2)
    with pytest.raises(InvalidInputError):
        lvgp.TrainingSet(np.array([[0.5], [0.6]]), [0, 0], [1.0, np.nan], b, 1)


def test_training_set_round_trip(simple1d_data):
    back = lvgp.TrainingSet.from_dict(simple1d_data.to_dict())
    assert np.array_equal(back.inputs, simple1d_data.inputs)
    assert np.array_equal(back.sources, simple1d_data.sources)
    assert np.array_equal(back.outputs, simple1d_data.outputs)


def test_interpolates_training_rows(simple1d_model):
    d = simple1d_model.data
    for x, s, y in zip(d.inputs, d.sources, d.outputs):
        p = simple1d_model.predict(x, s)
        assert abs(p.mean - y) <= 1e-4 * np.std(d.outputs)
        assert p.variance < 1e-4 * simple1d_model.sigma2_original()


def test_variance_nonnegative_on_probe(simple1d_model):
    X = -2 + 5 * qmc.Sobol(1, seed=3).random(1024)
    for s in range(4):
        assert np.all(simple1d_model.predict_many(X, s)[1] >= 0)


def test_prior_reversion():
    X = np.array([[0.0], [0.01], [0.02]])
    data = lvgp.TrainingSet(X, [0, 0, 0], [1.0, 2.0, 0.5], [[0.0, 1.0]], 1)
    m = lvgp.condition(data, [400.0], np.zeros((1, 2)))
    far = m.predict([1.0], 0)  # correlations exp(-400 * 0.98^2) < 1e-8
    assert far.mean == pytest.approx(m.mu_original(), rel=1e-4)
    assert far.variance == pytest.approx(m.sigma2_original(), rel=1e-4)


def test_three_point_dense_oracle():
    X = np.array([[0.1], [0.45], [0.8]])
    y = np.array([0.3, -0.2, 1.1])
    data = lvgp.TrainingSet(X, [0, 0, 0], y, [[0.0, 1.0]], 1)
    m = lvgp.condition(data, [1.0], np.zeros((1, 2)), jitter=0.0 + 1e-8)
    ys = (y - y.mean()) / y.std()
    Xq = np.array([[0.0], [0.3], [0.95]])
    mean, var, _, _ = _plain_gp(X, ys, Xq, np.array([1.0]), 1e-8)
    pm, pv = m.predict_std(Xq, 0)
    assert np.max(np.abs(pm - mean)) < 1e-10
    assert np.max(np.abs(pv - var)) < 1e-10


def _single_source_case():
    rng = np.random.default_rng(0)
    X = rng.random((12, 2))
    y = np.sin(4 * X[:, 0]) + X[:, 1] ** 2
    data = lvgp.TrainingSet(X, np.zeros(12, int), y, [[0, 1], [0, 1]], 1)
    return data, (y - y.mean()) / y.std(), rng.random((50, 2))


def test_single_source_reduces_to_plain_gp():
    data, ys, Xq = _single_source_case()
    phi = np.array([20.0, 15.0])  # keeps cond(R) small so 1e-10 is meaningful
    m = lvgp.condition(data, phi, np.zeros((1, 2)))
    mean, var, mu, s2 = _plain_gp(data.inputs, ys, Xq, phi, m.jitter)
    pm, pv = m.predict_std(Xq, 0)
    assert np.max(np.abs(pm - mean)) < 1e-10
    assert np.max(np.abs(pv - var)) < 1e-10
    assert m.mu_hat == pytest.approx(mu, rel=1e-10)
    assert m.sigma2_hat == pytest.approx(s2, rel=1e-10)


def test_single_source_fit_matches_plain_gp():
    data, ys, Xq = _single_source_case()
    m = lvgp.fit(data, seed=0)
    assert m.latent_positions().shape == (0, 2)
    mean, var, _, _ = _plain_gp(data.inputs, ys, Xq, m.phi, m.jitter)
    D = ((data.inputs[:, None] - data.inputs[None]) ** 2 * m.phi).sum(-1)
    # the dense inverse loses about cond(R) * eps
    tol = 100 * np.linalg.cond(np.exp(-D) + m.jitter * np.eye(data.n)) * np.finfo(float).eps
    pm, pv = m.predict_std(Xq, 0)
    assert np.max(np.abs(pm - mean)) < tol
    assert np.max(np.abs(pv - var)) < tol


def test_profile_consistency(simple1d_model):
    m = simple1d_model
    R = correlation_matrix(m.x_unit, m.z_train, m.x_unit, m.z_train, m.phi) + m.jitter * np.eye(m.data.n)
    Ri = np.linalg.inv(R)
    one = np.ones(m.data.n)
    mu = one @ Ri @ m.y_std / (one @ Ri @ one)
    s2 = (m.y_std - mu) @ Ri @ (m.y_std - mu) / m.data.n
    assert m.mu_hat == pytest.approx(mu, rel=1e-10, abs=1e-12)
    assert m.sigma2_hat == pytest.approx(s2, rel=1e-10)
    assert m.log_likelihood == pytest.approx(-m.data.n * np.log(s2) - np.linalg.slogdet(R)[1], rel=1e-9)


def test_anchoring_and_best_restart(simple1d_model):
    m = simple1d_model
    assert np.array_equal(m.latent[0], [0.0, 0.0])
    assert m.latent[1, 1] == 0.0 and m.latent[1, 0] >= 0.0
    assert m.log_likelihood >= max(m.restart_log_likelihoods) - 1e-9


def test_analytic_gradient_matches_fd(simple1d_model):
    m = simple1d_model
    obj = lvgp.ProfileLikelihood(m.x_unit, m.data.sources, m.y_std, m.n_sources, m.jitter)
    theta = m.theta + 0.1
    _, g = obj.value_and_grad(theta)
    assert np.max(np.abs(g - _fd_grad(obj.value, theta))) < 1e-4 * max(1.0, np.max(np.abs(g)))


def test_stationary_at_optimum(simple1d_model):
    m = simple1d_model
    obj = lvgp.ProfileLikelihood(m.x_unit, m.data.sources, m.y_std, m.n_sources, m.jitter)
    bounds = lvgp.theta_bounds(m.q, m.n_sources, lvgp.FitConfig())
    g = _projected(_fd_grad(obj.value, m.theta), m.theta, bounds)
    assert np.max(np.abs(g)) < 1e-3


def test_identical_sources_collapse():
    x = np.linspace(0, 3, 8)[:, None]
    X = np.vstack([x, x])
    y = np.concatenate([np.sin(x[:, 0]), np.sin(x[:, 0])])
    data = lvgp.TrainingSet(X, [0] * 8 + [1] * 8, y, [[0.0, 3.0]], 2)
    m = lvgp.fit(data, seed=0)
    assert m.latent_distance(0, 1) < 0.05


def test_constant_outputs_give_constant_model():
    data = lvgp.TrainingSet(np.array([[0.1], [0.7]]), [0, 0], [2.0, 2.0], [[0.0, 1.0]], 1)
    m = lvgp.fit(data)
    p = m.predict([0.4], 0)
    assert p.mean == 2.0 and p.variance == 0.0


def test_predict_out_of_bounds(simple1d_model):
    with pytest.raises(InvalidInputError):
        simple1d_model.predict([3.5], 0)
    with pytest.raises(InvalidInputError):
        simple1d_model.predict([0.0], 7)


def test_prediction_continuity(simple1d_model):
    m = simple1d_model
    a = m.predict([0.3], 0).mean
    b = m.predict([0.3 + 1e-6], 0).mean
    # slope bound: |dm/du| <= sum |alpha| * sqrt(2 phi / e), scaled back to original units
    slope = np.abs(m.alpha).sum() * np.sqrt(2 * m.phi[0] / np.e) * m.normalization.y_scale / 5.0
    assert abs(a - b) <= slope * 1e-6 * (1 + 1e-9)


def test_model_round_trip(simple1d_model):
    back = lvgp.FittedLVGP.from_dict(simple1d_model.to_dict())
    X = np.linspace(-2, 3, 11)[:, None]
    for s in range(4):
        m0, v0 = simple1d_model.predict_many(X, s)
        m1, v1 = back.predict_many(X, s)
        assert np.allclose(m0, m1, rtol=1e-12, atol=1e-14)
        assert np.allclose(v0, v1, rtol=1e-10, atol=1e-16)


def test_predict_std_grad_matches_fd(simple1d_model):
    m = simple1d_model
    u = np.array([0.37])
    _, _, dm, dv = m.predict_std_grad(u, 2)
    h = 1e-6
    mp, vp = m.predict_std(u[None] + h, 2)
    mm, vm = m.predict_std(u[None] - h, 2)
    assert dm[0] == pytest.approx((mp[0] - mm[0]) / (2 * h), rel=1e-5)
    assert dv[0] == pytest.approx((vp[0] - vm[0]) / (2 * h), rel=1e-4)


def test_fit_is_deterministic(simple1d_data):
    a = lvgp.fit(simple1d_data, seed=5)
    b = lvgp.fit(simple1d_data, seed=5)
    assert np.array_equal(a.theta, b.theta)
