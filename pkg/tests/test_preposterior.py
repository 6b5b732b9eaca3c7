import numpy as np
import pytest
from scipy.stats import qmc

from lvmf import lvgp
from lvmf.kernel import half_solve
from lvmf.exceptions import InvalidInputError
from lvmf.preposterior import (
    CandidateScorer,
    augment,
    batch_structural_terms,
    preposterior_variance,
    preposterior_variance_many,
    structural_term,
)


def frozen_refit(model, x_next, s_next):
    """Append the believed row and recondition with the same hyperparameters."""
    d = model.data
    y_b = model.predict(x_next, s_next).mean
    data = lvgp.TrainingSet(
        np.vstack([d.inputs, np.atleast_2d(x_next)]), np.append(d.sources, s_next),
        np.append(d.outputs, y_b), d.bounds, d.n_sources,
    )
    return lvgp.condition(data, model.phi, model.latent, model.jitter)


def test_believed_y_is_prediction(simple1d_model):
    for x, s in [(-1.3, 0), (0.4, 2), (2.9, 3)]:
        ppm = augment(simple1d_model, [x], s)
        assert ppm.believed_y == simple1d_model.predict([x], s).mean


def test_hyperparameters_frozen(simple1d_model):
    ppm = augment(simple1d_model, [0.1], 1)
    assert ppm.phi is simple1d_model.phi
    assert ppm.latent is simple1d_model.latent


def test_frozen_refit_oracle(simple1d_model):
    rng = np.random.default_rng(11)
    m = simple1d_model
    for _ in range(20):
        x_next, s_next = rng.uniform(-2, 3, 1), int(rng.integers(4))
        x_q, s_q = rng.uniform(-2, 3, 1), int(rng.integers(4))
        ref = frozen_refit(m, x_next, s_next).predict(x_q, s_q).variance
        got = preposterior_variance(augment(m, x_next, s_next), x_q, s_q)
        assert got == pytest.approx(ref, rel=1e-8, abs=1e-14 * m.sigma2_original())


def test_current_divisor_rescales(simple1d_model):
    m = simple1d_model
    n = m.data.n
    a = augment(m, [0.7], 2, divisor="augmented")
    b = augment(m, [0.7], 2, divisor="current")
    assert b.sigma2_new == pytest.approx(a.sigma2_new * (n + 1) / n, rel=1e-12)
    with pytest.raises(InvalidInputError):
        augment(m, [0.7], 2, divisor="other")


def test_incremental_factor_matches_refactor(simple1d_model):
    ppm = augment(simple1d_model, [1.234], 1)
    ref = frozen_refit(simple1d_model, [1.234], 1)
    assert np.max(np.abs(ppm.augmented_factor.matrix() - ref.factored.matrix())) < 1e-10


def test_three_point_dense_oracle():
    X = np.array([[0.1], [0.5], [0.9]])
    y = np.array([1.0, -0.5, 0.3])
    data = lvgp.TrainingSet(X, [0, 0, 0], y, [[0.0, 1.0]], 1)
    phi = np.array([2.0])
    m = lvgp.condition(data, phi, np.zeros((1, 2)))
    x_new = 0.3
    ppm = augment(m, [x_new], 0)

    Xa = np.append(X[:, 0], x_new)
    ys = (y - y.mean()) / y.std()
    R = np.exp(-phi[0] * (X[:, 0, None] - X[None, :, 0]) ** 2) + m.jitter * np.eye(3)
    r = np.exp(-phi[0] * (X[:, 0] - x_new) ** 2)
    mu0 = np.ones(3) @ np.linalg.solve(R, ys) / (np.ones(3) @ np.linalg.solve(R, np.ones(3)))
    y_b = mu0 + r @ np.linalg.solve(R, ys - mu0)
    Ra = np.exp(-phi[0] * (Xa[:, None] - Xa[None, :]) ** 2) + m.jitter * np.eye(4)
    ya = np.append(ys, y_b)
    Ri = np.linalg.inv(Ra)
    one = np.ones(4)
    mu = one @ Ri @ ya / (one @ Ri @ one)
    s2 = (ya - mu) @ Ri @ (ya - mu) / 4
    assert ppm.mu_new == pytest.approx(mu, abs=1e-10)
    assert ppm.sigma2_new == pytest.approx(s2, abs=1e-10)


def test_duplicate_candidate_keeps_sigma2(simple1d_model):
    m = simple1d_model
    x, s = m.data.inputs[3], int(m.data.sources[3])
    ppm = augment(m, x, s, divisor="current")
    assert ppm.sigma2_new == pytest.approx(m.sigma2_hat, rel=1e-3)


def test_self_query_has_no_variance(simple1d_model):
    m = simple1d_model
    ppm = augment(m, [0.77], 0)
    assert preposterior_variance(ppm, [0.77], 0) < 1e-6 * m.sigma2_original()


def test_structural_term_shrinks(sasena_model):
    m = sasena_model
    probes = 10 * qmc.Sobol(1, seed=5).random_base2(7)[:100]
    U = m.normalization.to_unit(probes)
    for x_next, s_next in [([3.3], 1), ([7.1], 0), ([9.9], 2)]:
        ppm = augment(m, x_next, s_next)
        for s in range(m.n_sources):
            before = 1.0 - np.sum(half_solve(m.factored, m.cross_correlation(U, s)) ** 2, axis=0)
            after = structural_term(ppm, U, s)
            assert np.all(after <= before + 1e-12)


def test_deterministic(simple1d_model):
    X = np.linspace(-2, 3, 7)[:, None]
    a = preposterior_variance_many(augment(simple1d_model, [0.2], 1), X, 0)
    b = preposterior_variance_many(augment(simple1d_model, [0.2], 1), X, 0)
    assert np.array_equal(a, b)


def test_out_of_bounds_candidate(simple1d_model):
    with pytest.raises(InvalidInputError):
        augment(simple1d_model, [4.0], 0)


def test_rank_one_scorer_matches_augment(sasena_model):
    m = sasena_model
    x_star = np.array([6.2])
    u_star = m.normalization.to_unit(x_star)
    X = np.linspace(0, 10, 13)[:, None]
    for s in range(m.n_sources):
        s_old, s_new = batch_structural_terms(m, u_star, m.normalization.to_unit(X), s)
        ref = [structural_term(augment(m, x, s), u_star[None, :], 0)[0] for x in X]
        assert np.allclose(s_new, ref, rtol=1e-8, atol=1e-12)


def test_rank_one_gradient(sasena_model):
    m = sasena_model
    scorer = CandidateScorer(m, [0.55], 1)
    u = np.array([0.41])
    _, g = scorer.value_and_grad(u)
    h = 1e-6
    fd = (scorer(u[None] + h)[0] - scorer(u[None] - h)[0]) / (2 * h)
    assert g[0] == pytest.approx(fd, rel=1e-5, abs=1e-10)
