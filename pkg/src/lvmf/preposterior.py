"""
Kriging-believer pre-posterior analysis.

A candidate sample ``w = (x_next, s_next)`` is appended to the training set
with its current predicted mean as a noiseless observation.  Kernel
hyperparameters (scale factors and latent coordinates) stay frozen; only the
correlation matrix, the constant mean and the process variance are updated.
The result answers "how uncertain would the model be at ``x~`` if we sampled
``w`` next?" without querying any source.

Process-variance divisor
------------------------
``divisor="augmented"`` divides the quadratic form by ``n + 1``, the size of
the augmented set; this reproduces literally refitting with frozen
hyperparameters.  ``divisor="current"`` keeps the original ``n``.  Because the
believed value equals the current prediction, the quadratic form is
unchanged by the augmentation, so the ``"current"`` variant leaves
``sigma2_new == sigma2_hat`` and the ``"augmented"`` variant scales it by
``n / (n + 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidInputError
from .kernel import FactoredCorrelation, factor_matrix, half_solve, solve
from .lvgp import FittedLVGP, check_in_bounds

DIVISORS = ("augmented", "current")


@dataclass(frozen=True, eq=False)
class PrePosteriorModel:
    base: FittedLVGP
    x_next: np.ndarray
    s_next: int
    believed_y: float
    augmented_factor: FactoredCorrelation
    mu_new: float
    sigma2_new: float
    divisor: str = "augmented"

    @property
    def phi(self) -> np.ndarray:
        return self.base.phi

    @property
    def latent(self) -> np.ndarray:
        return self.base.latent


def _augmented_factor(base: FittedLVGP, k: np.ndarray) -> FactoredCorrelation:
    """Append one row/column to the base Cholesky factor.

    Falls back to refactoring the full matrix when the Schur complement is
    not safely positive (exact duplicates with zero jitter).
    """
    fc = base.factored
    jit = fc.jitter
    g = half_solve(fc, k)
    d = 1.0 + jit - g @ g
    n = fc.n
    if d > 1e-3 * jit and d > 0:
        lower = np.zeros((n + 1, n + 1))
        lower[:n, :n] = fc.lower
        lower[n, :n] = g
        lower[n, n] = np.sqrt(d)
        return FactoredCorrelation(lower, jit, fc.log_det + float(np.log(d)))
    R = np.empty((n + 1, n + 1))
    R[:n, :n] = fc.matrix() - jit * np.eye(n)
    R[n, :n] = R[:n, n] = k
    R[n, n] = 1.0
    return factor_matrix(R, jit)


def augment(model: FittedLVGP, x_next, s_next: int, divisor: str = "augmented") -> PrePosteriorModel:
    """Pre-posterior model after believing ``(x_next, s_next)``."""
    if divisor not in DIVISORS:
        raise InvalidInputError(f"divisor must be one of {DIVISORS}")
    if model.constant:
        raise InvalidInputError("pre-posterior analysis needs a non-constant model")
    x_next = np.asarray(x_next, dtype=float).ravel()
    check_in_bounds(x_next, model.data.bounds)
    s_next = int(s_next)
    believed = model.predict(x_next, s_next).mean

    nz = model.normalization
    u_next = nz.to_unit(x_next).reshape(1, -1)
    k = model.cross_correlation(u_next, s_next)[:, 0]
    fc = _augmented_factor(model, k)

    y_aug = np.append(model.y_std, (believed - nz.y_mean) / nz.y_scale)
    ones = np.ones(y_aug.size)
    u = solve(fc, ones)
    v = solve(fc, y_aug)
    mu_new = float(ones @ v / (ones @ u))
    resid = y_aug - mu_new
    quad = float(resid @ solve(fc, resid))
    n_div = y_aug.size if divisor == "augmented" else y_aug.size - 1
    return PrePosteriorModel(
        base=model, x_next=x_next, s_next=s_next, believed_y=believed,
        augmented_factor=fc, mu_new=mu_new, sigma2_new=quad / n_div, divisor=divisor,
    )


def structural_term(ppm: PrePosteriorModel, U, s) -> np.ndarray:
    """``1 - r~ R_new^-1 r~^T`` at unit-space queries (before scaling by sigma2)."""
    base = ppm.base
    U = np.atleast_2d(U)
    r_train = base.cross_correlation(U, s)
    u_next = base.normalization.to_unit(ppm.x_next).reshape(1, -1)
    z_next = base.latent[ppm.s_next]
    zq = base.latent[np.broadcast_to(np.asarray(s, dtype=int), (U.shape[0],))]
    dx = U - u_next
    dz = zq - z_next
    r_next = np.exp(-(dx * dx) @ base.phi - np.einsum("ij,ij->i", dz, dz))
    h = half_solve(ppm.augmented_factor, np.vstack([r_train, r_next]))
    return 1.0 - np.einsum("ij,ij->j", h, h)


def preposterior_variance_many(ppm: PrePosteriorModel, X, s) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    check_in_bounds(X, ppm.base.data.bounds)
    U = ppm.base.normalization.to_unit(X)
    var = ppm.sigma2_new * structural_term(ppm, U, s)
    return np.maximum(var, 0.0) * ppm.base.normalization.y_scale**2


def preposterior_variance(ppm: PrePosteriorModel, x_tilde, s_tilde: int) -> float:
    """Predictive variance at ``(x_tilde, s_tilde)`` in original units."""
    x = np.asarray(x_tilde, dtype=float).reshape(1, -1)
    return float(preposterior_variance_many(ppm, x, s_tilde)[0])


def variance_ratio(n: int, divisor: str) -> float:
    """``sigma2_new / sigma2_hat`` under the believer (see module docstring)."""
    return n / (n + 1.0) if divisor == "augmented" else 1.0


class CandidateScorer:
    """Pre-posterior structural term at a fixed query for candidates of one source.

    With ``k`` the candidate's correlation to the training rows, ``a =
    R^-1 r*`` and ``c = r(cand, query) - k.a``, the rank-one update of the
    augmented factor gives

        s_new = s_old - c^2 / (1 + jitter - k R^-1 k).

    ``__call__`` is vectorized over candidates; ``value_and_grad`` returns
    the derivative w.r.t. one candidate location as well.
    """

    def __init__(self, model: FittedLVGP, u_star, s_cand: int, s_star=None):
        s_star = model.hf_label if s_star is None else s_star
        self.model = model
        self.u_star = np.asarray(u_star, dtype=float).ravel()
        self.s_cand = int(s_cand)
        fc = model.factored
        r_star = model.cross_correlation(self.u_star[None, :], s_star)[:, 0]
        self.h = half_solve(fc, r_star)
        self.a = solve(fc, r_star)
        self.s_old = float(1.0 - self.h @ self.h)
        dz = model.latent[self.s_cand] - model.latent[s_star]
        self.z_term = float(np.exp(-dz @ dz))
        self.d_floor = 1e-3 * fc.jitter

    def __call__(self, U) -> np.ndarray:
        model = self.model
        U = np.atleast_2d(U)
        K = model.cross_correlation(U, self.s_cand)
        G = half_solve(model.factored, K)
        d = np.maximum(1.0 + model.factored.jitter - np.einsum("ij,ij->j", G, G), self.d_floor)
        dx = U - self.u_star
        r_cs = np.exp(-(dx * dx) @ model.phi) * self.z_term
        c = r_cs - G.T @ self.h
        return self.s_old - c**2 / d

    def value_and_grad(self, u):
        model = self.model
        u = np.asarray(u, dtype=float).ravel()
        k = model.cross_correlation(u[None, :], self.s_cand)[:, 0]
        dk = -2.0 * (u - model.x_unit) * model.phi * k[:, None]
        b = solve(model.factored, k)
        d = 1.0 + model.factored.jitter - k @ b
        dd = -2.0 * (dk.T @ b)
        if d < self.d_floor:
            d, dd = self.d_floor, np.zeros_like(dd)
        dx = u - self.u_star
        r_cs = np.exp(-(dx * dx) @ model.phi) * self.z_term
        dr = -2.0 * model.phi * dx * r_cs
        c = r_cs - k @ self.a
        dc = dr - dk.T @ self.a
        s_new = self.s_old - c * c / d
        grad = -2.0 * c * dc / d + c * c * dd / (d * d)
        return float(s_new), grad


def batch_structural_terms(model: FittedLVGP, u_star, U_cand, s_cand, s_star=None):
    """Current and pre-posterior structural terms at one query for many candidates.

    Uses the rank-one update of the augmented factor, so each candidate costs
    one triangular solve.  Returns ``(s_old, s_new)`` where ``s_old`` is a
    scalar and ``s_new`` has one entry per candidate.
    """
    scorer = CandidateScorer(model, u_star, s_cand, s_star)
    return scorer.s_old, scorer(U_cand)
