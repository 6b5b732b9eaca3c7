"""
Multi-fidelity latent-variable Gaussian process.

The fidelity label of each observation is treated as a qualitative input and
mapped to a learned point in a 2D latent space.  A single Gaussian process
with constant mean is then fitted over ``(x, z(source))``.  Sources that
behave alike end up close together; the latent distance to the
high-fidelity source is the learned measure of how informative a source is.

Inputs are mapped affinely to the unit cube using the problem bounds and
outputs are standardized, so every quantity stored on a fitted model
(``mu_hat``, ``sigma2_hat``, ``alpha``) lives in standardized units.
``predict`` maps back to original units.

Hyperparameters are estimated by maximizing the profile log-likelihood

    l(phi, z) = -n log(sigma2_hat) - log|R|

with ``mu_hat`` and ``sigma2_hat`` in closed form.  The search runs in
``theta = (log phi, free latent coordinates)``: source 0 is pinned to the
origin and source 1 to the non-negative first axis, which removes the
rotation/translation invariance of the latent map.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.stats import qmc

from .exceptions import IllConditionedError, InvalidInputError
from .kernel import (
    BASE_JITTER,
    LATENT_DIM,
    FactoredCorrelation,
    correlation_matrix,
    factor_matrix,
    half_solve,
    jitter_ladder,
    solve,
)

log = logging.getLogger(__name__)

_BOUND_TOL = 1e-9
_CONSTANT_STD = 1e-12


@dataclass(frozen=True)
class TrainingSet:
    """Observations ``(x, source, y)`` in original units.

    Source labels are integers ``0 .. n_sources - 1``; ``hf_label`` marks the
    high-fidelity source.
    """

    inputs: np.ndarray
    sources: np.ndarray
    outputs: np.ndarray
    bounds: np.ndarray
    n_sources: int
    hf_label: int = 0

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        s = np.asarray(self.sources, dtype=int).ravel()
        y = np.asarray(self.outputs, dtype=float).ravel()
        b = np.atleast_2d(np.asarray(self.bounds, dtype=float))
        if b.shape != (X.shape[1], 2):
            raise InvalidInputError(f"bounds must be ({X.shape[1]}, 2), got {b.shape}")
        if np.any(b[:, 1] <= b[:, 0]):
            raise InvalidInputError("every upper bound must exceed its lower bound")
        if not (X.shape[0] == s.size == y.size):
            raise InvalidInputError("inputs, sources and outputs disagree in length")
        if X.shape[0] < 2:
            raise InvalidInputError("a training set needs at least 2 rows")
        if self.n_sources < 1 or not (0 <= self.hf_label < self.n_sources):
            raise InvalidInputError("hf_label must be one of the declared sources")
        if np.any(s < 0) or np.any(s >= self.n_sources):
            raise InvalidInputError(f"source labels must lie in 0..{self.n_sources - 1}")
        if not np.all(np.isfinite(X)) or not np.all(np.isfinite(y)):
            raise InvalidInputError("non-finite inputs or outputs")
        check_in_bounds(X, b)
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "sources", s)
        object.__setattr__(self, "outputs", y)
        object.__setattr__(self, "bounds", b)

    @property
    def n(self) -> int:
        return self.outputs.size

    @property
    def q(self) -> int:
        return self.inputs.shape[1]

    def append(self, x, source: int, y: float) -> "TrainingSet":
        return replace(
            self,
            inputs=np.vstack([self.inputs, np.asarray(x, dtype=float).reshape(1, -1)]),
            sources=np.append(self.sources, int(source)),
            outputs=np.append(self.outputs, float(y)),
        )

    def rows_of(self, source: int):
        mask = self.sources == source
        return self.inputs[mask], self.outputs[mask]

    def counts(self) -> list[int]:
        return np.bincount(self.sources, minlength=self.n_sources).tolist()

    def to_dict(self) -> dict:
        return {
            "inputs": self.inputs.tolist(),
            "sources": self.sources.tolist(),
            "outputs": self.outputs.tolist(),
            "bounds": self.bounds.tolist(),
            "n_sources": self.n_sources,
            "hf_label": self.hf_label,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingSet":
        return cls(
            inputs=np.asarray(d["inputs"], dtype=float),
            sources=np.asarray(d["sources"], dtype=int),
            outputs=np.asarray(d["outputs"], dtype=float),
            bounds=np.asarray(d["bounds"], dtype=float),
            n_sources=int(d["n_sources"]),
            hf_label=int(d.get("hf_label", 0)),
        )


def check_in_bounds(X, bounds) -> None:
    X = np.atleast_2d(X)
    bounds = np.asarray(bounds, dtype=float)
    span = bounds[:, 1] - bounds[:, 0]
    tol = _BOUND_TOL * np.maximum(span, 1.0)
    if np.any(X < bounds[:, 0] - tol) or np.any(X > bounds[:, 1] + tol):
        raise InvalidInputError("input lies outside the design bounds")


@dataclass(frozen=True)
class FitConfig:
    """Settings for the maximum-likelihood search."""

    n_restarts: int = 8
    log_phi_bounds: tuple = (-6.0, 6.0)
    latent_bound: float = 3.0
    jitter: float = BASE_JITTER
    maxiter: int = 500
    gtol: float = 1e-8
    warm_start: bool = True


@dataclass(frozen=True)
class Normalization:
    lower: np.ndarray
    upper: np.ndarray
    y_mean: float
    y_scale: float

    def to_unit(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.lower) / (self.upper - self.lower)

    def from_unit(self, U) -> np.ndarray:
        return self.lower + np.asarray(U, dtype=float) * (self.upper - self.lower)


@dataclass(frozen=True)
class Prediction:
    mean: float
    variance: float


@dataclass(frozen=True, eq=False)
class FittedLVGP:
    phi: np.ndarray
    latent: np.ndarray
    mu_hat: float
    sigma2_hat: float
    factored: Optional[FactoredCorrelation]
    normalization: Normalization
    log_likelihood: float
    data: TrainingSet
    x_unit: np.ndarray
    y_std: np.ndarray
    alpha: np.ndarray
    theta: np.ndarray
    restart_log_likelihoods: tuple = ()
    constant: bool = False

    @property
    def n_sources(self) -> int:
        return self.data.n_sources

    @property
    def hf_label(self) -> int:
        return self.data.hf_label

    @property
    def q(self) -> int:
        return self.data.q

    @property
    def jitter(self) -> float:
        return self.factored.jitter if self.factored is not None else 0.0

    @property
    def z_train(self) -> np.ndarray:
        return self.latent[self.data.sources]

    def _latent_rows(self, s, m: int) -> np.ndarray:
        s = np.broadcast_to(np.asarray(s, dtype=int), (m,))
        if np.any(s < 0) or np.any(s >= self.n_sources):
            raise InvalidInputError(f"unknown source label in {np.unique(s)}")
        return self.latent[s]

    def cross_correlation(self, U, s) -> np.ndarray:
        """Correlation between training rows and unit-space queries, (n, m)."""
        U = np.atleast_2d(U)
        Zq = self._latent_rows(s, U.shape[0])
        return correlation_matrix(self.x_unit, self.z_train, U, Zq, self.phi)

    def predict_std(self, U, s):
        """Mean and variance in standardized units at unit-space queries."""
        U = np.atleast_2d(np.asarray(U, dtype=float))
        m = U.shape[0]
        if self.constant:
            return np.full(m, self.mu_hat), np.zeros(m)
        r = self.cross_correlation(U, s)
        mean = self.mu_hat + r.T @ self.alpha
        h = half_solve(self.factored, r)
        var = self.sigma2_hat * (1.0 - np.einsum("ij,ij->j", h, h))
        return mean, np.maximum(var, 0.0)

    def predict_std_grad(self, u, s: int):
        """Standardized mean and variance at one unit-space point, with gradients.

        Returns ``(mean, var, dmean, dvar)``; the gradients are w.r.t. ``u``.
        """
        u = np.asarray(u, dtype=float).ravel()
        if self.constant:
            z = np.zeros(self.q)
            return self.mu_hat, 0.0, z, z.copy()
        k = self.cross_correlation(u[None, :], s)[:, 0]
        dk = -2.0 * (u - self.x_unit) * self.phi * k[:, None]
        b = solve(self.factored, k)
        mean = self.mu_hat + k @ self.alpha
        var = self.sigma2_hat * (1.0 - k @ b)
        dvar = -2.0 * self.sigma2_hat * (dk.T @ b)
        if var <= 0:
            var, dvar = 0.0, np.zeros(self.q)
        return float(mean), float(var), dk.T @ self.alpha, dvar

    def predict_many(self, X, s):
        """Vectorized prediction in original units; returns (mean, variance)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.q:
            raise InvalidInputError(f"expected {self.q} inputs, got {X.shape[1]}")
        check_in_bounds(X, self.data.bounds)
        mean, var = self.predict_std(self.normalization.to_unit(X), s)
        nz = self.normalization
        return nz.y_mean + nz.y_scale * mean, nz.y_scale**2 * var

    def predict(self, x, s: int) -> Prediction:
        mean, var = self.predict_many(np.asarray(x, dtype=float).reshape(1, -1), s)
        return Prediction(float(mean[0]), float(var[0]))

    def sigma2_original(self) -> float:
        return self.sigma2_hat * self.normalization.y_scale**2

    def mu_original(self) -> float:
        return self.normalization.y_mean + self.normalization.y_scale * self.mu_hat

    def latent_positions(self) -> np.ndarray:
        """Anchored ``(L, 2)`` latent coordinates; row ``i`` is source ``i``.

        Empty when only one source is modelled.
        """
        if self.n_sources < 2:
            return np.zeros((0, LATENT_DIM))
        return self.latent.copy()

    def latent_distance(self, a: int, b: int) -> float:
        return float(np.linalg.norm(self.latent[a] - self.latent[b]))

    def distances_to_hf(self) -> list[float]:
        return [self.latent_distance(self.hf_label, j) for j in range(self.n_sources)]

    def to_dict(self) -> dict:
        return {
            "phi": self.phi.tolist(),
            "latent": self.latent.tolist(),
            "mu_hat": self.mu_hat,
            "sigma2_hat": self.sigma2_hat,
            "jitter": self.jitter,
            "log_likelihood": self.log_likelihood,
            "normalization": {
                "lower": self.normalization.lower.tolist(),
                "upper": self.normalization.upper.tolist(),
                "y_mean": self.normalization.y_mean,
                "y_scale": self.normalization.y_scale,
            },
            "theta": self.theta.tolist(),
            "constant": self.constant,
            "data": self.data.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedLVGP":
        data = TrainingSet.from_dict(d["data"])
        model = condition(data, np.asarray(d["phi"]), np.asarray(d["latent"]), jitter=d["jitter"])
        return replace(model, theta=np.asarray(d["theta"], dtype=float))


def predict(model: FittedLVGP, x, s: int) -> Prediction:
    return model.predict(x, s)


def latent_positions(model: FittedLVGP) -> np.ndarray:
    return model.latent_positions()


def latent_distance(model: FittedLVGP, a: int, b: int) -> float:
    return model.latent_distance(a, b)


# ---------------------------------------------------------------------------
# parameter packing
# ---------------------------------------------------------------------------


def n_latent_params(n_sources: int) -> int:
    return 0 if n_sources < 2 else 2 * n_sources - 3


def unpack_theta(theta, q: int, n_sources: int):
    theta = np.asarray(theta, dtype=float)
    phi = np.exp(theta[:q])
    latent = np.zeros((n_sources, LATENT_DIM))
    if n_sources >= 2:
        latent[1, 0] = theta[q]
        latent[2:] = theta[q + 1 :].reshape(n_sources - 2, LATENT_DIM)
    return phi, latent


def pack_theta(phi, latent) -> np.ndarray:
    latent = np.asarray(latent, dtype=float)
    parts = [np.log(np.asarray(phi, dtype=float))]
    if latent.shape[0] >= 2:
        parts.append([latent[1, 0]])
        parts.append(latent[2:].ravel())
    return np.concatenate(parts)


def theta_bounds(q: int, n_sources: int, config: FitConfig):
    lo, hi = config.log_phi_bounds
    b = config.latent_bound
    bounds = [(lo, hi)] * q
    if n_sources >= 2:
        bounds.append((0.0, b))
        bounds.extend([(-b, b)] * (2 * (n_sources - 2)))
    return bounds


# ---------------------------------------------------------------------------
# profile likelihood
# ---------------------------------------------------------------------------


@dataclass
class _Profile:
    factored: FactoredCorrelation
    R: np.ndarray
    mu: float
    sigma2: float
    alpha: np.ndarray
    log_likelihood: float


class ProfileLikelihood:
    """Profile log-likelihood of a standardized training set and its gradient.

    Pairwise squared differences are cached so each evaluation costs one
    Cholesky factorization plus O(q n^2) work.
    """

    def __init__(self, x_unit, sources, y_std, n_sources: int, jitter: float = BASE_JITTER):
        self.x_unit = np.asarray(x_unit, dtype=float)
        self.sources = np.asarray(sources, dtype=int)
        self.y = np.asarray(y_std, dtype=float)
        self.n, self.q = self.x_unit.shape
        self.n_sources = n_sources
        self.jitter = jitter
        diff = self.x_unit[:, None, :] - self.x_unit[None, :, :]
        self.D = np.ascontiguousarray(np.moveaxis(diff * diff, 2, 0))
        self.onehot = np.eye(n_sources)[self.sources]

    def correlation(self, phi, latent) -> np.ndarray:
        E = np.tensordot(phi, self.D, axes=1)
        z = latent[self.sources]
        dz = z[:, None, :] - z[None, :, :]
        return np.exp(-E - np.einsum("ijk,ijk->ij", dz, dz))

    def profile(self, phi, latent) -> _Profile:
        R = self.correlation(phi, latent)
        fc = factor_matrix(R, self.jitter)
        ones = np.ones(self.n)
        u = solve(fc, ones)
        v = solve(fc, self.y)
        mu = float(ones @ v / (ones @ u))
        alpha = v - mu * u
        resid = self.y - mu
        sigma2 = float(resid @ alpha / self.n)
        sigma2 = max(sigma2, np.finfo(float).tiny)
        ll = -self.n * np.log(sigma2) - fc.log_det
        return _Profile(fc, R, mu, sigma2, alpha, float(ll))

    def value(self, theta) -> float:
        phi, latent = unpack_theta(theta, self.q, self.n_sources)
        try:
            return self.profile(phi, latent).log_likelihood
        except IllConditionedError:
            return -np.inf

    def value_and_grad(self, theta):
        phi, latent = unpack_theta(theta, self.q, self.n_sources)
        p = self.profile(phi, latent)
        Rinv = solve(p.factored, np.eye(self.n))
        W = np.outer(p.alpha, p.alpha) / p.sigma2 - Rinv
        M = W * p.R
        grad = [-phi * np.tensordot(self.D, M, axes=([1, 2], [0, 1]))]
        if self.n_sources >= 2:
            S = self.onehot.T @ M @ self.onehot
            # d l / d z_m = -4 sum_k S[m, k] (z_m - z_k)
            gz = -4.0 * (S.sum(axis=1)[:, None] * latent - S @ latent)
            grad.append([gz[1, 0]])
            grad.append(gz[2:].ravel())
        return p.log_likelihood, np.concatenate(grad)

    def negative(self, theta):
        try:
            ll, g = self.value_and_grad(theta)
        except IllConditionedError:
            return 1e12, np.zeros_like(theta)
        return -ll, -g


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


def _normalize(data: TrainingSet) -> Normalization:
    y = data.outputs
    scale = float(np.std(y))
    mean = float(np.mean(y))
    if scale < _CONSTANT_STD:
        scale = 1.0
    return Normalization(data.bounds[:, 0].copy(), data.bounds[:, 1].copy(), mean, scale)


def condition(data: TrainingSet, phi, latent, jitter: float = BASE_JITTER, log_likelihoods=()) -> FittedLVGP:
    """Build a model with fixed hyperparameters (closed-form mean/variance only).

    This is the frozen-hyperparameter refit: only ``mu_hat``, ``sigma2_hat``
    and the factorization depend on the data.
    """
    nz = _normalize(data)
    U = nz.to_unit(data.inputs)
    y_std = (data.outputs - nz.y_mean) / nz.y_scale
    phi = np.asarray(phi, dtype=float)
    latent = np.asarray(latent, dtype=float).reshape(data.n_sources, LATENT_DIM)
    theta = pack_theta(phi, latent)
    if np.std(data.outputs) < _CONSTANT_STD:
        return FittedLVGP(
            phi=phi, latent=latent, mu_hat=0.0, sigma2_hat=0.0, factored=None,
            normalization=nz, log_likelihood=float("nan"), data=data, x_unit=U,
            y_std=y_std, alpha=np.zeros(data.n), theta=theta,
            restart_log_likelihoods=tuple(log_likelihoods), constant=True,
        )
    obj = ProfileLikelihood(U, data.sources, y_std, data.n_sources, jitter)
    p = obj.profile(phi, latent)
    return FittedLVGP(
        phi=phi, latent=latent, mu_hat=p.mu, sigma2_hat=p.sigma2, factored=p.factored,
        normalization=nz, log_likelihood=p.log_likelihood, data=data, x_unit=U,
        y_std=y_std, alpha=p.alpha, theta=theta,
        restart_log_likelihoods=tuple(log_likelihoods),
    )


def _restart_points(q, n_sources, config: FitConfig, seed, warm_start):
    bounds = np.array(theta_bounds(q, n_sources, config))
    dim = bounds.shape[0]
    starts = [np.clip(np.zeros(dim), bounds[:, 0], bounds[:, 1])]
    n_random = max(config.n_restarts - 1, 0)
    if n_random:
        sob = qmc.Sobol(dim, scramble=True, rng=np.random.default_rng(seed))
        u = sob.random_base2(int(np.ceil(np.log2(n_random))))[:n_random]
        starts.extend(bounds[:, 0] + u * (bounds[:, 1] - bounds[:, 0]))
    if warm_start is not None and config.warm_start:
        starts.append(np.clip(np.asarray(warm_start, dtype=float), bounds[:, 0], bounds[:, 1]))
    return starts, [tuple(b) for b in bounds]


def fit(data: TrainingSet, config: FitConfig = FitConfig(), seed=None, warm_start=None) -> FittedLVGP:
    """Maximum-likelihood fit over all restarts; returns the best one.

    ``warm_start`` is a previous ``theta`` (e.g. the model before the last
    infill) used as one extra restart.
    """
    if data.n < 2:
        raise InvalidInputError("need at least 2 observations")
    nz = _normalize(data)
    q, L = data.q, data.n_sources
    if np.std(data.outputs) < _CONSTANT_STD:
        return condition(data, np.ones(q), np.zeros((L, LATENT_DIM)), config.jitter)
    U = nz.to_unit(data.inputs)
    y_std = (data.outputs - nz.y_mean) / nz.y_scale
    obj = ProfileLikelihood(U, data.sources, y_std, L, config.jitter)
    starts, bounds = _restart_points(q, L, config, seed, warm_start)

    best_theta, best_ll, lls = None, -np.inf, []
    for x0 in starts:
        try:
            res = minimize(
                obj.negative, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                options={"maxiter": config.maxiter, "gtol": config.gtol, "ftol": 1e-15},
            )
        except (ValueError, FloatingPointError) as exc:
            log.debug("restart from %s failed: %s", x0, exc)
            lls.append(-np.inf)
            continue
        ll = obj.value(res.x)
        lls.append(ll)
        if ll > best_ll:
            best_ll, best_theta = ll, res.x
    if best_theta is None or not np.isfinite(best_ll):
        raise IllConditionedError(
            "every likelihood restart failed to factor the correlation matrix",
            jitter_ladder(config.jitter),
        )
    phi, latent = unpack_theta(best_theta, q, L)
    model = condition(data, phi, latent, config.jitter, log_likelihoods=lls)
    return replace(model, theta=np.asarray(best_theta, dtype=float))
