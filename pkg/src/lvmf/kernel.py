"""
Gaussian correlation over quantitative inputs and 2D latent coordinates.

Every point handled by the surrogate is mapped to ``h = (x, z)`` where ``x``
holds the normalized quantitative inputs and ``z`` the latent coordinates of
the point's fidelity source.  The correlation is

    r(h, h') = exp(-sum_i phi_i (x_i - x'_i)^2 - ||z - z'||^2)

Latent coordinates enter with unit scale; their spread is learned instead.

Correlation matrices are factored with a Cholesky decomposition after adding a
small diagonal jitter.  If the factorization fails the jitter is raised by a
factor of ten until ``MAX_JITTER`` is exceeded.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .exceptions import IllConditionedError, InvalidInputError

LATENT_DIM = 2
BASE_JITTER = 1e-8
MAX_JITTER = 1e-4


@dataclass(frozen=True)
class MappedPoint:
    x: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.atleast_1d(np.asarray(self.x, dtype=float)))
        object.__setattr__(self, "z", np.atleast_1d(np.asarray(self.z, dtype=float)))
        if self.z.shape != (LATENT_DIM,):
            raise InvalidInputError(f"latent vector must have length {LATENT_DIM}, got {self.z.shape}")


@dataclass(frozen=True)
class KernelParams:
    phi: np.ndarray
    jitter: float = BASE_JITTER

    def __post_init__(self):
        phi = np.atleast_1d(np.asarray(self.phi, dtype=float))
        if phi.ndim != 1 or np.any(phi <= 0) or not np.all(np.isfinite(phi)):
            raise InvalidInputError("scale factors phi must be finite and strictly positive")
        if not (0.0 <= self.jitter < 1.0):
            raise InvalidInputError(f"jitter must lie in [0, 1), got {self.jitter}")
        object.__setattr__(self, "phi", phi)


@dataclass(frozen=True)
class FactoredCorrelation:
    """Cholesky factor of ``R + jitter * I``.

    ``lower @ lower.T`` reproduces the jittered matrix; ``log_det`` is its
    log-determinant.
    """

    lower: np.ndarray
    jitter: float
    log_det: float

    @property
    def n(self) -> int:
        return self.lower.shape[0]

    def matrix(self) -> np.ndarray:
        return self.lower @ self.lower.T


def correlation(a: MappedPoint, b: MappedPoint, params: KernelParams) -> float:
    """Correlation between two mapped points; equals 1 iff they coincide."""
    if a.x.shape != b.x.shape or a.x.shape != params.phi.shape:
        # q = 0 is allowed: empty x and empty phi
        if not (a.x.size == b.x.size == params.phi.size == 0):
            raise InvalidInputError(
                f"dimension mismatch: x={a.x.shape}, x'={b.x.shape}, phi={params.phi.shape}"
            )
    dx = a.x - b.x
    dz = a.z - b.z
    return float(np.exp(-np.dot(params.phi, dx * dx) - np.dot(dz, dz)))


def correlation_matrix(xa, za, xb, zb, phi) -> np.ndarray:
    """Vectorized correlation between row sets ``(xa, za)`` and ``(xb, zb)``.

    ``xa`` is (m, q), ``za`` is (m, 2); likewise for ``b``.  Returns (m, p).
    """
    xa = np.asarray(xa, dtype=float)
    xb = np.asarray(xb, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if xa.shape[1] != phi.size or xb.shape[1] != phi.size:
        raise InvalidInputError(f"input width {xa.shape[1]}/{xb.shape[1]} does not match phi ({phi.size})")
    sx = np.sqrt(phi)
    ha = np.hstack([xa * sx, np.asarray(za, dtype=float)])
    hb = np.hstack([xb * sx, np.asarray(zb, dtype=float)])
    return np.exp(-_sqdist(ha, hb))


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # explicit differences keep exact zeros on the diagonal, unlike the
    # |a|^2 + |b|^2 - 2ab expansion
    d = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def jitter_ladder(start: float = BASE_JITTER) -> list[float]:
    ladder = [float(start)]
    if start <= 0:
        ladder.append(BASE_JITTER)
    while ladder[-1] * 10 <= MAX_JITTER * (1 + 1e-12):
        ladder.append(ladder[-1] * 10)
    return ladder


def factor_matrix(R: np.ndarray, jitter: float = BASE_JITTER) -> FactoredCorrelation:
    """Cholesky-factor a correlation matrix, escalating the jitter on failure."""
    R = np.asarray(R, dtype=float)
    if R.ndim != 2 or R.shape[0] != R.shape[1] or R.shape[0] == 0:
        raise InvalidInputError(f"expected a non-empty square matrix, got shape {R.shape}")
    ladder = jitter_ladder(jitter)
    eye = np.eye(R.shape[0])
    for jit in ladder:
        try:
            lower = np.linalg.cholesky(R + jit * eye)
        except np.linalg.LinAlgError:
            continue
        diag = np.diag(lower)
        if np.all(diag > 0) and np.all(np.isfinite(diag)):
            return FactoredCorrelation(lower, jit, float(2.0 * np.sum(np.log(diag))))
    raise IllConditionedError("correlation matrix is not positive definite", ladder)


def build_factored(points: Sequence[MappedPoint], params: KernelParams) -> FactoredCorrelation:
    if len(points) == 0:
        raise InvalidInputError("need at least one point")
    X = np.vstack([p.x.reshape(1, -1) for p in points])
    Z = np.vstack([p.z for p in points])
    R = correlation_matrix(X, Z, X, Z, params.phi)
    return factor_matrix(R, params.jitter)


def solve(fc: FactoredCorrelation, rhs) -> np.ndarray:
    """Apply ``(R + jitter I)^-1`` to ``rhs`` via two triangular solves."""
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape[0] != fc.n:
        raise InvalidInputError(f"rhs has {rhs.shape[0]} rows, matrix order is {fc.n}")
    return cho_solve((fc.lower, True), rhs, check_finite=False)


def half_solve(fc: FactoredCorrelation, rhs) -> np.ndarray:
    """``lower^-1 @ rhs``; squared column norms give ``r^T R^-1 r``."""
    return solve_triangular(fc.lower, rhs, lower=True, check_finite=False)
