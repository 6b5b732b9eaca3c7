"""Bounded multi-start maximization on the unit cube."""

from __future__ import annotations

import warnings

import numpy as np
from scipy.optimize import minimize
from scipy.stats import qmc


def sobol_unit(n: int, q: int, seed) -> np.ndarray:
    """First ``n`` points of a scrambled Sobol sequence in ``[0, 1]^q``."""
    sob = qmc.Sobol(q, scramble=True, rng=np.random.default_rng(seed))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        return sob.random(n)


def default_candidates(q: int) -> int:
    return int(min(128 + 64 * q, 1024))


def _masked(fn, exclude, radius):
    if exclude is None or len(exclude) == 0:
        return fn
    ex = np.atleast_2d(exclude)

    def wrapped(U):
        vals = np.asarray(fn(U), dtype=float).copy()
        d = np.sqrt(((U[:, None, :] - ex[None, :, :]) ** 2).sum(-1)).min(axis=1)
        vals[d < radius] = -np.inf
        return vals

    return wrapped


def multistart_maximize(fn, q: int, seed, n_candidates=None, n_polish: int = 4,
                        extra=None, exclude=None, exclude_radius: float = 1e-6, value_and_grad=None):
    """Maximize a vectorized ``fn(U) -> values`` over the unit cube.

    A Sobol screen (plus any ``extra`` starts) ranks candidates; the best
    ``n_polish`` distinct ones are refined with bounded L-BFGS-B, using
    ``value_and_grad(u) -> (value, gradient)`` when given and finite
    differences otherwise.  Points within ``exclude_radius`` of ``exclude``
    rows score ``-inf``.

    Returns ``(u_best, value_best)``.
    """
    ex = None if exclude is None or len(exclude) == 0 else np.atleast_2d(exclude)
    fn = _masked(fn, exclude, exclude_radius)
    n_candidates = default_candidates(q) if n_candidates is None else n_candidates
    U = sobol_unit(n_candidates, q, seed)
    if extra is not None and len(extra):
        U = np.vstack([np.clip(np.atleast_2d(extra), 0.0, 1.0), U])
    vals = fn(U)
    order = np.argsort(-vals, kind="stable")
    best_u, best_v = U[order[0]].copy(), float(vals[order[0]])

    starts = []
    for idx in order:
        if not np.isfinite(vals[idx]) or len(starts) >= n_polish:
            break
        if all(np.max(np.abs(U[idx] - s)) > 1e-3 for s in starts):
            starts.append(U[idx])

    def neg(u):
        v = fn(u.reshape(1, -1))[0]
        return -v if np.isfinite(v) else 1e300

    def neg_grad(u):
        if ex is not None and np.min(np.linalg.norm(ex - u, axis=1)) < exclude_radius:
            return 1e300, np.zeros(q)
        v, g = value_and_grad(u)
        return -v, -np.asarray(g, dtype=float)

    for u0 in starts:
        if value_and_grad is None:
            res = minimize(neg, u0, method="L-BFGS-B", bounds=[(0.0, 1.0)] * q,
                           options={"maxiter": 200, "ftol": 1e-14, "gtol": 1e-12})
        else:
            res = minimize(neg_grad, u0, jac=True, method="L-BFGS-B", bounds=[(0.0, 1.0)] * q,
                           options={"maxiter": 200, "ftol": 1e-14, "gtol": 1e-12})
        # re-score through the vectorized path so values stay comparable
        v = float(fn(np.clip(res.x, 0.0, 1.0).reshape(1, -1))[0])
        if v > best_v:
            best_u, best_v = np.clip(res.x, 0.0, 1.0), v
    return best_u, best_v
