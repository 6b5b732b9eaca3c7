"""
Comparison methods: recursive co-kriging with SERV infill, and MFCA.

Co-kriging follows the autoregressive recursion

    y_l(x) = rho_{l-1} * y_{l-1}(x) + delta_l(x)

over a fixed chain of sources ordered lowest to highest fidelity.  Each level
is a single-source GP (fitted with the same machinery as the multi-fidelity
model, with no latent variables) on the nested design of that level.

MFCA scores every (x, source) pair by a cost-scaled acquisition: the
exploration part of EI on low-fidelity sources, the plain improvement on the
high-fidelity source.  Outputs are minimized, so the improvement reads
``y*_HF - mu_HF(x)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm

from .exceptions import InvalidInputError
from .lvgp import FitConfig, FittedLVGP, TrainingSet, fit
from .optimize import multistart_maximize

log = logging.getLogger(__name__)

NEST_TOL = 1e-12


# ---------------------------------------------------------------------------
# co-kriging
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CoKrigingLevel:
    source: int
    rho: float
    gp: FittedLVGP


@dataclass(frozen=True, eq=False)
class CoKrigingModel:
    """Fitted recursive co-kriging chain (``levels[0]`` is the lowest fidelity)."""

    chain: tuple
    levels: tuple
    bounds: np.ndarray
    data: dict = field(default_factory=dict)

    def predict_levels(self, X):
        """Mean and variance of every level's predictor at ``X``.

        Returns two lists with one array per level; entry ``l`` is the
        predictor of source ``chain[l]``.
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        means, variances = [], []
        for k, lvl in enumerate(self.levels):
            m, v = lvl.gp.predict_many(X, 0)
            if k:
                m = lvl.rho * means[-1] + m
                v = lvl.rho**2 * variances[-1] + v
            means.append(m)
            variances.append(v)
        return means, variances

    def predict_many(self, X):
        m, v = self.predict_levels(X)
        return m[-1], v[-1]

    def discrepancy_variance(self, X, level: int) -> np.ndarray:
        return self.levels[level].gp.predict_many(np.atleast_2d(X), 0)[1]

    @property
    def rhos(self) -> list[float]:
        return [lvl.rho for lvl in self.levels[1:]]


def _is_subset(A, B, tol: float = NEST_TOL) -> bool:
    if len(A) == 0:
        return True
    if len(B) == 0:
        return False
    d = np.abs(A[:, None, :] - B[None, :, :]).max(axis=2)
    return bool(np.all(d.min(axis=1) <= tol))


def _match_rows(A, B, tol: float = NEST_TOL) -> np.ndarray:
    """Index into ``B`` of each row of ``A``."""
    d = np.abs(A[:, None, :] - B[None, :, :]).max(axis=2)
    return d.argmin(axis=1)


def check_nested(data: dict, chain: Sequence[int]) -> None:
    for lo, hi in zip(chain[:-1], chain[1:]):
        if not _is_subset(data[hi][0], data[lo][0]):
            raise InvalidInputError(f"design of source {hi} is not a subset of source {lo}")


def _single_source(X, y, bounds) -> TrainingSet:
    return TrainingSet(X, np.zeros(len(y), dtype=int), y, bounds, 1)


def estimate_rho(y_hi, y_lo_pred) -> float:
    """Least-squares scale of ``y_hi`` on ``y_lo_pred`` (with intercept)."""
    y_lo_pred = np.asarray(y_lo_pred, dtype=float)
    y_hi = np.asarray(y_hi, dtype=float)
    a = y_lo_pred - y_lo_pred.mean()
    denom = a @ a
    if denom <= 0:
        return 0.0
    return float(a @ (y_hi - y_hi.mean()) / denom)


def cokriging_fit(data: dict, chain: Sequence[int], bounds, config: FitConfig = FitConfig(), seed=None,
                  warm: Optional["CoKrigingModel"] = None) -> CoKrigingModel:
    """Fit the recursive chain.

    Parameters
    ----------
    data : dict
        ``source -> (X, y)`` in original units; designs must be nested along
        ``chain`` (every higher level a subset of every lower one).
    chain : sequence of int
        Source labels from lowest to highest fidelity.
    """
    chain = tuple(int(c) for c in chain)
    bounds = np.atleast_2d(np.asarray(bounds, dtype=float))
    data = {int(k): (np.atleast_2d(np.asarray(v[0], dtype=float)), np.asarray(v[1], dtype=float).ravel())
            for k, v in data.items()}
    check_nested(data, chain)
    rng = np.random.default_rng(seed)
    levels = []
    for k, src in enumerate(chain):
        X, y = data[src]
        if k == 0:
            rho, target = 1.0, y
        else:
            # nested design: the lower predictor interpolates its own
            # observations, so they stand in for it at X
            Xl, yl = data[chain[k - 1]]
            lower = yl[_match_rows(X, Xl)]
            rho = estimate_rho(y, lower)
            target = y - rho * lower
        ws = None if warm is None else warm.levels[k].gp.theta
        gp = fit(_single_source(X, target, bounds), config, seed=int(rng.integers(2**63)), warm_start=ws)
        levels.append(CoKrigingLevel(src, rho, gp))
    return CoKrigingModel(chain, tuple(levels), bounds, data)


@dataclass(frozen=True)
class ServResult:
    level: int
    source: int
    serv: tuple
    degenerate: bool


def serv_values(model: CoKrigingModel, x_next, costs: Sequence[float], rho_squared: bool = True) -> list[float]:
    """Scaled expected variance reduction per level at ``x_next``.

    Level 0 scores its own predictor variance.  Level ``l > 0`` scores
    ``rho^2 * s2_{l-1} + s2_delta_l`` (``rho`` unsquared when
    ``rho_squared=False``).  Each is divided by the cost of that level's source.
    """
    x = np.asarray(x_next, dtype=float).reshape(1, -1)
    _, var = model.predict_levels(x)
    out = []
    for k, lvl in enumerate(model.levels):
        if k == 0:
            v = var[0][0]
        else:
            r = lvl.rho**2 if rho_squared else lvl.rho
            v = r * var[k - 1][0] + model.discrepancy_variance(x, k)[0]
        out.append(float(v) / costs[lvl.source])
    return out


def serv_select(model: CoKrigingModel, x_next, costs: Sequence[float], rho_squared: bool = True) -> ServResult:
    """Level with the largest SERV; all-zero scores pick the lowest level."""
    serv = serv_values(model, x_next, costs, rho_squared)
    if max(serv) <= 0:
        return ServResult(0, model.chain[0], tuple(serv), True)
    k = int(np.argmax(serv))
    return ServResult(k, model.chain[k], tuple(serv), False)


def cokriging_stage1(model: CoKrigingModel, seed=None, n_candidates=None, n_polish: int = 4) -> np.ndarray:
    """Global maximizer of the HF predictive variance.

    Points of the lowest-level design (a superset of every level) are
    excluded so infill never duplicates an existing sample.
    """
    lo, hi = model.bounds[:, 0], model.bounds[:, 1]
    span = hi - lo

    def f(U):
        return model.predict_many(lo + np.atleast_2d(U) * span)[1]

    ex = (model.data[model.chain[0]][0] - lo) / span
    u, _ = multistart_maximize(f, model.bounds.shape[0], seed, n_candidates, n_polish, exclude=ex)
    return lo + u * span


# ---------------------------------------------------------------------------
# MFCA
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MfcaState:
    model: FittedLVGP
    excluded: frozenset
    tau: float = 2.5

    @property
    def incumbents(self) -> dict:
        """Observed best (minimum) output per source."""
        out = {}
        for s in range(self.model.n_sources):
            _, y = self.model.data.rows_of(s)
            if y.size:
                out[s] = float(y.min())
        return out


def mfca_exclude(model: FittedLVGP, tau: float = 2.5) -> frozenset:
    """Sources whose latent distance to HF exceeds ``tau`` times the median."""
    hf = model.hf_label
    d = np.asarray(model.distances_to_hf(), dtype=float)
    lf = [s for s in range(model.n_sources) if s != hf]
    if not lf:
        return frozenset()
    med = float(np.median(d[lf]))
    out = frozenset(s for s in lf if d[s] > tau * med)
    if out:
        log.info("MFCA excludes sources %s (median latent distance %.4g)", sorted(out), med)
    return out


def mfca_acquisition(model: FittedLVGP, source: int, y_star: float):
    """Un-scaled MFCA acquisition for one source as a unit-cube function.

    Values are in original output units.
    """
    nz = model.normalization
    ys = (y_star - nz.y_mean) / nz.y_scale
    hf = model.hf_label

    if source == hf:
        def f(U):
            m, _ = model.predict_std(np.atleast_2d(U), hf)
            return (ys - m) * nz.y_scale
        return f

    def f(U):
        m, v = model.predict_std(np.atleast_2d(U), source)
        sd = np.sqrt(v)
        safe = np.where(sd > 0, sd, 1.0)
        return np.where(sd > 0, sd * norm.pdf((ys - m) / safe), 0.0) * nz.y_scale
    return f


@dataclass(frozen=True)
class MfcaChoice:
    x: np.ndarray
    source: int
    value: float
    per_source: dict


def mfca_step(state: MfcaState, costs: Sequence[float], seed=None, n_candidates=None, n_polish: int = 4,
              exclude: Optional[dict] = None) -> MfcaChoice:
    """Joint argmax over (x, source) of the cost-scaled MFCA acquisition.

    ``exclude`` maps a source to original-unit points that must not be
    returned for it.
    """
    model = state.model
    nz = model.normalization
    rng = np.random.default_rng(seed)
    incumbents = state.incumbents
    exclude = exclude or {}
    per_source = {}
    for s in range(model.n_sources):
        if s in state.excluded or s not in incumbents:
            continue
        f = mfca_acquisition(model, s, incumbents[s])
        ex = exclude.get(s)
        ex_u = None if ex is None or len(ex) == 0 else nz.to_unit(np.atleast_2d(ex))
        x_s, _ = model.data.rows_of(s)
        u, val = multistart_maximize(lambda U, f=f, c=costs[s]: f(U) / c, model.q, int(rng.integers(2**63)),
                                     n_candidates, n_polish, extra=nz.to_unit(x_s) if len(x_s) else None,
                                     exclude=ex_u)
        per_source[s] = (nz.from_unit(u), float(val))
    best = max(per_source, key=lambda s: (per_source[s][1], -costs[s], -s))
    x, v = per_source[best]
    return MfcaChoice(x, best, v, per_source)
