"""
Two-stage acquisition.

Stage 1 picks the high-fidelity location of interest ``x*``:

* ``mmse``          -- global maximizer of the HF predictive variance;
* ``mmse+shuffle``  -- one local maximum ("mode") of the HF variance drawn with
  probability proportional to its peak value;
* ``ei``            -- maximizer of expected improvement on the HF surrogate.

Stage 2 picks the sample ``(x_next, s_next)`` over every source that gives the
largest pre-posterior benefit at ``x*`` per unit query cost:

* ``delta_mse_per_cost`` -- reduction of HF variance at ``x*``;
* ``delta_af_per_cost``  -- reduction of expected improvement at ``x*``;
* ``none``               -- sample the HF source at ``x*`` directly.

Optimization happens in the unit cube; reported locations are in original
units.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.stats import norm

from .exceptions import ConfigurationError, InvalidInputError
from .lvgp import FittedLVGP
from .optimize import multistart_maximize, sobol_unit
from .preposterior import CandidateScorer, augment, preposterior_variance, variance_ratio

log = logging.getLogger(__name__)

STAGE1 = ("mmse", "mmse+shuffle", "ei")
STAGE2 = ("delta_af_per_cost", "delta_mse_per_cost", "none")
SENSES = ("minimize", "maximize")


@dataclass(frozen=True)
class AcquisitionSpec:
    stage1: str
    stage2: str
    sense: str = "minimize"
    divisor: str = "current"

    def __post_init__(self):
        if self.stage1 not in STAGE1:
            raise ConfigurationError(f"unknown stage-1 acquisition {self.stage1!r}")
        if self.stage2 not in STAGE2:
            raise ConfigurationError(f"unknown stage-2 objective {self.stage2!r}")
        if self.sense not in SENSES:
            raise ConfigurationError(f"unknown objective sense {self.sense!r}")


@dataclass(frozen=True)
class OptimizerConfig:
    """Search budgets for the acquisition optimizers.

    ``None`` budgets scale with the input dimension.
    """

    n_candidates: Optional[int] = None
    n_polish: int = 4
    mode_starts: Optional[int] = None
    merge_radius: float = 0.02
    mode_maxfev: Optional[int] = None


@dataclass(frozen=True)
class Mode:
    x: np.ndarray
    value: float


@dataclass(frozen=True)
class Stage1Result:
    x: np.ndarray
    value: float
    modes: tuple = ()


@dataclass(frozen=True)
class Stage2Result:
    x: np.ndarray
    source: int
    ratio: float
    fallback: bool
    per_source: dict = field(default_factory=dict)


def _unit(model: FittedLVGP, x) -> np.ndarray:
    return model.normalization.to_unit(np.asarray(x, dtype=float).reshape(1, -1))[0]


def _orig(model: FittedLVGP, u) -> np.ndarray:
    return model.normalization.from_unit(np.asarray(u, dtype=float))


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------


def mmse_value(model: FittedLVGP, x) -> float:
    """HF predictive variance at ``x`` (original units)."""
    return model.predict(x, model.hf_label).variance


def _hf_variance_std(model: FittedLVGP):
    hf = model.hf_label

    def f(U):
        return model.predict_std(np.atleast_2d(U), hf)[1]

    def value_and_grad(u):
        _, v, _, dv = model.predict_std_grad(u, hf)
        return v, dv

    f.value_and_grad = value_and_grad
    return f


def default_mode_starts(q: int) -> int:
    return int(np.clip(20 * q, 20, 100))


def find_modes(model: FittedLVGP, n_starts: Optional[int] = None, merge_radius: float = 0.02,
               seed=None, maxfev: Optional[int] = None) -> list[Mode]:
    """Distinct local maxima of the HF predictive variance.

    Each Sobol start is pushed uphill by a bounded L-BFGS-B ascent.  Two
    results merge when closer than ``merge_radius`` (unit-cube distance) or
    when they sit on one flat plateau; the higher one is kept.  Modes are
    returned in decreasing order of value.
    """
    q = model.q
    n_starts = default_mode_starts(q) if n_starts is None else n_starts
    if n_starts < 1:
        raise InvalidInputError("n_starts must be >= 1")
    maxfev = 100 * (q + 1) if maxfev is None else maxfev
    f = _hf_variance_std(model)
    starts = sobol_unit(n_starts, q, seed)
    found = []

    def neg(u):
        v, g = f.value_and_grad(u)
        return -v, -g

    for u0 in starts:
        res = minimize(neg, u0, jac=True, method="L-BFGS-B", bounds=[(0.0, 1.0)] * q,
                       options={"maxfun": maxfev, "ftol": 1e-12, "gtol": 1e-10})
        u = np.clip(res.x, 0.0, 1.0)
        found.append((u, float(f(u)[0])))
    found.sort(key=lambda t: -t[1])

    scale = max(found[0][1], np.finfo(float).tiny)
    tol = 1e-9 * scale
    kept: list[tuple] = []
    for u, v in found:
        duplicate = False
        for ku, kv in kept:
            if np.linalg.norm(u - ku) < merge_radius:
                duplicate = True
            elif abs(kv - v) <= tol and f((u + ku) / 2)[0] >= min(kv, v) - tol:
                duplicate = True
            if duplicate:
                break
        if not duplicate:
            kept.append((u, v))

    y2 = model.normalization.y_scale**2
    modes = [Mode(_orig(model, u), v * y2) for u, v in kept if v > 0]
    if not modes:
        u, v = kept[0]
        modes = [Mode(_orig(model, u), v * y2)]
    return modes


def shuffle_select(modes: Sequence[Mode], rng: np.random.Generator) -> Mode:
    """Draw a mode with probability proportional to its value."""
    values = np.array([m.value for m in modes], dtype=float)
    if len(modes) == 1 or values.sum() <= 0:
        return modes[0]
    idx = rng.choice(len(modes), p=values / values.sum())
    return modes[int(idx)]


def expected_improvement(mean, sd, y_star, sense: str = "minimize"):
    """Closed-form EI; ``sd == 0`` returns the improvement clipped at zero."""
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    imp = (mean - y_star) if sense == "maximize" else (y_star - mean)
    imp, sd = np.broadcast_arrays(imp, sd)
    pos = sd > 0
    safe = np.where(pos, sd, 1.0)
    u = imp / safe
    out = np.where(pos, imp * norm.cdf(u) + sd * norm.pdf(u), imp)
    out = np.maximum(out, 0.0)
    return out if out.ndim else float(out)


def ei_value(model: FittedLVGP, x, y_star: float, sense: str = "minimize") -> float:
    p = model.predict(x, model.hf_label)
    return float(expected_improvement(p.mean, np.sqrt(p.variance), y_star, sense))


def _ei_std(model: FittedLVGP, y_star: float, sense: str):
    nz = model.normalization
    y_star_std = (y_star - nz.y_mean) / nz.y_scale
    hf = model.hf_label

    def f(U):
        m, v = model.predict_std(np.atleast_2d(U), hf)
        return expected_improvement(m, np.sqrt(v), y_star_std, sense)

    def value_and_grad(u):
        m, v, dm, dv = model.predict_std_grad(u, hf)
        sd = np.sqrt(v)
        imp = (m - y_star_std) if sense == "maximize" else (y_star_std - m)
        dimp = dm if sense == "maximize" else -dm
        if sd <= 0:
            return max(imp, 0.0), (dimp if imp > 0 else np.zeros_like(dm))
        z = imp / sd
        ei = imp * norm.cdf(z) + sd * norm.pdf(z)
        return ei, norm.cdf(z) * dimp + norm.pdf(z) * dv / (2.0 * sd)

    f.value_and_grad = value_and_grad
    return f


def incumbent(model: FittedLVGP, sense: str = "minimize") -> float:
    """Best observed HF output; LF observations never define the incumbent."""
    _, y = model.data.rows_of(model.hf_label)
    if y.size == 0:
        raise InvalidInputError("no HF observations to define the incumbent")
    return float(y.max() if sense == "maximize" else y.min())


def select_stage1(model: FittedLVGP, spec: AcquisitionSpec, rng: np.random.Generator,
                  y_star: Optional[float] = None, config: OptimizerConfig = OptimizerConfig(),
                  exclude=None) -> Stage1Result:
    """Location of interest on the HF surrogate.

    ``exclude`` holds original-unit points that must not be returned (used
    by the duplicate-infill guard of HF-only variants).
    """
    seed = int(rng.integers(2**63))
    ex_u = None if exclude is None or len(exclude) == 0 else model.normalization.to_unit(np.atleast_2d(exclude))
    if spec.stage1 == "ei":
        y_star = incumbent(model, spec.sense) if y_star is None else y_star
        f = _ei_std(model, y_star, spec.sense)
        hf_x, _ = model.data.rows_of(model.hf_label)
        u, _ = multistart_maximize(f, model.q, seed, config.n_candidates, config.n_polish,
                                   extra=model.normalization.to_unit(hf_x) if len(hf_x) else None,
                                   exclude=ex_u, value_and_grad=f.value_and_grad)
        x = _orig(model, u)
        return Stage1Result(x, ei_value(model, x, y_star, spec.sense))

    modes = find_modes(model, config.mode_starts, config.merge_radius, seed=seed, maxfev=config.mode_maxfev)
    if ex_u is not None:
        keep = [m for m in modes
                if np.min(np.linalg.norm(ex_u - _unit(model, m.x), axis=1)) >= 1e-6]
        if keep:
            modes = keep
        else:
            f = _hf_variance_std(model)
            u, v = multistart_maximize(f, model.q, seed, config.n_candidates, config.n_polish, exclude=ex_u,
                                       value_and_grad=f.value_and_grad)
            modes = [Mode(_orig(model, u), v * model.normalization.y_scale**2)]
    chosen = shuffle_select(modes, rng) if spec.stage1 == "mmse+shuffle" else modes[0]
    return Stage1Result(chosen.x, chosen.value, tuple(modes))


# ---------------------------------------------------------------------------
# stage 2
# ---------------------------------------------------------------------------


def delta_mse(model: FittedLVGP, x_star, w_next, divisor: str = "current") -> float:
    """Drop of HF variance at ``x_star`` if ``w_next = (x, s)`` were sampled.

    Not clamped: under ``divisor="augmented"`` tiny negative values cannot
    occur analytically but round-off is reported as-is.
    """
    x_next, s_next = w_next
    ppm = augment(model, x_next, s_next, divisor)
    return mmse_value(model, x_star) - preposterior_variance(ppm, x_star, model.hf_label)


def delta_ei(model: FittedLVGP, x_star, w_next, y_star: float, sense: str = "minimize",
             divisor: str = "current") -> float:
    """Drop of EI at ``x_star``; the mean stays at its current prediction."""
    x_next, s_next = w_next
    p = model.predict(x_star, model.hf_label)
    ppm = augment(model, x_next, s_next, divisor)
    sd_new = np.sqrt(preposterior_variance(ppm, x_star, model.hf_label))
    ei_now = expected_improvement(p.mean, np.sqrt(p.variance), y_star, sense)
    ei_new = expected_improvement(p.mean, sd_new, y_star, sense)
    return float(ei_now - ei_new)


class Benefit:
    """Stage-2 benefit of candidates of one source at the query ``x_star``.

    Mathematically identical to :func:`delta_mse` / :func:`delta_ei`, but
    uses the rank-one factor update so each candidate costs one triangular
    solve.  ``__call__(U)`` is vectorized over unit-cube rows and
    ``value_and_grad(u)`` adds the gradient for one row.  Values are in
    original units.
    """

    def __init__(self, model: FittedLVGP, x_star, source: int, objective: str, divisor: str = "current",
                 y_star: Optional[float] = None, sense: str = "minimize"):
        if objective not in ("delta_mse_per_cost", "delta_af_per_cost"):
            raise ConfigurationError(f"stage-2 objective {objective!r} has no benefit function")
        if objective == "delta_af_per_cost" and y_star is None:
            raise InvalidInputError("delta_af_per_cost needs the incumbent y*")
        self.objective = objective
        self.sense = sense
        self.y_star = y_star
        self.scorer = CandidateScorer(model, _unit(model, x_star), source)
        self.ratio = variance_ratio(model.data.n, divisor)
        self.sig2 = model.sigma2_hat * model.normalization.y_scale**2
        self.var_old = self.sig2 * max(self.scorer.s_old, 0.0)
        if objective == "delta_af_per_cost":
            self.mean = model.predict(x_star, model.hf_label).mean
            self.ei_old = expected_improvement(self.mean, np.sqrt(self.var_old), y_star, sense)

    def _from_terms(self, s_new):
        var_new = self.sig2 * self.ratio * np.maximum(s_new, 0.0)
        if self.objective == "delta_mse_per_cost":
            return self.var_old - var_new
        return self.ei_old - expected_improvement(self.mean, np.sqrt(var_new), self.y_star, self.sense)

    def __call__(self, U) -> np.ndarray:
        return self._from_terms(self.scorer(U))

    def value_and_grad(self, u):
        s_new, ds = self.scorer.value_and_grad(u)
        value = float(self._from_terms(np.array([s_new]))[0])
        if s_new <= 0:
            return value, np.zeros_like(ds)
        dvar = self.sig2 * self.ratio * ds
        if self.objective == "delta_mse_per_cost":
            return value, -dvar
        sd = np.sqrt(self.sig2 * self.ratio * s_new)
        imp = (self.mean - self.y_star) if self.sense == "maximize" else (self.y_star - self.mean)
        # d EI / d sd = pdf(imp / sd)
        return value, -norm.pdf(imp / sd) * dvar / (2.0 * sd)


def benefit_function(model: FittedLVGP, x_star, source: int, objective: str, divisor: str = "current",
                     y_star: Optional[float] = None, sense: str = "minimize") -> Benefit:
    """Vectorized stage-2 benefit ``U -> delta`` for candidates of one source."""
    return Benefit(model, x_star, source, objective, divisor, y_star, sense)


def select_stage2(model: FittedLVGP, x_star, spec: AcquisitionSpec, costs: Sequence[float],
                  config: OptimizerConfig = OptimizerConfig(), seed=None, y_star: Optional[float] = None,
                  sources: Optional[Sequence[int]] = None, exclude=None) -> Stage2Result:
    """Best benefit-per-cost sample across sources.

    Each source is searched by multi-start local optimization; sources whose
    best benefit is not positive are dropped.  Near-ties (relative 1e-9) go
    to the cheaper source, then to the lower label.  If no source offers a
    positive benefit the HF source is sampled at ``x_star`` and the result
    is flagged as a fallback.

    ``exclude`` maps a source label to original-unit points that must not be
    chosen for that source (duplicate-infill guard).
    """
    hf = model.hf_label
    x_star = np.asarray(x_star, dtype=float).ravel()
    if spec.stage2 == "none":
        return Stage2Result(x_star, hf, float("nan"), False)
    if any(c <= 0 for c in costs):
        raise InvalidInputError("every source cost must be positive")
    if spec.stage2 == "delta_af_per_cost" and y_star is None:
        y_star = incumbent(model, spec.sense)
    sources = range(model.n_sources) if sources is None else sources
    exclude = exclude or {}
    rng = np.random.default_rng(seed)
    u_star = _unit(model, x_star)

    per_source = {}
    for s in sources:
        f = benefit_function(model, x_star, s, spec.stage2, spec.divisor, y_star, spec.sense)
        ex = exclude.get(s)
        ex_u = None if ex is None or len(ex) == 0 else model.normalization.to_unit(np.atleast_2d(ex))
        u, delta = multistart_maximize(f, model.q, int(rng.integers(2**63)), config.n_candidates,
                                       config.n_polish, extra=u_star[None, :], exclude=ex_u,
                                       value_and_grad=f.value_and_grad)
        per_source[s] = (_orig(model, u), float(delta), float(delta) / costs[s])

    candidates = [(s, x, d, r) for s, (x, d, r) in per_source.items() if d > 0 and np.isfinite(d)]
    if not candidates:
        log.info("stage 2: no source offers a positive benefit; sampling HF at x*")
        return Stage2Result(x_star, hf, 0.0, True, per_source)
    best_ratio = max(r for _, _, _, r in candidates)
    tied = [c for c in candidates if c[3] >= best_ratio - 1e-9 * abs(best_ratio)]
    s, x, _, r = min(tied, key=lambda c: (costs[c[0]], c[0]))
    return Stage2Result(x, s, r, False, per_source)
