"""
Analytic multi-fidelity benchmark problems.

Four built-in problems (``simple1d``, ``sasena``, ``borehole``,
``wingweight``), each with one high-fidelity (HF) source at label 0 and
several low-fidelity (LF) sources sharing the same bounds.  Every problem is
minimized.

Two LF formulas are pinned by their reference RRMSE values, see
``SIMPLE1D_LF2`` and ``SASENA_LF2_THETA``.  The ``+ 2`` variant of Simple-1D
LF2 stays available as function id ``simple1d.lf2_alt``.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import yaml

from .exceptions import ConfigurationError, InvalidInputError, UndefinedMetricError
from .lvgp import check_in_bounds
from .optimize import sobol_unit

# 1/(x^2 + x + 1) - 0.1 reproduces the reference RRMSE 0.3218; a "+ 2"
# denominator gives 1.0486.
SIMPLE1D_LF2 = "1/(x^2+x+1) - 0.1"
# Unbound constant in the Sasena LF2 formula; 8.0 reproduces RRMSE 1.8060.
SASENA_LF2_THETA = 8.0


def _col(X, i):
    return X[:, i]


# --- Simple-1D --------------------------------------------------------------

def simple1d_hf(X):
    x = _col(X, 0)
    return 1.0 / (0.1 * x**3 + x**2 + x + 1.0)


def simple1d_lf1(X):
    x = _col(X, 0)
    return 1.0 / (0.2 * x**3 + x**2 + x + 1.0) + 0.2


def simple1d_lf2(X):
    x = _col(X, 0)
    return 1.0 / (x**2 + x + 1.0) - 0.1


def simple1d_lf2_alt(X):
    x = _col(X, 0)
    return 1.0 / (x**2 + x + 2.0) - 0.1


def simple1d_lf3(X):
    x = _col(X, 0)
    return 1.0 / (x**2 + 1.0)


# --- Sasena -----------------------------------------------------------------

def sasena_hf(X):
    x = _col(X, 0)
    return -np.sin(x) - np.exp(x / 10.0) + 10.0


def sasena_lf1(X):
    x = _col(X, 0)
    return -np.sin(0.95 * x) - np.exp(x / 50.0) + 0.03 * (x - 2.0) ** 2 + 10.3


def sasena_lf2(X, theta: float = SASENA_LF2_THETA):
    x = _col(X, 0)
    return -np.sin(0.8 * x) - np.exp(x / 50.0) + 0.03 * (x - 2.0) ** 2 + theta


# --- Borehole ---------------------------------------------------------------
# columns: T_u, H_u, H_l, r, r_w, T_l, L, K_w

BOREHOLE_NAMES = ("T_u", "H_u", "H_l", "r", "r_w", "T_l", "L", "K_w")
BOREHOLE_BOUNDS = [
    (100.0, 1000.0), (990.0, 1110.0), (700.0, 820.0), (100.0, 10000.0),
    (0.05, 0.15), (10.0, 500.0), (1000.0, 2000.0), (6000.0, 12000.0),
]


def _borehole(X, h_u=1.0, h_l=1.0, outer=1.0, coef=2.0, tt=1.0):
    Tu, Hu, Hl, r, rw, Tl, L, Kw = X.T
    log_ratio = np.log(r / rw)
    denom = np.log(outer * r / rw) * (1.0 + coef * L * Tu / (log_ratio * rw**2 * Kw) + tt * Tu / Tl)
    return 2.0 * np.pi * Tu * (h_u * Hu - h_l * Hl) / denom


def borehole_hf(X):
    return _borehole(X)


def borehole_lf1(X):
    return _borehole(X, h_l=0.8, coef=1.0)


def borehole_lf2(X):
    return _borehole(X, coef=8.0, tt=0.75)


def borehole_lf3(X):
    return _borehole(X, h_u=1.09, outer=4.0, coef=3.0)


def borehole_lf4(X):
    return _borehole(X, h_u=1.05, outer=2.0, coef=3.0)


# --- Wing weight ------------------------------------------------------------
# columns: s_w, w_fw, A, Lambda (degrees), q, lambda, t_c, N_z, W_dg, w_p

WING_NAMES = ("s_w", "w_fw", "A", "Lambda", "q", "lambda", "t_c", "N_z", "W_dg", "w_p")
WING_BOUNDS = [
    (150.0, 200.0), (220.0, 300.0), (6.0, 10.0), (-10.0, 10.0), (16.0, 45.0),
    (0.5, 1.0), (0.08, 0.18), (2.5, 6.0), (1700.0, 2500.0), (0.025, 0.08),
]


def _wing_core(X, sw_exp):
    sw, wfw, A, lam_deg, q, taper, tc, Nz, Wdg, _ = X.T
    c = np.cos(np.deg2rad(lam_deg))
    return (
        0.036 * sw**sw_exp * wfw**0.0035 * (A / c**2) ** 0.6 * q**0.006 * taper**0.04
        * (100.0 * tc / c) ** -0.3 * (Nz * Wdg) ** 0.49
    )


def wing_hf(X):
    return _wing_core(X, 0.758) + X[:, 0] * X[:, 9]


def wing_lf1(X):
    return _wing_core(X, 0.758) + X[:, 9]


def wing_lf2(X):
    return _wing_core(X, 0.8) + X[:, 9]


def wing_lf3(X):
    return _wing_core(X, 0.9)


FUNCTIONS: dict[str, Callable] = {
    "simple1d.hf": simple1d_hf,
    "simple1d.lf1": simple1d_lf1,
    "simple1d.lf2": simple1d_lf2,
    "simple1d.lf2_alt": simple1d_lf2_alt,
    "simple1d.lf3": simple1d_lf3,
    "sasena.hf": sasena_hf,
    "sasena.lf1": sasena_lf1,
    "sasena.lf2": sasena_lf2,
    "borehole.hf": borehole_hf,
    "borehole.lf1": borehole_lf1,
    "borehole.lf2": borehole_lf2,
    "borehole.lf3": borehole_lf3,
    "borehole.lf4": borehole_lf4,
    "wingweight.hf": wing_hf,
    "wingweight.lf1": wing_lf1,
    "wingweight.lf2": wing_lf2,
    "wingweight.lf3": wing_lf3,
}


@dataclass(frozen=True)
class Source:
    name: str
    function: str
    cost: float
    init: int
    params: dict = field(default_factory=dict)
    reported_rrmse: Optional[float] = None

    def __post_init__(self):
        if self.function not in FUNCTIONS:
            raise ConfigurationError(f"unknown function id {self.function!r}")
        if not self.cost > 0:
            raise ConfigurationError(f"source {self.name}: cost must be positive")
        if int(self.init) < 1:
            raise ConfigurationError(f"source {self.name}: initial sample size must be >= 1")

    def __call__(self, X) -> np.ndarray:
        return FUNCTIONS[self.function](np.atleast_2d(X), **self.params)


@dataclass(frozen=True)
class Problem:
    """A multi-fidelity problem; source 0 is the HF source."""

    name: str
    bounds: np.ndarray
    sources: tuple
    sense: str = "minimize"
    ground_truth_optimum: Optional[float] = None
    table_hierarchy: Optional[tuple] = None
    input_names: Optional[tuple] = None
    cokriging_init: Optional[tuple] = None

    def __post_init__(self):
        b = np.atleast_2d(np.asarray(self.bounds, dtype=float))
        if b.ndim != 2 or b.shape[1] != 2 or np.any(b[:, 1] <= b[:, 0]):
            raise ConfigurationError("bounds must be a (q, 2) array with lower < upper")
        object.__setattr__(self, "bounds", b)
        object.__setattr__(self, "sources", tuple(self.sources))
        if len(self.sources) < 1:
            raise ConfigurationError("a problem needs at least one source")
        hier = self.table_hierarchy
        if hier is None:
            hier = tuple(range(1, len(self.sources))) + (0,)
        hier = tuple(int(h) for h in hier)
        if sorted(hier) != list(range(len(self.sources))) or hier[-1] != self.hf_label:
            raise ConfigurationError("table_hierarchy must list every source once and end with HF")
        object.__setattr__(self, "table_hierarchy", hier)

    hf_label = 0

    @property
    def q(self) -> int:
        return self.bounds.shape[0]

    @property
    def n_sources(self) -> int:
        return len(self.sources)

    @property
    def costs(self) -> list:
        return [s.cost for s in self.sources]

    def source_names(self) -> list[str]:
        return [s.name for s in self.sources]

    def evaluate(self, source: int, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.q:
            raise InvalidInputError(f"{self.name}: expected {self.q} inputs, got {X.shape[1]}")
        check_in_bounds(X, self.bounds)
        if not 0 <= source < self.n_sources:
            raise InvalidInputError(f"{self.name}: unknown source {source}")
        return self.sources[source](X)


def eval_source(problem: Problem, source_label: int, x) -> float:
    """Exact, noiseless value of one source at one point."""
    return float(problem.evaluate(source_label, np.asarray(x, dtype=float).reshape(1, -1))[0])


# ---------------------------------------------------------------------------
# built-in problems
# ---------------------------------------------------------------------------


def _make_simple1d(task: str) -> Problem:
    return Problem(
        name="simple1d",
        bounds=[(-2.0, 3.0)],
        sources=(
            Source("HF", "simple1d.hf", 100, 2),
            Source("LF1", "simple1d.lf1", 10, 5, reported_rrmse=0.6054),
            Source("LF2", "simple1d.lf2", 10, 5, reported_rrmse=0.3218),
            Source("LF3", "simple1d.lf3", 10, 5, reported_rrmse=0.7256),
        ),
        input_names=("x",),
    )


def _make_sasena(task: str, theta: float = SASENA_LF2_THETA) -> Problem:
    return Problem(
        name="sasena",
        bounds=[(0.0, 10.0)],
        sources=(
            Source("HF", "sasena.hf", 1000, 2),
            Source("LF1", "sasena.lf1", 1, 5, reported_rrmse=2.0544),
            Source("LF2", "sasena.lf2", 1, 5, params={"theta": float(theta)}, reported_rrmse=1.8060),
        ),
        ground_truth_optimum=6.7802,
        input_names=("x",),
    )


def _make_borehole(task: str) -> Problem:
    bo = task == "BO"
    costs = (1000, 100, 10, 100, 10) if bo else (1000, 10, 10, 10, 10)
    init = (5, 5, 25, 5, 25) if bo else (4, 10, 10, 10, 10)
    rr = (None, 3.6649, 1.3679, 0.4135, 0.4828)
    names = ("HF", "LF1", "LF2", "LF3", "LF4")
    return Problem(
        name="borehole",
        bounds=BOREHOLE_BOUNDS,
        sources=tuple(
            Source(n, f"borehole.{n.lower()}", c, i, reported_rrmse=r)
            for n, c, i, r in zip(names, costs, init, rr)
        ),
        ground_truth_optimum=3.98,
        input_names=BOREHOLE_NAMES,
        cokriging_init=(50, 50, 50, 50, 20),
    )


def _make_wingweight(task: str) -> Problem:
    return Problem(
        name="wingweight",
        bounds=WING_BOUNDS,
        sources=(
            Source("HF", "wingweight.hf", 1000, 5),
            Source("LF1", "wingweight.lf1", 100, 5, reported_rrmse=0.1990),
            Source("LF2", "wingweight.lf2", 10, 10, reported_rrmse=1.1424),
            Source("LF3", "wingweight.lf3", 1, 50, reported_rrmse=5.7469),
        ),
        ground_truth_optimum=123.25,
        input_names=WING_NAMES,
    )


BUILTIN = {
    "simple1d": _make_simple1d,
    "sasena": _make_sasena,
    "borehole": _make_borehole,
    "wingweight": _make_wingweight,
}

# terminating conditions per (problem, task)
DEFAULT_STOPS = {
    ("simple1d", "GF"): {"max_iters": 20, "max_infill_cost": 600},
    ("sasena", "BO"): {"bo_rel_error": 0.02, "max_infill_cost": 7000},
    ("borehole", "GF"): {"max_iters": 150, "max_infill_cost": 8000},
    ("borehole", "BO"): {"max_iters": 200, "max_infill_cost": 20000},
    ("wingweight", "GF"): {"max_iters": 150, "max_infill_cost": 20000},
    ("wingweight", "BO"): {"max_iters": 200, "max_infill_cost": 20000},
}


def get_problem(name: str, task: str = "GF", **params) -> Problem:
    """Built-in problem by name; ``task`` selects GF/BO-specific costs and DOE sizes."""
    key = name.lower().replace("-", "").replace("_", "")
    if key not in BUILTIN:
        raise ConfigurationError(f"unknown problem {name!r}; choose from {sorted(BUILTIN)}")
    if task not in ("GF", "BO"):
        raise ConfigurationError(f"task must be GF or BO, got {task!r}")
    return BUILTIN[key](task, **params)


def default_stop(problem: Problem, task: str) -> dict:
    try:
        return dict(DEFAULT_STOPS[(problem.name, task)])
    except KeyError:
        raise ConfigurationError(f"no default stopping rule for {problem.name}/{task}") from None


def load_problem_file(path) -> Problem:
    """Custom problem from a YAML file.

    Layout::

        name: my-problem
        bounds: [[-2, 3]]
        sense: minimize
        ground_truth_optimum: null
        hierarchy: [LF1, HF]          # optional, lowest -> highest
        sources:                      # first entry is the HF source
          - {name: HF,  function: simple1d.hf,  cost: 100, init: 2}
          - {name: LF1, function: simple1d.lf1, cost: 10,  init: 5}
    """
    with open(path) as fh:
        cfg = yaml.safe_load(fh)
    try:
        sources = tuple(
            Source(s["name"], s["function"], s["cost"], int(s["init"]), params=s.get("params", {}) or {})
            for s in cfg["sources"]
        )
        names = [s.name for s in sources]
        hier = cfg.get("hierarchy")
        if hier is not None:
            hier = tuple(names.index(h) for h in hier)
        return Problem(
            name=str(cfg.get("name", Path(path).stem)),
            bounds=cfg["bounds"],
            sources=sources,
            sense=cfg.get("sense", "minimize"),
            ground_truth_optimum=cfg.get("ground_truth_optimum"),
            table_hierarchy=hier,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid problem file {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# metric and designs
# ---------------------------------------------------------------------------


def _stable_seed(text: str) -> int:
    return zlib.crc32(text.encode())


def test_grid(problem: Problem, n_test: int = 10000, seed=None) -> np.ndarray:
    """Fixed Sobol test points in original units (seed defaults to the problem name)."""
    seed = _stable_seed(problem.name) if seed is None else seed
    U = sobol_unit(n_test, problem.q, seed)
    return problem.bounds[:, 0] + U * (problem.bounds[:, 1] - problem.bounds[:, 0])


test_grid.__test__ = False


def rrmse_values(candidate, reference) -> float:
    candidate = np.asarray(candidate, dtype=float)
    reference = np.asarray(reference, dtype=float)
    var = np.var(reference)
    if var == 0:
        raise UndefinedMetricError("reference outputs are constant")
    diff = candidate - reference
    return float(np.sqrt(diff @ diff / (reference.size * var)))


def rrmse(candidate_fn, reference_fn, problem: Problem, n_test: int = 10000, seed=None) -> float:
    """Relative RMSE of ``candidate_fn`` against ``reference_fn`` on the test grid.

    Both callables take an ``(m, q)`` array in original units.
    """
    X = test_grid(problem, n_test, seed)
    return rrmse_values(candidate_fn(X), reference_fn(X))


def source_rrmse(problem: Problem, source: int, n_test: int = 10000, seed=None) -> float:
    return rrmse(problem.sources[source], problem.sources[problem.hf_label], problem, n_test, seed)


@dataclass(frozen=True)
class DoePlan:
    points: dict
    generator: str
    seed: int
    nested: bool = False

    def sizes(self) -> dict:
        return {k: len(v) for k, v in self.points.items()}


def nested_sizes(problem: Problem, sizes: Sequence[int]) -> list[int]:
    """Raise lower-level sizes so every level can contain all levels above it."""
    out = list(int(s) for s in sizes)
    running = 0
    for label in reversed(problem.table_hierarchy):
        running = max(running, out[label])
        out[label] = running
    return out


def generate_doe(problem: Problem, seed: int, nested: bool = False, sources: Optional[Sequence[int]] = None,
                 sizes: Optional[Sequence[int]] = None) -> DoePlan:
    """Initial design in original units.

    Independent designs draw one scrambled Sobol sequence per source.  Nested
    designs (for co-kriging) draw one sequence and hand each level a prefix,
    so every higher level is a subset of all levels below it.
    """
    sources = list(range(problem.n_sources)) if sources is None else list(sources)
    sizes = [s.init for s in problem.sources] if sizes is None else list(sizes)
    lo, hi = problem.bounds[:, 0], problem.bounds[:, 1]
    children = np.random.SeedSequence(int(seed)).spawn(problem.n_sources + 1)
    points = {}
    if nested:
        sizes = nested_sizes(problem, sizes)
        U = sobol_unit(max(sizes[s] for s in sources), problem.q, children[-1])
        for s in sources:
            points[s] = lo + U[: sizes[s]] * (hi - lo)
    else:
        for s in sources:
            points[s] = lo + sobol_unit(sizes[s], problem.q, children[s]) * (hi - lo)
    return DoePlan(points, "sobol", int(seed), nested)
