"""
Adaptive-sampling loop.

``run`` draws the initial design, then repeats refit -> stage 1 -> stage 2 ->
query -> append until a stopping rule fires, recording one
:class:`IterationRecord` per infill.  Iteration 0 holds the state after the
initial design; the cost ledger counts infill queries only.

Variants
--------
==================  ====  =========================================
variant             task  infill rule
==================  ====  =========================================
``sfgp``            both  HF-only GP, HF infill at the stage-1 point
``mf-lvgp-hf``      both  MF-LVGP on all sources, HF infill only
``mufasa-alpha``    GF    MMSE, then variance reduction per cost
``mufasa-beta``     GF    MMSE with shuffle, then variance reduction per cost
``mufasa-a``        BO    EI, then EI reduction per cost (q <= 2)
``mufasa-m``        BO    EI, then variance reduction per cost
``cokriging-serv``  GF    recursive co-kriging with SERV
``mfca``            BO    cost-aware MFCA
==================  ====  =========================================
"""

from __future__ import annotations

import csv
import json
import logging
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .acquisition import AcquisitionSpec, OptimizerConfig, select_stage1, select_stage2
from .baselines import MfcaState, cokriging_fit, cokriging_stage1, mfca_exclude, mfca_step, serv_select
from .exceptions import ConfigurationError, IllConditionedError
from .lvgp import FitConfig, TrainingSet, fit
from .problems import Problem, eval_source, generate_doe, rrmse_values, test_grid

log = logging.getLogger(__name__)

TASKS = ("GF", "BO")

# variant -> {task: (stage1, stage2)}; None marks a baseline with its own loop
VARIANTS = {
    "sfgp": {"GF": ("mmse", "none"), "BO": ("ei", "none")},
    "mf-lvgp-hf": {"GF": ("mmse", "none"), "BO": ("ei", "none")},
    "mufasa-alpha": {"GF": ("mmse", "delta_mse_per_cost")},
    "mufasa-beta": {"GF": ("mmse+shuffle", "delta_mse_per_cost")},
    "mufasa-a": {"BO": ("ei", "delta_af_per_cost")},
    "mufasa-m": {"BO": ("ei", "delta_mse_per_cost")},
    "cokriging-serv": {"GF": None},
    "mfca": {"BO": None},
}

_ALIASES = {"cokriging": "cokriging-serv", "mflvgp-hf": "mf-lvgp-hf", "mf-lvgphf": "mf-lvgp-hf"}


def canonical_variant(name: str) -> str:
    key = name.strip().lower().replace("_", "-").replace(" ", "-").replace("α", "alpha").replace("β", "beta")
    key = _ALIASES.get(key, key)
    if key not in VARIANTS:
        raise ConfigurationError(f"unknown method {name!r}; choose from {sorted(VARIANTS)}")
    return key


@dataclass(frozen=True)
class MethodSpec:
    """One test method.

    ``refit_restarts`` overrides ``fit.n_restarts`` for the refits after each
    infill (the previous optimum is always a warm start); ``None`` keeps it.
    """

    variant: str
    task: str
    fit: FitConfig = FitConfig()
    refit_restarts: Optional[int] = None
    optimizer: OptimizerConfig = OptimizerConfig()
    divisor: str = "current"
    mfca_tau: float = 2.5
    serv_rho_squared: bool = True

    def __post_init__(self):
        object.__setattr__(self, "variant", canonical_variant(self.variant))
        if self.task not in TASKS:
            raise ConfigurationError(f"task must be GF or BO, got {self.task!r}")
        if self.task not in VARIANTS[self.variant]:
            raise ConfigurationError(f"{self.variant} is not defined for {self.task}")

    @property
    def acquisition(self) -> Optional[AcquisitionSpec]:
        stages = VARIANTS[self.variant][self.task]
        if stages is None:
            return None
        return AcquisitionSpec(stages[0], stages[1], "minimize", self.divisor)

    @property
    def refit_config(self) -> FitConfig:
        if self.refit_restarts is None:
            return self.fit
        return replace(self.fit, n_restarts=self.refit_restarts)

    def validate_for(self, problem: Problem) -> None:
        if self.variant == "mufasa-a" and problem.q > 2:
            raise ConfigurationError("mufasa-a is only offered for problems with q <= 2")


@dataclass(frozen=True)
class StopCriteria:
    max_iters: Optional[int] = None
    max_infill_cost: Optional[float] = None
    bo_rel_error: Optional[float] = None

    def __post_init__(self):
        if self.max_iters is None and self.max_infill_cost is None and self.bo_rel_error is None:
            raise ConfigurationError("set at least one stopping bound")
        for name in ("max_iters", "max_infill_cost", "bo_rel_error"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ConfigurationError(f"{name} must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "StopCriteria":
        unknown = set(d) - {"max_iters", "max_infill_cost", "bo_rel_error"}
        if unknown:
            raise ConfigurationError(f"unknown stopping keys {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class RunState:
    iteration: int
    cum_cost: float
    y_star: Optional[float] = None


@dataclass(frozen=True)
class StopDecision:
    stop: bool
    reason: Optional[str] = None


def check_stop(state: RunState, stop: StopCriteria, problem: Problem) -> StopDecision:
    """Stop when any bound is reached; reasons are ``converged``, ``cost``, ``iterations``."""
    if stop.bo_rel_error is not None and state.y_star is not None:
        gt = problem.ground_truth_optimum
        if gt is None:
            raise ConfigurationError(f"{problem.name} has no ground-truth optimum for the convergence rule")
        if abs(state.y_star - gt) / abs(gt) <= stop.bo_rel_error:
            return StopDecision(True, "converged")
    if stop.max_infill_cost is not None and state.cum_cost >= stop.max_infill_cost:
        return StopDecision(True, "cost")
    if stop.max_iters is not None and state.iteration >= stop.max_iters:
        return StopDecision(True, "iterations")
    return StopDecision(False)


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------


@dataclass
class IterationRecord:
    iteration: int
    cum_cost: float
    metric: float
    source: Optional[int] = None
    x: Optional[list] = None
    y: Optional[float] = None
    fallback: bool = False
    x_star: Optional[list] = None
    latent: Optional[list] = None
    distances: Optional[list] = None
    queries: list = field(default_factory=list)

    @classmethod
    def from_dict(cls, d: dict) -> "IterationRecord":
        return cls(**d)


@dataclass
class RunRecord:
    problem: str
    variant: str
    task: str
    seed: int
    doe_seed: int
    q: int
    source_names: list
    costs: list
    iterations: list = field(default_factory=list)
    status: str = "ok"
    stop_reason: Optional[str] = None
    error: Optional[str] = None
    excluded_sources: list = field(default_factory=list)

    @property
    def final(self) -> Optional[IterationRecord]:
        return self.iterations[-1] if self.iterations else None

    def infill_counts(self) -> dict:
        counts = {name: 0 for name in self.source_names}
        for it in self.iterations[1:]:
            counts[self.source_names[it.source]] += 1
        return counts

    def summary(self) -> dict:
        fin = self.final
        return {
            "status": self.status,
            "stop_reason": self.stop_reason,
            "n_iterations": len(self.iterations) - 1 if self.iterations else 0,
            "final_metric": None if fin is None else fin.metric,
            "total_cost": 0.0 if fin is None else fin.cum_cost,
            "infill_counts": self.infill_counts(),
        }

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        d = dict(d)
        d["iterations"] = [IterationRecord.from_dict(it) for it in d.get("iterations", [])]
        return cls(**d)

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load_json(cls, path) -> "RunRecord":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def csv_header(self) -> list[str]:
        return ["iter", "cum_cost", "source"] + [f"x{i + 1}" for i in range(self.q)] + ["y", "metric", "fallback"]

    def csv_rows(self) -> list[list[str]]:
        rows = []
        for it in self.iterations:
            if it.source is None:
                rows.append([str(it.iteration), _fmt(it.cum_cost), ""] + [""] * self.q + ["", _fmt(it.metric), ""])
            else:
                rows.append([str(it.iteration), _fmt(it.cum_cost), str(it.source)] + [_fmt(v) for v in it.x]
                            + [_fmt(it.y), _fmt(it.metric), str(int(it.fallback))])
        return rows

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.csv_header())
            w.writerows(self.csv_rows())


def _fmt(v) -> str:
    # shortest repr that round-trips
    return repr(float(v))


def read_trace_csv(path) -> list[dict]:
    """Rows of a trace CSV with numeric fields parsed (blank -> None)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        parsed = {}
        for k, v in r.items():
            if v == "":
                parsed[k] = None
            elif k in ("iter", "source", "fallback"):
                parsed[k] = int(v)
            else:
                parsed[k] = float(v)
        out.append(parsed)
    return out


# ---------------------------------------------------------------------------
# seeds
# ---------------------------------------------------------------------------

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def mix_seed(*parts: int) -> int:
    """Portable 64-bit seed from integer parts (splitmix64 chain)."""
    h = 0
    for p in parts:
        h = splitmix64(h ^ (int(p) & _MASK))
    return h


def method_hash(variant: str) -> int:
    return zlib.crc32(canonical_variant(variant).encode())


def replicate_seeds(base_seed: int, variant: str, replicate: int) -> tuple[int, int]:
    """``(method_seed, doe_seed)``; the DOE seed is shared by all methods."""
    return mix_seed(base_seed, method_hash(variant), replicate), mix_seed(base_seed, replicate)


# ---------------------------------------------------------------------------
# strategies
# ---------------------------------------------------------------------------


@dataclass
class Proposal:
    x: np.ndarray
    source: int
    queries: list
    x_star: Optional[np.ndarray] = None
    fallback: bool = False


def _near_existing(X, x, bounds, tol: float = 1e-6) -> bool:
    if len(X) == 0:
        return False
    span = bounds[:, 1] - bounds[:, 0]
    d = np.linalg.norm((np.atleast_2d(X) - x) / span, axis=1)
    return bool(d.min() < tol)


MAX_DUPLICATE_RETRIES = 3


class _LvgpStrategy:
    """SFGP, MF-LVGP-HF and the MuFASa variants."""

    def __init__(self, problem: Problem, method: MethodSpec, rng, doe_seed):
        self.problem = problem
        self.method = method
        self.rng = rng
        self.acq = method.acquisition
        self.hf_only = method.variant == "sfgp"
        labels = [problem.hf_label] if self.hf_only else list(range(problem.n_sources))
        doe = generate_doe(problem, doe_seed, sources=labels)
        X, S, Y = [], [], []
        for s in labels:
            for x in doe.points[s]:
                X.append(x)
                S.append(labels.index(s))
                Y.append(eval_source(problem, s, x))
        self.labels = labels
        self.data = TrainingSet(np.array(X), np.array(S), np.array(Y), problem.bounds, len(labels))
        self.costs = [problem.sources[s].cost for s in labels]
        self.model = fit(self.data, method.fit, seed=self._seed())

    def _seed(self) -> int:
        return int(self.rng.integers(2**63))

    def hf_mean(self, X) -> np.ndarray:
        return self.model.predict_many(X, 0)[0]

    def hf_outputs(self) -> np.ndarray:
        return self.data.rows_of(0)[1]

    def snapshot(self):
        if self.hf_only:
            return None, None
        return self.model.latent.tolist(), [float(d) for d in self.model.distances_to_hf()]

    def propose(self) -> Proposal:
        model, cfg = self.model, self.method.optimizer
        bounds = self.problem.bounds
        s1 = select_stage1(model, self.acq, self.rng, config=cfg)
        s2 = select_stage2(model, s1.x, self.acq, self.costs, cfg, seed=self._seed())
        x_star = s1.x
        for _ in range(MAX_DUPLICATE_RETRIES):
            Xs, _ = self.data.rows_of(s2.source)
            if not _near_existing(Xs, s2.x, bounds):
                break
            log.info("duplicate infill on source %d; resampling", s2.source)
            if self.acq.stage2 == "none":
                s1 = select_stage1(model, self.acq, self.rng, config=cfg, exclude=Xs)
                x_star = s1.x
                s2 = select_stage2(model, s1.x, self.acq, self.costs, cfg, seed=self._seed())
            else:
                s2 = select_stage2(model, x_star, self.acq, self.costs, cfg, seed=self._seed(),
                                   exclude={s2.source: Xs})
        src = self.labels[s2.source]
        return Proposal(np.asarray(s2.x, dtype=float), src, [src], x_star, s2.fallback)

    def observe(self, x, results) -> None:
        for s, y in results:
            self.data = self.data.append(x, self.labels.index(s), y)
        self.model = fit(self.data, self.method.refit_config, seed=self._seed(), warm_start=self.model.theta)


class _MfcaStrategy(_LvgpStrategy):
    def __init__(self, problem, method, rng, doe_seed):
        super().__init__(problem, method, rng, doe_seed)
        self.excluded = mfca_exclude(self.model, method.mfca_tau)

    def propose(self) -> Proposal:
        cfg = self.method.optimizer
        state = MfcaState(self.model, self.excluded, self.method.mfca_tau)
        exclude = {}
        choice = mfca_step(state, self.costs, self._seed(), cfg.n_candidates, cfg.n_polish)
        for _ in range(MAX_DUPLICATE_RETRIES):
            Xs, _ = self.data.rows_of(choice.source)
            if not _near_existing(Xs, choice.x, self.problem.bounds):
                break
            exclude[choice.source] = Xs
            choice = mfca_step(state, self.costs, self._seed(), cfg.n_candidates, cfg.n_polish, exclude=exclude)
        return Proposal(np.asarray(choice.x, dtype=float), choice.source, [choice.source])


class _CoKrigingStrategy:
    def __init__(self, problem: Problem, method: MethodSpec, rng, doe_seed):
        self.problem = problem
        self.method = method
        self.rng = rng
        self.chain = problem.table_hierarchy
        sizes = problem.cokriging_init or [s.init for s in problem.sources]
        doe = generate_doe(problem, doe_seed, nested=True, sizes=sizes)
        self.data = {s: (pts, problem.evaluate(s, pts)) for s, pts in doe.points.items()}
        self.costs = problem.costs
        self.model = cokriging_fit(self.data, self.chain, problem.bounds, method.fit, seed=self._seed())

    def _seed(self) -> int:
        return int(self.rng.integers(2**63))

    def hf_mean(self, X) -> np.ndarray:
        return self.model.predict_many(X)[0]

    def hf_outputs(self) -> np.ndarray:
        return self.data[self.problem.hf_label][1]

    def snapshot(self):
        return None, None

    def propose(self) -> Proposal:
        cfg = self.method.optimizer
        x = cokriging_stage1(self.model, self._seed(), cfg.n_candidates, cfg.n_polish)
        sel = serv_select(self.model, x, self.costs, self.method.serv_rho_squared)
        # cascade down the chain so the design stays nested
        queries = list(self.chain[: sel.level + 1])
        return Proposal(x, sel.source, queries, x, sel.degenerate)

    def observe(self, x, results) -> None:
        for s, y in results:
            X, Y = self.data[s]
            self.data[s] = (np.vstack([X, x]), np.append(Y, y))
        self.model = cokriging_fit(self.data, self.chain, self.problem.bounds, self.method.refit_config,
                                   seed=self._seed(), warm=self.model)


def _strategy(problem, method, rng, doe_seed):
    if method.variant == "cokriging-serv":
        return _CoKrigingStrategy(problem, method, rng, doe_seed)
    if method.variant == "mfca":
        return _MfcaStrategy(problem, method, rng, doe_seed)
    return _LvgpStrategy(problem, method, rng, doe_seed)


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


class _Metric:
    def __init__(self, problem: Problem, task: str, n_test: int):
        self.task = task
        if task == "GF":
            self.X = test_grid(problem, n_test)
            self.y = problem.evaluate(problem.hf_label, self.X)

    def __call__(self, strategy) -> float:
        if self.task == "GF":
            return rrmse_values(strategy.hf_mean(self.X), self.y)
        return float(np.min(strategy.hf_outputs()))


def run(problem: Problem, method: MethodSpec, stop: StopCriteria, seed: int, doe_seed: Optional[int] = None,
        n_test: int = 10000) -> RunRecord:
    """Execute one adaptive-sampling run.

    ``doe_seed`` (default: ``seed``) drives the initial design so that runs
    of different methods can share it.  Ill-conditioning during a refit
    ends the run with ``status="error"`` and the iterations completed so far.
    """
    method.validate_for(problem)
    if stop.bo_rel_error is not None and problem.ground_truth_optimum is None:
        raise ConfigurationError(f"{problem.name} has no ground-truth optimum for the convergence rule")
    doe_seed = seed if doe_seed is None else doe_seed
    record = RunRecord(problem.name, method.variant, method.task, int(seed), int(doe_seed), problem.q,
                       problem.source_names(), problem.costs)
    rng = np.random.default_rng(seed)
    metric = _Metric(problem, method.task, n_test)
    costs = [Fraction(str(c)) for c in problem.costs]
    cum = Fraction(0)
    try:
        strat = _strategy(problem, method, rng, doe_seed)
        if isinstance(strat, _MfcaStrategy):
            record.excluded_sources = sorted(int(s) for s in strat.excluded)
        latent, dist = strat.snapshot()
        record.iterations.append(IterationRecord(0, 0.0, metric(strat), latent=latent, distances=dist))
        it = 0
        while True:
            y_star = float(np.min(strat.hf_outputs())) if method.task == "BO" else None
            decision = check_stop(RunState(it, float(cum), y_star), stop, problem)
            if decision.stop:
                record.stop_reason = decision.reason
                break
            prop = strat.propose()
            results = [(s, eval_source(problem, s, prop.x)) for s in prop.queries]
            cum += sum(costs[s] for s in prop.queries)
            strat.observe(prop.x, results)
            it += 1
            y = dict(results)[prop.source]
            latent, dist = strat.snapshot()
            rec = IterationRecord(
                it, float(cum), metric(strat), int(prop.source), [float(v) for v in prop.x], float(y),
                bool(prop.fallback), None if prop.x_star is None else [float(v) for v in prop.x_star],
                latent, dist, [[int(s), float(v)] for s, v in results],
            )
            record.iterations.append(rec)
            log.info("%s/%s iter %d cost %s source %d metric %.6g", problem.name, method.variant, it,
                     rec.cum_cost, rec.source, rec.metric)
    except IllConditionedError as exc:
        record.status = "error"
        record.error = str(exc)
        log.warning("run aborted: %s", exc)
    return record


def _run_one(args):
    problem, method, stop, seed, doe_seed, n_test = args
    try:
        return run(problem, method, stop, seed, doe_seed, n_test)
    except Exception as exc:  # recorded, other replicates proceed
        log.exception("replicate failed")
        return RunRecord(problem.name, method.variant, method.task, int(seed), int(doe_seed), problem.q,
                         problem.source_names(), problem.costs, status="failed", error=repr(exc))


def run_replicates(problem: Problem, methods: Sequence[MethodSpec], stop: StopCriteria, n_replicates: int,
                   base_seed: int, parallel: int = 1, n_test: int = 10000) -> list[RunRecord]:
    """Run every method for ``n_replicates`` paired replicates.

    Results are ordered replicate-major, then by method.
    """
    if n_replicates < 1:
        raise ConfigurationError("n_replicates must be >= 1")
    jobs = []
    for r in range(n_replicates):
        for m in methods:
            seed, doe_seed = replicate_seeds(base_seed, m.variant, r)
            jobs.append((problem, m, stop, seed, doe_seed, n_test))
    if parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(_run_one, jobs))
    return [_run_one(j) for j in jobs]
