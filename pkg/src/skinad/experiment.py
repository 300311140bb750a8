"""Production-line comparison of SK, GPR and SK-i.

For each design space and simulation budget: a Latin hypercube design, a
random subset of observed points, two-stage replication allocation for both
the simulation model and the real system, fits of the requested methods,
and the EMSE against high-effort ground truth over the prediction points,
averaged over macro-replications.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .design import (
    DesignSpace,
    QuadratureConfig,
    allocate,
    choose_observations,
    imse_moment_matrix,
    lhs,
)
from .desim import CRN, INADEQUATE, INDEPENDENT, REAL, GroundTruth, RngPolicy, ground_truth, run_design
from .errors import EmptySampleError, FitError, InputError, NumericError
from .estimation import BASES, FitConfig, fit_mle, plugin_predict
from .formats import (
    ConfigError,
    Section,
    column,
    load_config,
    read_numeric_table,
    save_model,
    write_dataset,
    write_table,
)
from .metamodel import GPR, SK, SKI, Dataset

logger = logging.getLogger(__name__)

METHODS = (SK, GPR, SKI)

# the three production-line spaces: means of stations 1-3, then variances
PRODUCTION_SPACES = {
    "X1": [(0.2, 0.3), (0.2, 0.3), (0.7, 0.95), (0.05, 0.1), (0.05, 0.1), (0.8, 0.9)],
    "X2": [(0.2, 0.3), (0.2, 0.3), (0.7, 0.95), (0.2, 0.3), (0.2, 0.3), (1.0, 1.1)],
    "X3": [(0.2, 0.3), (0.2, 0.3), (0.7, 0.95), (0.3, 0.4), (0.3, 0.4), (1.2, 1.3)],
}


@dataclass
class GroundTruthConfig:
    rel_se: float = 0.005
    max_replications: int = 4000
    batch: int = 50


@dataclass
class ExperimentConfig:
    spaces: dict = field(default_factory=lambda: {"X1": DesignSpace(PRODUCTION_SPACES["X1"]),
                                                  "X3": DesignSpace(PRODUCTION_SPACES["X3"])})
    k: int = 10
    ell: int = 5
    budgets: tuple = (700,)
    n0: int = 10
    observation_budget: int = 1000
    horizon: float = 2000.0
    arrival_rate: float = 1.0
    capacity: int = 5
    rng_mode: str = INDEPENDENT
    fit: FitConfig = field(default_factory=lambda: FitConfig(starts=4))
    basis: str = "constant"
    methods: tuple = METHODS
    K: int = 50
    R: int = 10
    ground_truth: GroundTruthConfig = field(default_factory=GroundTruthConfig)
    quadrature: QuadratureConfig = field(default_factory=lambda: QuadratureConfig(sobol_log2=12))
    seed: int = 0
    threads: int = 1
    out_dir: str = "results"
    cache_dir: str | None = None

    def __post_init__(self):
        if self.k < 1 or not 0 <= self.ell <= self.k:
            raise InputError(f"need k >= 1 and 0 <= ell <= k, got k={self.k}, ell={self.ell}")
        if self.n0 < 10:
            raise InputError(f"n0 must be at least 10, got {self.n0}")
        for N in self.budgets:
            if N < self.k * self.n0:
                raise InputError(f"budget {N} is below k * n0 = {self.k * self.n0}")
        if self.ell and self.observation_budget < self.ell * self.n0:
            raise InputError(f"observation budget {self.observation_budget} is below ell * n0")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise InputError(f"methods must be a nonempty subset of {METHODS}, got {list(self.methods)}")
        if self.ell == 0 and any(m != SK for m in self.methods):
            raise InputError("GPR and SKI need ell >= 1")
        if self.basis not in BASES:
            raise InputError(f"unknown basis {self.basis!r}")
        if self.rng_mode not in (INDEPENDENT, CRN):
            raise InputError(f"unknown rng mode {self.rng_mode!r}")
        for name, sp in self.spaces.items():
            if sp.d != 6:
                raise InputError(f"space {name} must have 6 coordinates, got {sp.d}")


def derive_seed(*keys: int) -> int:
    """Deterministic 32-bit seed from a tuple of nonnegative integers."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


# ---------------------------------------------------------------- config file

def config_from_mapping(m: dict, source: str = "<config>") -> ExperimentConfig:
    """Build an ExperimentConfig from a parsed YAML mapping."""
    top = Section(m, source)
    top.reject_unknown({"seed", "threads", "design", "budget", "line", "fit", "methods", "evaluation",
                        "quadrature", "output"})
    kw: dict = {}
    kw["seed"] = top.get("seed", int, 0, required=True, check=lambda v: v >= 0, why="must be >= 0")
    kw["threads"] = top.get("threads", int, 1, check=lambda v: v >= 1)

    des = top.section("design", required=True)
    des.reject_unknown({"spaces", "k", "ell"})
    kw["k"] = des.get("k", int, required=True, check=lambda v: v >= 1)
    kw["ell"] = des.get("ell", int, required=True, check=lambda v: 0 <= v <= kw["k"], why="need 0 <= ell <= k")
    if "spaces" not in des.m:
        raise des.error("missing required value", "spaces")
    sp = des.section("spaces")
    spaces = {}
    for name in sp.keys():
        v = sp.m[name]
        if isinstance(v, str):
            if v not in PRODUCTION_SPACES:
                raise sp.error(f"unknown named space {v!r} (known: {', '.join(PRODUCTION_SPACES)})", name)
            v = PRODUCTION_SPACES[v]
        try:
            spaces[str(name)] = DesignSpace([tuple(float(t) for t in pair) for pair in v])
        except (TypeError, ValueError, InputError) as exc:
            raise sp.error(f"expected a list of [lo, hi] pairs ({exc})", name) from None
    if not spaces:
        raise des.error("at least one space is required", "spaces")
    kw["spaces"] = spaces

    bud = top.section("budget", required=True)
    bud.reject_unknown({"N", "n0", "observations"})
    N = bud.m.get("N")
    if N is None:
        raise bud.error("missing required value", "N")
    Ns = N if isinstance(N, list) else [N]
    if not all(isinstance(v, int) and not isinstance(v, bool) and v > 0 for v in Ns):
        raise bud.error(f"expected a positive integer or a list of them, got {N!r}", "N")
    kw["budgets"] = tuple(Ns)
    kw["n0"] = bud.get("n0", int, 10, check=lambda v: v >= 10, why="pilot size must be at least 10")
    kw["observation_budget"] = bud.get("observations", int, 1000, check=lambda v: v >= 0)

    line = top.section("line")
    line.reject_unknown({"horizon", "arrival_rate", "capacity", "rng_mode"})
    kw["horizon"] = line.get("horizon", float, 2000.0, check=lambda v: v > 0)
    kw["arrival_rate"] = line.get("arrival_rate", float, 1.0, check=lambda v: v > 0)
    kw["capacity"] = line.get("capacity", int, 5, check=lambda v: v >= 1)
    kw["rng_mode"] = line.get("rng_mode", str, INDEPENDENT, check=lambda v: v in (INDEPENDENT, CRN),
                              why=f"use {INDEPENDENT} or {CRN}")

    fit = top.section("fit")
    fit.reject_unknown({"starts", "tolerance", "max_iterations", "seed", "basis"})
    kw["fit"] = FitConfig(
        starts=fit.get("starts", int, 4, check=lambda v: v >= 1),
        tolerance=fit.get("tolerance", float, 1e-6, check=lambda v: v > 0),
        max_iterations=fit.get("max_iterations", int, 500, check=lambda v: v >= 1),
        seed=fit.get("seed", int, 0, check=lambda v: v >= 0),
    )
    kw["basis"] = fit.get("basis", str, "constant", check=lambda v: v in BASES, why=f"one of {sorted(BASES)}")

    if "methods" in top.m:
        methods = top.m["methods"]
        if not isinstance(methods, list) or not methods or any(x not in METHODS for x in methods):
            raise top.error(f"expected a nonempty list drawn from {list(METHODS)}, got {methods!r}", "methods")
        kw["methods"] = tuple(x for x in METHODS if x in methods)

    ev = top.section("evaluation")
    ev.reject_unknown({"K", "R", "ground_truth"})
    kw["K"] = ev.get("K", int, 50, check=lambda v: v >= 1)
    kw["R"] = ev.get("R", int, 10, check=lambda v: v >= 1)
    gt = ev.section("ground_truth")
    gt.reject_unknown({"rel_se", "max_replications", "batch"})
    kw["ground_truth"] = GroundTruthConfig(
        rel_se=gt.get("rel_se", float, 0.005, check=lambda v: v > 0),
        max_replications=gt.get("max_replications", int, 4000, check=lambda v: v >= 2),
        batch=gt.get("batch", int, 50, check=lambda v: v >= 2),
    )

    q = top.section("quadrature")
    q.reject_unknown({"scheme", "gauss_nodes", "sobol_log2", "seed"})
    kw["quadrature"] = QuadratureConfig(
        scheme=q.get("scheme", str, "auto", check=lambda v: v in ("auto", "gauss", "sobol")),
        gauss_nodes=q.get("gauss_nodes", int, 32, check=lambda v: v >= 2),
        sobol_log2=q.get("sobol_log2", int, 12, check=lambda v: 2 <= v <= 24),
        seed=q.get("seed", int, 0),
    )

    out = top.section("output")
    out.reject_unknown({"dir", "cache_dir"})
    kw["out_dir"] = out.get("dir", str, "results")
    kw["cache_dir"] = out.get("cache_dir", str, None)
    try:
        return ExperimentConfig(**kw)
    except InputError as exc:
        raise ConfigError(f"{source}: line {getattr(m, 'line', 1)}: {exc}") from None


def load_experiment_config(path) -> ExperimentConfig:
    return config_from_mapping(load_config(path), str(path))


# ---------------------------------------------------------------- geometry and ground truth

@dataclass
class SpaceSetup:
    name: str
    index: int
    space: DesignSpace
    design: np.ndarray
    obs_index: np.ndarray
    points: np.ndarray


def space_setup(cfg: ExperimentConfig, name: str) -> SpaceSetup:
    """Design, observed subset and prediction points, fixed for all macro-replications."""
    s = list(cfg.spaces).index(name)
    sp = cfg.spaces[name]
    design = lhs(sp, cfg.k, derive_seed(cfg.seed, s, 0))
    obs = choose_observations(cfg.k, cfg.ell, derive_seed(cfg.seed, s, 1))
    pts = lhs(sp, cfg.K, derive_seed(cfg.seed, s, 2))
    return SpaceSetup(name, s, sp, design, obs, pts)


def _truth_key(cfg: ExperimentConfig, setup: SpaceSetup, seed: int) -> str:
    blob = json.dumps({
        "points": [[float.hex(float(v)) for v in row] for row in setup.points],
        "rel_se": cfg.ground_truth.rel_se, "max": cfg.ground_truth.max_replications,
        "batch": cfg.ground_truth.batch, "seed": seed, "horizon": cfg.horizon,
        "arrival_rate": cfg.arrival_rate, "capacity": cfg.capacity,
    }, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:20]


TRUTH_COLUMNS = ["point_index", "x1", "x2", "x3", "x4", "x5", "x6", "mean", "se", "replications"]


def cached_ground_truth(cfg: ExperimentConfig, setup: SpaceSetup) -> tuple[GroundTruth, Path]:
    """Ground truth at the prediction points, read from or written to the cache."""
    seed = derive_seed(cfg.seed, setup.index, 3)
    cache = Path(cfg.cache_dir) if cfg.cache_dir else Path(cfg.out_dir) / "cache"
    path = cache / f"ground_truth_{_truth_key(cfg, setup, seed)}.csv"
    if path.exists():
        header, arr = read_numeric_table(path)
        if arr.shape[0] == setup.points.shape[0]:
            gt = GroundTruth(column(header, arr, "mean"), column(header, arr, "se"),
                             column(header, arr, "replications").astype(int))
            return gt, path
    g = cfg.ground_truth
    gt = ground_truth(setup.points, REAL, max_replications=g.max_replications, batch=g.batch, rel_se=g.rel_se,
                      seed=seed, horizon=cfg.horizon, threads=cfg.threads, arrival_rate=cfg.arrival_rate,
                      capacity=cfg.capacity)
    short = np.flatnonzero(gt.relative_se > g.rel_se)
    if short.size:
        logger.warning("%s: %d ground-truth points stopped at the replication cap above the SE target",
                       setup.name, short.size)
    write_table(path, TRUTH_COLUMNS, _truth_rows(setup, gt))
    return gt, path


def _truth_rows(setup: SpaceSetup, gt: GroundTruth):
    return [(i, *setup.points[i], gt.mean[i], gt.se[i], gt.replications[i]) for i in range(setup.points.shape[0])]


# ---------------------------------------------------------------- one macro-replication

@dataclass
class MacroResult:
    data: Dataset
    counts: list
    obs_replications: np.ndarray
    allocation: np.ndarray
    reports: dict
    predictions: dict  # method -> (mean, mse)
    failures: dict  # method -> message


def _sample_var(x):
    return np.array([np.var(v, ddof=1) for v in x])


def macro_replication(cfg: ExperimentConfig, setup: SpaceSetup, N: int, r: int) -> MacroResult:
    """Simulate, allocate, fit and predict once."""
    k, ell, n0 = cfg.k, cfg.ell, cfg.n0
    basis = BASES[cfg.basis]
    sim_seed = derive_seed(cfg.seed, setup.index, 4, N, r)
    real_seed = derive_seed(cfg.seed, setup.index, 5, N, r)
    line = dict(horizon=cfg.horizon, arrival_rate=cfg.arrival_rate, capacity=cfg.capacity, return_counts=True)
    sim_rng = RngPolicy(cfg.rng_mode, sim_seed)
    real_rng = RngPolicy(INDEPENDENT, real_seed)
    obs_pts = setup.design[setup.obs_index]

    sims, counts = run_design(setup.design, n0, INADEQUATE, sim_rng, **line)
    real, _ = run_design(obs_pts, n0, REAL, real_rng, **line) if ell else ([], [])
    pilot = Dataset(setup.design, sims, setup.obs_index, [np.mean(v) for v in real])
    fit_cfg = replace(cfg.fit, threads=1)
    pilot_fit = fit_mle(pilot, basis, fit_cfg, method=SKI if ell else SK)

    p = pilot_fit.fitted
    G = imse_moment_matrix(p, setup.design, setup.obs_index, setup.space, cfg.quadrature)
    extra = np.zeros(k, dtype=int)
    if N > k * n0:
        extra = allocate(N - k * n0, pilot_fit.sigma_eps_hat, p, setup.design, setup.obs_index, G, floor=0).n
    obs_extra = np.zeros(ell, dtype=int)
    if ell and cfg.observation_budget > ell * n0:
        # observation noise is what is being allocated, so it is removed from the zero-noise system
        p0 = replace(p, sigma_zeta_sq=0.0)
        obs_extra = allocate(cfg.observation_budget - ell * n0, _sample_var(real), p0, setup.design,
                             setup.obs_index, G, floor=0, rows=k + np.arange(ell)).n
    if extra.any():
        more, more_c = run_design(setup.design, extra, INADEQUATE, sim_rng, first_replication=n0, **line)
        sims = [np.concatenate([a, b]) for a, b in zip(sims, more)]
        counts = [np.concatenate([a, b]) for a, b in zip(counts, more_c)]
    if obs_extra.any():
        more, _ = run_design(obs_pts, obs_extra, REAL, real_rng, first_replication=n0, **line)
        real = [np.concatenate([a, b]) for a, b in zip(real, more)]
    data = Dataset(setup.design, sims, setup.obs_index, [np.mean(v) for v in real])

    reports, preds, failures = {}, {}, {}
    for method in cfg.methods:
        try:
            rep = fit_mle(data, basis, fit_cfg, method=method)
            pr = plugin_predict(rep, data, setup.points)
            reports[method] = rep
            preds[method] = (np.asarray(pr.mean), np.asarray(pr.mse))
        except (FitError, NumericError, InputError, EmptySampleError) as exc:
            failures[method] = str(exc)
            logger.warning("%s N=%d rep %d: %s failed: %s", setup.name, N, r, method, exc)
    return MacroResult(data, counts, n0 + obs_extra, n0 + extra, reports, preds, failures)


# ---------------------------------------------------------------- full experiment

EMSE_COLUMNS = ["design_space", "N", "method", "emse", "se", "replications", "failures"]
PREDICTION_COLUMNS = ["replication", "point_index", "mean", "mse", "truth"]


@dataclass
class EmseRow:
    design_space: str
    N: int
    method: str
    emse: float
    se: float
    replications: int
    failures: int


def emse_from_errors(sq_errors: list[np.ndarray]) -> tuple[float, float]:
    """Mean over macro-replications of the mean squared error, and its standard error."""
    per_rep = np.array([np.mean(e) for e in sq_errors])
    if per_rep.size == 0:
        return float("nan"), float("nan")
    se = per_rep.std(ddof=1) / np.sqrt(per_rep.size) if per_rep.size > 1 else float("nan")
    return float(per_rep.mean()), float(se)


def run_experiment(cfg: ExperimentConfig, persist: bool = True) -> list[EmseRow]:
    """Run every (space, budget, method) combination; optionally write artifacts."""
    out = Path(cfg.out_dir)
    rows: list[EmseRow] = []
    for name in cfg.spaces:
        setup = space_setup(cfg, name)
        gt, _ = cached_ground_truth(cfg, setup)
        truth = gt.mean
        if persist:
            write_table(out / f"design_{name}.csv", ["point_index", *[f"x{p + 1}" for p in range(6)], "observed"],
                        [(i, *setup.design[i], int(i in setup.obs_index)) for i in range(cfg.k)])
            write_table(out / f"points_{name}.csv", [f"x{p + 1}" for p in range(6)], setup.points)
            write_table(out / f"ground_truth_{name}.csv", TRUTH_COLUMNS, _truth_rows(setup, gt))
        for N in cfg.budgets:
            def one(r, N=N):
                return macro_replication(cfg, setup, N, r)

            if cfg.threads > 1:
                with ThreadPoolExecutor(cfg.threads) as pool:
                    results = list(pool.map(one, range(cfg.R)))
            else:
                results = [one(r) for r in range(cfg.R)]
            tag = f"{name}_N{N}"
            for method in cfg.methods:
                sq, pred_rows, fails = [], [], 0
                for r, res in enumerate(results):
                    if method not in res.predictions:
                        fails += 1
                        continue
                    mean, mse = res.predictions[method]
                    sq.append((mean - truth) ** 2)
                    pred_rows += [(r, i, mean[i], mse[i], truth[i]) for i in range(cfg.K)]
                emse, se = emse_from_errors(sq)
                rows.append(EmseRow(name, N, method, emse, se, len(sq), fails))
                if persist:
                    write_table(out / "predictions" / f"{tag}_{method}.csv", PREDICTION_COLUMNS, pred_rows)
            if persist:
                for r, res in enumerate(results):
                    write_dataset(out / "datasets" / f"{tag}_r{r}", res.data, res.counts, res.obs_replications)
                    for method, rep in res.reports.items():
                        save_model(out / "fits" / f"{tag}_r{r}_{method}.json", rep)
                    if res.failures:
                        (out / "fits").mkdir(parents=True, exist_ok=True)
                        write_table(out / "fits" / f"{tag}_r{r}_failures.csv", ["method", "message"],
                                    sorted(res.failures.items()))
    if persist:
        write_emse_table(out / "emse.csv", rows)
    return rows


def write_emse_table(path, rows: list[EmseRow]) -> None:
    write_table(path, EMSE_COLUMNS, [(r.design_space, r.N, r.method, r.emse, r.se, r.replications, r.failures)
                                     for r in rows])


def emse_from_predictions(path) -> tuple[float, float]:
    """Recompute EMSE from a persisted predictions file."""
    header, arr = read_numeric_table(path)
    rep = column(header, arr, "replication").astype(int)
    err = (column(header, arr, "mean") - column(header, arr, "truth")) ** 2
    return emse_from_errors([err[rep == r] for r in np.unique(rep)])
