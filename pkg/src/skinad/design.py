"""Experiment design: Latin hypercube points and IMSE-optimal replication
allocation across fixed design points.

Integrals over the design space are taken with respect to the uniform
probability measure on the box, so the integrated MSE is the average MSE
over the space.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.stats import qmc

from .errors import InputError
from .estimation import FitConfig, FitReport, fit_mle
from .kernels import as_points, factorize
from .metamodel import BasisSpec, CONSTANT_BASIS, Dataset, NoiseModel, SkiParams, cross_cov, joint_cov_matrix


@dataclass(frozen=True)
class DesignSpace:
    bounds: tuple

    def __post_init__(self):
        b = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        if not b:
            raise InputError("design space needs at least one coordinate")
        for p, (lo, hi) in enumerate(b):
            if not lo < hi:
                raise InputError(f"coordinate {p}: lower bound {lo} is not below upper bound {hi}")
        object.__setattr__(self, "bounds", b)

    @property
    def d(self) -> int:
        return len(self.bounds)

    @property
    def lower(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.bounds])

    @property
    def upper(self) -> np.ndarray:
        return np.array([hi for _, hi in self.bounds])

    def scale(self, unit: np.ndarray) -> np.ndarray:
        return self.lower + unit * (self.upper - self.lower)


@dataclass
class Allocation:
    n: np.ndarray
    budget: int

    def __post_init__(self):
        self.n = np.asarray(self.n, dtype=int)
        if self.n.sum() > self.budget:
            raise InputError(f"allocation uses {self.n.sum()} replications, budget is {self.budget}")


@dataclass
class QuadratureConfig:
    """``scheme`` is "auto", "gauss" or "sobol"; auto picks Gauss for d <= 2."""

    scheme: str = "auto"
    gauss_nodes: int = 32
    sobol_log2: int = 14
    seed: int = 0


@dataclass
class ImseMomentMatrix:
    G: np.ndarray
    error_estimate: float


def lhs(space: DesignSpace, k: int, seed: int) -> np.ndarray:
    """Latin hypercube sample of ``k`` points in ``space``."""
    if k <= 0:
        raise InputError(f"need a positive number of points, got {k}")
    unit = qmc.LatinHypercube(d=space.d, seed=np.random.default_rng(seed)).random(k)
    return space.scale(unit)


def choose_observations(k: int, ell: int, seed: int) -> np.ndarray:
    """Uniformly choose ``ell`` distinct design-point indices."""
    if not 0 <= ell <= k:
        raise InputError(f"cannot observe {ell} of {k} design points")
    return np.sort(np.random.default_rng(seed).choice(k, size=ell, replace=False))


def quadrature(space: DesignSpace, config: QuadratureConfig | None = None, coarse: bool = False):
    """Nodes and weights (summing to 1) for averaging over ``space``."""
    config = config or QuadratureConfig()
    scheme = config.scheme
    if scheme == "auto":
        scheme = "gauss" if space.d <= 2 else "sobol"
    if scheme == "gauss":
        m = config.gauss_nodes // 2 if coarse else config.gauss_nodes
        x, w = np.polynomial.legendre.leggauss(m)
        x, w = 0.5 * (x + 1), 0.5 * w
        grids = np.meshgrid(*([x] * space.d), indexing="ij")
        wgrids = np.meshgrid(*([w] * space.d), indexing="ij")
        unit = np.stack([g.ravel() for g in grids], axis=1)
        weights = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
        return space.scale(unit), weights
    if scheme == "sobol":
        m = config.sobol_log2 - 1 if coarse else config.sobol_log2
        unit = qmc.Sobol(d=space.d, scramble=True, seed=np.random.default_rng(config.seed)).random_base2(m)
        return space.scale(unit), np.full(unit.shape[0], 1.0 / unit.shape[0])
    raise InputError(f"unknown quadrature scheme {config.scheme!r}")


def imse_moment_matrix(params: SkiParams, design, obs_index, space: DesignSpace,
                       quad: QuadratureConfig | None = None) -> ImseMomentMatrix:
    """G_ij = average over the space of C_i(x0) C_j(x0).

    The error estimate is the largest entrywise change against a rule with
    half the resolution.
    """
    def gram(nodes, w):
        C = cross_cov(params, design, obs_index, nodes)
        G = (C * w) @ C.T
        return 0.5 * (G + G.T)

    G = gram(*quadrature(space, quad))
    G_coarse = gram(*quadrature(space, quad, coarse=True))
    return ImseMomentMatrix(G, float(np.max(np.abs(G - G_coarse))))


def _as_G(G):
    return G.G if isinstance(G, ImseMomentMatrix) else np.asarray(G)


def imse(n, params: SkiParams, noise: NoiseModel, design, obs_index, G) -> float:
    """Closed-form integrated MSE for replication counts ``n``."""
    V = joint_cov_matrix(params, design, obs_index, noise.cov(np.asarray(n, dtype=float)))
    Vinv = factorize(V).inverse()
    return float(params.prior_variance() - np.sum(_as_G(G) * Vinv))


def allocation_weights(sigma_sq, params: SkiParams, design, obs_index, G, rows=None) -> np.ndarray:
    """sqrt(sigma_i^2 [Vt^-1 G Vt^-1]_ii) for the selected rows of the joint system.

    ``Vt`` is the joint covariance with the simulation noise removed.  By
    default the rows are the k simulation rows.
    """
    design = as_points(design)
    k = design.shape[0]
    rows = np.arange(k) if rows is None else np.asarray(rows, dtype=int)
    sigma_sq = np.asarray(sigma_sq, dtype=float)
    if sigma_sq.shape != rows.shape:
        raise InputError(f"{rows.size} rows but {sigma_sq.size} variances")
    Vt = joint_cov_matrix(params, design, obs_index, np.zeros((k, k)))
    fac = factorize(Vt)
    A = fac.solve(_as_G(G))
    Q = fac.solve(A.T)  # Vt^-1 G Vt^-1 (G symmetric)
    diag = np.clip(np.diag(Q)[rows], 0.0, None)
    return np.sqrt(sigma_sq * diag)


def round_allocation(real: np.ndarray, total: int, floor: int = 1) -> np.ndarray:
    """Integer allocation summing to ``total`` by largest remainder, each >= floor."""
    real = np.asarray(real, dtype=float)
    k = real.size
    if total < floor * k:
        raise InputError(f"budget {total} cannot give {floor} to each of {k} points")
    n = np.maximum(np.floor(real).astype(int), floor)
    rem = real - n
    # stable ordering keeps ties deterministic
    while n.sum() < total:
        i = int(np.argsort(-rem, kind="stable")[0])
        n[i] += 1
        rem[i] -= 1.0
    while n.sum() > total:
        cand = np.where(n > floor)[0]
        i = int(cand[np.argsort(rem[cand], kind="stable")[0]])
        n[i] -= 1
        rem[i] += 1.0
    return n


def allocate(budget: int, sigma_eps_sq, params: SkiParams, design, obs_index, G,
             floor: int = 1, rows=None) -> Allocation:
    """Approximate IMSE-optimal allocation: n_i proportional to the weights."""
    sigma_eps_sq = np.asarray(sigma_eps_sq, dtype=float)
    k = sigma_eps_sq.size
    if budget < floor * k:
        raise InputError(f"budget {budget} is smaller than {floor} x {k} points")
    w = allocation_weights(sigma_eps_sq, params, design, obs_index, G, rows)
    if not np.all(np.isfinite(w)):
        raise InputError("allocation weights are not finite")
    real = np.full(k, budget / k) if w.sum() == 0 else budget * w / w.sum()
    return Allocation(round_allocation(real, budget, floor), budget)


Simulator = Callable[[int, int, int], np.ndarray]


def two_stage(simulate: Simulator, design, obs_index, z, budget: int, n0: int, space: DesignSpace,
              fit_config: FitConfig | None = None, quad: QuadratureConfig | None = None,
              basis: BasisSpec = CONSTANT_BASIS, n_theta: int = 1):
    """Pilot replications, fit, allocate the remainder, run it, refit.

    ``simulate(i, start, count)`` returns the outputs of replications
    ``start .. start + count - 1`` at design point ``i``.  Returns the final
    fit, the total allocation and the final dataset.
    """
    design = as_points(design)
    k = design.shape[0]
    if n0 < 10:
        raise InputError(f"pilot size n0={n0} must be at least 10")
    if budget < k * n0:
        raise InputError(f"budget {budget} is below the pilot requirement {k} x {n0}")
    reps = [np.asarray(simulate(i, 0, n0), dtype=float) for i in range(k)]
    data = Dataset(design, reps, obs_index, z)
    fit = fit_mle(data, basis, fit_config, n_theta=n_theta)
    extra_total = budget - k * n0
    extra = np.zeros(k, dtype=int)
    if extra_total > 0:
        G = imse_moment_matrix(fit.fitted, design, data.obs_index, space, quad)
        extra = allocate(extra_total, fit.sigma_eps_hat, fit.fitted, design, data.obs_index, G, floor=0).n
        reps = [np.concatenate([reps[i], simulate(i, n0, int(extra[i]))]) if extra[i] else reps[i]
                for i in range(k)]
        data = Dataset(design, reps, obs_index, z)
        fit = fit_mle(data, basis, fit_config, n_theta=n_theta)
    return fit, Allocation(n0 + extra, budget), data
