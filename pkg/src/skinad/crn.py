"""Effect of common random numbers on SK-i prediction.

A two-point model with closed-form MSE and regime classification, and a
Monte Carlo sweep on synthetic one-dimensional surfaces.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .errors import InputError, NumericError
from .kernels import KernelSpec, cov_matrix, factorize
from .metamodel import SkiParams, cross_cov, joint_cov_matrix

DECREASING = "Decreasing"
INCREASING = "Increasing"
INCREASE_THEN_DECREASE = "IncreaseThenDecrease"


@dataclass(frozen=True)
class TwoPointModel:
    """Two design points, the second also observed, and one prediction point.

    ``v`` is the variance of each averaged simulation error and ``omega``
    their correlation.  ``r0`` is the correlation of both fields between the
    prediction point and each design point; ``r12`` is the correlation of M
    between the design points.
    """

    rho: float
    tau_m_sq: float
    tau_w_sq: float
    v: float
    r0: float
    r12: float
    sigma_zeta_sq: float
    omega: float = 0.0

    def __post_init__(self):
        if self.rho == 0:
            raise InputError("rho must be nonzero")
        if not self.v > 0:
            raise InputError(f"v must be positive, got {self.v}")
        if not self.r0 > 0:
            raise InputError(f"r0 must be positive, got {self.r0}")
        if not 0 <= self.r12 <= 1:
            raise InputError(f"r12 must lie in [0, 1], got {self.r12}")
        if not 0 <= self.omega <= 1:
            raise InputError(f"omega must lie in [0, 1], got {self.omega}")
        if self.tau_m_sq <= 0 or self.tau_w_sq < 0 or self.sigma_zeta_sq < 0:
            raise InputError("variances must be nonnegative (tau_m_sq positive)")


@dataclass
class RegimeReport:
    regime: str
    threshold_low: float
    threshold_high: float
    omega_star: float | None = None


def _A(m: TwoPointModel, w):
    return (m.tau_m_sq + m.v) ** 2 - (m.tau_m_sq * m.r12 + m.v * w) ** 2


def mse_two_point(m: TwoPointModel) -> float:
    """Closed-form SK-i MSE of the two-point model."""
    rho2, tm, tw, v, r0, r12, w = m.rho**2, m.tau_m_sq, m.tau_w_sq, m.v, m.r0, m.r12, m.omega
    A = _A(m, w)
    B = (rho2 * tm + tw + m.sigma_zeta_sq) * A - rho2 * tm**2 * ((tm + v) * (1 + r12**2) - 2 * r12 * (tm * r12 + v * w))
    if not B > 0:
        raise NumericError(f"two-point system is not positive definite (B={B:.3g})", min_eigenvalue=B)
    den = tm * (1 + r12) + v * (1 + w)
    prior = rho2 * tm + tw
    return float(prior - 2 * rho2 * tm**2 * r0**2 / den
                 - r0**2 * (prior - rho2 * tm**2 * (1 + r12) / den) ** 2 * A / B)


def h_function(m: TwoPointModel, w) -> float:
    """Increasing function of omega whose sign is opposite to dMSE/domega."""
    rho2, tm, tw, v, r12, sz = m.rho**2, m.tau_m_sq, m.tau_w_sq, m.v, m.r12, m.sigma_zeta_sq
    A = _A(m, w)
    C = rho2 * tm * v * (1 + w) + tw * (tm * (1 + r12) + v * (1 + w))
    D = sz * A + rho2 * tm**2 * v * (1 - r12) * (r12 - w)
    return float((tm + v) * (tm * r12 + v * w) * (1 - r12) ** 2 * C**2
                 - (1 - r12) * (tm * (1 - r12) + v * (1 - w)) * C * D - D**2)


def thresholds(m: TwoPointModel) -> tuple[float, float]:
    tm, tw, v, r12 = m.tau_m_sq, m.tau_w_sq, m.v, m.r12
    low = tm * tw * r12 * (1 - r12) / (tm * (1 - r12) + v)
    high = tw * r12 + v * (m.rho**2 + tw / tm)
    return low, high


def classify_regime(m: TwoPointModel) -> RegimeReport:
    """Shape of the MSE as a function of omega on [0, 1]."""
    low, high = thresholds(m)
    if m.sigma_zeta_sq <= low:
        return RegimeReport(DECREASING, low, high)
    if m.sigma_zeta_sq >= high:
        return RegimeReport(INCREASING, low, high)
    star = brentq(lambda w: h_function(m, w), 0.0, 1.0, xtol=1e-12, rtol=4 * np.finfo(float).eps)
    return RegimeReport(INCREASE_THEN_DECREASE, low, high, float(star))


def embed_two_point(m: TwoPointModel):
    """Planar design realizing the two-point model with squared-exponential kernels.

    Returns (params, eps_cov, design, obs_index, x0).  Needs
    r0 <= r12 ** 0.25 and r12 > 0.
    """
    if m.r12 <= 0:
        raise InputError("r12 must be positive to place the points")
    if m.r0 > m.r12**0.25 * (1 + 1e-12):
        raise InputError(f"r0={m.r0} exceeds r12**0.25={m.r12 ** 0.25}; no planar placement")
    a = np.sqrt(-np.log(m.r12) / 4)
    b = np.sqrt(max(-np.log(m.r0) - a * a, 0.0))
    design = np.array([[-a, 0.0], [a, 0.0]])
    x0 = np.array([[0.0, b]])
    params = SkiParams(m.rho, [0.0], [0.0], KernelSpec(m.tau_m_sq, [1.0]),
                       KernelSpec(m.tau_w_sq, [1.0]), m.sigma_zeta_sq)
    eps_cov = m.v * np.array([[1.0, m.omega], [m.omega, 1.0]])
    return params, eps_cov, design, np.array([1]), x0


# ---------------------------------------------------------------- sweep

@dataclass
class SweepConfig:
    omegas: tuple = tuple(np.round(np.linspace(0.0, 1.0, 11), 10))
    thetas: tuple = (5.0, 10.0, 20.0, 30.0)
    sigma_eps_sq: tuple = (1.0, 10.0)
    sigma_zeta_sq: tuple = (0.01, 0.1, 10.0)
    instances: int = 20
    macro_replications: int = 20
    replications: int = 10
    design: tuple = tuple(np.round(np.linspace(0.0, 1.0, 11), 10))
    observations: tuple = tuple(np.round(np.linspace(0.0, 1.0, 6), 10))
    grid: tuple = tuple(np.arange(1, 101) / 100)
    tau_m_sq: float = 1.0
    tau_w_sq: float = 1.0
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.instances < 1 or self.macro_replications < 1 or self.replications < 1:
            raise InputError("instances, macro_replications and replications must be positive")
        if any(not 0 <= w <= 1 for w in self.omegas):
            raise InputError("omega values must lie in [0, 1]")
        if 0.0 not in [float(w) for w in self.omegas]:
            raise InputError("omega grid must contain 0 (the reference for the ratio)")
        design = list(np.round(self.design, 12))
        if any(round(float(o), 12) not in design for o in self.observations):
            raise InputError("observation locations must be design points")


SWEEP_COLUMNS = ("omega", "theta", "sigma_eps_sq", "sigma_zeta_sq", "ratio_mean", "ratio_se", "n_instances")


@dataclass
class SweepCell:
    theta: float
    sigma_eps_sq: float
    sigma_zeta_sq: float
    omegas: np.ndarray
    ratio_mean: np.ndarray
    ratio_se: np.ndarray
    n_instances: int
    error: str | None = None


@dataclass
class SweepResult:
    cells: list = field(default_factory=list)

    def rows(self):
        for c in self.cells:
            for w, r, s in zip(c.omegas, c.ratio_mean, c.ratio_se):
                yield (float(w), c.theta, c.sigma_eps_sq, c.sigma_zeta_sq, float(r), float(s), c.n_instances)

    def cell(self, theta, sigma_eps_sq, sigma_zeta_sq) -> SweepCell:
        for c in self.cells:
            if (c.theta, c.sigma_eps_sq, c.sigma_zeta_sq) == (theta, sigma_eps_sq, sigma_zeta_sq):
                return c
        raise KeyError((theta, sigma_eps_sq, sigma_zeta_sq))

    def ratio(self, omega, theta, sigma_eps_sq, sigma_zeta_sq) -> float:
        c = self.cell(theta, sigma_eps_sq, sigma_zeta_sq)
        i = int(np.argmin(np.abs(c.omegas - omega)))
        return float(c.ratio_mean[i])


def _field_sampler(points: np.ndarray, theta: float, tau_sq: float):
    """Matrix S with S @ xi distributed as the field at ``points`` (xi standard normal)."""
    K = cov_matrix(KernelSpec(tau_sq, [theta]), points)
    lam, U = np.linalg.eigh(K)
    return U * np.sqrt(np.clip(lam, 0.0, None))


def _weights(params: SkiParams, eps_cov, design, obs_index, grid) -> np.ndarray:
    V = joint_cov_matrix(params, design, obs_index, eps_cov)
    C = cross_cov(params, design, obs_index, grid)
    return factorize(V).solve(C).T  # (grid, k + ell)


def _cell_weights(cfg: SweepConfig, theta, s_eps, s_zeta):
    design = np.asarray(cfg.design, dtype=float)[:, None]
    obs_index = np.array([int(np.argmin(np.abs(design[:, 0] - o))) for o in cfg.observations])
    params = SkiParams(1.0, [0.0], [0.0], KernelSpec(cfg.tau_m_sq, [theta]),
                       KernelSpec(cfg.tau_w_sq, [theta]), s_zeta)
    k = design.shape[0]
    grid = np.asarray(cfg.grid, dtype=float)[:, None]
    out = []
    for w in cfg.omegas:
        corr = (1 - w) * np.eye(k) + w * np.ones((k, k))
        out.append(_weights(params, s_eps / cfg.replications * corr, design, obs_index, grid))
    return np.stack(out), obs_index


def _theta_draws(cfg: SweepConfig, t_index: int, theta: float):
    """Surfaces and standard normals shared by every cell with this theta."""
    design = np.asarray(cfg.design, dtype=float)
    grid = np.asarray(cfg.grid, dtype=float)
    pts = np.unique(np.round(np.concatenate([design, grid]), 12))
    d_idx = np.searchsorted(pts, np.round(design, 12))
    g_idx = np.searchsorted(pts, np.round(grid, 12))
    SM = _field_sampler(pts[:, None], theta, cfg.tau_m_sq)
    SW = _field_sampler(pts[:, None], theta, cfg.tau_w_sq)
    k, ell = design.size, len(cfg.observations)
    R, n = cfg.macro_replications, cfg.replications
    draws = []
    for inst in range(cfg.instances):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, t_index, inst]))
        M = SM @ rng.standard_normal(pts.size)
        W = SW @ rng.standard_normal(pts.size)
        xi0 = rng.standard_normal((R, n))
        xi = rng.standard_normal((R, n, k))
        zeta = rng.standard_normal((R, ell))
        draws.append((M[d_idx], M[g_idx] + W[g_idx], M + W, xi0, xi, zeta))
    return draws, pts


def _run_cell(cfg: SweepConfig, theta, s_eps, s_zeta, draws, pts) -> SweepCell:
    omegas = np.asarray(cfg.omegas, dtype=float)
    try:
        Wts, obs_index = _cell_weights(cfg, theta, s_eps, s_zeta)
    except NumericError as exc:
        nan = np.full(omegas.size, np.nan)
        return SweepCell(theta, s_eps, s_zeta, omegas, nan, nan, 0, str(exc))
    design = np.round(np.asarray(cfg.design, dtype=float), 12)
    obs_pts = np.searchsorted(pts, design[obs_index])
    sig = np.sqrt(s_eps)
    ratios = []
    for M_d, Z_g, Z_all, xi0, xi, zeta in draws:
        z = Z_all[obs_pts][None, :] + np.sqrt(s_zeta) * zeta  # (R, ell)
        emse = np.empty(omegas.size)
        for a, w in enumerate(omegas):
            eps = sig * (np.sqrt(w) * xi0[:, :, None] + np.sqrt(1 - w) * xi)  # (R, n, k)
            ybar = M_d[None, :] + eps.mean(axis=1)
            data = np.concatenate([ybar, z], axis=1)  # (R, k + ell)
            err = data @ Wts[a].T - Z_g[None, :]
            emse[a] = np.mean(err**2)
        ratios.append(emse / emse[omegas == 0.0][0])
    ratios = np.asarray(ratios)
    se = ratios.std(axis=0, ddof=1) / np.sqrt(len(ratios)) if len(ratios) > 1 else np.zeros(omegas.size)
    return SweepCell(theta, s_eps, s_zeta, omegas, ratios.mean(axis=0), se, len(ratios))


def synthetic_sweep(cfg: SweepConfig | None = None) -> SweepResult:
    """EMSE ratio EMSE(omega) / EMSE(0) for each parameter cell, averaged over instances.

    SK-i predicts with the generating parameters.  All cells with the same
    theta share surfaces and standard-normal draws, so ratios across omega,
    noise levels and observation variances are compared on common numbers.
    """
    cfg = cfg or SweepConfig()
    jobs = []
    for t_index, theta in enumerate(cfg.thetas):
        draws, pts = _theta_draws(cfg, t_index, float(theta))
        for s_eps in cfg.sigma_eps_sq:
            for s_zeta in cfg.sigma_zeta_sq:
                jobs.append((float(theta), float(s_eps), float(s_zeta), draws, pts))

    def run(job):
        return _run_cell(cfg, *job)

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            cells = list(pool.map(run, jobs))
    else:
        cells = [run(j) for j in jobs]
    return SweepResult(cells)
