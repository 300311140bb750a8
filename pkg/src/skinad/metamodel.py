"""SK, GPR and SK-i predictors with their exact mean squared errors.

Notation follows the usual stochastic-kriging layout.  The simulation
response is ``Y(x) = f(x)'beta + M(x)``, the real response is
``Z(x) = rho * Y(x) + g(x)'gamma + W(x)``, the simulation outputs at design
point ``i`` are averaged into ``ybar_i`` and the real system is observed at a
subset of the design points, ``z_j = Z(x_{obs[j]}) + zeta_j``.  The joint
vector ``(ybar, z)`` is Gaussian with covariance ``V``:

    V11 = Sigma_M(k) + Sigma_eps
    V12 = rho * Sigma_M(k, obs)
    V22 = rho^2 * Sigma_M(obs) + Sigma_W(obs) + sigma_zeta^2 * I

All solves go through a Cholesky factor; no matrix is explicitly inverted.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import InputError
from .kernels import Factor, KernelSpec, as_points, cov_matrix, factorize

SK = "SK"
GPR = "GPR"
SKI = "SKI"
METHODS = (SK, GPR, SKI)


def _constant(X: np.ndarray) -> np.ndarray:
    return np.ones((X.shape[0], 1))


@dataclass(frozen=True)
class BasisSpec:
    """Trend bases: ``f`` for the simulation surface, ``g`` for the discrepancy.

    Each maps an (n, d) array of points to an (n, p) design matrix.
    """

    f: Callable[[np.ndarray], np.ndarray] = _constant
    g: Callable[[np.ndarray], np.ndarray] = _constant

    def F(self, X) -> np.ndarray:
        return np.atleast_2d(np.asarray(self.f(as_points(X)), dtype=float))

    def G(self, X) -> np.ndarray:
        return np.atleast_2d(np.asarray(self.g(as_points(X)), dtype=float))


CONSTANT_BASIS = BasisSpec()


@dataclass(frozen=True)
class SkiParams:
    rho: float
    beta: np.ndarray
    gamma: np.ndarray
    kernel_M: KernelSpec
    kernel_W: KernelSpec
    sigma_zeta_sq: float

    def __post_init__(self):
        object.__setattr__(self, "rho", float(self.rho))
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)))
        object.__setattr__(self, "gamma", np.atleast_1d(np.asarray(self.gamma, dtype=float)))
        object.__setattr__(self, "sigma_zeta_sq", float(self.sigma_zeta_sq))
        if not self.kernel_M.spatial_variance > 0:
            raise InputError("tau_M^2 must be positive")
        if not self.sigma_zeta_sq >= 0:
            raise InputError("sigma_zeta^2 must be >= 0")

    @property
    def tau_m_sq(self) -> float:
        return self.kernel_M.spatial_variance

    @property
    def tau_w_sq(self) -> float:
        return self.kernel_W.spatial_variance

    def prior_variance(self) -> float:
        """Var Z(x0) for stationary fields: rho^2 tau_M^2 + tau_W^2."""
        return self.rho ** 2 * self.tau_m_sq + self.tau_w_sq


@dataclass(frozen=True)
class NoiseModel:
    """Per-replication simulation-error variances and their CRN correlation."""

    sigma_eps_sq: np.ndarray
    crn_corr: Optional[np.ndarray] = None

    def __post_init__(self):
        s = np.atleast_1d(np.asarray(self.sigma_eps_sq, dtype=float))
        object.__setattr__(self, "sigma_eps_sq", s)
        if np.any(s < 0):
            raise InputError("simulation-error variances must be >= 0")
        if self.crn_corr is not None:
            c = np.asarray(self.crn_corr, dtype=float)
            if c.shape != (s.size, s.size):
                raise InputError(f"crn_corr must be {s.size}x{s.size}, got {c.shape}")
            if not np.allclose(c, c.T) or not np.allclose(np.diag(c), 1.0):
                raise InputError("crn_corr must be symmetric with unit diagonal")
            object.__setattr__(self, "crn_corr", c)

    def cov(self, n) -> np.ndarray:
        """Covariance of the averaged errors given replication counts ``n``."""
        n = np.asarray(n, dtype=float)
        if n.shape != self.sigma_eps_sq.shape:
            raise InputError(f"noise has {self.sigma_eps_sq.size} points, counts have {n.size}")
        sd = np.sqrt(self.sigma_eps_sq / n)
        if self.crn_corr is None:
            return np.diag(sd ** 2)
        return np.outer(sd, sd) * self.crn_corr

    def subset(self, idx) -> "NoiseModel":
        idx = np.asarray(idx, dtype=int)
        crn = None if self.crn_corr is None else self.crn_corr[np.ix_(idx, idx)]
        return NoiseModel(self.sigma_eps_sq[idx], crn)


@dataclass
class Dataset:
    """Design points, their replication outputs, and real observations.

    ``obs_index[j]`` is the design-point index where ``z[j]`` was observed,
    so observation locations are a subset of the design by construction.
    """

    design: np.ndarray
    replications: list
    obs_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    z: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.design = as_points(self.design)
        k = self.design.shape[0]
        if k == 0:
            raise InputError("a dataset needs at least one design point")
        self.replications = [np.atleast_1d(np.asarray(r, dtype=float)) for r in self.replications]
        if len(self.replications) != k:
            raise InputError(f"{k} design points but {len(self.replications)} replication lists")
        for i, r in enumerate(self.replications):
            if r.size < 1:
                raise InputError(f"design point {i} has no replications")
        self.obs_index = np.asarray(self.obs_index, dtype=int).reshape(-1)
        self.z = np.asarray(self.z, dtype=float).reshape(-1)
        if self.obs_index.size != self.z.size:
            raise InputError(f"{self.obs_index.size} observation indices but {self.z.size} values")
        if self.obs_index.size:
            if self.obs_index.min() < 0 or self.obs_index.max() >= k:
                raise InputError("observation index out of range")
            if np.unique(self.obs_index).size != self.obs_index.size:
                raise InputError("observation indices must be distinct")

    @property
    def k(self) -> int:
        return self.design.shape[0]

    @property
    def ell(self) -> int:
        return self.obs_index.size

    @property
    def d(self) -> int:
        return self.design.shape[1]

    @property
    def n(self) -> np.ndarray:
        return np.array([r.size for r in self.replications])

    @property
    def ybar(self) -> np.ndarray:
        return np.array([r.mean() for r in self.replications])

    @property
    def obs_points(self) -> np.ndarray:
        return self.design[self.obs_index]

    def without_observations(self) -> "Dataset":
        return Dataset(self.design, self.replications)


@dataclass
class JointCov:
    V: np.ndarray
    k: int
    ell: int
    factor: Factor

    @property
    def V11(self):
        return self.V[: self.k, : self.k]

    @property
    def V12(self):
        return self.V[: self.k, self.k :]

    @property
    def V22(self):
        return self.V[self.k :, self.k :]


@dataclass
class PredictionResult:
    """Point prediction and MSE; ``mean``/``mse`` are arrays for batch input."""

    method: str
    mean: np.ndarray
    mse: np.ndarray
    at: np.ndarray


# ---------------------------------------------------------------------------
# covariance assembly


def joint_cov_matrix(params: SkiParams, design, obs_index, eps_cov) -> np.ndarray:
    design = as_points(design)
    obs = design[np.asarray(obs_index, dtype=int)]
    k, ell = design.shape[0], obs.shape[0]
    rho = params.rho
    V = np.empty((k + ell, k + ell))
    V[:k, :k] = cov_matrix(params.kernel_M, design) + eps_cov
    if ell:
        V12 = rho * cov_matrix(params.kernel_M, design, obs)
        V[:k, k:] = V12
        V[k:, :k] = V12.T
        V[k:, k:] = (
            rho ** 2 * cov_matrix(params.kernel_M, obs)
            + cov_matrix(params.kernel_W, obs)
            + params.sigma_zeta_sq * np.eye(ell)
        )
    return V


def assemble_joint_cov(params: SkiParams, noise: NoiseModel, data: Dataset) -> JointCov:
    V = joint_cov_matrix(params, data.design, data.obs_index, noise.cov(data.n))
    return JointCov(V, data.k, data.ell, factorize(V))


def cross_cov(params: SkiParams, design, obs_index, x0) -> np.ndarray:
    """Covariance between Z(x0) and (ybar, z), shape (k + ell, n0)."""
    design = as_points(design)
    x0 = as_points(x0)
    obs = design[np.asarray(obs_index, dtype=int)]
    C1 = params.rho * cov_matrix(params.kernel_M, design, x0)
    if obs.shape[0] == 0:
        return C1
    C2 = params.rho ** 2 * cov_matrix(params.kernel_M, obs, x0) + cov_matrix(params.kernel_W, obs, x0)
    return np.vstack([C1, C2])


def trend_matrix(params: SkiParams, basis: BasisSpec, design, obs_index) -> np.ndarray:
    """The stacked basis matrix H = [[F(k), 0], [rho F(obs), G]]."""
    design = as_points(design)
    obs = design[np.asarray(obs_index, dtype=int)]
    Fk = basis.F(design)
    p, q = Fk.shape[1], params.gamma.size
    if obs.shape[0] == 0:
        return np.hstack([Fk, np.zeros((Fk.shape[0], q))])
    top = np.hstack([Fk, np.zeros((Fk.shape[0], q))])
    bottom = np.hstack([params.rho * basis.F(obs), basis.G(obs)])
    return np.vstack([top, bottom])


def stacked_data(data: Dataset) -> np.ndarray:
    return np.concatenate([data.ybar, data.z])


def _check_basis(params: SkiParams, basis: BasisSpec, d: int):
    probe = np.zeros((1, d))
    if basis.F(probe).shape[1] != params.beta.size:
        raise InputError(f"f has {basis.F(probe).shape[1]} terms but beta has {params.beta.size}")
    if basis.G(probe).shape[1] != params.gamma.size:
        raise InputError(f"g has {basis.G(probe).shape[1]} terms but gamma has {params.gamma.size}")


def _point_batch(x0, d):
    """Return ((n0, d) points, is_single); a 1-D x0 of length d is one point."""
    arr = np.asarray(x0, dtype=float)
    if arr.ndim <= 1:
        if arr.size == d:
            return arr.reshape(1, d), True
        if d == 1:
            return arr.reshape(-1, 1), False
        raise InputError(f"prediction point has {arr.size} coordinates, expected {d}")
    if arr.ndim != 2 or arr.shape[1] != d:
        raise InputError(f"prediction points have shape {arr.shape}, expected (n, {d})")
    return arr, False


def _finish(method, mean, mse, pts, single):
    if single:
        return PredictionResult(method, float(mean[0]), float(mse[0]), pts[0])
    return PredictionResult(method, mean, mse, pts)


def gaussian_blup(factor: Factor, C: np.ndarray, resid: np.ndarray, prior_mean, prior_var):
    """Conditional mean and variance of a Gaussian target given data.

    ``C`` holds Cov(target, data) column-wise; ``resid`` is data minus its mean.
    """
    A = factor.solve(C)
    mean = prior_mean + A.T @ resid
    mse = prior_var - np.einsum("ij,ij->j", C, A)
    return mean, mse


# ---------------------------------------------------------------------------
# predictors


def predict_ski(params: SkiParams, noise: NoiseModel, data: Dataset, x0,
                basis: BasisSpec = CONSTANT_BASIS, joint: JointCov | None = None) -> PredictionResult:
    """BLUP of Z(x0) from the augmented data (ybar, z) and its optimal MSE."""
    pts, single = _point_batch(x0, data.d)
    _check_basis(params, basis, data.d)
    joint = joint or assemble_joint_cov(params, noise, data)
    H = trend_matrix(params, basis, data.design, data.obs_index)
    resid = stacked_data(data) - H @ np.concatenate([params.beta, params.gamma])
    C = cross_cov(params, data.design, data.obs_index, pts)
    prior_mean = params.rho * basis.F(pts) @ params.beta + basis.G(pts) @ params.gamma
    mean, mse = gaussian_blup(joint.factor, C, resid, prior_mean, params.prior_variance())
    return _finish(SKI, mean, mse, pts, single)


def sk_params(params: SkiParams) -> SkiParams:
    """The rho = 1, no-discrepancy slice used by plain stochastic kriging."""
    zero_w = params.kernel_W.with_params(spatial_variance=0.0)
    return replace(params, rho=1.0, gamma=np.zeros(params.gamma.size), kernel_W=zero_w, sigma_zeta_sq=0.0)


def predict_sk(params: SkiParams, noise: NoiseModel, data: Dataset, x0,
               basis: BasisSpec = CONSTANT_BASIS) -> PredictionResult:
    """Stochastic-kriging BLUP of Y(x0) from the simulation outputs alone.

    The reported MSE is the optimal MSE for predicting Y(x0); use
    :func:`mse_sk_for_z` for its MSE as a predictor of the real response.
    """
    pts, single = _point_batch(x0, data.d)
    kM = params.kernel_M
    V11 = cov_matrix(kM, data.design) + noise.cov(data.n)
    fac = factorize(V11)
    Fk = basis.F(data.design)
    resid = data.ybar - Fk @ params.beta
    c = cov_matrix(kM, data.design, pts)
    mean, mse = gaussian_blup(fac, c, resid, basis.F(pts) @ params.beta, kM.spatial_variance)
    return _finish(SK, mean, mse, pts, single)


def predict_gpr(params: SkiParams, data: Dataset, x0, basis: BasisSpec = CONSTANT_BASIS) -> PredictionResult:
    """BLUP of Z(x0) from the real observations alone."""
    pts, single = _point_batch(x0, data.d)
    obs = data.obs_points
    prior_mean = params.rho * basis.F(pts) @ params.beta + basis.G(pts) @ params.gamma
    if data.ell == 0:
        n0 = pts.shape[0]
        return _finish(GPR, prior_mean, np.full(n0, params.prior_variance()), pts, single)
    V22 = (params.rho ** 2 * cov_matrix(params.kernel_M, obs) + cov_matrix(params.kernel_W, obs)
           + params.sigma_zeta_sq * np.eye(data.ell))
    C2 = params.rho ** 2 * cov_matrix(params.kernel_M, obs, pts) + cov_matrix(params.kernel_W, obs, pts)
    resid = data.z - params.rho * basis.F(obs) @ params.beta - basis.G(obs) @ params.gamma
    mean, mse = gaussian_blup(factorize(V22), C2, resid, prior_mean, params.prior_variance())
    return _finish(GPR, mean, mse, pts, single)


# ---------------------------------------------------------------------------
# MSE comparisons


def sk_bias(params: SkiParams, basis: BasisSpec, pts) -> np.ndarray:
    """E[Z(x0) - Yhat(x0)] = (rho - 1) f'beta + g'gamma."""
    return (params.rho - 1.0) * basis.F(pts) @ params.beta + basis.G(pts) @ params.gamma


def mse_sk_for_z(params: SkiParams, noise: NoiseModel, data: Dataset, x0,
                 basis: BasisSpec = CONSTANT_BASIS):
    """MSE of the SK predictor when it is used to predict Z(x0).

    bias^2 + rho^2 Sigma_M(x0,x0) + Sigma_W(x0,x0) + (1 - 2 rho) s, with
    s = Sigma_M(x0,.)' V11^{-1} Sigma_M(x0,.).
    """
    pts, single = _point_batch(x0, data.d)
    kM = params.kernel_M
    fac = factorize(cov_matrix(kM, data.design) + noise.cov(data.n))
    c = cov_matrix(kM, data.design, pts)
    s = np.einsum("ij,ij->j", c, fac.solve(c))
    out = sk_bias(params, basis, pts) ** 2 + params.prior_variance() + (1 - 2 * params.rho) * s
    return float(out[0]) if single else out


def _blocks(params, noise, data, pts):
    joint = assemble_joint_cov(params, noise, data)
    C = cross_cov(params, data.design, data.obs_index, pts)
    return joint, C[: data.k], C[data.k :]


def mse_gap_gpr(params: SkiParams, noise: NoiseModel, data: Dataset, x0):
    """MSE_GPR - MSE_SKI via the Schur complement of V22.

    [C1 - V12 V22^{-1} C2]' S^{-1} [C1 - V12 V22^{-1} C2],
    S = V11 - V12 V22^{-1} V12'.
    """
    pts, single = _point_batch(x0, data.d)
    joint, C1, C2 = _blocks(params, noise, data, pts)
    if data.ell:
        f22 = factorize(joint.V22)
        u = C1 - joint.V12 @ f22.solve(C2)
        S = joint.V11 - joint.V12 @ f22.solve(joint.V12.T)
    else:
        u, S = C1, joint.V11
    gap = np.einsum("ij,ij->j", u, factorize(S).solve(u))
    return float(gap[0]) if single else gap


def mse_gap_sk(params: SkiParams, noise: NoiseModel, data: Dataset, x0,
               basis: BasisSpec = CONSTANT_BASIS):
    """MSE_SK(for Z) - MSE_SKI split into (bias_sq, extra_var_terms).

    extra_var_terms = (rho - 1)^2 s + [C2 - V12' V11^{-1} C1]' T^{-1} [...],
    with T = V22 - V12' V11^{-1} V12 the Schur complement of V11.
    """
    pts, single = _point_batch(x0, data.d)
    joint, C1, C2 = _blocks(params, noise, data, pts)
    f11 = factorize(joint.V11)
    c = cov_matrix(params.kernel_M, data.design, pts)
    s = np.einsum("ij,ij->j", c, f11.solve(c))
    extra = (params.rho - 1.0) ** 2 * s
    if data.ell:
        u = C2 - joint.V12.T @ f11.solve(C1)
        T = joint.V22 - joint.V12.T @ f11.solve(joint.V12)
        extra = extra + np.einsum("ij,ij->j", u, factorize(T).solve(u))
    bias_sq = sk_bias(params, basis, pts) ** 2
    if single:
        return float(bias_sq[0]), float(extra[0])
    return bias_sq, extra


# ---------------------------------------------------------------------------
# sensitivity probes

PROBES = ("sigma_eps", "sigma_zeta", "replications", "add_design_point", "add_observation")


def ski_mse(params: SkiParams, eps_cov, design, obs_index, x0) -> np.ndarray:
    """SK-i MSE from the geometry and noise covariance alone; data values are not needed."""
    V = joint_cov_matrix(params, design, obs_index, eps_cov)
    C = cross_cov(params, design, obs_index, x0)
    return params.prior_variance() - np.einsum("ij,ij->j", C, factorize(V).solve(C))


def monotonicity_probe(params: SkiParams, noise: NoiseModel, data: Dataset, x0, which: str, *,
                       index: int = 0, factor: float = 10.0, new_point: Sequence[float] | None = None,
                       new_sigma_eps_sq: float = 1.0, new_n: int = 1):
    """SK-i MSE at x0 before and after one perturbation of the experiment.

    ``which`` selects the perturbation:

    * ``sigma_eps``: multiply sigma_eps^2 at design point ``index`` by ``factor``
    * ``sigma_zeta``: multiply sigma_zeta^2 by ``factor``
    * ``replications``: multiply every n_i by ``factor`` (rounded)
    * ``add_design_point``: append ``new_point`` with ``new_n`` replications
    * ``add_observation``: observe the real system at design point ``index``
    """
    pts, single = _point_batch(x0, data.d)
    n = data.n
    before = ski_mse(params, noise.cov(n), data.design, data.obs_index, pts)
    design, obs, p = data.design, data.obs_index, params
    if noise.crn_corr is not None and which in ("add_design_point",):
        raise InputError("add_design_point probe requires independent noise")
    if which == "sigma_eps":
        s = noise.sigma_eps_sq.copy()
        s[index] *= factor
        eps = replace(noise, sigma_eps_sq=s).cov(n)
    elif which == "sigma_zeta":
        p = replace(params, sigma_zeta_sq=params.sigma_zeta_sq * factor)
        eps = noise.cov(n)
    elif which == "replications":
        eps = noise.cov(np.maximum(1, np.rint(n * factor)))
    elif which == "add_design_point":
        if new_point is None:
            raise InputError("add_design_point needs new_point")
        new = np.asarray(new_point, dtype=float).reshape(1, -1)
        # keep observation rows right after the (extended) simulation block
        design = np.vstack([data.design, new])
        eps = np.diag(np.concatenate([noise.sigma_eps_sq / n, [new_sigma_eps_sq / new_n]]))
    elif which == "add_observation":
        if index in set(obs.tolist()):
            raise InputError(f"design point {index} is already observed")
        obs = np.append(obs, index)
        eps = noise.cov(n)
    else:
        raise InputError(f"unknown probe {which!r}; choose from {PROBES}")
    after = ski_mse(p, eps, design, obs, pts)
    if single:
        return float(before[0]), float(after[0])
    return before, after
