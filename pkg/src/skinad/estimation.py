"""Parameter estimation: sample variances, Gaussian log-likelihood with
analytic gradients, multi-start maximum likelihood, and the plug-in
predictor with its corrected MSE estimator.

Three parameter layouts share one likelihood routine:

* ``SKI`` - joint model on (ybar, z): beta, gamma, rho, tau_M^2, tau_W^2,
  theta_M, theta_W, sigma_zeta^2
* ``SK`` - simulation block only: beta, tau_M^2, theta_M
* ``GPR`` - observation block only (rho fixed at 0): gamma, tau_W^2,
  theta_W, sigma_zeta^2
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize

from .errors import FitError, InputError, NumericError
from .kernels import KernelSpec, corr_matrix, corr_matrix_grads, factorize
from .metamodel import (
    CONSTANT_BASIS,
    GPR,
    SK,
    SKI,
    BasisSpec,
    Dataset,
    PredictionResult,
    SkiParams,
    _point_batch,
    cross_cov,
    joint_cov_matrix,
    trend_matrix,
)

logger = logging.getLogger(__name__)

LOG2PI = np.log(2 * np.pi)
_LOG_NAMES = ("tau_m_sq", "tau_w_sq", "theta_m", "theta_w", "sigma_zeta_sq")


def sample_variances(data: Dataset) -> np.ndarray:
    """Unbiased per-point sample variance of the replication outputs."""
    out = np.empty(data.k)
    for i, r in enumerate(data.replications):
        if r.size < 2:
            raise InputError(f"design point {i} has {r.size} replication(s); a sample variance needs 2")
        out[i] = r.var(ddof=1)
    return out


@dataclass(frozen=True)
class Layout:
    """Which blocks and parameters are active, and their vector positions."""

    method: str
    p: int  # len(beta)
    q: int  # len(gamma)
    n_theta_m: int
    n_theta_w: int

    @property
    def names(self) -> list[str]:
        if self.method == SK:
            return ["beta"] * self.p + ["tau_m_sq"] + ["theta_m"] * self.n_theta_m
        if self.method == GPR:
            return ["gamma"] * self.q + ["tau_w_sq"] + ["theta_w"] * self.n_theta_w + ["sigma_zeta_sq"]
        return (["beta"] * self.p + ["gamma"] * self.q + ["rho", "tau_m_sq", "tau_w_sq"]
                + ["theta_m"] * self.n_theta_m + ["theta_w"] * self.n_theta_w + ["sigma_zeta_sq"])

    @property
    def size(self) -> int:
        return len(self.names)

    def log_mask(self) -> np.ndarray:
        return np.array([n in _LOG_NAMES for n in self.names])

    def pack(self, params: SkiParams) -> np.ndarray:
        vals = {
            "beta": list(params.beta),
            "gamma": list(params.gamma),
            "rho": [params.rho],
            "tau_m_sq": [params.tau_m_sq],
            "tau_w_sq": [params.tau_w_sq],
            "theta_m": list(params.kernel_M.lengthscales),
            "theta_w": list(params.kernel_W.lengthscales),
            "sigma_zeta_sq": [params.sigma_zeta_sq],
        }
        out, seen = [], set()
        for n in self.names:
            if n not in seen:
                out.extend(vals[n])
                seen.add(n)
        return np.array(out, dtype=float)

    def unpack(self, vec: np.ndarray, template: SkiParams) -> SkiParams:
        vec = np.asarray(vec, dtype=float)
        groups: dict[str, list[float]] = {}
        for n, v in zip(self.names, vec):
            groups.setdefault(n, []).append(v)
        kM, kW = template.kernel_M, template.kernel_W
        if "tau_m_sq" in groups or "theta_m" in groups:
            kM = KernelSpec(groups.get("tau_m_sq", [kM.spatial_variance])[0],
                            groups.get("theta_m", kM.lengthscales), kM.family)
        if "tau_w_sq" in groups or "theta_w" in groups:
            kW = KernelSpec(groups.get("tau_w_sq", [kW.spatial_variance])[0],
                            groups.get("theta_w", kW.lengthscales), kW.family)
        return SkiParams(
            rho=groups.get("rho", [template.rho])[0],
            beta=groups.get("beta", template.beta),
            gamma=groups.get("gamma", template.gamma),
            kernel_M=kM,
            kernel_W=kW,
            sigma_zeta_sq=groups.get("sigma_zeta_sq", [template.sigma_zeta_sq])[0],
        )


def layout_for(method: str, params: SkiParams) -> Layout:
    if method not in (SK, GPR, SKI):
        raise InputError(f"unknown method {method!r}")
    return Layout(method, params.beta.size, params.gamma.size,
                  params.kernel_M.n_lengthscales, params.kernel_W.n_lengthscales)


@dataclass
class LikelihoodState:
    params: SkiParams
    loglik: float
    gradient: np.ndarray
    names: list = field(default_factory=list)


def _system(method, params, sigma_eps_hat, data, basis):
    """Data vector, its trend matrix H, coefficient vector and V for a layout."""
    if method == SK:
        F = basis.F(data.design)
        V = joint_cov_matrix(params, data.design, [], np.diag(sigma_eps_hat / data.n))
        return data.ybar, F, params.beta, V
    if method == GPR:
        obs = data.obs_points
        G = basis.G(obs)
        V = (params.tau_w_sq * corr_matrix(params.kernel_W, obs)
             + params.sigma_zeta_sq * np.eye(data.ell))
        return data.z, G, params.gamma, V
    H = trend_matrix(params, basis, data.design, data.obs_index)
    V = joint_cov_matrix(params, data.design, data.obs_index, np.diag(sigma_eps_hat / data.n))
    y = np.concatenate([data.ybar, data.z])
    return y, H, np.concatenate([params.beta, params.gamma]), V


def _dV(method, params, data, basis):
    """Derivatives of V for each covariance parameter, keyed like Layout.names."""
    X, obs = data.design, data.obs_points
    k, ell = data.k, data.ell
    tM, tW, rho = params.tau_m_sq, params.tau_w_sq, params.rho
    out = []
    if method == SK:
        out.append(corr_matrix(params.kernel_M, X))
        out.extend(tM * g for g in corr_matrix_grads(params.kernel_M, X))
        return out
    if method == GPR:
        out.append(corr_matrix(params.kernel_W, obs))
        out.extend(tW * g for g in corr_matrix_grads(params.kernel_W, obs))
        out.append(np.eye(ell))
        return out
    m = k + ell
    Rk, Rkl, Rl = (corr_matrix(params.kernel_M, X), corr_matrix(params.kernel_M, X, obs),
                   corr_matrix(params.kernel_M, obs))
    d_rho = np.zeros((m, m))
    d_rho[:k, k:] = tM * Rkl
    d_rho[k:, :k] = tM * Rkl.T
    d_rho[k:, k:] = 2 * rho * tM * Rl
    d_tm = np.zeros((m, m))
    d_tm[:k, :k] = Rk
    d_tm[:k, k:] = rho * Rkl
    d_tm[k:, :k] = rho * Rkl.T
    d_tm[k:, k:] = rho ** 2 * Rl
    d_tw = np.zeros((m, m))
    d_tw[k:, k:] = corr_matrix(params.kernel_W, obs)
    out.extend([d_rho, d_tm, d_tw])
    gk = corr_matrix_grads(params.kernel_M, X)
    gkl = corr_matrix_grads(params.kernel_M, X, obs)
    gl = corr_matrix_grads(params.kernel_M, obs)
    for a, b, c in zip(gk, gkl, gl):
        d = np.zeros((m, m))
        d[:k, :k] = tM * a
        d[:k, k:] = rho * tM * b
        d[k:, :k] = rho * tM * b.T
        d[k:, k:] = rho ** 2 * tM * c
        out.append(d)
    for g in corr_matrix_grads(params.kernel_W, obs):
        d = np.zeros((m, m))
        d[k:, k:] = tW * g
        out.append(d)
    d = np.zeros((m, m))
    d[k:, k:] = np.eye(ell)
    out.append(d)
    return out


def loglik_and_grad(params: SkiParams, sigma_eps_hat, data: Dataset,
                    basis: BasisSpec = CONSTANT_BASIS, method: str | None = None) -> LikelihoodState:
    """Gaussian log-likelihood of the (augmented) data and its gradient.

    The gradient is with respect to the natural parameters in the order of
    ``Layout.names``.
    """
    method = method or (SKI if data.ell else SK)
    if method == SKI and data.ell == 0:
        raise InputError("the joint likelihood needs at least one observation; use method SK")
    if method == GPR and data.ell == 0:
        raise InputError("GPR needs at least one observation")
    sigma_eps_hat = np.asarray(sigma_eps_hat, dtype=float)
    layout = layout_for(method, params)
    y, H, coef, V = _system(method, params, sigma_eps_hat, data, basis)
    fac = factorize(V)
    r = y - H @ coef
    alpha = fac.solve(r)
    m = y.size
    ll = -0.5 * m * LOG2PI - 0.5 * fac.logdet() - 0.5 * r @ alpha
    Vinv = fac.inverse()

    grad = []
    if method in (SK, SKI):
        grad.extend(H[:, : params.beta.size].T @ alpha)
    if method == SKI:
        grad.extend(H[:, params.beta.size :].T @ alpha)
    if method == GPR:
        grad.extend(H.T @ alpha)
    dVs = _dV(method, params, data, basis)
    for j, dV in enumerate(dVs):
        g = -0.5 * np.sum(Vinv * dV) + 0.5 * alpha @ dV @ alpha
        if method == SKI and j == 0:
            # rho also enters the mean of z through rho F(obs) beta
            Fb = basis.F(data.obs_points) @ params.beta
            g += np.concatenate([np.zeros(data.k), Fb]) @ alpha
        grad.append(g)
    return LikelihoodState(params, float(ll), np.array(grad, dtype=float), layout.names)


# ---------------------------------------------------------------------------
# fitting


@dataclass
class FitConfig:
    starts: int = 8
    tolerance: float = 1e-6
    max_iterations: int = 500
    seed: int = 0
    threads: int = 1
    # half-width, in natural-log units, of the search box around each
    # heuristic start for the log-transformed parameters
    log_box: float = 9.0


@dataclass
class FitReport:
    method: str
    fitted: SkiParams
    sigma_eps_hat: np.ndarray
    loglik: float
    converged: bool
    iterations: int
    final_gradient_norm: float
    restarts_used: int
    basis: str = "constant"
    names: list = field(default_factory=list)

    def estimates(self) -> dict:
        """Active parameters only, grouped by name."""
        vec = layout_for(self.method, self.fitted).pack(self.fitted)
        out: dict = {}
        for n, v in zip(self.names, vec):
            out.setdefault(n, []).append(float(v))
        return {n: (v if n in ("beta", "gamma", "theta_m", "theta_w") else v[0]) for n, v in out.items()}


BASES = {
    "constant": CONSTANT_BASIS,
    "linear": BasisSpec(
        f=lambda X: np.hstack([np.ones((X.shape[0], 1)), X]),
        g=lambda X: np.hstack([np.ones((X.shape[0], 1)), X]),
    ),
}


def _gls(H, y, V):
    fac = factorize(V)
    A = H.T @ fac.solve(H)
    return np.linalg.lstsq(A, H.T @ fac.solve(y), rcond=None)[0]


def _median_sq_distance(X):
    if X.shape[0] < 2:
        return 1.0
    d2 = ((X[:, None, :] - X[None, :, :]) ** 2).sum(-1)
    vals = d2[np.triu_indices(X.shape[0], 1)]
    vals = vals[vals > 0]
    return float(np.median(vals)) if vals.size else 1.0


def initial_params(data: Dataset, basis: BasisSpec, method: str, n_theta: int = 1) -> SkiParams:
    """Heuristic starting point.

    theta = 1/median squared distance; residual variance split evenly between
    M and W; rho = 1; sigma_zeta^2 = 10% of the observation variance; beta and
    gamma by generalized least squares at that kernel guess.
    """
    X = data.design
    theta0 = np.full(n_theta, 1.0 / _median_sq_distance(X))
    p = basis.F(X[:1]).shape[1]
    q = basis.G(X[:1]).shape[1]
    ybar, z = data.ybar, data.z
    pooled = np.concatenate([ybar - ybar.mean(), z - (z.mean() if z.size else 0.0)])
    total = float(np.var(pooled)) if pooled.size > 1 else 1.0
    total = total if total > 0 else 1.0
    z_var = float(np.var(z)) if z.size > 1 else total
    z_var = z_var if z_var > 0 else total
    if method == SK:
        tm, tw = total, 0.0
    else:
        tm, tw = 0.5 * total, 0.5 * total
    params = SkiParams(
        rho=1.0 if method != GPR else 0.0,
        beta=np.zeros(p),
        gamma=np.zeros(q),
        kernel_M=KernelSpec(tm, theta0),
        kernel_W=KernelSpec(tw if method != SK else 0.0, theta0),
        sigma_zeta_sq=0.1 * z_var if method != SK else 0.0,
    )
    return params


def _with_gls_trend(params, s2, data, basis, method):
    y, H, _, V = _system(method, params, s2, data, basis)
    coef = _gls(H, y, V)
    if method == SK:
        return replace(params, beta=coef)
    if method == GPR:
        return replace(params, gamma=coef)
    return replace(params, beta=coef[: params.beta.size], gamma=coef[params.beta.size :])


class _Objective:
    def __init__(self, layout, template, s2, data, basis):
        self.layout, self.template = layout, template
        self.s2, self.data, self.basis = s2, data, basis
        self.logm = layout.log_mask()

    def to_params(self, u):
        vec = np.where(self.logm, np.exp(np.where(self.logm, u, 0.0)), u)
        return self.layout.unpack(vec, self.template)

    def to_u(self, params):
        vec = self.layout.pack(params)
        return np.where(self.logm, np.log(np.where(self.logm, vec, 1.0)), vec)

    def state(self, u):
        params = self.to_params(u)
        st = loglik_and_grad(params, self.s2, self.data, self.basis, self.layout.method)
        vec = self.layout.pack(params)
        gu = np.where(self.logm, st.gradient * vec, st.gradient)
        return st.loglik, gu

    def __call__(self, u):
        try:
            ll, gu = self.state(u)
        except (NumericError, FloatingPointError, InputError, ValueError):
            return 1e300, np.zeros_like(u)
        if not np.isfinite(ll) or not np.all(np.isfinite(gu)):
            return 1e300, np.zeros_like(u)
        return -ll, -gu


def _projected_grad(g, u, bounds):
    g = g.copy()
    for i, (lo, hi) in enumerate(bounds):
        if lo is not None and u[i] <= lo + 1e-10 and g[i] < 0:
            g[i] = 0.0
        if hi is not None and u[i] >= hi - 1e-10 and g[i] > 0:
            g[i] = 0.0
    return g


def fit_mle(data: Dataset, basis: BasisSpec | str = CONSTANT_BASIS, config: FitConfig | None = None,
            method: str | None = None, n_theta: int = 1, sigma_eps_hat=None) -> FitReport:
    """Maximize the log-likelihood by multi-start quasi-Newton ascent.

    Positive parameters are optimized on the log scale; rho, beta and gamma
    are unconstrained.  ``method`` defaults to SKI when observations exist
    and SK otherwise.  ``n_theta`` is 1 (isotropic) or the input dimension.
    """
    config = config or FitConfig()
    basis_name = basis if isinstance(basis, str) else "custom"
    if basis_name == "custom":
        for name, b in BASES.items():
            if b is basis:
                basis_name = name
    basis = BASES[basis] if isinstance(basis, str) else basis
    method = method or (SKI if data.ell else SK)
    if method in (SKI, GPR) and data.ell == 0:
        raise InputError(f"method {method} needs at least one observation")
    if sigma_eps_hat is not None:
        s2 = np.asarray(sigma_eps_hat, dtype=float)
    elif method == GPR:
        # the simulation block is unused
        s2 = np.zeros(data.k)
    else:
        s2 = sample_variances(data)

    init = initial_params(data, basis, method, n_theta)
    layout = layout_for(method, init)
    obj = _Objective(layout, init, s2, data, basis)
    logm = layout.log_mask()
    center = obj.to_u(init)
    rng = np.random.default_rng(config.seed)
    bounds = []
    for i, n in enumerate(layout.names):
        if logm[i]:
            bounds.append((center[i] - config.log_box, center[i] + config.log_box))
        else:
            bounds.append((None, None))

    starts = []
    for s in range(config.starts):
        p0 = init
        if s > 0:
            u = center.copy()
            u[logm] += rng.normal(0.0, 1.0, size=logm.sum())
            for i, n in enumerate(layout.names):
                if n == "rho":
                    u[i] = rng.normal(1.0, 0.5)
            p0 = obj.to_params(u)
        try:
            p0 = _with_gls_trend(p0, s2, data, basis, method)
        except (NumericError, np.linalg.LinAlgError):
            pass
        starts.append(obj.to_u(p0))

    def run(u0):
        try:
            res = optimize.minimize(obj, u0, jac=True, method="L-BFGS-B", bounds=bounds,
                                    options={"maxiter": config.max_iterations, "gtol": 1e-12,
                                             "ftol": 1e-15, "maxcor": 20})
        except (NumericError, ValueError, FloatingPointError) as exc:
            logger.debug("start failed: %s", exc)
            return None
        if not np.isfinite(res.fun) or res.fun >= 1e299:
            return None
        return res

    if config.threads > 1:
        with ThreadPoolExecutor(config.threads) as pool:
            results = list(pool.map(run, starts))
    else:
        results = [run(u0) for u0 in starts]

    best, best_i = None, -1
    for i, res in enumerate(results):
        if res is not None and (best is None or res.fun < best.fun):
            best, best_i = res, i
    if best is None:
        raise FitError(f"all {config.starts} starts failed to produce a finite log-likelihood")
    ll, gu = obj.state(best.x)
    gnorm = float(np.max(np.abs(_projected_grad(gu, best.x, bounds)))) if gu.size else 0.0
    converged = gnorm <= config.tolerance * (1 + abs(ll))
    fitted = obj.to_params(best.x)
    return FitReport(method, fitted, s2, ll, bool(converged), int(best.nit), gnorm,
                     sum(r is not None for r in results), basis_name, layout.names)


# ---------------------------------------------------------------------------
# plug-in prediction


def plugin_predict(report: FitReport, data: Dataset, x0, basis: BasisSpec | str | None = None) -> PredictionResult:
    """Plug-in predictor with the MSE estimator that accounts for trend estimation.

    mse = prior_var - C'V^{-1}C + d'[H'V^{-1}H]^{-1}d,
    d = h(x0) - H'V^{-1}C.
    """
    if basis is None:
        basis = BASES.get(report.basis, CONSTANT_BASIS)
    elif isinstance(basis, str):
        basis = BASES[basis]
    p = report.fitted
    pts, single = _point_batch(x0, data.d)
    y, H, coef, V = _system(report.method, p, report.sigma_eps_hat, data, basis)
    if report.method == SK:
        C = p.tau_m_sq * corr_matrix(p.kernel_M, data.design, pts)
        h0 = basis.F(pts)
        prior = p.tau_m_sq
    elif report.method == GPR:
        C = p.tau_w_sq * corr_matrix(p.kernel_W, data.obs_points, pts)
        h0 = basis.G(pts)
        prior = p.tau_w_sq
    else:
        C = cross_cov(p, data.design, data.obs_index, pts)
        h0 = np.hstack([p.rho * basis.F(pts), basis.G(pts)])
        prior = p.prior_variance()
    fac = factorize(V)
    A = fac.solve(C)
    mean = h0 @ coef + A.T @ (y - H @ coef)
    mse = prior - np.einsum("ij,ij->j", C, A)
    HVH = H.T @ fac.solve(H)
    d = h0.T - H.T @ A
    try:
        hfac = factorize(HVH)
    except NumericError as exc:
        rank = np.linalg.matrix_rank(H)
        raise NumericError(f"H'V^-1 H is singular (basis rank {rank} of {H.shape[1]})",
                           exc.min_eigenvalue) from exc
    mse = mse + np.einsum("ij,ij->j", d, hfac.solve(d))
    if single:
        return PredictionResult(report.method, float(mean[0]), float(mse[0]), pts[0])
    return PredictionResult(report.method, mean, mse, pts)
