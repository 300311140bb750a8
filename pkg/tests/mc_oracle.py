"""Monte Carlo oracle for the Gaussian predictors.

Draws (ybar, z, Y(x0), Z(x0)) by sampling each random ingredient separately
(M, W, averaged simulation errors, observation errors) with an independent
covariance implementation, then checks a black-box linear predictor against
the defining properties of the conditional expectation.
"""

import numpy as np


def _sqexp(A, B, tau2, theta):
    d2 = ((A[:, None, :] - B[None, :, :]) ** 2).sum(-1)
    return tau2 * np.exp(-theta * d2)


def _mvn(rng, cov, size):
    w, U = np.linalg.eigh(0.5 * (cov + cov.T))
    root = U * np.sqrt(np.clip(w, 0, None))
    return rng.standard_normal((size, cov.shape[0])) @ root.T


def joint_draws(rng, params, eps_cov, design, obs_index, x0, size):
    """Returns (data (size, k+ell), Y0 (size,), Z0 (size,)) under a constant basis."""
    pts_M = np.vstack([design, x0[None, :]])
    obs = design[obs_index]
    pts_W = np.vstack([obs, x0[None, :]])
    tM, thM = params.kernel_M.spatial_variance, params.kernel_M.lengthscales[0]
    tW, thW = params.kernel_W.spatial_variance, params.kernel_W.lengthscales[0]
    M = _mvn(rng, _sqexp(pts_M, pts_M, tM, thM), size)
    W = _mvn(rng, _sqexp(pts_W, pts_W, tW, thW), size)
    eps = _mvn(rng, eps_cov, size)
    zeta = np.sqrt(params.sigma_zeta_sq) * rng.standard_normal((size, len(obs_index)))
    beta, gamma, rho = params.beta[0], params.gamma[0], params.rho
    Ygrid = beta + M
    Zobs = rho * Ygrid[:, obs_index] + gamma + W[:, :-1]
    ybar = Ygrid[:, :-1] + eps
    z = Zobs + zeta
    Y0 = Ygrid[:, -1]
    Z0 = rho * Y0 + gamma + W[:, -1]
    return np.hstack([ybar, z]), Y0, Z0


def linear_weights(predict, m):
    """Recover a, w with predict(v) = a + w'v by probing unit vectors."""
    a = predict(np.zeros(m))
    w = np.array([predict(np.eye(m)[i]) - a for i in range(m)])
    return a, w


def check(data, target, a, w, mse, at, n_se=3.0):
    """Three-SE checks; returns a dict of (statistic, bound) pairs."""
    pred = a + data @ w
    r = target - pred
    n = r.size
    out = {}
    out["bias"] = (abs(r.mean()), n_se * r.std(ddof=1) / np.sqrt(n))
    sq = r ** 2
    out["mse"] = (abs(sq.mean() - mse), n_se * sq.std(ddof=1) / np.sqrt(n))
    centered = data - data.mean(axis=0)
    for i in range(data.shape[1]):
        prod = r * centered[:, i]
        out[f"orth{i}"] = (abs(prod.mean()), n_se * prod.std(ddof=1) / np.sqrt(n))
    # empirical best linear predictor evaluated at the pinned data vector
    X = np.hstack([np.ones((n, 1)), data])
    coef, *_ = np.linalg.lstsq(X, target, rcond=None)
    resid = target - X @ coef
    s2 = resid @ resid / (n - X.shape[1])
    xa = np.concatenate([[1.0], at])
    var = s2 * xa @ np.linalg.solve(X.T @ X, xa)
    out["cond_mean"] = (abs(xa @ coef - (a + at @ w)), n_se * np.sqrt(var))
    return out
