"""Stationary correlation functions and covariance-matrix helpers.

Only the squared-exponential family is shipped::

    R(x, x'; theta) = exp(-sum_p theta_p (x_p - x'_p)^2)

``theta`` may hold a single value (isotropic, broadcast over all input
coordinates) or one value per coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import InputError, NumericError

SQUARED_EXPONENTIAL = "squared_exponential"
FAMILIES = (SQUARED_EXPONENTIAL,)

# nugget schedule, as multiples of the mean diagonal
_NUGGET_START = 1e-10
_NUGGET_MAX = 1e-6


@dataclass(frozen=True)
class KernelSpec:
    """Covariance ``spatial_variance * R(x - x'; lengthscales)``."""

    spatial_variance: float
    lengthscales: np.ndarray
    family: str = SQUARED_EXPONENTIAL

    def __post_init__(self):
        theta = np.atleast_1d(np.asarray(self.lengthscales, dtype=float)).copy()
        theta.setflags(write=False)
        object.__setattr__(self, "lengthscales", theta)
        object.__setattr__(self, "spatial_variance", float(self.spatial_variance))
        if self.family not in FAMILIES:
            raise InputError(f"unknown kernel family {self.family!r}")
        if theta.ndim != 1 or theta.size == 0:
            raise InputError("lengthscales must be a non-empty vector")
        if not np.all(theta > 0) or not np.all(np.isfinite(theta)):
            raise InputError(f"lengthscales must be positive, got {theta}")
        if not self.spatial_variance >= 0:
            raise InputError(f"spatial variance must be >= 0, got {self.spatial_variance}")

    @property
    def isotropic(self) -> bool:
        return self.lengthscales.size == 1

    @property
    def n_lengthscales(self) -> int:
        return self.lengthscales.size

    def with_params(self, spatial_variance=None, lengthscales=None) -> "KernelSpec":
        return KernelSpec(
            self.spatial_variance if spatial_variance is None else spatial_variance,
            self.lengthscales if lengthscales is None else lengthscales,
            self.family,
        )

    def theta_for(self, d: int) -> np.ndarray:
        if self.isotropic:
            return np.full(d, self.lengthscales[0])
        if self.lengthscales.size != d:
            raise InputError(
                f"kernel has {self.lengthscales.size} lengthscales but points have dimension {d}"
            )
        return self.lengthscales


def as_points(points) -> np.ndarray:
    """Coerce to a (n, d) float array; a 1-D input is read as n points in 1-D."""
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise InputError(f"point set must be 2-D, got shape {arr.shape}")
    return arr


def _sq_diffs(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Per-coordinate squared differences, shape (|A|, |B|, d)."""
    if A.shape[1] != B.shape[1]:
        raise InputError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    return (A[:, None, :] - B[None, :, :]) ** 2


def correlation(spec: KernelSpec, x, xp) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    xp = np.atleast_1d(np.asarray(xp, dtype=float))
    if x.shape != xp.shape:
        raise InputError(f"dimension mismatch: {x.shape} vs {xp.shape}")
    theta = spec.theta_for(x.size)
    return float(np.exp(-np.sum(theta * (x - xp) ** 2)))


def corr_matrix(spec: KernelSpec, A, B=None) -> np.ndarray:
    """Correlation matrix with entry (i, j) = R(A_i, B_j)."""
    A = as_points(A)
    B = A if B is None else as_points(B)
    theta = spec.theta_for(A.shape[1])
    R = np.exp(-_sq_diffs(A, B) @ theta)
    if B is A:
        # exact symmetry and unit diagonal regardless of rounding
        R = 0.5 * (R + R.T)
        np.fill_diagonal(R, 1.0)
    return R


def cov_matrix(spec: KernelSpec, A, B=None) -> np.ndarray:
    return spec.spatial_variance * corr_matrix(spec, A, B)


def corr_matrix_grads(spec: KernelSpec, A, B=None) -> list[np.ndarray]:
    """Derivatives of ``corr_matrix`` with respect to each lengthscale."""
    A = as_points(A)
    B = A if B is None else as_points(B)
    D = _sq_diffs(A, B)
    R = corr_matrix(spec, A, B)
    if spec.isotropic:
        return [-D.sum(axis=2) * R]
    spec.theta_for(A.shape[1])
    return [-D[:, :, p] * R for p in range(D.shape[2])]


@dataclass
class Factor:
    """Cholesky factor of an SPD matrix plus the nugget that was needed."""

    cho: tuple
    nugget: float = 0.0
    n: int = field(init=False)

    def __post_init__(self):
        self.n = self.cho[0].shape[0]

    def solve(self, b: np.ndarray) -> np.ndarray:
        if self.n == 0:
            return np.zeros_like(np.asarray(b, dtype=float))
        return linalg.cho_solve(self.cho, b, check_finite=False)

    def logdet(self) -> float:
        if self.n == 0:
            return 0.0
        return 2.0 * float(np.sum(np.log(np.diag(self.cho[0]))))

    def inverse(self) -> np.ndarray:
        return self.solve(np.eye(self.n))


def factorize(K: np.ndarray) -> Factor:
    """Cholesky with the jitter policy: plain first, then a growing nugget.

    The nugget starts at 1e-10 times the mean diagonal and grows tenfold up
    to 1e-6 times the mean diagonal.
    """
    K = np.asarray(K, dtype=float)
    if K.shape[0] == 0:
        return Factor((np.zeros((0, 0)), True))
    if not np.all(np.isfinite(K)):
        raise NumericError("covariance matrix has non-finite entries")
    try:
        return Factor(linalg.cho_factor(K, lower=True, check_finite=False))
    except linalg.LinAlgError:
        pass
    scale = float(np.mean(np.diag(K)))
    if not scale > 0:
        scale = 1.0
    rel = _NUGGET_START
    while rel <= _NUGGET_MAX * (1 + 1e-9):
        nugget = rel * scale
        try:
            cho = linalg.cho_factor(K + nugget * np.eye(K.shape[0]), lower=True, check_finite=False)
            return Factor(cho, nugget)
        except linalg.LinAlgError:
            rel *= 10.0
    min_eig = float(np.linalg.eigvalsh(0.5 * (K + K.T))[0])
    raise NumericError(
        f"matrix is not positive definite even with nugget {_NUGGET_MAX:g}*mean(diag); "
        f"smallest eigenvalue {min_eig:.3e}",
        min_eigenvalue=min_eig,
    )
