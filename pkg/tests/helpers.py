"""Random problem instances shared by several test modules."""

import numpy as np

from skinad.kernels import KernelSpec
from skinad.metamodel import Dataset, NoiseModel, SkiParams


def random_instance(rng, k=None, ell=None, d=None, rho=None, crn=False):
    k = k if k is not None else int(rng.integers(1, 9))
    ell = ell if ell is not None else int(rng.integers(0, k + 1))
    d = d if d is not None else int(rng.integers(1, 4))
    design = rng.uniform(0, 1, size=(k, d))
    obs_index = rng.choice(k, size=ell, replace=False)
    n = rng.integers(1, 21, size=k)
    reps = [rng.normal(2.0, 1.0, size=ni) for ni in n]
    z = rng.normal(1.0, 1.0, size=ell)
    params = SkiParams(
        rho=rng.uniform(-2, 2) if rho is None else rho,
        beta=rng.normal(size=1),
        gamma=rng.normal(size=1),
        kernel_M=KernelSpec(rng.uniform(0.3, 3.0), rng.uniform(0.5, 10.0, size=1)),
        kernel_W=KernelSpec(rng.uniform(0.1, 2.0), rng.uniform(0.5, 10.0, size=1)),
        sigma_zeta_sq=rng.uniform(0.01, 1.0),
    )
    crn_corr = None
    if crn:
        w = rng.uniform(0, 0.9)
        crn_corr = (1 - w) * np.eye(k) + w * np.ones((k, k))
    noise = NoiseModel(rng.uniform(0.1, 2.0, size=k), crn_corr)
    data = Dataset(design, reps, obs_index, z)
    x0 = rng.uniform(0, 1, size=d)
    return params, noise, data, x0
