import itertools

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import integrate
from scipy.stats import spearmanr

from skinad.design import (
    DesignSpace,
    QuadratureConfig,
    allocate,
    allocation_weights,
    choose_observations,
    imse,
    imse_moment_matrix,
    lhs,
    quadrature,
    two_stage,
)
from skinad.errors import InputError
from skinad.estimation import FitConfig
from skinad.kernels import KernelSpec
from skinad.metamodel import NoiseModel, SkiParams, cross_cov, ski_mse

UNIT1 = DesignSpace([(0.0, 1.0)])


def _params(rho=0.9, tm=1.2, tw=0.4, thm=3.0, thw=6.0, sz=0.1):
    return SkiParams(rho, [0.5], [0.2], KernelSpec(tm, [thm]), KernelSpec(tw, [thw]), sz)


def test_lhs_strata_and_determinism():
    space = DesignSpace([(0.0, 10.0), (-1.0, 1.0)])
    X = lhs(space, 10, seed=4)
    unit = (X - space.lower) / (space.upper - space.lower)
    for p in range(2):
        assert sorted(np.floor(unit[:, p] * 10).astype(int)) == list(range(10))
    assert np.array_equal(X, lhs(space, 10, seed=4))
    one = lhs(space, 1, seed=0)
    assert np.all((one >= space.lower) & (one <= space.upper))
    with pytest.raises(InputError):
        lhs(space, 0, seed=0)


def test_space_validation():
    with pytest.raises(InputError):
        DesignSpace([(1.0, 1.0)])


def test_choose_observations():
    idx = choose_observations(10, 4, seed=1)
    assert len(set(idx)) == 4 and idx.min() >= 0 and idx.max() < 10
    assert np.array_equal(idx, choose_observations(10, 4, seed=1))


def test_quadrature_weights_average():
    space = DesignSpace([(0.0, 2.0), (1.0, 4.0)])
    for scheme in ("gauss", "sobol"):
        nodes, w = quadrature(space, QuadratureConfig(scheme=scheme, sobol_log2=10))
        assert_allclose(w.sum(), 1.0)
        # mean of x1 * x2 over the box
        assert_allclose(np.sum(w * nodes[:, 0] * nodes[:, 1]), 1.0 * 2.5, rtol=1e-3)


def test_G_constant_integrand():
    # a huge lengthscale makes the single cross covariance constant
    p = SkiParams(1.0, [0.0], [0.0], KernelSpec(2.0, [1e-12]), KernelSpec(1e-12, [1.0]), 0.0)
    G = imse_moment_matrix(p, [[0.3]], [], UNIT1).G
    assert_allclose(G, [[4.0]], rtol=1e-10)


def test_G_matches_adaptive_quadrature():
    p = _params()
    design = np.array([[0.1], [0.45], [0.8]])
    obs = [1]
    mom = imse_moment_matrix(p, design, obs, UNIT1)
    assert np.array_equal(mom.G, mom.G.T)
    assert mom.error_estimate < 1e-8

    def c(x, i):
        return cross_cov(p, design, obs, np.array([[x]]))[i, 0]

    for i in range(4):
        for j in range(i, 4):
            ref, _ = integrate.quad(lambda x: c(x, i) * c(x, j), 0.0, 1.0, epsabs=1e-13, epsrel=1e-12)
            assert abs(mom.G[i, j] - ref) < 1e-8


def _quadrature_imse(p, noise, n, design, obs, space, m=64):
    x, w = np.polynomial.legendre.leggauss(m)
    lo, hi = space.lower[0], space.upper[0]
    pts = lo + (x[:, None] + 1) * (hi - lo) / 2
    mse = ski_mse(p, noise.cov(np.asarray(n, float)), design, obs, pts)
    return float(np.sum(w * mse) / 2)


def test_imse_equals_integrated_mse():
    rng = np.random.default_rng(3)
    for _ in range(10):
        k = int(rng.integers(2, 6))
        design = rng.uniform(0, 1, size=(k, 1))
        obs = rng.choice(k, size=int(rng.integers(0, k + 1)), replace=False)
        p = _params(rho=rng.uniform(-1, 2), thm=rng.uniform(1, 8), thw=rng.uniform(1, 8))
        noise = NoiseModel(rng.uniform(0.1, 2, size=k))
        n = rng.integers(1, 20, size=k)
        G = imse_moment_matrix(p, design, obs, UNIT1)
        assert_allclose(imse(n, p, noise, design, obs, G),
                        _quadrature_imse(p, noise, n, design, obs, UNIT1), atol=1e-9)


def test_imse_monotone_and_large_n_limit():
    design = np.array([[0.0], [0.3], [0.7], [1.0]])
    obs = [2]
    p = _params()
    noise = NoiseModel([0.5, 1.0, 2.0, 0.3])
    G = imse_moment_matrix(p, design, obs, UNIT1)
    n = np.array([3, 5, 2, 4])
    base = imse(n, p, noise, design, obs, G)
    for i in range(4):
        m = n.copy()
        m[i] += 7
        assert imse(m, p, noise, design, obs, G) <= base + 1e-14
    zero = imse(n, p, NoiseModel(np.zeros(4)), design, obs, G)
    assert abs(imse(n * 10**8, p, noise, design, obs, G) - zero) < 1e-6


def test_allocate_symmetric_equal():
    # corners of a centred square: every point is equivalent under the square's symmetries
    design = np.array([[0.25, 0.25], [0.25, 0.75], [0.75, 0.25], [0.75, 0.75]])
    p = _params()
    G = imse_moment_matrix(p, design, [], DesignSpace([(0.0, 1.0), (0.0, 1.0)]))
    alloc = allocate(41, np.ones(4), p, design, [], G)
    assert alloc.n.sum() == 41
    assert alloc.n.max() - alloc.n.min() <= 1


def test_allocate_zero_noise_gets_floor_and_scale_invariance():
    design = np.array([[0.1], [0.5], [0.9]])
    p = _params()
    G = imse_moment_matrix(p, design, [1], UNIT1)
    alloc = allocate(30, np.array([0.0, 1.0, 2.0]), p, design, [1], G)
    assert alloc.n[0] == 1 and alloc.n.sum() == 30
    s = np.array([0.3, 1.0, 2.0])
    w1 = allocation_weights(s, p, design, [1], G)
    w2 = allocation_weights(7.5 * s, p, design, [1], G)
    assert_allclose(w1 / w1.sum(), w2 / w2.sum(), rtol=1e-12)
    with pytest.raises(InputError):
        allocate(2, s, p, design, [1], G)


def brute_force_best(p, noise, design, obs, G, budget):
    k = design.shape[0]
    best = np.inf
    for n in itertools.product(range(1, budget + 1), repeat=k):
        if sum(n) <= budget:
            best = min(best, imse(n, p, noise, design, obs, G))
    return best


def test_allocate_near_enumeration_optimum():
    design = np.array([[0.15], [0.5], [0.85]])
    obs = [1]
    p = _params(thm=5.0)
    sig = np.array([0.2, 1.0, 4.0])
    noise = NoiseModel(sig)
    G = imse_moment_matrix(p, design, obs, UNIT1)
    alloc = allocate(30, sig, p, design, obs, G)
    got = imse(alloc.n, p, noise, design, obs, G)
    best = brute_force_best(p, noise, design, obs, G, 30)
    assert got <= 1.05 * best
    uniform = imse([10, 10, 10], p, noise, design, obs, G)
    assert got <= uniform + 1e-10


def _hetero_source(design, seed):
    def mean(x):
        return 1.0 + np.sin(3 * x[0])

    def sd(x):
        return 0.05 + 2.0 * x[0] ** 3

    def simulate(i, start, count):
        out = []
        for j in range(start, start + count):
            r = np.random.default_rng([seed, i, j])
            out.append(mean(design[i]) + sd(design[i]) * r.standard_normal())
        return np.array(out)

    return simulate


def test_two_stage_exact_budget():
    design = lhs(UNIT1, 8, seed=1)
    obs = choose_observations(8, 3, seed=2)
    z = 1.0 + np.sin(3 * design[obs, 0]) + 0.1
    sim = _hetero_source(design, 5)
    cfg = FitConfig(starts=3, seed=0)
    fit, alloc, data = two_stage(sim, design, obs, z, 80, 10, UNIT1, cfg)
    assert np.array_equal(alloc.n, np.full(8, 10))
    assert data.n.sum() == 80
    with pytest.raises(InputError):
        two_stage(sim, design, obs, z, 79, 10, UNIT1, cfg)
    with pytest.raises(InputError):
        two_stage(sim, design, obs, z, 600, 9, UNIT1, cfg)


@pytest.mark.parametrize("seed", [0, 2, 3])
def test_two_stage_extras_follow_noise(seed):
    design = lhs(UNIT1, 8, seed=seed)
    obs = choose_observations(8, 3, seed=seed + 100)
    z = 1.0 + np.sin(3 * design[obs, 0]) + 0.1
    sim = _hetero_source(design, seed)
    cfg = FitConfig(starts=3, seed=0)
    fit, alloc, _ = two_stage(sim, design, obs, z, 600, 10, UNIT1, cfg)
    assert alloc.n.sum() == 600
    rho, _ = spearmanr(alloc.n - 10, fit.sigma_eps_hat)
    assert rho > 0
    again = two_stage(sim, design, obs, z, 600, 10, UNIT1, cfg)[1]
    assert np.array_equal(again.n, alloc.n)
