import numpy as np
import pytest
from dataclasses import replace
from numpy.testing import assert_allclose

from helpers import random_instance
from skinad.errors import InputError
from skinad.kernels import KernelSpec, correlation
from skinad.metamodel import (
    Dataset,
    NoiseModel,
    SkiParams,
    assemble_joint_cov,
    monotonicity_probe,
    mse_gap_gpr,
    mse_gap_sk,
    mse_sk_for_z,
    predict_gpr,
    predict_sk,
    predict_ski,
    sk_params,
)


def _params(rho=0.8, tm=1.5, tw=0.6, thm=2.0, thw=4.0, sz=0.2, beta=1.0, gamma=0.5):
    return SkiParams(rho, [beta], [gamma], KernelSpec(tm, [thm]), KernelSpec(tw, [thw]), sz)


def test_joint_cov_single_block():
    p = _params(tm=1.0)
    data = Dataset([[0.0]], [[1.0, 3.0]])
    joint = assemble_joint_cov(p, NoiseModel([2.0]), data)
    assert_allclose(joint.V, [[2.0]])


def test_joint_cov_rho_zero_decouples():
    p = _params(rho=0.0)
    data = Dataset([[0.0], [0.4]], [[1.0, 2.0], [0.0, 1.0]], [1], [0.3])
    joint = assemble_joint_cov(p, NoiseModel([1.0, 1.0]), data)
    assert_allclose(joint.V12, 0.0)
    assert_allclose(joint.V22, [[p.tau_w_sq + p.sigma_zeta_sq]])


def test_joint_cov_entrywise():
    p = _params()
    pts = np.array([[0.1, 0.2], [0.7, 0.4]])
    reps = [[1.0, 2.0, 4.0], [0.5, 0.7]]
    data = Dataset(pts, reps, [1], [3.0])
    s2 = np.array([0.9, 1.7])
    crn = np.array([[1.0, 0.3], [0.3, 1.0]])
    joint = assemble_joint_cov(p, NoiseModel(s2, crn), data)
    n = [3, 2]
    kM = lambda a, b: p.tau_m_sq * correlation(p.kernel_M, a, b)
    kW = lambda a, b: p.tau_w_sq * correlation(p.kernel_W, a, b)
    expected = np.zeros((3, 3))
    for i in range(2):
        for j in range(2):
            expected[i, j] = kM(pts[i], pts[j]) + np.sqrt(s2[i] * s2[j] / (n[i] * n[j])) * crn[i, j]
        expected[i, 2] = expected[2, i] = p.rho * kM(pts[i], pts[1])
    expected[2, 2] = p.rho ** 2 * kM(pts[1], pts[1]) + kW(pts[1], pts[1]) + p.sigma_zeta_sq
    assert_allclose(joint.V, expected, rtol=1e-14)


def test_ski_reduces_to_sk():
    rng = np.random.default_rng(3)
    for _ in range(20):
        params, noise, data, x0 = random_instance(rng, ell=0)
        params = sk_params(params)
        a = predict_ski(params, noise, data, x0)
        b = predict_sk(params, noise, data, x0)
        assert abs(a.mean - b.mean) <= 1e-12 * max(1, abs(b.mean))
        assert abs(a.mse - b.mse) <= 1e-12 * max(1, abs(b.mse))


def test_ski_interpolates_noise_free_observation():
    p = _params(sz=0.0)
    design = [[0.0], [0.3], [0.9]]
    data = Dataset(design, [[1.0], [2.0], [0.5]], [0, 1, 2], [1.7, 2.2, 0.1])
    noise = NoiseModel([0.0, 0.0, 0.0])
    res = predict_ski(p, noise, data, [0.0])
    assert res.mean == pytest.approx(1.7, abs=1e-6)
    assert res.mse == pytest.approx(0.0, abs=1e-6)


def test_sk_interpolates_without_noise():
    p = _params()
    data = Dataset([[0.0], [0.5]], [[1.2], [3.4]])
    res = predict_sk(p, NoiseModel([0.0, 0.0]), data, [0.5])
    assert res.mean == pytest.approx(3.4, abs=1e-9)


def test_sk_huge_noise_returns_trend():
    p = _params(beta=2.5)
    data = Dataset([[0.0], [0.5]], [[10.0], [-4.0]])
    res = predict_sk(p, NoiseModel([1e14, 1e14]), data, [0.2])
    assert res.mean == pytest.approx(2.5, abs=1e-9)
    assert res.mse == pytest.approx(p.tau_m_sq, rel=1e-9)


def test_gpr_interpolates_and_scalar_formula():
    p = _params(sz=0.0)
    data = Dataset([[0.0], [0.6]], [[1.0], [2.0]], [1], [4.2])
    assert predict_gpr(p, data, [0.6]).mean == pytest.approx(4.2, abs=1e-12)
    p = _params(sz=0.3)
    x0 = np.array([0.1])
    prior = p.rho * p.beta[0] + p.gamma[0]
    c2 = (p.rho ** 2 * p.tau_m_sq * correlation(p.kernel_M, x0, [0.6])
          + p.tau_w_sq * correlation(p.kernel_W, x0, [0.6]))
    v22 = p.rho ** 2 * p.tau_m_sq + p.tau_w_sq + p.sigma_zeta_sq
    res = predict_gpr(p, data, x0)
    assert res.mean == pytest.approx(prior + c2 / v22 * (4.2 - prior), rel=1e-13)
    assert res.mse == pytest.approx(p.prior_variance() - c2 ** 2 / v22, rel=1e-13)


def test_batch_prediction_matches_single():
    rng = np.random.default_rng(5)
    params, noise, data, _ = random_instance(rng, k=5, ell=3, d=2)
    X = rng.uniform(size=(4, 2))
    batch = predict_ski(params, noise, data, X)
    for i in range(4):
        one = predict_ski(params, noise, data, X[i])
        assert one.mean == pytest.approx(batch.mean[i], rel=1e-12)
        assert one.mse == pytest.approx(batch.mse[i], rel=1e-12, abs=1e-14)


def test_prediction_dimension_error():
    rng = np.random.default_rng(0)
    params, noise, data, _ = random_instance(rng, k=3, ell=1, d=2)
    with pytest.raises(InputError):
        predict_ski(params, noise, data, [0.1, 0.2, 0.3])


def test_mse_ordering_and_gap_identities():
    rng = np.random.default_rng(11)
    for _ in range(200):
        params, noise, data, x0 = random_instance(rng)
        ski = predict_ski(params, noise, data, x0).mse
        gpr = predict_gpr(params, data, x0).mse
        skz = mse_sk_for_z(params, noise, data, x0)
        assert ski <= gpr + 1e-10
        assert ski <= skz + 1e-10
        gap = mse_gap_gpr(params, noise, data, x0)
        assert abs(gap - (gpr - ski)) <= 1e-10 * max(1.0, abs(gpr))
        bias_sq, extra = mse_gap_sk(params, noise, data, x0)
        assert bias_sq >= -1e-10 and extra >= -1e-10
        assert abs(bias_sq + extra - (skz - ski)) <= 1e-10 * max(1.0, abs(skz))


def test_gap_gpr_zero_at_rho_zero():
    rng = np.random.default_rng(2)
    params, noise, data, x0 = random_instance(rng, k=4, ell=2, rho=0.0)
    assert mse_gap_gpr(params, noise, data, x0) == pytest.approx(0.0, abs=1e-14)


def test_gap_gpr_equality_instance():
    """Choose the simulation noise so that C1 = V12 V22^{-1} C2 holds exactly."""
    # k = 2, ell = 1 observed at x_1; C1 - V12 V22^{-1} C2 depends on x0 only,
    # so pick x0 = x_1 (then C1 = V12 * C2 / V22 when C2 = V22 - sigma_zeta^2).
    # Noise-free observation makes C2 = V22, hence C1 = V12 column exactly.
    p = _params(sz=0.0)
    data = Dataset([[0.2], [0.7]], [[1.0, 2.0], [3.0, 1.0]], [0], [1.0])
    noise = NoiseModel([0.4, 0.9])
    assert mse_gap_gpr(p, noise, data, [0.2]) == pytest.approx(0.0, abs=1e-12)


def test_gap_sk_equality_and_bias():
    # rho = 1, gamma = 0, observation that adds nothing (tau_W = 0 and huge noise)
    p = SkiParams(1.0, [0.3], [0.0], KernelSpec(1.0, [2.0]), KernelSpec(0.0, [1.0]), 1e12)
    data = Dataset([[0.0], [0.5]], [[1.0], [2.0]], [0], [1.0])
    bias_sq, extra = mse_gap_sk(p, NoiseModel([0.5, 0.5]), data, [0.3])
    assert bias_sq == 0.0
    assert extra == pytest.approx(0.0, abs=1e-10)
    p2 = replace(p, gamma=np.array([1.7]))
    bias_sq, _ = mse_gap_sk(p2, NoiseModel([0.5, 0.5]), data, [0.3])
    assert bias_sq == pytest.approx(1.7 ** 2)


def test_reductions():
    rng = np.random.default_rng(21)
    for _ in range(30):
        params, noise, data, x0 = random_instance(rng, k=5, ell=3)
        # sigma_eps = 0: prediction does not depend on the replication counts
        zero = NoiseModel(np.zeros(data.k))
        a = predict_ski(params, zero, data, x0)
        more = Dataset(data.design, [np.repeat(r.mean(), 3 * r.size) for r in data.replications],
                       data.obs_index, data.z)
        b = predict_ski(params, zero, more, x0)
        assert a.mean == pytest.approx(b.mean, rel=1e-10)
        assert a.mse == pytest.approx(b.mse, rel=1e-10, abs=1e-12)
        # rho = 0: invariant to Sigma_eps
        p0 = replace(params, rho=0.0)
        c = predict_ski(p0, noise, data, x0)
        d = predict_ski(p0, NoiseModel(noise.sigma_eps_sq * 50, noise.crn_corr), data, x0)
        assert abs(c.mse - d.mse) <= 1e-12
        assert abs(c.mean - d.mean) <= 1e-12


def test_monotonicity_probes():
    rng = np.random.default_rng(8)
    for _ in range(50):
        params, noise, data, x0 = random_instance(rng, k=5, ell=2)
        b, a = monotonicity_probe(params, noise, data, x0, "sigma_zeta", factor=10)
        assert a >= b - 1e-10
        b, a = monotonicity_probe(params, noise, data, x0, "sigma_eps", index=1, factor=3)
        assert a >= b - 1e-10
        b, a = monotonicity_probe(params, noise, data, x0, "replications", factor=2)
        assert a <= b + 1e-10
        b, a = monotonicity_probe(params, noise, data, x0, "add_design_point",
                                  new_point=rng.uniform(size=data.d), new_sigma_eps_sq=0.5, new_n=3)
        assert a <= b + 1e-10
        free = sorted(set(range(data.k)) - set(data.obs_index.tolist()))
        b, a = monotonicity_probe(params, noise, data, x0, "add_observation", index=free[0])
        assert a <= b + 1e-10
    with pytest.raises(InputError):
        monotonicity_probe(params, noise, data, x0, "bogus")


def test_dataset_validation():
    with pytest.raises(InputError):
        Dataset(np.zeros((0, 1)), [])
    with pytest.raises(InputError):
        Dataset([[0.0], [1.0]], [[1.0], [2.0]], [0, 0], [1.0, 2.0])
    with pytest.raises(InputError):
        Dataset([[0.0]], [[1.0]], [3], [1.0])
    with pytest.raises(InputError):
        Dataset([[0.0]], [[]])
