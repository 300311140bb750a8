import numpy as np
import pytest
from numpy.testing import assert_allclose

from skinad.desim import (
    CRN,
    INDEPENDENT,
    Exponential,
    Gamma,
    LineConfig,
    RngPolicy,
    Station,
    draw_inputs,
    ground_truth,
    line_for,
    run_design,
    simulate_events,
    simulate_sojourn,
)
from skinad.errors import EmptySampleError, InputError

X1 = [0.25, 0.25, 0.8, 0.07, 0.07, 0.85]


def mm1k_sojourn(lam, mean, cap):
    """Expected time in system of admitted customers for M/M/1/cap."""
    r = lam * mean
    p = r ** np.arange(cap + 1)
    p /= p.sum()
    L = np.sum(np.arange(cap + 1) * p)
    return L / (lam * (1 - p[cap]))


def single_station(mean, horizon):
    tiny = Exponential(1e-9)
    return LineConfig((Station(Exponential(mean)), Station(tiny), Station(tiny)), 1.0, horizon)


def test_mm1k_formula_sanity():
    # capacity 1: E[W] is the mean service time
    assert_allclose(mm1k_sojourn(1.0, 0.7, 1), 0.7)


@pytest.mark.parametrize("mean", [0.5, 0.8])
def test_single_station_matches_mm1k(mean):
    cfg = single_station(mean, 20000.0)
    vals = np.array([simulate_sojourn(cfg, RngPolicy(INDEPENDENT, 11, r)).mean_sojourn for r in range(50)])
    se = vals.std(ddof=1) / np.sqrt(vals.size)
    assert abs(vals.mean() - mm1k_sojourn(1.0, mean, 5)) < 3 * se


def test_conservation_every_event():
    cfg = line_for([0.3, 0.3, 0.95, 0.4, 0.4, 1.3], "real", 5000.0)
    trace = simulate_events(cfg, RngPolicy(INDEPENDENT, 2, 0), debug=True, max_events=10_000)
    assert trace.events == 10_000 and trace.checks == 10_000
    assert trace.arrived == trace.completed + trace.in_system + trace.rejected
    assert trace.rejected > 0


def test_fifo_at_every_station():
    cfg = line_for([0.3, 0.3, 0.95, 0.4, 0.4, 1.3], "real", 2000.0)
    trace = simulate_events(cfg, RngPolicy(INDEPENDENT, 2, 0))
    for s in range(3):
        order = [a for (_, st, a) in trace.starts if st == s]
        assert order == sorted(order)


@pytest.mark.parametrize("model", ["real", "inadequate"])
@pytest.mark.parametrize("mode", [INDEPENDENT, CRN])
def test_engines_agree(model, mode):
    for x in (X1, [0.3, 0.3, 0.95, 0.4, 0.4, 1.3]):
        cfg = line_for(x, model, 1500.0)
        pol = RngPolicy(mode, 5, 1, 3)
        fast = simulate_sojourn(cfg, pol)
        ref = simulate_events(cfg, pol).result
        assert fast.count == ref.count
        assert_allclose(fast.mean_sojourn, ref.mean_sojourn, rtol=1e-12)


def test_vanishing_service_gives_pure_service_time():
    tiny = 1e-6
    cfg = LineConfig(tuple(Station(Exponential(tiny)) for _ in range(3)), 1.0, 1000.0)
    res = simulate_sojourn(cfg, RngPolicy(INDEPENDENT, 0, 0))
    # sum of three exponentials, averaged over ~1000 parts
    assert abs(res.mean_sojourn - 3 * tiny) < 5 * np.sqrt(3) * tiny / np.sqrt(res.count)


def test_determinism_and_empty_sample():
    cfg = line_for(X1, "real", 500.0)
    pol = RngPolicy(CRN, 3, 4)
    assert simulate_sojourn(cfg, pol) == simulate_sojourn(cfg, pol)
    short = LineConfig(tuple(Station(Exponential(100.0)) for _ in range(3)), 1.0, 0.01)
    with pytest.raises(EmptySampleError):
        simulate_sojourn(short, RngPolicy())


def test_gamma_parameterization():
    g = Gamma(0.3, 0.05)
    assert_allclose(g.shape * g.scale, 0.3)
    assert_allclose(g.shape * g.scale**2, 0.05)
    u = np.random.default_rng(0).random(200_000)
    s = g.from_uniform(u)
    assert abs(s.mean() - 0.3) < 4 * np.sqrt(0.05 / u.size)


def test_config_validation():
    with pytest.raises(InputError):
        Station(Exponential(1.0), capacity=0)
    with pytest.raises(InputError):
        Gamma(1.0, 0.0)
    with pytest.raises(InputError):
        line_for([1, 2, 3], "real")
    with pytest.raises(InputError):
        RngPolicy(mode="antithetic")


def test_inadequate_ignores_variances():
    a = [0.25, 0.25, 0.8, 0.05, 0.05, 0.8]
    b = [0.25, 0.25, 0.8, 0.4, 0.4, 1.3]
    out = run_design([a, b], 5, "inadequate", RngPolicy(CRN, 9), horizon=500.0)
    assert np.array_equal(out[0], out[1])


def test_crn_shares_arrivals_across_configs():
    pol = RngPolicy(CRN, 4, 7)
    a1, s1 = draw_inputs(line_for(X1, "real", 300.0), pol)
    a2, s2 = draw_inputs(line_for([0.2, 0.3, 0.7, 0.1, 0.05, 0.9], "inadequate", 300.0), pol)
    assert np.array_equal(a1, a2)
    # inverse-CDF draws are comonotone across families
    assert np.all(np.diff(np.argsort(s1[0])) == np.diff(np.argsort(s2[0])))


def _corr_z(mode, reps=200):
    x = np.array(X1)
    y = x + np.array([0.02, 0.0, 0.03, 0.0, 0.01, 0.0])
    out = run_design([x, y], reps, "inadequate", RngPolicy(mode, 21), horizon=300.0)
    r = np.corrcoef(out[0], out[1])[0, 1]
    return r, np.arctanh(r) * np.sqrt(reps - 3)


def test_crn_induces_positive_correlation():
    r, z = _corr_z(CRN)
    assert z > 1.96


def test_independent_streams_uncorrelated():
    r, z = _corr_z(INDEPENDENT)
    assert abs(z) < 3


def test_crn_raises_average_correlation_on_probe_design():
    rng = np.random.default_rng(0)
    pts = np.array(X1) + rng.uniform(-0.02, 0.02, size=(5, 6))
    reps = 150

    def mean_corr(mode):
        out = np.array(run_design(pts, reps, "inadequate", RngPolicy(mode, 3), horizon=300.0))
        c = np.corrcoef(out)
        return np.mean(np.arctanh(c[np.triu_indices(5, 1)]))

    diff = mean_corr(CRN) - mean_corr(INDEPENDENT)
    # each Fisher z has sd 1/sqrt(reps-3); the mean of ten is no more variable
    assert diff > 1.96 * np.sqrt(2.0 / (reps - 3))


def test_ground_truth_contract():
    pts = [X1, [0.3, 0.3, 0.95, 0.4, 0.4, 1.3]]
    gt = ground_truth(pts, seed=1, horizon=1000.0, rel_se=0.01, max_replications=2000)
    assert np.all(gt.relative_se <= 0.01)
    again = ground_truth(pts, seed=1, horizon=1000.0, rel_se=0.01, max_replications=2000)
    assert np.array_equal(gt.mean, again.mean)


def test_ground_truth_variance_halves_with_double_effort():
    # batch-means view: variance of the estimator across independent batches
    cfg = line_for(X1, "real", 500.0)
    vals = np.array([simulate_sojourn(cfg, RngPolicy(INDEPENDENT, 8, r)).mean_sojourn for r in range(2400)])
    v_small = vals.reshape(-1, 20).mean(axis=1).var(ddof=1)
    v_big = vals.reshape(-1, 40).mean(axis=1).var(ddof=1)
    ratio = v_big / v_small
    assert 0.5 * 0.6 < ratio < 0.5 * 1.6
