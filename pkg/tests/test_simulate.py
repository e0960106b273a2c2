import math
import warnings

import numpy as np
import pytest
from scipy import stats

from mkv import models
from mkv.analysis import example33_closed_form
from mkv.measures import EmpiricalMeasure, w1
from mkv.noise import RngStream, StableParams, StreamBank, stream_ids
from mkv.simulate import (ConfigurationError, DivergenceError, DivergenceWarning,
                          NonStationaryError, SimConfig, UnsupportedModelError, em_step,
                          gamma_fixed_point, gamma_map, reflection_coupled_pairs, run_frozen,
                          run_mckean_vlasov, synchronous_coupled_runs)


def normal_cloud(n, d=1, seed=0, loc=0.0, scale=1.0):
    return np.random.default_rng(seed).normal(loc, scale, (n, d))


def same_run(a, b):
    return (np.array_equal(a.final, b.final) and np.array_equal(a.times, b.times)
            and all(np.array_equal(a.series[k], b.series[k]) for k in a.series))


def test_sim_config_validation():
    with pytest.raises(ConfigurationError):
        SimConfig(h=2.0, T=1.0)
    with pytest.raises(ConfigurationError):
        SimConfig(h=0.01, couple_threshold=1e-9)
    with pytest.raises(ConfigurationError):
        SimConfig(h=0.0)


def test_em_step_without_coefficients_is_identity():
    model = models.linear_model(rate=0.0, sigma=0.0)
    x = np.array([0.4, -1.0])
    model2 = models.linear_model(dim=2, rate=0.0, sigma=0.0)
    assert np.array_equal(em_step(model2, x, EmpiricalMeasure([x]), 0.1, RngStream(0)), x)
    assert em_step(model, np.array([2.0]), np.zeros(1), 0.1, RngStream(0))[0] == 2.0


def test_em_step_deterministic_ou():
    model = models.linear_model(rate=1.0, sigma=0.0)
    out = em_step(model, np.array([1.0]), EmpiricalMeasure([[0.0]]), 0.01, RngStream(0))
    assert out[0] == pytest.approx(0.99, abs=1e-15)


def test_em_step_advances_the_stream_and_batches_match():
    model = models.corollary34_model(kappa=0.3)
    x = normal_cloud(4)
    mu = EmpiricalMeasure(x)
    bank = StreamBank(3, stream_ids(4))
    batch = em_step(model, x, mu, 0.01, bank)
    assert bank.counter > 0
    rows = [em_step(model, x[i], mu, 0.01, RngStream(3, int(stream_ids(4)[i]))) for i in range(4)]
    assert np.array_equal(np.vstack(rows), batch)


def test_ou_stationary_variance():
    model = models.linear_model(rate=1.0)  # sigma = sqrt(2), invariant law N(0, 1)
    cfg = SimConfig(h=1e-3, T=10.0, N=10_000, seed=5)
    run = run_mckean_vlasov(model, np.zeros((cfg.N, 1)), cfg, snapshot_times=(6.0, 8.0, 10.0))
    pooled = np.concatenate([s.points[:, 0] for s in run.snapshots.values()])
    assert pooled.var() == pytest.approx(1.0, rel=0.03)


def test_frozen_ou_keeps_its_invariant_law():
    model = models.linear_model(rate=1.0)
    eta = normal_cloud(10_000, seed=1)
    cfg = SimConfig(h=1e-3, T=1.0, N=10_000, seed=2)
    run = run_frozen(model, EmpiricalMeasure(eta), eta, cfg, snapshot_times=(0.5, 1.0))
    for snap in run.snapshots.values():
        assert w1(snap, EmpiricalMeasure(eta)) < 0.05


def test_deterministic_limit_follows_the_flow():
    model = models.linear_model(rate=1.0, sigma=0.0)
    for h in (0.01, 0.001):
        cfg = SimConfig(h=h, T=1.0, N=1)
        run = run_frozen(model, np.zeros(1), np.ones((1, 1)), cfg)
        assert abs(run.final[0, 0] - math.exp(-1.0)) <= h


def test_kinetic_frozen_run_stays_finite():
    model = models.kinetic_model(kappa=0.3)
    eta = normal_cloud(500, d=2, seed=3)
    run = run_frozen(model, EmpiricalMeasure(eta), eta, SimConfig(h=0.01, T=10.0, N=500, seed=1))
    assert not run.diverged and np.all(np.isfinite(run.final))


def test_stable_run_stays_finite():
    model = models.stable_model(kappa=0.2)
    eta = normal_cloud(500, seed=4)
    run = run_mckean_vlasov(model, eta, SimConfig(h=0.01, T=2.0, N=500, seed=1))
    assert not run.diverged


@pytest.mark.parametrize("model", [models.linear_model(interaction=0.0),
                                   models.corollary34_model(kappa=0.0),
                                   models.stable_model(kappa=0.0)],
                         ids=["linear", "corollary34", "stable"])
def test_zero_interaction_decouples(model):
    eta = normal_cloud(200, seed=6)
    cfg = SimConfig(h=0.01, T=1.0, N=200, seed=8)
    joint = run_mckean_vlasov(model, eta, cfg)
    frozen = run_frozen(model, EmpiricalMeasure(normal_cloud(7, seed=9, loc=5.0)), eta, cfg)
    assert np.array_equal(joint.final, frozen.final)


def test_same_seed_same_result_and_thread_independence():
    model = models.corollary34_model(kappa=0.2)
    eta = normal_cloud(300, seed=1)
    runs = [run_mckean_vlasov(model, eta, SimConfig(h=0.01, T=0.5, N=300, seed=4, n_threads=k))
            for k in (1, 1, 4)]
    assert same_run(runs[0], runs[1]) and same_run(runs[0], runs[2])
    other = run_mckean_vlasov(model, eta, SimConfig(h=0.01, T=0.5, N=300, seed=5))
    assert not np.array_equal(other.final, runs[0].final)


@pytest.mark.parametrize("model", [models.corollary34_model(kappa=0.2), models.kinetic_model(kappa=0.2),
                                   models.kinetic_stable_model(kappa=0.2)],
                         ids=["corollary34", "kinetic", "kinetic_stable"])
def test_semigroup_split_run(model):
    eta = normal_cloud(100, d=model.state_dim, seed=2)
    whole = run_mckean_vlasov(model, eta, SimConfig(h=0.01, T=1.0, N=100, seed=3))
    first = run_mckean_vlasov(model, eta, SimConfig(h=0.01, T=0.4, N=100, seed=3))
    rest = run_mckean_vlasov(model, first.final, SimConfig(h=0.01, T=0.6, N=100, seed=3),
                             start_time=first.t_end, counter=first.counter)
    assert np.array_equal(rest.final, whole.final)
    assert rest.t_end == pytest.approx(whole.t_end)


def test_divergence_is_reported():
    model = models.linear_model(rate=-100.0, sigma=0.0)
    cfg = SimConfig(h=0.1, T=100.0, N=2)
    run = run_mckean_vlasov(model, np.ones((2, 1)), cfg)
    assert run.diverged and 0 < run.blowup_time <= cfg.T
    with pytest.raises(DivergenceError) as info:
        run_mckean_vlasov(model, np.ones((2, 1)), cfg, raise_on_divergence=True)
    assert info.value.t == run.blowup_time


def test_reflection_identical_clouds_start_coupled():
    model = models.corollary34_model()
    eta = normal_cloud(100, seed=3)
    run = reflection_coupled_pairs(model, EmpiricalMeasure(eta), eta, eta.copy(),
                                   SimConfig(h=0.01, T=1.0, N=100), pair="identity")
    assert np.all(run.series["mean_dist"] == 0.0)
    assert np.all(run.tau == 0.0)


def test_reflection_needs_elliptic_split():
    model = models.stable_model()
    eta = normal_cloud(10)
    with pytest.raises(UnsupportedModelError):
        reflection_coupled_pairs(model, EmpiricalMeasure(eta), eta, eta, SimConfig(h=0.01, N=10))


def test_coupling_is_permanent():
    model = models.corollary34_model()
    cfg = SimConfig(h=0.01, T=4.0, N=400, seed=2, record_every=0.01)
    e1, e2 = normal_cloud(400, loc=-1.0, seed=1), normal_cloud(400, loc=1.0, seed=2)
    run = reflection_coupled_pairs(model, EmpiricalMeasure(e1), e1, e2, cfg)
    done = np.isfinite(run.tau)
    assert done.any()
    assert np.array_equal(run.final[done], run.final_y[done])
    assert np.all(np.diff(run.series["coupled_frac"]) >= 0)
    assert run.series["mean_dist"][-1] == pytest.approx(
        np.linalg.norm(run.final - run.final_y, axis=1).mean())


def test_reflected_brownian_coupling_time_law():
    # X - Y = 2 + 2 B_t, so tau is the first passage of a Brownian motion to distance 1
    model = models.brownian_model()
    n, T = 2000, 2.0
    cfg = SimConfig(h=1e-4, T=T, N=n, seed=11, record_every=T)
    run = reflection_coupled_pairs(model, np.zeros(1), np.zeros((n, 1)), np.full((n, 1), 2.0), cfg,
                                   pair="identity")
    tau = run.tau[np.isfinite(run.tau)]
    cdf_T = 2 * stats.norm.sf(1 / math.sqrt(T))
    assert abs(len(tau) / n - cdf_T) <= 3 * math.sqrt(cdf_T * (1 - cdf_T) / n) + 0.02
    conditional = lambda t: 2 * stats.norm.sf(1 / np.sqrt(np.maximum(t, 1e-12))) / cdf_T
    assert stats.kstest(tau, conditional).pvalue > 0.01


def test_synchronous_identical_models_never_separate():
    model = models.corollary34_model(kappa=0.2)
    eta = normal_cloud(200, seed=3)
    run = synchronous_coupled_runs(model, model, eta, SimConfig(h=0.01, T=2.0, N=200))
    assert np.all(run.series["mean_dist"] == 0.0)
    assert np.array_equal(run.final, run.final_y)


def test_synchronous_needs_matching_noise():
    eta = normal_cloud(10)
    with pytest.raises(ConfigurationError):
        synchronous_coupled_runs(models.linear_model(), models.stable_model(), eta,
                                 SimConfig(h=0.01, N=10))


def test_synchronous_stable_shares_all_increments():
    a = models.linear_model(sigma=1.0, noise=StableParams(1.5))
    b = models.linear_model(sigma=1.0, noise=StableParams(1.5))
    eta = normal_cloud(100)
    run = synchronous_coupled_runs(a, b, eta, SimConfig(h=0.01, T=1.0, N=100))
    assert np.all(run.series["mean_dist"] == 0.0)


def test_fixed_point_of_measure_independent_model():
    model = models.corollary34_model(kappa=0.0)
    cfg = SimConfig(h=0.02, T=10.0, N=1000, seed=3, burn_in=6.0, window=2.0)
    mu, gaps = gamma_fixed_point(model, EmpiricalMeasure(normal_cloud(1000)), cfg, max_iter=4, tol=0.0)
    assert gaps[1] == 0.0


def test_fixed_point_example33_matches_closed_form():
    model = models.example33_model(0.5)
    cfg = SimConfig(h=0.01, T=12.0, N=4000, seed=7, burn_in=8.0, window=2.0)
    mu, gaps = gamma_fixed_point(model, EmpiricalMeasure(np.zeros((4000, 1))), cfg, max_iter=12,
                                 tol=1e-3)
    a_star = example33_closed_form(0.5)["a_star"]
    assert float(model.stats(mu)[0]) == pytest.approx(a_star, rel=0.05)
    assert gaps[-1] < gaps[0]


def test_gamma_map_flags_non_stationary_flow():
    model = models.linear_model(rate=0.05)
    cfg = SimConfig(h=0.05, T=4.0, N=500, window=1.0, tol_stationary=0.01)
    eta = normal_cloud(500, loc=20.0)
    with pytest.raises(NonStationaryError):
        gamma_map(model, EmpiricalMeasure(eta), eta, cfg)
    with pytest.raises(ConfigurationError):
        gamma_map(model, EmpiricalMeasure(eta), eta, SimConfig(h=0.05, T=1.0, N=500, window=1.0))


def test_fixed_point_warns_when_gaps_grow():
    # repulsive interaction: the frozen flow follows mu, so each iterate drifts further
    model = models.linear_model(rate=1.0, interaction=3.0)
    cfg = SimConfig(h=0.05, T=6.0, N=200, burn_in=2.0, window=2.0)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        gamma_fixed_point(model, EmpiricalMeasure(normal_cloud(200, loc=1.0)), cfg, max_iter=5,
                          check_stationarity=False, tol=0.0)
    assert any(issubclass(w.category, DivergenceWarning) for w in caught)


def test_mean_field_replicas_concentrate():
    model = models.corollary34_model(kappa=0.5)
    medians = []
    for n in (1000, 2000, 4000):
        d = []
        for rep in range(20):
            cfg_a = SimConfig(h=0.02, T=1.0, N=n, seed=1000 * rep + 1)
            cfg_b = SimConfig(h=0.02, T=1.0, N=n, seed=1000 * rep + 2)
            a = run_mckean_vlasov(model, normal_cloud(n, seed=rep, scale=2.0), cfg_a)
            b = run_mckean_vlasov(model, normal_cloud(n, seed=rep + 500, scale=2.0), cfg_b)
            d.append(w1(a.final_measure(), b.final_measure()))
        medians.append(np.median(d))
    assert medians[0] > medians[1] > medians[2]
