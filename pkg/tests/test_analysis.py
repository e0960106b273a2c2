import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mkv import analysis, models, rates
from mkv.analysis import AnalysisError, DegenerateFitError, decay_fit
from mkv.measures import EmpiricalMeasure
from mkv.noise import StableParams
from mkv.simulate import ConfigurationError, SimConfig

from oracles import frozen

ORACLE = frozen()


def test_decay_fit_exact_exponential():
    t = np.linspace(0, 5, 51)
    fit = decay_fit(np.column_stack([t, 3 * np.exp(-2 * t)]))
    assert fit.lambda_hat == pytest.approx(2.0, abs=1e-10)
    assert fit.c_hat == pytest.approx(3.0, abs=1e-10)
    assert fit.r_squared == pytest.approx(1.0)
    assert fit.window == (1.0, 4.0)


def test_decay_fit_constant_series():
    t = np.linspace(0, 5, 51)
    fit = decay_fit((t, np.full_like(t, 0.7)))
    assert fit.lambda_hat == pytest.approx(0.0, abs=1e-14)
    assert 0.0 <= fit.r_squared <= 1.0


def test_decay_fit_noisy_rate():
    t = np.linspace(0, 5, 101)
    for seed in range(50):
        noise = np.random.default_rng(seed).uniform(0.9, 1.1, t.size)
        fit = decay_fit(np.column_stack([t, 2.0 * np.exp(-0.8 * t) * noise]))
        assert fit.lambda_hat == pytest.approx(0.8, rel=0.10)


def test_decay_fit_degenerate_inputs():
    t = np.linspace(0, 5, 51)
    with pytest.raises(DegenerateFitError):
        decay_fit(np.column_stack([t, np.zeros_like(t)]))
    with pytest.raises(DegenerateFitError):
        decay_fit(np.column_stack([t[:4], np.ones(4)]), window=(0, 5))


@settings(max_examples=50)
@given(st.floats(1e-3, 1e3), st.floats(-3, 3), st.integers(0, 2**31))
def test_decay_fit_scale_equivariance(scale, rate, seed):
    t = np.linspace(0, 4, 41)
    w = np.exp(-rate * t) * np.random.default_rng(seed).uniform(0.5, 1.5, t.size)
    base = decay_fit(np.column_stack([t, w]))
    scaled = decay_fit(np.column_stack([t, scale * w]))
    assert scaled.lambda_hat == pytest.approx(base.lambda_hat, rel=1e-9, abs=1e-9)
    assert scaled.c_hat == pytest.approx(scale * base.c_hat, rel=1e-9)


def test_interaction_constant_against_high_precision():
    quad, closed = analysis.interaction_constant()
    assert quad == pytest.approx(ORACLE["interaction_constant"], abs=1e-12)
    assert abs(quad - closed) <= 1e-8


def test_example33_closed_form_values():
    sub = analysis.example33_closed_form(0.5)
    assert sub["epsilon_critical"] == pytest.approx(ORACLE["epsilon_critical"], abs=1e-12)
    assert sub["regime"] == "subcritical" and sub["invariant_measure"]
    assert sub["a_star"] == pytest.approx(ORACLE["a_star_half"], rel=1e-12)
    assert sub["a_star"] == pytest.approx(2.106, abs=1e-3)
    assert sub["stationary_mean"] == pytest.approx(0.5 * sub["a_star"])
    sup = analysis.example33_closed_form(1.2)
    assert sup["regime"] == "supercritical" and sup["invariant_measure"] is False
    edge = analysis.example33(ORACLE["epsilon_critical"] * 1.005)
    assert edge["regime"] == "boundary" and edge["verdict"] == "inconclusive"
    with pytest.raises(AnalysisError):
        analysis.example33_closed_form(0.0)


def test_example33_stationary_law_is_self_consistent():
    # the normalized Gaussian N(a eps, a^2 eps^2 / 2) must reproduce m(a) = E|X| + 1 = a
    eps = 0.5
    cf = analysis.example33_closed_form(eps)
    mean, sd = cf["stationary_mean"], math.sqrt(cf["stationary_variance"])
    x = np.linspace(mean - 12 * sd, mean + 12 * sd, 400_001)
    dens = np.exp(-0.5 * ((x - mean) / sd) ** 2) / (sd * math.sqrt(2 * math.pi))
    dx = x[1] - x[0]
    assert np.sum(dens) * dx == pytest.approx(1.0, abs=1e-9)
    assert np.sum((np.abs(x) + 1) * dens) * dx == pytest.approx(cf["a_star"], rel=1e-8)


def test_example33_a_star_increases_towards_the_critical_value():
    eps = np.arange(1, 10) / 10
    a = [analysis.example33_closed_form(e)["a_star"] for e in eps]
    assert all(x < y for x, y in zip(a, a[1:]))
    near = analysis.example33_closed_form(ORACLE["epsilon_critical"] * 0.985)["a_star"]
    assert near > 60


def test_example33_simulation_small():
    cfg = SimConfig(h=0.01, T=20.0, N=2000, seed=3, record_every=0.1)
    sub = analysis.example33(0.5, "simulate", cfg)
    assert sub["verdict"] == "pass"
    assert sub["relative_error"] <= 0.05
    sup = analysis.example33(1.2, "simulate", cfg)
    assert sup["diverged"] and sup["verdict"] == "pass"
    with pytest.raises(AnalysisError):
        analysis.example33(0.5, "guess", cfg)


def test_growth_detection():
    t = np.linspace(0, 20, 201)
    assert analysis.growth_detected(t, np.exp(0.2 * t), 10, 20)
    assert not analysis.growth_detected(t, 1 + 0 * t, 10, 20)


def test_contraction_report_brownian_rate():
    model = models.corollary34_model()
    prof = rates.rate_profile(model.phi, model.ellipticity_alpha)
    cfg = SimConfig(h=0.005, T=8.0, N=1000, seed=5)
    rep = analysis.contraction_report(model, prof, cfg)
    assert rep["regime"] == "brownian_first_order" and rep["flag"] == "analytic"
    assert rep["lambda_hat"] >= prof.lambda0 - 3 * rep["lambda_stderr"]
    assert rep["verdict"] == "pass"
    assert all(c["pass"] for c in rep["checks"])


def test_contraction_report_other_regimes_are_empirical():
    model = models.kinetic_model(kappa=0.1)
    rep = analysis.contraction_report(model, None, SimConfig(h=0.01, T=6.0, N=300, seed=1))
    assert rep["flag"] == "empirical"
    assert rep["lambda_hat"] > 0 and rep["c_hat"] >= 1.0


def test_gamma_factor_degenerate_and_contracting():
    model = models.corollary34_model(kappa=0.3)
    cfg = SimConfig(h=0.02, T=8.0, N=400, seed=2)
    a = EmpiricalMeasure(np.random.default_rng(0).normal(size=(400, 1)))
    assert analysis.gamma_factor(model, a, a, a, cfg)["degenerate"]
    b = EmpiricalMeasure(a.points + 1.0)
    f = analysis.gamma_factor(model, a, b, EmpiricalMeasure(np.zeros((400, 1))), cfg)
    assert not f["degenerate"] and 0 <= f["factor"] < 1


def _stable_linear(sigma):
    return models.linear_model(sigma=sigma, noise=StableParams(1.5))


def test_lemma51_identical_dynamics():
    cfg = SimConfig(h=0.01, T=2.0, N=500, seed=1)
    rep = analysis.lemma51_check(_stable_linear(1.0), _stable_linear(1.0), cfg,
                                 checkpoints=(0.5, 1.0, 2.0))
    for c in rep["checks"]:
        assert c["lhs"] == 0.0 and c["rhs"] == 0.0 and c["pass"]


def test_lemma51_initial_gap_term_alone():
    cfg = SimConfig(h=0.01, T=2.0, N=2000, seed=2)
    eta1 = np.random.default_rng(0).normal(size=(2000, 1))
    eta2 = eta1 + 1.0
    rep = analysis.lemma51_check(_stable_linear(1.0), _stable_linear(1.0), cfg, eta1=eta1,
                                 eta2=eta2, mu1=EmpiricalMeasure(eta1), checkpoints=(0.5, 1.0, 2.0))
    K = rep["K"]
    for c in rep["checks"]:
        assert c["noise_term"] == 0.0 and c["law_term"] == 0.0
        assert c["lhs"] <= math.exp(K * c["t"] / 2) * 1.0 + 3 * c["stderr"] + 1e-12
    assert rep["verdict"] == "pass"


def test_lemma51_needs_one_sided_constant():
    from dataclasses import replace
    m = _stable_linear(1.0)
    bare = replace(m, params=replace(m.params, K_onesided=None))
    with pytest.raises(ConfigurationError):
        analysis.lemma51_check(bare, m, SimConfig(h=0.01, T=1.0, N=10))
    with pytest.raises(ConfigurationError):
        analysis.lemma51_check(models.linear_model(), m, SimConfig(h=0.01, T=1.0, N=10))


def test_lemma51_bound_holds_on_a_few_seeds():
    passes = 0
    for seed in range(4):
        cfg = SimConfig(h=2e-3, T=4.0, N=1000, seed=seed)
        rep = analysis.lemma51_check(_stable_linear(1.0), _stable_linear(1.5), cfg)
        passes += rep["verdict"] == "pass"
    assert passes >= 3
