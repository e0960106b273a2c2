"""Verdicts from simulation output: decay fits, contraction estimates,
the mean-field phase transition and the time-changed synchronous bound."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import integrate, special

from .measures import EmpiricalMeasure, w1
from .models import ModelSpec, example33_model
from .rates import Psi, RateProfile
from .simulate import (ConfigurationError, SimConfig, gamma_map, reflection_coupled_pairs,
                       run_mckean_vlasov, synchronous_coupled_runs)


class AnalysisError(ValueError):
    pass


class DegenerateFitError(AnalysisError):
    pass


@dataclass(frozen=True)
class DecayFit:
    lambda_hat: float
    c_hat: float
    r_squared: float
    window: tuple
    lambda_stderr: float = 0.0
    n_points: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def decay_fit(series, window=None, min_points: int = 5) -> DecayFit:
    """Least-squares line through (t, log w) on the positive values in a window.

    ``series`` is a sequence of (t, w) pairs or a pair of arrays.  The window
    defaults to [0.2 T, 0.8 T] with T the last time.
    """
    arr = np.asarray(series, dtype=float)
    if arr.ndim == 2 and arr.shape[0] == 2 and arr.shape[1] != 2:
        arr = arr.T
    t, w = arr[:, 0], arr[:, 1]
    if not np.any(w > 0):
        raise DegenerateFitError("all distances are zero; the coupling has completed")
    if window is None:
        window = (0.2 * t.max(), 0.8 * t.max())
    keep = (t >= window[0] - 1e-12) & (t <= window[1] + 1e-12) & (w > 0)
    if keep.sum() < min_points:
        raise DegenerateFitError(f"only {keep.sum()} positive points in window {window}")
    t, y = t[keep], np.log(w[keep])
    tc = t - t.mean()
    sxx = float(tc @ tc)
    if sxx == 0:
        raise DegenerateFitError("window contains a single time")
    slope = float(tc @ (y - y.mean())) / sxx
    intercept = float(y.mean() - slope * t.mean())
    resid = y - (intercept + slope * t)
    ss_res = float(resid @ resid)
    yc = y - y.mean()
    ss_tot = float(yc @ yc)
    r2 = 1.0 if ss_tot <= 1e-300 else max(0.0, 1.0 - ss_res / ss_tot)
    n = len(t)
    se = math.sqrt(ss_res / (n - 2) / sxx) if n > 2 else float("nan")
    return DecayFit(-slope, math.exp(intercept), r2, (float(window[0]), float(window[1])), se, n)


def _verdict(ok: bool | None) -> str:
    return "inconclusive" if ok is None else ("pass" if ok else "fail")


def gamma_factor(model: ModelSpec, mu1, mu2, eta_ref, config: SimConfig) -> dict:
    """W1(Gamma(mu1), Gamma(mu2)) / W1(mu1, mu2) with common random numbers."""
    d0 = w1(mu1, mu2)
    if d0 == 0.0:
        return {"w1_in": 0.0, "w1_out": None, "factor": None, "degenerate": True}
    g1, _ = gamma_map(model, mu1, eta_ref, config, check=False)
    g2, _ = gamma_map(model, mu2, eta_ref, config, check=False)
    d1 = w1(g1, g2)
    return {"w1_in": d0, "w1_out": d1, "factor": d1 / d0, "degenerate": False}


def default_gamma_pairs(dim: int, n: int, seed: int = 0, count: int = 5):
    rng = np.random.default_rng(seed)
    pairs = []
    for k in range(count):
        a = rng.normal(0.0, 1.0, (n, dim))
        b = rng.normal(0.5 + 0.5 * k, 1.0 + 0.2 * k, (n, dim))
        pairs.append((EmpiricalMeasure(a), EmpiricalMeasure(b)))
    return pairs


def contraction_report(model: ModelSpec, rate_profile: RateProfile | None, config: SimConfig, *,
                       eta1=None, eta2=None, mu_frozen=None, checkpoints=(1.0, 2.0, 4.0, 8.0),
                       gamma_pairs=None, gamma_config: SimConfig | None = None) -> dict:
    """Coupling-based contraction diagnostics for one model.

    Brownian first-order models run the reflection coupling, check the
    psi-decay bound at the checkpoints (each within 3 standard errors) and
    compare the fitted W1 rate with lambda0.  Other regimes run a
    synchronous coupling and report fitted constants flagged "empirical".
    """
    rng = np.random.default_rng(config.seed)
    sd = model.state_dim
    if eta1 is None:
        eta1 = rng.normal(-2.0, 0.5, (config.N, sd))
    if eta2 is None:
        eta2 = rng.normal(2.0, 0.5, (config.N, sd))
    e1 = eta1 if isinstance(eta1, EmpiricalMeasure) else EmpiricalMeasure(eta1)
    e2 = eta2 if isinstance(eta2, EmpiricalMeasure) else EmpiricalMeasure(eta2)
    mu = mu_frozen if mu_frozen is not None else e1
    report: dict = {"model": model.name, "regime": None, "checks": []}
    if model.has_elliptic_split and model.ellipticity_alpha and rate_profile is not None:
        report["regime"] = "brownian_first_order"
        if model.phi is None:
            raise ConfigurationError("reflection-coupling report needs the model's phi")
        gap0 = float(np.abs(e1.points).max() + np.abs(e2.points).max())
        psi = Psi(model.phi, model.ellipticity_alpha).tabulated(max(4.0 * gap0, 20.0))
        run = reflection_coupled_pairs(model, mu, e1, e2, config, psi=psi)
        p0 = float(run.series["mean_psi"][0])
        lam0 = rate_profile.lambda0
        ok_bound = True
        for t in checkpoints:
            if t > config.T + 1e-12:
                continue
            v, se = run.value_at("mean_psi", t)
            bound = math.exp(-lam0 * t) * p0
            ok = v <= bound + 3.0 * se
            ok_bound &= ok
            report["checks"].append({"t": t, "mean_psi": v, "stderr": se, "bound": bound,
                                     "pass": bool(ok)})
        report["coupled_fraction"] = float(run.series["coupled_frac"][-1])
        series = np.column_stack([run.times, run.series["mean_dist"]])
        flag = "analytic"
    else:
        report["regime"] = f"{model.kind}_{model.noise_kind}"
        run = synchronous_coupled_runs(model, model, e1, config, mu_a=mu, mu_b=mu, eta0_b=e2)
        series = np.column_stack([run.times, run.series["mean_dist"]])
        ok_bound, lam0 = None, None
        flag = "empirical"
    report["flag"] = flag
    report["_run"] = run  # private: callers write its series, JSON writers skip it
    try:
        fit = decay_fit(series)
    except DegenerateFitError:
        positive = series[series[:, 1] > 0]
        fit = decay_fit(series, window=(0.0, float(positive[-1, 0]))) if len(positive) >= 5 else None
    if fit is None:
        report.update(lambda_hat=None, c_hat=None, verdict="inconclusive")
        return report
    d0 = float(series[0, 1])
    c_hat = float(np.max(series[:, 1] * np.exp(fit.lambda_hat * series[:, 0])) / d0) if d0 > 0 else None
    report.update(lambda_hat=fit.lambda_hat, lambda_stderr=fit.lambda_stderr, c_hat=c_hat,
                  fit=fit.to_dict())
    ok_rate = None
    if lam0 is not None:
        report["lambda0"] = lam0
        ok_rate = fit.lambda_hat >= lam0 - 3.0 * fit.lambda_stderr
        report["rate_pass"] = bool(ok_rate)
    if gamma_pairs is not None:
        gcfg = gamma_config or config
        facs = [gamma_factor(model, a, b, EmpiricalMeasure(np.zeros((gcfg.N, sd))), gcfg)
                for a, b in gamma_pairs]
        report["gamma_factors"] = facs
        live = [f["factor"] for f in facs if not f["degenerate"]]
        report["gamma_pass"] = bool(all(f < 1.0 for f in live)) if live else None
    if flag == "empirical":
        report["verdict"] = "pass"
        return report
    if report.get("coupled_fraction", 1.0) == 0.0:
        report["verdict"] = "inconclusive"
        return report
    parts = [ok_bound, ok_rate, report.get("gamma_pass", True)]
    report["verdict"] = _verdict(None if any(p is None for p in parts) else all(parts))
    return report


# ---------------------------------------------------------------- phase transition

def interaction_constant() -> tuple[float, float]:
    """int |x + 1| exp(-x^2) dx by adaptive quadrature, and its closed form."""
    f = lambda x: abs(x + 1.0) * math.exp(-x * x)
    left, _ = integrate.quad(f, -np.inf, -1.0, epsabs=1e-14, epsrel=1e-13)
    right, _ = integrate.quad(f, -1.0, np.inf, epsabs=1e-14, epsrel=1e-13)
    return left + right, math.exp(-1.0) + math.sqrt(math.pi) * special.erf(1.0)


def example33_closed_form(epsilon: float, band: float = 0.01) -> dict:
    if not epsilon > 0:
        raise AnalysisError("epsilon must be positive")
    c, c_exact = interaction_constant()
    eps_star = math.sqrt(math.pi) / c
    out = {"epsilon": epsilon, "interaction_constant": c, "interaction_constant_exact": c_exact,
           "epsilon_critical": eps_star}
    if abs(epsilon / eps_star - 1.0) <= band:
        out.update(regime="boundary", invariant_measure=None)
    elif epsilon < eps_star:
        a = 1.0 / (1.0 - epsilon * c / math.sqrt(math.pi))
        out.update(regime="subcritical", invariant_measure=True, a_star=a,
                   stationary_mean=a * epsilon, stationary_variance=(a * epsilon) ** 2 / 2.0)
    else:
        out.update(regime="supercritical", invariant_measure=False)
    return out


def growth_detected(times, mean_abs, t_mid: float, t_end: float) -> bool:
    """E|X| at t_end at least twice its value at t_mid, with nondecreasing unit-interval values."""
    times = np.asarray(times)
    mean_abs = np.asarray(mean_abs)
    at = lambda t: mean_abs[int(np.argmin(np.abs(times - t)))]
    grid = np.arange(math.ceil(t_mid), math.floor(t_end) + 1)
    vals = np.array([at(t) for t in grid])
    return bool(at(t_end) >= 2.0 * at(t_mid) and np.all(np.diff(vals) >= 0))


def example33(epsilon: float, mode: str = "closed_form", config: SimConfig | None = None,
              eta0=None) -> dict:
    """Closed-form or simulated analysis of the |x| + 1 mean-field model."""
    report = example33_closed_form(epsilon)
    report["mode"] = mode
    if mode == "closed_form":
        report["verdict"] = "inconclusive" if report["regime"] == "boundary" else "pass"
        return report
    if mode != "simulate":
        raise AnalysisError(f"unknown mode {mode!r}")
    config = config or SimConfig(h=1e-3, T=20.0, N=10_000, seed=0, record_every=0.1)
    eta = np.zeros((config.N, 1)) if eta0 is None else eta0
    run = run_mckean_vlasov(example33_model(epsilon), eta, config)
    report["times"] = run.times.tolist()
    report["m_hat"] = run.series["stat0"].tolist()
    report["mean_abs"] = run.series["mean_abs"].tolist()
    report["blowup_time"] = run.blowup_time
    T = run.t_end
    diverged = run.diverged or growth_detected(run.times, run.series["mean_abs"], T / 2, T)
    report["diverged"] = diverged
    report["m_hat_final"] = float(run.series["stat0"][-1])
    if report["regime"] == "subcritical":
        rel = abs(report["m_hat_final"] / report["a_star"] - 1.0)
        report["relative_error"] = rel
        report["verdict"] = _verdict(rel <= 0.05 and not diverged)
    elif report["regime"] == "supercritical":
        report["verdict"] = _verdict(diverged)
    else:
        report["verdict"] = "inconclusive"
    report["_run"] = run
    return report


# ---------------------------------------------------------------- time-change bound

def lemma51_check(model1: ModelSpec, model2: ModelSpec, config: SimConfig, *, mu1=None,
                  mu2=None, eta1=None, eta2=None, checkpoints=(0.5, 1.0, 2.0, 4.0)) -> dict:
    """Synchronous coupling of two frozen stable models against the time-changed bound.

    The right-hand side has three parts: the contracted initial gap, the
    law-mismatch integral (quadrature) and the diffusion-mismatch term
    E sqrt(int e^{K(t-s)} ||s1 - s2||^2 dS_s), which is estimated on the
    subordinator increments that drove the simulation, with each increment
    weighted at the right end of its step.
    """
    for m in (model1, model2):
        if not m.is_stable or m.kind != "first_order":
            raise ConfigurationError("lemma51_check needs first-order stable models")
    K = model1.params.K_onesided
    if K is None or model2.params.K_onesided is None:
        raise ConfigurationError("models lack the one-sided constant K")
    kappa = max(model1.params.kappa, model2.params.kappa)
    d = model1.dim
    eta1 = np.zeros((config.N, d)) if eta1 is None else eta1
    e1 = eta1 if isinstance(eta1, EmpiricalMeasure) else EmpiricalMeasure(eta1)
    e2 = e1 if eta2 is None else (eta2 if isinstance(eta2, EmpiricalMeasure) else EmpiricalMeasure(eta2))
    mu1 = e1 if mu1 is None else mu1
    mu2 = mu1 if mu2 is None else mu2
    s1 = model1.sigma_matrix(model1.stats(mu1))
    s2 = model2.sigma_matrix(model2.stats(mu2))
    dsig2 = float(np.sum((s1 - s2) ** 2))
    w_mu = w1(mu1, mu2)
    gap0 = float(np.linalg.norm(e1.points - e2.points, axis=1).mean())
    h = config.h
    step_of = {int(round(t / h)): t for t in checkpoints if t <= config.T + 1e-12}
    acc = np.zeros(config.N)
    lhs_at: dict = {}
    sub_at: dict = {}
    state = {"step": 0}

    def observer(t, xa, xb, inc):
        state["step"] += 1
        acc[:] += math.exp(-K * t) * inc["dS"]
        k = state["step"]
        if k in step_of:
            tc = step_of[k]
            lhs_at[tc] = np.linalg.norm(xa - xb, axis=1)
            sub_at[tc] = np.sqrt(math.exp(K * t) * dsig2 * acc)

    synchronous_coupled_runs(model1, model2, e1, config, mu_a=mu1, mu_b=mu2, eta0_b=e2,
                             observer=observer)
    checks = []
    for tc in sorted(lhs_at):
        law_term, _ = integrate.quad(lambda s: math.exp(K * (tc - s)) * kappa * w_mu ** 2, 0.0, tc)
        det = math.exp(0.5 * K * tc) * gap0 + math.sqrt(max(law_term, 0.0))
        diff = lhs_at[tc] - sub_at[tc]
        lhs, sub = float(lhs_at[tc].mean()), float(sub_at[tc].mean())
        se = float(diff.std(ddof=1) / math.sqrt(len(diff))) if len(diff) > 1 else 0.0
        rhs = det + sub
        ok = lhs <= rhs + 3.0 * se
        checks.append({"t": tc, "lhs": lhs, "rhs": rhs, "initial_term": math.exp(0.5 * K * tc) * gap0,
                       "law_term": math.sqrt(max(law_term, 0.0)), "noise_term": sub,
                       "stderr": se, "pass": bool(ok)})
    return {"K": K, "kappa": kappa, "sigma_mismatch_hs": math.sqrt(dsig2), "w1_laws": w_mu,
            "checks": checks, "verdict": _verdict(all(c["pass"] for c in checks))}
