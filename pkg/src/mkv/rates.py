"""Rate functions, contraction constants and smallness thresholds.

The concave distance function is

    psi(r) = int_0^r exp(-Phi(u)) int_u^inf s exp(Phi(s)) ds du,
    Phi(u) = int_0^u phi(v) / (2 alpha) dv,

whose derivative ``psi'(r) = int_r^inf s exp(Phi(s) - Phi(r)) ds`` is computed
directly (the difference in the exponent keeps it well scaled) and whose
second derivative is ``-phi(r) psi'(r) / (2 alpha) - r``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import integrate
from scipy.interpolate import CubicHermiteSpline
from scipy.special import gamma as gamma_fn

from .noise import STABLE_CONVENTION, StableParams, StreamBank, kanter_stable, stream_ids

REGIMES = ("brownian_first_order", "brownian_kinetic", "stable_first_order", "stable_kinetic")


class RateError(ValueError):
    pass


class PrecisionError(RateError):
    pass


class InconsistencyError(RateError):
    pass


class InfeasibleError(RateError):
    pass


# ---------------------------------------------------------------------------
# phi


@dataclass(frozen=True)
class PhiSpec:
    """Piecewise rate function: expanding (slope l1) below r0, dissipative
    (slope -l2) above 2 r0, linear interpolation of phi(v)/v in between."""

    l1: float
    l2: float
    r0: float

    def __post_init__(self):
        if not (self.l1 > 0 and self.l2 > 0 and self.r0 > 0):
            raise RateError("PhiSpec needs l1, l2, r0 > 0")

    @property
    def breakpoints(self) -> tuple[float, float]:
        return (self.r0, 2.0 * self.r0)

    def __call__(self, v):
        l1, l2, r0 = self.l1, self.l2, self.r0
        if isinstance(v, float):
            if v <= r0:
                return l1 * v
            if v <= 2 * r0:
                return (-(l1 + l2) / r0 * (v - r0) + l1) * v
            return -l2 * v
        v = np.asarray(v, dtype=float)
        mid = (-(l1 + l2) / r0 * (v - r0) + l1) * v
        out = np.where(v <= r0, l1 * v, np.where(v <= 2 * r0, mid, -l2 * v))
        return out if out.ndim else float(out)

    def primitive(self, v):
        """int_0^v phi, in closed form."""
        l1, l2, r0 = self.l1, self.l2, self.r0
        k = (l1 + l2) / r0

        def middle(x):
            return (2 * l1 + l2) * (x**2 - r0**2) / 2 - k * (x**3 - r0**3) / 3

        p_r0 = l1 * r0**2 / 2
        p_2r0 = p_r0 + middle(2 * r0)
        if isinstance(v, float):
            if v <= r0:
                return l1 * v * v / 2
            if v <= 2 * r0:
                return p_r0 + middle(v)
            return p_2r0 - l2 * (v * v - 4 * r0**2) / 2
        v = np.asarray(v, dtype=float)
        out = np.where(v <= r0, l1 * v**2 / 2,
                       np.where(v <= 2 * r0, p_r0 + middle(v), p_2r0 - l2 * (v**2 - 4 * r0**2) / 2))
        return out if out.ndim else float(out)


@dataclass(frozen=True)
class LinearPhi:
    """phi(v) = slope * v.  With a negative slope this is the purely
    dissipative case, where psi is exactly linear."""

    slope: float
    breakpoints: tuple = ()

    def __call__(self, v):
        if isinstance(v, float):
            return self.slope * v
        out = self.slope * np.asarray(v, dtype=float)
        return out if out.ndim else float(out)

    def primitive(self, v):
        if isinstance(v, float):
            return self.slope * v * v / 2
        out = self.slope * np.asarray(v, dtype=float) ** 2 / 2
        return out if out.ndim else float(out)


def phi_eval(spec: PhiSpec, v):
    if np.any(np.asarray(v) < 0):
        raise RateError("phi is defined for v >= 0")
    return spec(v)


# ---------------------------------------------------------------------------
# psi


class Psi:
    """The distance function psi built from ``phi`` and the ellipticity alpha.

    ``phi`` needs ``__call__``; a closed-form ``primitive`` is used when
    present, otherwise the primitive is itself computed by quadrature.
    """

    def __init__(self, phi, ellipticity_alpha: float, rtol: float = 1e-8):
        if not ellipticity_alpha > 0:
            raise RateError("ellipticity_alpha must be positive")
        self.phi = phi
        self.alpha = float(ellipticity_alpha)
        self.rtol = rtol
        self._breaks = tuple(sorted(getattr(phi, "breakpoints", ())))

    def _Phi(self, u):
        if hasattr(self.phi, "primitive"):
            return self.phi.primitive(float(u)) / (2 * self.alpha)
        val, _ = integrate.quad(lambda v: float(self.phi(v)), 0.0, float(u), limit=200)
        return val / (2 * self.alpha)

    def _cutoff(self, r: float) -> float:
        # march until the integrand drops below 1e-16 of its running maximum
        phir = self._Phi(r)
        step = 0.25 * max(1.0, self._breaks[-1] if self._breaks else 1.0, math.sqrt(self.alpha))
        s, peak = r, 0.0
        for _ in range(100000):
            s += step
            val = s * math.exp(min(self._Phi(s) - phir, 700.0))
            peak = max(peak, val)
            if val < 1e-16 * peak:
                return s
            if s > 1e6:
                break
        raise PrecisionError("inner integral of psi does not decay (is phi eventually dissipative?)")

    def dpsi_scalar(self, r: float) -> float:
        r = float(r)
        upper = self._cutoff(r)
        phir = self._Phi(r)
        pts = [b for b in self._breaks if r < b < upper]
        val, err = integrate.quad(lambda s: s * math.exp(self._Phi(s) - phir), r, upper,
                                  points=pts or None, limit=400, epsabs=0.0,
                                  epsrel=self.rtol * 1e-2)
        if not np.isfinite(val) or err > self.rtol * abs(val):
            raise PrecisionError(f"psi' quadrature failed at r={r}: value {val}, error {err}")
        return val

    def dpsi(self, r):
        """psi'(r) >= 0."""
        r = np.asarray(r, dtype=float)
        out = np.vectorize(self.dpsi_scalar, otypes=[float])(r)
        return out if out.ndim else float(out)

    def d2psi(self, r, dpsi=None):
        """psi''(r) = -phi(r) psi'(r) / (2 alpha) - r."""
        r = np.asarray(r, dtype=float)
        dp = self.dpsi(r) if dpsi is None else np.asarray(dpsi, dtype=float)
        out = -np.asarray(self.phi(r)) * dp / (2 * self.alpha) - r
        return out if out.ndim else float(out)

    def __call__(self, r):
        """psi(r) by quadrature of psi', accumulated over sorted r."""
        r = np.asarray(r, dtype=float)
        if np.any(r < 0):
            raise RateError("psi is defined for r >= 0")
        flat = r.reshape(-1)
        order = np.argsort(flat)
        out = np.empty_like(flat)
        prev, acc = 0.0, 0.0
        for idx in order:
            x = flat[idx]
            if x > prev:
                pts = [b for b in self._breaks if prev < b < x]
                val, err = integrate.quad(self.dpsi_scalar, prev, x, points=pts or None,
                                          limit=200, epsabs=0.0, epsrel=self.rtol * 1e-2)
                if err > self.rtol * max(abs(val), 1e-300):
                    raise PrecisionError(f"psi quadrature failed on [{prev}, {x}]")
                acc += val
                prev = x
            out[idx] = acc
        out = out.reshape(r.shape)
        return out if out.ndim else float(out)

    def tabulated(self, r_max: float, n: int = 2048) -> "PsiTable":
        """Fast vectorized approximation of psi on [0, r_max], extended
        linearly beyond.  Meant for Monte Carlo averages, not for exact checks."""
        nodes = np.unique(np.concatenate([np.linspace(0.0, r_max, n),
                                          [b for b in self._breaks if b < r_max]]))
        dp = self.dpsi(nodes)
        spline = CubicHermiteSpline(nodes, dp, self.d2psi(nodes, dpsi=dp)).antiderivative()
        return PsiTable(spline, float(nodes[-1]), float(spline(nodes[-1])), float(dp[-1]))


@dataclass(frozen=True)
class PsiTable:
    spline: object
    r_max: float
    psi_max: float
    slope_max: float

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        inside = self.spline(np.minimum(r, self.r_max))
        return np.where(r <= self.r_max, inside, self.psi_max + self.slope_max * (r - self.r_max))


def psi_eval(spec, ellipticity_alpha: float, r):
    return Psi(spec, ellipticity_alpha)(r)


# ---------------------------------------------------------------------------
# constants


@dataclass(frozen=True)
class RateProfile:
    ellipticity_alpha: float
    C1: float
    C2: float
    K: float
    c0: float
    lambda0: float

    def __post_init__(self):
        if not (0 < self.C1 <= self.C2):
            raise InconsistencyError("RateProfile needs 0 < C1 <= C2")


def corollary34_constants(spec: PhiSpec, ellipticity_alpha: float) -> tuple[float, float, float]:
    """(C1, C2, K) with C1 = 2 alpha / l2, C2 = int_0^inf s e^{Phi(s)} ds = psi'(0), K = l1."""
    psi = Psi(spec, ellipticity_alpha)
    return 2 * ellipticity_alpha / spec.l2, psi.dpsi_scalar(0.0), spec.l1


def lemma35_constants(C1: float, C2: float, ellipticity_alpha: float) -> tuple[float, float]:
    """W1 contraction constants from the psi-contraction: c0 = C2/C1, lambda0 = 2 alpha / C2."""
    if not (C1 > 0 and C2 > 0):
        raise InconsistencyError("C1, C2 must be positive")
    if C1 > C2:
        raise InconsistencyError(f"C1 = {C1} exceeds C2 = {C2}")
    return C2 / C1, 2 * ellipticity_alpha / C2


def rate_profile(spec: PhiSpec, ellipticity_alpha: float) -> RateProfile:
    C1, C2, K = corollary34_constants(spec, ellipticity_alpha)
    c0, lam0 = lemma35_constants(C1, C2, ellipticity_alpha)
    return RateProfile(ellipticity_alpha, C1, C2, K, c0, lam0)


def kinetic_condition_check(K1: float, L_b: float, gamma: float, regime: str) -> bool:
    """Friction condition of the kinetic regimes, evaluated without division."""
    if regime == "brownian_kinetic":
        return 2 * (K1 + L_b) ** 2 <= K1 * gamma**2
    if regime == "stable_kinetic":
        return 4 * L_b**2 < 3 * K1 * gamma**2
    raise RateError(f"no kinetic condition for regime {regime!r}")


def expected_sqrt_subordinator(stable_alpha: float) -> float:
    """E sqrt(S_1) = Gamma(1 - 1/alpha) / Gamma(1/2) under the plain Laplace convention."""
    StableParams(stable_alpha)
    return float(gamma_fn(1 - 1 / stable_alpha) / gamma_fn(0.5))


def stable_moments(params: StableParams, n_mc: int = 1_000_000, seed: int = 0, t: float = 1.0,
                   stream_offset: int = 0, chunk: int = 1_000_000) -> dict:
    """Closed form of E sqrt(S_1) plus Monte Carlo estimates of E sqrt(S_t) / t^(1/alpha).

    sqrt(S_1) has tail index alpha < 2, so the plain sample mean has infinite
    variance and its standard error is not meaningful.  The importance-sampled
    estimate draws Kanter's angle as 1 - V^3 (weight 3 V^2), which cancels the
    angular singularity and leaves a finite-variance integrand.
    """
    acc = np.zeros((2, 2))
    for start in range(0, n_mc, chunk):
        k = min(chunk, n_mc - start)
        bank = StreamBank(seed, stream_ids(k, offset=stream_offset + start))
        u = bank.uniforms(4)
        span, norm = t ** (1 / params.beta), t ** (1 / params.stable_alpha)
        plain = np.sqrt(kanter_stable(u[:, 0], u[:, 1], params.beta) * span) / norm
        v = u[:, 2]
        weighted = 3 * v * v * np.sqrt(kanter_stable(1 - v ** 3, u[:, 3], params.beta) * span) / norm
        for i, x in enumerate((plain, weighted)):
            acc[i] += float(x.sum()), float(x @ x)
    out = []
    for total, total_sq in acc:
        mean = total / n_mc
        var = (total_sq - n_mc * mean * mean) / (n_mc - 1)
        out.append((float(mean), math.sqrt(max(float(var), 0.0) / n_mc)))
    return {
        "E_sqrt_S1": expected_sqrt_subordinator(params.stable_alpha),
        "mc_mean": out[0][0],
        "mc_stderr": out[0][1],
        "is_mean": out[1][0],
        "is_stderr": out[1][1],
        "n_mc": n_mc,
        "convention": STABLE_CONVENTION,
    }


# ---------------------------------------------------------------------------
# thresholds


@dataclass
class ThresholdReport:
    delta1: float
    delta2: float
    delta0: float
    t_star1: float
    t_star2: float
    regime: str
    c0: float
    lambda0: float
    empirical: bool = False
    convention: str | None = None
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _golden(f, a: float, b: float, tol: float) -> tuple[float, float]:
    invphi = (math.sqrt(5) - 1) / 2
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol * max(1.0, abs(a)):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    x = (a + b) / 2
    return x, f(x)


def _minimize(f, lo: float, hi: float, resolution: int) -> tuple[float, float]:
    """Global-ish minimum of f on (lo, hi]: dense scan then golden refinement."""
    n = 2000 * resolution
    # geometric offsets resolve the blow-up at the left end
    x = lo + (hi - lo) * np.geomspace(1e-9, 1.0, n)
    with np.errstate(all="ignore"):
        vals = np.array([f(t) for t in x])
    vals = np.where(np.isfinite(vals), vals, np.inf)
    i = int(np.argmin(vals))
    if not np.isfinite(vals[i]):
        return float("nan"), float("inf")
    a = x[max(i - 1, 0)] if i > 0 else lo
    b = x[min(i + 1, n - 1)]
    t, v = _golden(lambda t: f(t) if np.isfinite(f(t)) else np.inf, a, b, 1e-13 / resolution)
    if v > vals[i]:
        t, v = float(x[i]), float(vals[i])
    return float(t), float(v)


class _Regime:
    """Closed forms G(t)/sqrt(kappa) and H(t; kappa) for one regime."""

    def __init__(self, regime, c0, lambda0, K=None, L_b=None, K1=None, stable_alpha=None,
                 E_sqrt_S1=None):
        self.regime, self.c0, self.lam0 = regime, c0, lambda0
        if regime == "brownian_first_order":
            self.rate = _need(K, "K")
        elif regime == "brownian_kinetic":
            self.rate = _need(L_b, "L_b") + 2.0
        elif regime in ("stable_first_order", "stable_kinetic"):
            self.rate = _need(K1, "K1") if regime == "stable_first_order" else _need(L_b, "L_b") + 2.0
            alpha = _need(stable_alpha, "stable_alpha")
            self.inv_alpha = 1.0 / alpha
            self.esq = expected_sqrt_subordinator(alpha) if E_sqrt_S1 is None else E_sqrt_S1
        else:
            raise RateError(f"unknown regime {regime!r}")

    def g(self, t):
        """G(t) / sqrt(kappa)."""
        k = self.rate
        if self.regime == "brownian_first_order":
            return math.sqrt(math.expm1(2 * k * t) / k)
        if self.regime == "brownian_kinetic":
            return math.sqrt(2 * math.expm1(k * t) / k)
        return math.exp(k * t / 2) * (math.sqrt(-math.expm1(-k * t) / k) + t**self.inv_alpha * self.esq)

    def h2(self, t):
        k = self.rate
        return math.sqrt(2) * math.exp(k * t / 2) * (math.sqrt(-math.expm1(-k * t) / k)
                                                     + t**self.inv_alpha * self.esq)

    def H(self, t, kappa):
        k, c0, lam0 = self.rate, self.c0, self.lam0
        if self.regime == "brownian_first_order":
            a = 4 * kappa + 2 * k
            integral = math.exp(a * t) * -math.expm1(-(a + 2 * lam0) * t) / (a + 2 * lam0)
            return c0 * math.sqrt(4 * kappa * integral)
        if self.regime == "brownian_kinetic":
            a = k + 4 * kappa
            return 2 * c0 * math.sqrt(kappa) * math.sqrt(math.expm1(a * t) / a)
        h1 = math.sqrt(2 * c0) * math.exp(k * t / 2) * (
            math.sqrt(-math.expm1(-(k + 2 * lam0) * t) / k) + t**self.inv_alpha * self.esq)
        denom = 1 - math.sqrt(kappa) * self.h2(t)
        return math.sqrt(kappa) * h1 / denom if denom > 0 else math.inf


def _need(v, name):
    if v is None or not v > 0:
        raise RateError(f"parameter {name} must be given and positive")
    return float(v)


def stable_G(t, kappa: float, K1: float, stable_alpha: float):
    """G(t) = sqrt(kappa) e^{K1 t/2} (sqrt((1 - e^{-K1 t})/K1) + t^{1/alpha} E sqrt(S_1))."""
    reg = _Regime("stable_first_order", 1.0, 1.0, K1=K1, stable_alpha=stable_alpha)
    return math.sqrt(kappa) * np.vectorize(reg.g, otypes=[float])(t)


def _objective_min(reg, f, t_lo, t_cap, resolution, kappa=None):
    hi = t_cap
    if kappa is not None and reg.regime.startswith("stable"):
        # side constraint sqrt(kappa) h2(t) < 1; h2 is increasing
        if math.sqrt(kappa) * reg.h2(t_lo) >= 1:
            return float("nan"), float("inf")
        if math.sqrt(kappa) * reg.h2(hi) >= 1:
            from scipy.optimize import brentq
            hi = brentq(lambda t: math.sqrt(kappa) * reg.h2(t) - 1, t_lo, hi, xtol=1e-15, rtol=1e-15)
    if hi <= t_lo:
        return float("nan"), float("inf")
    return _minimize(f, t_lo, hi, resolution)


def _delta2_inf(reg, kappa, t_lo, t_cap, resolution):
    c0, lambda0 = reg.c0, reg.lam0

    def f(t):
        try:
            return reg.H(t, kappa) + c0 * math.exp(-lambda0 * t)
        except OverflowError:
            return math.inf

    return _objective_min(reg, f, t_lo, t_cap, resolution, kappa=kappa)


def delta2_objective(regime: str, kappa: float, *, c0: float, lambda0: float,
                     K: float | None = None, L_b: float | None = None, K1: float | None = None,
                     stable_alpha: float | None = None, E_sqrt_S1: float | None = None,
                     resolution: int = 1, t_cap: float | None = None) -> float:
    """inf over the search interval of H(t; kappa) + c0 exp(-lambda0 t).

    delta2 is the largest kappa for which this stays below 1.
    """
    reg = _Regime(regime, c0, lambda0, K=K, L_b=L_b, K1=K1, stable_alpha=stable_alpha,
                  E_sqrt_S1=E_sqrt_S1)
    t_lo = math.log(c0) / lambda0
    if t_cap is None:
        t_cap = max(10 * t_lo, 50 / lambda0)
    return _delta2_inf(reg, kappa, t_lo, t_cap, resolution)[1]


def threshold_scan(regime: str, *, c0: float, lambda0: float, K: float | None = None,
                   L_b: float | None = None, K1: float | None = None,
                   stable_alpha: float | None = None, E_sqrt_S1: float | None = None,
                   resolution: int = 1, t_cap: float | None = None,
                   empirical: bool | None = None) -> ThresholdReport:
    """Smallness thresholds delta1, delta2 and delta0 = min of the two.

    Drift constants by regime: ``K`` (brownian_first_order), ``L_b`` (both
    kinetic regimes), ``K1`` (stable_first_order).  Stable regimes also need
    ``stable_alpha``.  ``resolution`` scales grid size and tolerances.
    """
    if c0 < 1 or not lambda0 > 0:
        raise RateError("need c0 >= 1 and lambda0 > 0")
    reg = _Regime(regime, c0, lambda0, K=K, L_b=L_b, K1=K1, stable_alpha=stable_alpha,
                  E_sqrt_S1=E_sqrt_S1)
    t_lo = math.log(c0) / lambda0
    if t_cap is None:
        t_cap = max(10 * t_lo, 50 / lambda0)
    if t_cap <= t_lo:
        raise InfeasibleError(f"empty search interval ({t_lo}, {t_cap}]")
    notes = []

    def ratio(t):
        denom = 1 - c0 * math.exp(-lambda0 * t)
        if denom <= 0:
            return math.inf
        try:
            return reg.g(t) / denom
        except OverflowError:
            return math.inf

    t1, v1 = _objective_min(reg, ratio, t_lo, t_cap, resolution)
    if not np.isfinite(v1):
        raise InfeasibleError("c0 exp(-lambda0 t) >= 1 on the whole search interval")
    delta1 = v1**-2
    if t1 >= t_cap * (1 - 1e-9):
        notes.append("delta1 minimizer at the search cap")

    def excess(kappa):
        t, v = _delta2_inf(reg, kappa, t_lo, t_cap, resolution)
        return v - 1.0, t

    lo, hi = 0.0, 10 * delta1
    for _ in range(60):
        if excess(hi)[0] >= 0:
            break
        lo, hi = hi, hi * 10
    else:
        raise InfeasibleError("could not bracket delta2")
    if excess(hi * 1e-12)[0] >= 0:
        raise InfeasibleError("delta2 bracket is degenerate")
    tol = 1e-12 / resolution
    while hi - lo > tol * hi:
        mid = 0.5 * (lo + hi)
        if excess(mid)[0] < 0:
            lo = mid
        else:
            hi = mid
    delta2 = lo
    t2 = excess(delta2)[1]
    if t2 >= t_cap * (1 - 1e-9):
        notes.append("delta2 minimizer at the search cap")
    for n in notes:
        warnings.warn(n, stacklevel=2)
    if empirical is None:
        empirical = regime != "brownian_first_order"
    return ThresholdReport(
        delta1=delta1, delta2=delta2, delta0=min(delta1, delta2), t_star1=t1, t_star2=t2,
        regime=regime, c0=c0, lambda0=lambda0, empirical=empirical,
        convention=STABLE_CONVENTION if regime.startswith("stable") else None, warnings=notes)
