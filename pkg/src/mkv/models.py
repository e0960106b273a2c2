"""SDE model descriptions and the built-in catalog.

A model's drift and diffusion see the law only through a vector of
registered statistics ``m = (1/N) sum_i g(x_i)``, where ``g`` is a
Lipschitz feature map.  Drifts take ``(x, m)`` with ``x`` an (N, dim) array
of positions; the statistics are computed from the law's full state (which
is ``2 * dim`` wide for kinetic models).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .measures import EmpiricalMeasure, ShapeError
from .noise import StableParams
from .rates import PhiSpec


class ModelError(ValueError):
    pass


class ModelEvaluationError(ModelError):
    pass


class EllipticityError(ModelError):
    pass


class DegeneracyError(ModelError):
    pass


class NonConvergenceError(ModelError):
    pass


class UnknownModelError(ModelError, KeyError):
    pass


@dataclass(frozen=True)
class AssumptionParams:
    """Structural constants a model is built to satisfy.

    ``K_onesided`` is the one-sided constant K in
    ``2<b(x,m1) - b(y,m2), x - y> <= K|x-y|^2 + kappa W1^2``; it is only
    needed by the Lipschitz-regularization and time-change checks.
    """

    kappa: float = 0.0
    K0: float = 0.0
    K0_tilde: float = 0.0
    L_b: float = 0.0
    K1: float = 1.0
    K2: float = 1.0
    R: float = 1.0
    delta_bound: float = 1.0
    K_onesided: float | None = None

    def __post_init__(self):
        if not self.delta_bound >= 1.0:
            raise ModelError(f"delta_bound must be >= 1, got {self.delta_bound}")
        for name in ("kappa", "K0", "K0_tilde", "L_b", "K1", "K2", "R"):
            if not getattr(self, name) >= 0.0:
                raise ModelError(f"{name} must be nonnegative, got {getattr(self, name)}")


def _no_stats(points):
    return np.zeros((points.shape[0], 0))


@dataclass(frozen=True)
class ModelSpec:
    """One SDE family.

    kind is "first_order" or "kinetic"; noise is "brownian" or a
    StableParams.  First-order Brownian models carry the elliptic split
    (``ellipticity_alpha``, ``sigma_hat``); the other regimes carry a
    constant-in-x ``sigma(m)`` returning a scalar or a (dim, dim) matrix.
    """

    name: str
    dim: int
    drift: Callable[[np.ndarray, np.ndarray], np.ndarray]
    kind: str = "first_order"
    noise: object = "brownian"
    features: Callable[[np.ndarray], np.ndarray] = _no_stats
    ellipticity_alpha: float | None = None
    sigma_hat: Callable | None = None
    sigma: Callable | None = None
    gamma: float | None = None
    params: AssumptionParams = field(default_factory=AssumptionParams)
    phi: PhiSpec | None = None
    settings: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dim < 1:
            raise ModelError("dim must be a positive integer")
        if self.kind not in ("first_order", "kinetic"):
            raise ModelError(f"unknown model kind {self.kind!r}")
        if not (self.noise == "brownian" or isinstance(self.noise, StableParams)):
            raise ModelError(f"noise must be 'brownian' or StableParams, got {self.noise!r}")
        if self.kind == "kinetic":
            if self.gamma is None or not self.gamma > 0:
                raise ModelError("kinetic models need a positive friction gamma")
            if self.sigma is None:
                raise ModelError("kinetic models need a scalar diffusion sigma(m)")
        elif self.is_stable:
            if self.sigma is None:
                raise ModelError("first-order stable models need sigma(m)")
        else:
            if self.ellipticity_alpha is None or self.ellipticity_alpha < 0:
                raise ModelError("first-order Brownian models need ellipticity_alpha >= 0")

    @property
    def is_stable(self) -> bool:
        return isinstance(self.noise, StableParams)

    @property
    def noise_kind(self) -> str:
        return "stable" if self.is_stable else "brownian"

    @property
    def state_dim(self) -> int:
        return 2 * self.dim if self.kind == "kinetic" else self.dim

    @property
    def has_elliptic_split(self) -> bool:
        return self.kind == "first_order" and not self.is_stable

    def stats(self, law) -> np.ndarray:
        """Registered statistics of a law given as a cloud or (N, state_dim) array."""
        pts = law.points if isinstance(law, EmpiricalMeasure) else np.asarray(law, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(-1, self.state_dim)
        if pts.shape[1] != self.state_dim:
            raise ShapeError(f"law has dimension {pts.shape[1]}, model expects {self.state_dim}")
        return np.asarray(self.features(pts), dtype=float).mean(axis=0)

    def drift_at(self, x: np.ndarray, m: np.ndarray) -> np.ndarray:
        return np.asarray(self.drift(x, m), dtype=float)

    def sigma_matrix(self, m: np.ndarray) -> np.ndarray:
        """sigma(m) as a (dim, dim) matrix."""
        s = np.asarray(self.sigma(m), dtype=float)
        return s * np.eye(self.dim) if s.ndim == 0 else s

    def manifest(self) -> dict:
        return {"name": self.name, "dim": self.dim, "kind": self.kind,
                "noise": self.noise if isinstance(self.noise, str)
                else {"stable_alpha": self.noise.stable_alpha,
                      "normalization": self.noise.normalization},
                "gamma": self.gamma, "ellipticity_alpha": self.ellipticity_alpha,
                "settings": dict(self.settings),
                "params": {k: v for k, v in self.params.__dict__.items()}}


def _as_points(x, dim):
    a = np.asarray(x, dtype=float)
    single = a.ndim == 1
    a = np.atleast_2d(a)
    if a.shape[1] != dim:
        raise ShapeError(f"state has dimension {a.shape[1]}, model expects {dim}")
    return a, single


def eval_coefficients(model: ModelSpec, x, mu: EmpiricalMeasure):
    """Drift vector and diffusion coefficient at state x under law mu.

    The diffusion is the full matrix sqrt(alpha I + sigma_hat sigma_hat^T)
    for the elliptic split, sigma(m) otherwise (scalar for kinetic models).
    Kinetic drifts are returned for the full (position, velocity) state.
    """
    if mu.dim != model.state_dim:
        raise ShapeError(f"law has dimension {mu.dim}, model expects {model.state_dim}")
    pts, single = _as_points(x, model.state_dim)
    m = model.stats(mu)
    d = model.dim
    if model.kind == "kinetic":
        pos, vel = pts[:, :d], pts[:, d:]
        drift = np.hstack([vel, -model.gamma * vel + model.drift_at(pos, m)])
        diff = np.asarray(model.sigma(m), dtype=float)
    elif model.is_stable:
        drift = model.drift_at(pts, m)
        diff = model.sigma_matrix(m)
    else:
        drift = model.drift_at(pts, m)
        sh = model.sigma_hat(pts, m) if model.sigma_hat is not None else np.zeros((len(pts), d, d))
        prod = model.ellipticity_alpha * np.eye(d) + np.einsum("nij,nkj->nik", sh, sh)
        diff = np.array([psd_sqrt(p) for p in prod])
        if single:
            diff = diff[0]
    if single:
        drift = drift[0]
    if not (np.all(np.isfinite(drift)) and np.all(np.isfinite(diff))):
        raise ModelEvaluationError(f"non-finite coefficients for model {model.name}")
    return drift, diff


def psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def elliptic_decompose(sigma_product, ellipticity_alpha: float, tol: float = 1e-10) -> np.ndarray:
    """Symmetric PSD root of sigma sigma^T - alpha I."""
    if not ellipticity_alpha > 0:
        raise EllipticityError("ellipticity_alpha must be positive")
    a = np.atleast_2d(np.asarray(sigma_product, dtype=float))
    rest = 0.5 * (a + a.T) - ellipticity_alpha * np.eye(a.shape[0])
    w, v = np.linalg.eigh(rest)
    if w[0] < -tol:
        raise EllipticityError(
            f"sigma sigma^T - alpha I has eigenvalue {w[0]:.3e} < 0; ellipticity violated")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


# ---------------------------------------------------------------- transforms

def kinetic_rescale(model: ModelSpec, mu) -> ModelSpec:
    """Unit-diffusion form of a kinetic model with sigma frozen at sigma(mu).

    The new drift is b(s x, m) / s with s = sigma(mu); the dissipativity
    radius becomes sqrt(delta) R.
    """
    if model.kind != "kinetic":
        raise ModelError("kinetic_rescale needs a kinetic model")
    s = float(np.asarray(model.sigma(model.stats(mu))))
    if s == 0.0:
        raise DegeneracyError("sigma(mu) = 0 contradicts the non-degeneracy bound")
    if s == 1.0:
        return model
    drift = model.drift
    p = model.params
    return replace(
        model,
        name=model.name + "_rescaled",
        drift=lambda x, m: drift(s * x, m) / s,
        sigma=lambda m: 1.0,
        params=replace(p, R=math.sqrt(p.delta_bound) * p.R),
        settings={**model.settings, "rescale": s},
    )


def resolvent(btilde: Callable, x: np.ndarray, m: np.ndarray, m_reg: float,
              tol: float = 1e-10, max_iter: int = 10_000) -> np.ndarray:
    """Solve xbar - btilde(xbar, m) / m_reg = x for every row of x.

    One-dimensional problems use bisection on the monotone residual.  In
    higher dimension a damped fixed-point iteration is used, halving the
    step of any row whose residual grows.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))

    def residual(z):
        return z - btilde(z, m) / m_reg - x

    if x.shape[1] == 1:
        b0 = btilde(x, m) / m_reg
        lo = np.minimum(x, x + b0)
        hi = np.maximum(x, x + b0)
        flo, fhi = residual(lo), residual(hi)
        if np.any(flo > tol * np.maximum(1.0, np.abs(x))) or \
                np.any(fhi < -tol * np.maximum(1.0, np.abs(x))):
            raise NonConvergenceError("resolvent is not bracketed; drift is not one-sided dissipative")
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            fm = residual(mid)
            neg = fm < 0
            lo = np.where(neg, mid, lo)
            hi = np.where(neg, hi, mid)
            if np.all(hi - lo <= 4e-16 * np.maximum(1.0, np.abs(mid))):
                break
        z = 0.5 * (lo + hi)
    else:
        z = x.copy()
        step = np.ones((len(x), 1))
        r = residual(z)
        rn = np.linalg.norm(r, axis=1)
        for _ in range(max_iter):
            if np.all(rn <= tol * np.maximum(1.0, np.linalg.norm(x, axis=1))):
                break
            cand = z - step * r
            rc = residual(cand)
            rcn = np.linalg.norm(rc, axis=1)
            ok = rcn < rn
            z = np.where(ok[:, None], cand, z)
            r = np.where(ok[:, None], rc, r)
            rn = np.where(ok, rcn, rn)
            step = np.where(ok[:, None], np.minimum(1.0, 1.5 * step), 0.5 * step)
    err = np.linalg.norm(residual(z), axis=1)
    if np.any(err > tol * np.maximum(1.0, np.linalg.norm(x, axis=1))):
        raise NonConvergenceError(f"resolvent residual {err.max():.3e} above {tol}")
    return z


def yosida_tilde(model: ModelSpec, m_reg: float, K: float) -> Callable:
    """The regularized shifted drift m (J(x) - x), J the resolvent of b - (K/2) id."""
    if not m_reg >= 1:
        raise ModelError("regularization index m must be >= 1")
    drift = model.drift

    def btilde(x, m):
        return drift(x, m) - 0.5 * K * x

    def reg(x, m):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return m_reg * (resolvent(btilde, x, m, m_reg) - x)

    return reg


def yosida_regularize(model: ModelSpec, m: int, K: float) -> ModelSpec:
    """Model whose drift is the Lipschitz regularization plus (K/2) x."""
    reg = yosida_tilde(model, m, K)
    return replace(model, name=f"{model.name}_yosida{m}",
                   drift=lambda x, stats: reg(x, stats) + 0.5 * K * np.atleast_2d(x),
                   settings={**model.settings, "yosida_m": m, "yosida_K": K})


# ---------------------------------------------------------------- catalog

def _mean_position(dim):
    return lambda pts: pts[:, :dim]


def _clamp(v, delta):
    lo, hi = delta ** -0.5, delta ** 0.5
    return np.clip(v, lo, hi)


def linear_model(dim: int = 1, rate: float = 1.0, sigma: float = math.sqrt(2.0),
                 interaction: float = 0.0, noise="brownian") -> ModelSpec:
    """b(x, mu) = -rate x + interaction * mean(mu), constant diffusion sigma."""
    feats = _mean_position(dim)

    def drift(x, m):
        return -rate * x + interaction * m

    # 2<b(x,m1)-b(y,m2), x-y> <= (-2 rate + eps) r^2 + (interaction^2 / eps) W^2 with eps = rate
    kappa = interaction ** 2 / rate if rate > 0 else (0.0 if interaction == 0 else math.inf)
    K = -rate if interaction else -2.0 * rate
    params = AssumptionParams(kappa=kappa, L_b=abs(rate), K1=max(rate, 1e-12), K2=1.0,
                              R=1.0, delta_bound=max(1.0, sigma ** 2, sigma ** -2) if sigma else 1.0,
                              K_onesided=K)
    settings = dict(rate=rate, sigma=sigma, interaction=interaction)
    if isinstance(noise, StableParams):
        return ModelSpec("linear", dim, drift, noise=noise, features=feats,
                         sigma=lambda m: sigma, params=params, settings=settings)
    return ModelSpec("linear", dim, drift, features=feats, ellipticity_alpha=sigma ** 2,
                     params=params, settings=settings)


def cubic_model(dim: int = 1, interaction: float = 0.0, K: float = 1.0,
                sigma: float = 1.0, noise="brownian") -> ModelSpec:
    """b(x, mu) = -x^3 + interaction * mean(mu).

    One-sided bound holds with constant K > 0 and kappa = interaction^2 / K.
    """
    feats = _mean_position(dim)

    def drift(x, m):
        return -x ** 3 + interaction * m

    kappa = interaction ** 2 / K if interaction else 0.0
    params = AssumptionParams(kappa=kappa, K_onesided=K)
    settings = dict(interaction=interaction, K=K, sigma=sigma)
    if isinstance(noise, StableParams):
        return ModelSpec("cubic", dim, drift, noise=noise, features=feats,
                         sigma=lambda m: sigma, params=params, settings=settings)
    return ModelSpec("cubic", dim, drift, features=feats, ellipticity_alpha=sigma ** 2,
                     params=params, settings=settings)


def corollary34_design(l1: float, l2: float, r0: float, dim: int, kappa: float) -> dict:
    """Coefficients of the partially dissipative catalog model.

    Drift -L x + a tanh(x / w) + c mean(mu); sigma_hat = diag(s0 + s1 cos x_i +
    s2 cos m_i).  With slack e = eps/2 + s1^2 the pairing bound is

        min((a/w - L) r^2, 2 a sqrt(d) r - L r^2) + e r^2 + kappa W^2

    and the constants below make it at most phi(r) r + kappa W^2: the large-r
    branch sits below the linear piece of phi at r0 and 2 r0 (it is convex,
    so it stays below in between) and the small-r branch has slope l1 / 2.
    """
    lmin = min(l1, l2)
    eps = 0.2 * lmin
    s1 = math.sqrt(0.1 * lmin)
    slack = 0.5 * eps + s1 ** 2
    a = 0.5 * l2 * r0 / math.sqrt(dim)
    L = 1.6 * l2 + slack
    w = a / (1.6 * l2 + 0.5 * l1)
    c = math.sqrt(kappa * eps)
    s2 = math.sqrt(0.5 * kappa)
    return dict(L=L, a=a, w=w, c=c, eps=eps, s0=0.5, s1=s1, s2=s2)


def corollary34_model(l1: float = 1.0, l2: float = 1.0, r0: float = 1.0,
                      ellipticity_alpha: float = 1.0, kappa: float = 0.0,
                      dim: int = 1) -> ModelSpec:
    """Partially dissipative elliptic model built to satisfy the phi bound."""
    p = corollary34_design(l1, l2, r0, dim, kappa)
    L, a, w, c = p["L"], p["a"], p["w"], p["c"]
    s0, s1, s2 = p["s0"], p["s1"], p["s2"]
    feats = _mean_position(dim)

    def drift(x, m):
        return -L * x + a * np.tanh(x / w) + c * m

    def sigma_hat(x, m):
        diag = s0 + s1 * np.cos(x) + s2 * np.cos(m)
        out = np.zeros(x.shape + (dim,))
        idx = np.arange(dim)
        out[:, idx, idx] = diag
        return out

    K0 = math.sqrt(2.0) * max(s1, s2)
    params = AssumptionParams(kappa=kappa, K0=K0, K0_tilde=s0 + s1 + s2,
                              L_b=L + a / w + c, R=2.0 * r0, K_onesided=2.0 * (a / w - L) + 1.0)
    return ModelSpec("corollary34", dim, drift, features=feats,
                     ellipticity_alpha=ellipticity_alpha, sigma_hat=sigma_hat, params=params,
                     phi=PhiSpec(l1, l2, r0),
                     settings=dict(l1=l1, l2=l2, r0=r0, kappa=kappa, **p))


def example33_model(epsilon: float = 0.5) -> ModelSpec:
    """dX = (-X + eps E f(X)) dt + eps E f(X) dB with f(x) = |x| + 1.

    Written with the elliptic split alpha = eps^2, sigma_hat = eps sqrt(m^2 - 1),
    so that alpha + sigma_hat^2 = (eps m)^2.
    """
    if not epsilon > 0:
        raise ModelError("epsilon must be positive")

    def feats(pts):
        return np.abs(pts) + 1.0

    def drift(x, m):
        return -x + epsilon * m

    def sigma_hat(x, m):
        v = epsilon * math.sqrt(max(float(m[0]) ** 2 - 1.0, 0.0))
        return np.full((x.shape[0], 1, 1), v)

    return ModelSpec("example33", 1, drift, features=feats, ellipticity_alpha=epsilon ** 2,
                     sigma_hat=sigma_hat, params=AssumptionParams(L_b=1.0, K_onesided=-2.0),
                     settings=dict(epsilon=epsilon))


def _kinetic_design(dim, k, p, delta_bound):
    R = 4.0 * p * math.sqrt(dim) / k if p > 0 else 1.0
    K1 = k - 2.0 * p * math.sqrt(dim) / R
    return R, K1


def kinetic_model(dim: int = 1, confinement: float = 1.0, perturbation: float = 0.5,
                  kappa: float = 0.0, gamma: float | None = None, delta_bound: float = 2.0,
                  noise="brownian") -> ModelSpec:
    """Underdamped model b(x, mu) = -k x + p sin x + sqrt(kappa) tanh(mean position).

    sigma(mu) = clamp(1 + sqrt(kappa/d) tanh(mean of the first position
    coordinate)) into [delta^-1/2, delta^1/2].  Without an explicit gamma
    the friction is set 1% above the smallest value passing the
    contraction condition of the noise kind.
    """
    k, p = confinement, perturbation
    R, K1 = _kinetic_design(dim, k, p, delta_bound)
    L_b = k + p
    if gamma is None:
        if isinstance(noise, StableParams):
            gamma = 1.01 * math.sqrt(4.0 * L_b ** 2 / (3.0 * K1))
        else:
            gamma = 1.01 * math.sqrt(2.0 * (K1 + L_b) ** 2 / K1)
    rk = math.sqrt(kappa)
    rkd = math.sqrt(kappa / dim)

    def feats(pts):
        return pts[:, :dim]

    def drift(x, m):
        return -k * x + p * np.sin(x) + rk * np.tanh(m)

    def sigma(m):
        return float(_clamp(1.0 + rkd * math.tanh(float(m[0])), delta_bound))

    params = AssumptionParams(kappa=kappa, L_b=L_b, K1=K1, K2=1.0, R=R, delta_bound=delta_bound,
                              K_onesided=2.0 * (p - k) + 1.0 if kappa else 2.0 * (p - k))
    name = "kinetic_stable" if isinstance(noise, StableParams) else "kinetic"
    return ModelSpec(name, dim, drift, kind="kinetic", noise=noise, features=feats, sigma=sigma,
                     gamma=gamma, params=params,
                     settings=dict(confinement=k, perturbation=p, kappa=kappa,
                                   delta_bound=delta_bound))


def stable_model(stable_alpha: float = 1.5, dim: int = 1, l1: float = 1.0, l2: float = 1.0,
                 r0: float = 1.0, kappa: float = 0.0, delta_bound: float = 2.0) -> ModelSpec:
    """First-order stable model with the catalog drift and sigma(mu) = clamp(...) I."""
    p = corollary34_design(l1, l2, r0, dim, kappa)
    L, a, w, c = p["L"], p["a"], p["w"], p["c"]
    rkd = math.sqrt(0.5 * kappa / dim)

    def drift(x, m):
        return -L * x + a * np.tanh(x / w) + c * m

    def sigma(m):
        return float(_clamp(1.0 + rkd * math.tanh(float(m[0])), delta_bound))

    # R bounds |x - y|^2 here, so the large-separation branch starts at r = 2 r0
    K1 = 2.0 * (a / w - L) + p["eps"]
    K2 = 2.0 * L - 2.0 * a * math.sqrt(dim) / r0 - p["eps"]
    params = AssumptionParams(kappa=kappa, L_b=L + a / w + c, K1=max(K1, 1e-12), K2=K2,
                              R=4.0 * r0 ** 2, delta_bound=delta_bound, K_onesided=K1)
    return ModelSpec("stable", dim, drift, noise=StableParams(stable_alpha),
                     features=_mean_position(dim), sigma=sigma, params=params,
                     phi=PhiSpec(l1, l2, r0),
                     settings=dict(stable_alpha=stable_alpha, l1=l1, l2=l2, r0=r0, kappa=kappa,
                                   delta_bound=delta_bound))


def kinetic_stable_model(stable_alpha: float = 1.5, **kw) -> ModelSpec:
    return kinetic_model(noise=StableParams(stable_alpha), **kw)


def brownian_model(dim: int = 1, ellipticity_alpha: float = 1.0) -> ModelSpec:
    """Zero drift, diffusion sqrt(alpha) I."""
    return replace(linear_model(dim=dim, rate=0.0, sigma=math.sqrt(ellipticity_alpha)),
                   name="brownian")


def _linear_from_config(noise="brownian", stable_alpha=1.5, **kw):
    if noise == "stable":
        noise = StableParams(stable_alpha)
    return linear_model(noise=noise, **kw)


CATALOG: dict[str, Callable[..., ModelSpec]] = {
    "linear": _linear_from_config,
    "cubic": cubic_model,
    "brownian": brownian_model,
    "corollary34": corollary34_model,
    "example33": example33_model,
    "kinetic": kinetic_model,
    "stable": stable_model,
    "kinetic_stable": kinetic_stable_model,
}


def build_model(name: str, **params) -> ModelSpec:
    try:
        factory = CATALOG[name]
    except KeyError:
        raise UnknownModelError(f"unknown model {name!r}; known: {sorted(CATALOG)}") from None
    try:
        return factory(**params)
    except TypeError as exc:
        raise ModelError(f"bad parameters for model {name!r}: {exc}") from None
