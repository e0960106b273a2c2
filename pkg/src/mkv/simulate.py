"""Euler-Maruyama particle systems, frozen-measure flows and couplings.

Particle ``i`` draws every random number from stream ``i`` of a counter-based
bank, so trajectories do not depend on how rows are split across worker
threads.  A step consumes, per particle: ``2 d`` normals for the elliptic
split (B1 then B2), ``d`` normals for kinetic Brownian noise, and one
subordinator block followed by ``d`` normals for stable noise.
"""

from __future__ import annotations

import math
from contextlib import closing
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import __version__
from .measures import EmpiricalMeasure, ShapeError, optimal_assignment, sliced_w1, w1
from .models import ModelSpec
from .noise import StreamBank, reflect, stream_ids


class SimulationError(RuntimeError):
    pass


class ConfigurationError(ValueError):
    pass


class UnsupportedModelError(ValueError):
    pass


class DivergenceError(SimulationError):
    def __init__(self, t: float, msg: str | None = None):
        super().__init__(msg or f"particle system became non-finite at t = {t:g}")
        self.t = t


class NonStationaryError(SimulationError):
    pass


class DivergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SimConfig:
    h: float = 1e-3
    T: float = 1.0
    N: int = 1000
    seed: int = 0
    couple_threshold: float | None = None
    burn_in: float = 0.0
    window: float = 1.0
    tol_stationary: float = 0.05
    record_every: float | None = None
    n_threads: int = 1
    merge_on_crossing: bool = True

    def __post_init__(self):
        if not self.h > 0 or not self.T > 0:
            raise ConfigurationError("h and T must be positive")
        if self.h > self.T:
            raise ConfigurationError(f"step h = {self.h} exceeds horizon T = {self.T}")
        if int(self.N) < 1:
            raise ConfigurationError("N must be a positive integer")
        if self.couple_threshold is not None and self.couple_threshold < math.sqrt(self.h) * 1e-3:
            raise ConfigurationError("couple_threshold must be at least 1e-3 sqrt(h)")
        if self.burn_in < 0 or not self.window > 0 or not self.tol_stationary > 0:
            raise ConfigurationError("burn_in >= 0, window > 0 and tol_stationary > 0 required")
        if self.n_threads < 1:
            raise ConfigurationError("n_threads must be >= 1")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.h))

    @property
    def record_stride(self) -> int:
        every = self.record_every if self.record_every is not None else self.T / 100.0
        return max(1, int(round(every / self.h)))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunResult:
    times: np.ndarray
    series: dict
    stderr: dict
    snapshots: dict
    final: np.ndarray
    counter: int
    t_end: float
    manifest: dict
    diverged: bool = False
    blowup_time: float | None = None
    final_y: np.ndarray | None = None
    tau: np.ndarray | None = None

    def final_measure(self) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.final)

    def value_at(self, name: str, t: float) -> tuple[float, float]:
        """Recorded value and standard error at the record time closest to t."""
        i = int(np.argmin(np.abs(self.times - t)))
        se = self.stderr.get(name)
        return float(self.series[name][i]), float(se[i]) if se is not None else float("nan")


# ---------------------------------------------------------------- stepping

class _Stepper:
    """Draws one step of increments and applies the Euler-Maruyama update."""

    def __init__(self, model: ModelSpec, h: float):
        self.model = model
        self.h = h
        self.sqh = math.sqrt(h)
        self.d = model.dim
        self.sqrt_alpha = math.sqrt(model.ellipticity_alpha or 0.0)

    def draw(self, bank: StreamBank) -> dict:
        m, d = self.model, self.d
        if m.is_stable:
            dS = bank.positive_stable(m.noise, self.h)
            z = bank.normals(d)
            return {"dS": dS, "dW": np.sqrt(dS)[:, None] * z}
        if m.kind == "kinetic":
            return {"dB": self.sqh * bank.normals(d)}
        z = bank.normals(2 * d)
        return {"dB1": self.sqh * z[:, :d], "dB2": self.sqh * z[:, d:2 * d]}

    def diffusion_term(self, x: np.ndarray, m: np.ndarray, inc: dict, dB1=None) -> np.ndarray:
        model = self.model
        if model.is_stable:
            if model.kind == "kinetic":
                return float(model.sigma(m)) * inc["dW"]
            return inc["dW"] @ model.sigma_matrix(m).T
        if model.kind == "kinetic":
            return float(model.sigma(m)) * inc["dB"]
        out = self.sqrt_alpha * (inc["dB1"] if dB1 is None else dB1)
        if model.sigma_hat is not None:
            out = out + np.einsum("nij,nj->ni", model.sigma_hat(x, m), inc["dB2"])
        return out

    def apply(self, x: np.ndarray, m: np.ndarray, inc: dict) -> np.ndarray:
        model, h, d = self.model, self.h, self.d
        if model.kind == "kinetic":
            pos, vel = x[:, :d], x[:, d:]
            acc = -model.gamma * vel + model.drift_at(pos, m)
            return np.hstack([pos + vel * h, vel + acc * h + self.diffusion_term(pos, m, inc)])
        return x + model.drift_at(x, m) * h + self.diffusion_term(x, m, inc)


class _Engine:
    """Runs steps over row chunks; chunking never changes the result."""

    def __init__(self, stepper: _Stepper, bank: StreamBank, n_threads: int):
        self.stepper = stepper
        self.bank = bank
        n = len(bank)
        k = min(n_threads, n)
        bounds = np.linspace(0, n, k + 1).astype(int)
        self.slices = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]
        self.pool = ThreadPoolExecutor(k) if k > 1 else None

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()

    def step(self, x: np.ndarray, m: np.ndarray) -> np.ndarray:
        if self.pool is None:
            return self.stepper.apply(x, m, self.stepper.draw(self.bank))
        out = np.empty_like(x)
        subs = [self.bank.subset(sl) for sl in self.slices]

        def work(j):
            sl = self.slices[j]
            out[sl] = self.stepper.apply(x[sl], m, self.stepper.draw(subs[j]))

        list(self.pool.map(work, range(len(self.slices))))
        self.bank.counter = subs[0].counter
        return out


def _bank(config: SimConfig, n: int, counter: int = 0) -> StreamBank:
    return StreamBank(config.seed, stream_ids(n), counter)


def _state(model: ModelSpec, eta) -> np.ndarray:
    pts = eta.points if isinstance(eta, EmpiricalMeasure) else np.atleast_2d(np.asarray(eta, float))
    if pts.shape[1] != model.state_dim:
        raise ShapeError(f"initial cloud has dimension {pts.shape[1]}, model expects {model.state_dim}")
    return np.array(pts, dtype=float)


def em_step(model: ModelSpec, x, mu, h: float, stream) -> np.ndarray:
    """One explicit Euler-Maruyama step for a state (or batch of states).

    ``mu`` is the law argument (a cloud or a precomputed statistics vector);
    ``stream`` is an RngStream (single state) or a StreamBank with one
    stream per row.
    """
    single = np.ndim(x) == 1
    xs = _state(model, x)
    m = model.stats(mu) if isinstance(mu, EmpiricalMeasure) else np.asarray(mu, dtype=float)
    bank = stream if isinstance(stream, StreamBank) else StreamBank(stream.seed, [stream.stream_id],
                                                                    stream.counter)
    if len(bank) != len(xs):
        raise ShapeError(f"{len(bank)} streams for {len(xs)} states")
    stepper = _Stepper(model, h)
    out = stepper.apply(xs, m, stepper.draw(bank))
    if not isinstance(stream, StreamBank):
        stream.counter = bank.counter
    if not np.all(np.isfinite(out)):
        raise DivergenceError(float("nan"))
    return out[0] if single else out


def _manifest(model: ModelSpec, config: SimConfig, kind: str, **extra) -> dict:
    return {"run": kind, "model": model.manifest(), "config": config.to_dict(),
            "seed": config.seed, "code_version": __version__, **extra}


def _positions(model, x):
    return x[:, :model.dim]


def _run(model: ModelSpec, eta0, config: SimConfig, frozen_stats, kind: str,
         start_time: float, counter: int, snapshot_times, raise_on_divergence: bool,
         observer: Callable | None = None, extra_manifest=None) -> RunResult:
    x = _state(model, eta0)
    if x.shape[0] != config.N:
        raise ShapeError(f"initial cloud has {x.shape[0]} particles, config.N = {config.N}")
    stepper = _Stepper(model, config.h)
    bank = _bank(config, config.N, counter)
    engine = _Engine(stepper, bank, config.n_threads)
    stride = config.record_stride
    step0 = int(round(start_time / config.h))
    snap_steps = {int(round(t / config.h)): t for t in (snapshot_times or ())}
    times, rec, snaps = [], {"mean_abs": [], "mean_abs_se": []}, {}
    stat_rec: list[np.ndarray] = []

    def record(i, x, m):
        times.append((step0 + i) * config.h)
        a = np.linalg.norm(_positions(model, x), axis=1)
        rec["mean_abs"].append(a.mean())
        rec["mean_abs_se"].append(a.std(ddof=1) / math.sqrt(len(a)) if len(a) > 1 else 0.0)
        stat_rec.append(m)

    diverged, blowup = False, None
    n = config.n_steps
    # overflow on the way to a blow-up is caught by the finiteness check below
    with np.errstate(over="ignore", invalid="ignore"), closing(engine):
        for i in range(n + 1):
            m = frozen_stats if frozen_stats is not None else model.stats(x)
            if (step0 + i) % stride == 0 or i == n:
                record(i, x, m)
            if step0 + i in snap_steps:
                snaps[snap_steps[step0 + i]] = EmpiricalMeasure(x)
            if i == n:
                break
            x = engine.step(x, m)
            if not np.all(np.isfinite(x)):
                diverged, blowup = True, (step0 + i + 1) * config.h
                if raise_on_divergence:
                    raise DivergenceError(blowup)
                break
            if observer is not None:
                observer((step0 + i + 1) * config.h, x)
    series = {"mean_abs": np.array(rec["mean_abs"])}
    stderr = {"mean_abs": np.array(rec["mean_abs_se"])}
    if stat_rec and len(stat_rec[0]):
        st = np.array(stat_rec)
        for j in range(st.shape[1]):
            series[f"stat{j}"] = st[:, j]
    return RunResult(np.array(times), series, stderr, snaps, x, bank.counter,
                     (step0 + (i if not diverged else i + 1)) * config.h,
                     _manifest(model, config, kind, start_time=start_time, counter0=counter,
                               **(extra_manifest or {})),
                     diverged=diverged, blowup_time=blowup)


def run_mckean_vlasov(model: ModelSpec, eta0, config: SimConfig, *, start_time: float = 0.0,
                      counter: int = 0, snapshot_times=(), raise_on_divergence: bool = False,
                      observer=None) -> RunResult:
    """Interacting particle system; the law argument is the current cloud.

    A blow-up is returned as ``diverged=True`` with ``blowup_time`` unless
    ``raise_on_divergence`` is set.  Continuing from ``(final, counter,
    t_end)`` reproduces a single longer run bit for bit.
    """
    return _run(model, eta0, config, None, "mckean_vlasov", start_time, counter,
                snapshot_times, raise_on_divergence, observer)


def run_frozen(model: ModelSpec, mu, eta0, config: SimConfig, *, start_time: float = 0.0,
               counter: int = 0, snapshot_times=(), raise_on_divergence: bool = False,
               observer=None) -> RunResult:
    """Decoupled flow with the law argument held at mu for the whole run."""
    m = model.stats(mu) if isinstance(mu, EmpiricalMeasure) else np.asarray(mu, dtype=float)
    return _run(model, eta0, config, m, "frozen", start_time, counter, snapshot_times,
                raise_on_divergence, observer)


# ---------------------------------------------------------------- couplings

def _mean_se(v: np.ndarray) -> tuple[float, float]:
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0


def reflection_coupled_pairs(model: ModelSpec, mu_frozen, eta1, eta2, config: SimConfig, *,
                             psi: Callable | None = None, pair: str = "optimal") -> RunResult:
    """Reflection coupling of two copies of the frozen flow.

    Pairs are matched by the W1-optimal assignment (``pair="identity"``
    keeps the given order).  X uses (dB1, dB2); an uncoupled Y uses the
    B1 increment mirrored across u = (X - Y)/|X - Y| and the same dB2.  A
    pair merges once its gap drops below the threshold or, with
    ``merge_on_crossing``, once the step carries Y past X along u.
    """
    if not model.has_elliptic_split or not model.ellipticity_alpha:
        raise UnsupportedModelError("reflection coupling needs a first-order Brownian model "
                                    "with a positive ellipticity constant")
    X = _state(model, eta1)
    Y = _state(model, eta2)
    if len(X) != config.N or len(Y) != config.N:
        raise ShapeError("both clouds must have config.N particles")
    if pair == "optimal":
        Y = Y[optimal_assignment(EmpiricalMeasure(X), EmpiricalMeasure(Y))]
    m = model.stats(mu_frozen) if isinstance(mu_frozen, EmpiricalMeasure) else np.asarray(mu_frozen, float)
    h, alpha = config.h, model.ellipticity_alpha
    thr = config.couple_threshold if config.couple_threshold is not None else 0.5 * math.sqrt(alpha * h)
    stepper = _Stepper(model, h)
    bank = _bank(config, config.N)
    tau = np.full(config.N, np.nan)
    gap0 = np.linalg.norm(X - Y, axis=1)
    coupled = gap0 <= thr
    Y[coupled] = X[coupled]
    tau[coupled] = 0.0
    stride = config.record_stride
    times, rec = [], {k: [] for k in ("mean_dist", "mean_dist_sq", "mean_psi", "coupled_frac")}
    se = {k: [] for k in ("mean_dist", "mean_dist_sq", "mean_psi")}

    def record(t):
        r = np.linalg.norm(X - Y, axis=1)
        times.append(t)
        for key, v in (("mean_dist", r), ("mean_dist_sq", r * r)) + \
                ((("mean_psi", psi(r)),) if psi is not None else ()):
            mu_, s_ = _mean_se(np.asarray(v, float))
            rec[key].append(mu_)
            se[key].append(s_)
        rec["coupled_frac"].append(coupled.mean())

    n = config.n_steps
    for i in range(n + 1):
        if i % stride == 0 or i == n:
            record(i * h)
        if i == n:
            break
        inc = stepper.draw(bank)
        Xn = X + model.drift_at(X, m) * h + stepper.diffusion_term(X, m, inc)
        Yn = Xn.copy()
        act = ~coupled
        if act.any():
            diff = X[act] - Y[act]
            u = diff / np.linalg.norm(diff, axis=1, keepdims=True)
            sub = {k: v[act] for k, v in inc.items()}
            ya = Y[act]
            Yn[act] = ya + model.drift_at(ya, m) * h + stepper.diffusion_term(
                ya, m, sub, dB1=reflect(sub["dB1"], u))
            gap = Xn[act] - Yn[act]
            merge = np.linalg.norm(gap, axis=1) <= thr
            if config.merge_on_crossing:
                merge |= np.einsum("ij,ij->i", gap, u) <= 0.0
            idx = np.flatnonzero(act)[merge]
            Yn[idx] = Xn[idx]
            tau[idx] = (i + 1) * h
            coupled[idx] = True
        X, Y = Xn, Yn
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise DivergenceError((i + 1) * h)
    series = {k: np.array(v) for k, v in rec.items() if v}
    stderr = {k: np.array(v) for k, v in se.items() if v}
    return RunResult(np.array(times), series, stderr, {}, X, bank.counter, n * h,
                     _manifest(model, config, "reflection_coupling", threshold=thr),
                     final_y=Y, tau=tau)


def synchronous_coupled_runs(model_a: ModelSpec, model_b: ModelSpec, eta0, config: SimConfig, *,
                             mu_a=None, mu_b=None, eta0_b=None,
                             observer: Callable | None = None) -> RunResult:
    """Two systems driven by identical increments.

    With ``mu_a``/``mu_b`` given the corresponding system is frozen at that
    law, otherwise it interacts through its own cloud.  ``eta0_b`` defaults
    to the shared start ``eta0``.  ``observer(t, xa, xb, increments)`` is
    called after every step.
    """
    if model_a.noise_kind != model_b.noise_kind or model_a.noise != model_b.noise:
        raise ConfigurationError("synchronous coupling needs identical noise kinds")
    if model_a.state_dim != model_b.state_dim or model_a.kind != model_b.kind:
        raise ConfigurationError("synchronous coupling needs matching state dimensions")
    XA = _state(model_a, eta0)
    XB = _state(model_b, eta0 if eta0_b is None else eta0_b)
    if len(XA) != config.N or len(XB) != config.N:
        raise ShapeError("initial clouds must have config.N particles")

    def frozen(model, mu):
        if mu is None:
            return None
        return model.stats(mu) if isinstance(mu, EmpiricalMeasure) else np.asarray(mu, float)

    ma, mb = frozen(model_a, mu_a), frozen(model_b, mu_b)
    sa, sb = _Stepper(model_a, config.h), _Stepper(model_b, config.h)
    bank = _bank(config, config.N)
    stride = config.record_stride
    times, rec = [], {"mean_dist": [], "mean_dist_sq": []}
    se = {"mean_dist": [], "mean_dist_sq": []}

    def record(t):
        r = np.linalg.norm(_positions(model_a, XA - XB), axis=1)
        times.append(t)
        for key, v in (("mean_dist", r), ("mean_dist_sq", r * r)):
            a, s = _mean_se(v)
            rec[key].append(a)
            se[key].append(s)

    n = config.n_steps
    for i in range(n + 1):
        if i % stride == 0 or i == n:
            record(i * config.h)
        if i == n:
            break
        inc = sa.draw(bank)
        XA = sa.apply(XA, ma if ma is not None else model_a.stats(XA), inc)
        XB = sb.apply(XB, mb if mb is not None else model_b.stats(XB), inc)
        if not (np.all(np.isfinite(XA)) and np.all(np.isfinite(XB))):
            raise DivergenceError((i + 1) * config.h)
        if observer is not None:
            observer((i + 1) * config.h, XA, XB, inc)
    return RunResult(np.array(times), {k: np.array(v) for k, v in rec.items()},
                     {k: np.array(v) for k, v in se.items()}, {}, XA, bank.counter,
                     n * config.h, _manifest(model_a, config, "synchronous_coupling",
                                            model_b=model_b.manifest()),
                     final_y=XB)


# ---------------------------------------------------------------- fixed point

def _w1_cloud(a: EmpiricalMeasure, b: EmpiricalMeasure) -> float:
    if a.dim == 1:
        return w1(a, b)
    try:
        return w1(a, b)
    except Exception:
        warnings.warn("cloud too large for exact assignment; using sliced W1", RuntimeWarning)
        return sliced_w1(a, b)


def stationarity_gap(snapshots: dict, t_end: float, window: float) -> float:
    """W1 between the pooled clouds of the last two windows of length ``window``."""
    early = [s.points for t, s in snapshots.items() if t_end - 2 * window <= t < t_end - window]
    late = [s.points for t, s in snapshots.items() if t_end - window <= t <= t_end]
    k = min(len(early), len(late))
    if k == 0:
        raise NonStationaryError("no snapshots inside the stationarity windows")
    a = EmpiricalMeasure(np.vstack(early[-k:]))
    b = EmpiricalMeasure(np.vstack(late[-k:]))
    return _w1_cloud(a, b)


def gamma_map(model: ModelSpec, mu, eta_ref, config: SimConfig, *, check: bool = True,
              n_window_snapshots: int = 5) -> tuple[EmpiricalMeasure, float]:
    """Particle surrogate of the invariant law of the flow frozen at mu.

    The frozen flow starts from ``eta_ref`` with the config seed every time,
    so two calls differ only through mu.  Returns the terminal cloud and the
    stationarity gap of the last two windows.
    """
    T = config.T
    if config.burn_in + 2 * config.window > T + 1e-12:
        raise ConfigurationError("T must cover burn_in plus two stationarity windows")
    snap = np.concatenate([np.linspace(T - 2 * config.window, T - config.window,
                                       n_window_snapshots, endpoint=False),
                           np.linspace(T - config.window, T, n_window_snapshots)])
    res = run_frozen(model, mu, eta_ref, config, snapshot_times=tuple(snap),
                     raise_on_divergence=True)
    gap = stationarity_gap(res.snapshots, T, config.window) if len(snap) else 0.0
    if check and gap > config.tol_stationary:
        raise NonStationaryError(f"frozen flow not stationary by T = {T}: window gap {gap:.3g} "
                                 f"> {config.tol_stationary:g}")
    return EmpiricalMeasure(res.final), gap


def gamma_fixed_point(model: ModelSpec, mu0, config: SimConfig, max_iter: int = 10, *,
                      tol: float | None = None, eta_ref=None, check_stationarity: bool = True):
    """Iterate mu <- Gamma(mu) until the W1 gap falls below tol.

    Uses common random numbers: every application of the map starts the
    frozen flow from the same cloud with the same seed.  Returns the last
    iterate and the list of gaps W1(mu_{k+1}, mu_k).
    """
    tol = config.tol_stationary if tol is None else tol
    mu = mu0 if isinstance(mu0, EmpiricalMeasure) else EmpiricalMeasure(mu0)
    ref = mu if eta_ref is None else eta_ref
    gaps: list[float] = []
    rises = 0
    for _ in range(max_iter):
        nxt, _gap = gamma_map(model, mu, ref, config, check=check_stationarity)
        g = _w1_cloud(nxt, mu)
        if gaps and g > gaps[-1]:
            rises += 1
            if rises >= 3:
                warnings.warn("fixed-point gaps grew for 3 consecutive iterations; "
                              "the interaction may be past its contraction regime",
                              DivergenceWarning)
        else:
            rises = 0
        gaps.append(g)
        mu = nxt
        if g < tol:
            break
    return mu, gaps
