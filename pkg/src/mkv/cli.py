"""Command-line entry point: ``mkv <experiment> --config FILE``.

Config files are TOML (dotted keys or tables) or JSON::

    experiment = "phase"
    seed = 7
    output_dir = "out/phase"
    model.name = "example33"
    model.epsilon = 1.2
    sim.h = 1e-3
    sim.T = 20.0
    sim.N = 10000
    options.mode = "simulate"

Exit status: 0 on pass or completion, 2 on a fail verdict, 3 on a config
or usage error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, analysis, models, rates, simulate, verify
from .measures import EmpiricalMeasure

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

EXPERIMENTS = ("rates", "simulate", "couple", "fixed_point", "phase", "verify")
TOP_KEYS = {"experiment", "seed", "output_dir", "model", "sim", "options"}
SIM_KEYS = {f.name for f in dataclasses.fields(simulate.SimConfig)}
EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 2, 3


class ConfigError(Exception):
    def __init__(self, msg: str, path=None, line: int | None = None):
        self.path, self.line = path, line
        where = f"{path}:{line}: " if path and line else (f"{path}: " if path else "")
        super().__init__(where + msg)


# ---------------------------------------------------------------- config

def _locate(text: str, key: str) -> int | None:
    for i, raw in enumerate(text.splitlines(), 1):
        if key in raw.split("#", 1)[0]:
            return i
    return None


def load_config(path) -> tuple[dict, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", path) from None
    if path.suffix == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{exc.msg} (column {exc.colno})", path, exc.lineno) from None
    else:
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            msg = str(exc)
            line = None
            if "(at line " in msg:
                line = int(msg.split("(at line ", 1)[1].split(",")[0])
                msg = msg.split(" (at line ")[0]
            raise ConfigError(msg, path, line) from None
    if not isinstance(data, dict):
        raise ConfigError("top level must be a table", path, 1)
    return data, text


def resolve(data: dict, text: str = "", path=None, experiment: str | None = None,
            seed: int | None = None, out: str | None = None) -> dict:
    """Validate a parsed config and apply command-line and environment overrides."""
    def fail(msg, key=None):
        raise ConfigError(msg, path, _locate(text, key) if key else None)

    for k in data:
        if k not in TOP_KEYS:
            fail(f"unknown key {k!r}; allowed: {sorted(TOP_KEYS)}", k)
    exp = data.get("experiment")
    if exp is not None:
        exp = str(exp).replace("-", "_")
        if exp not in EXPERIMENTS:
            fail(f"unknown experiment {exp!r}", "experiment")
    if experiment is not None:
        if exp is not None and exp != experiment:
            fail(f"config declares experiment {exp!r} but {experiment!r} was requested",
                 "experiment")
        exp = experiment
    if exp is None:
        fail("no experiment given")
    for section in ("model", "sim", "options"):
        if not isinstance(data.get(section, {}), dict):
            fail(f"{section!r} must be a table", section)
    sim = dict(data.get("sim", {}))
    for k in sim:
        if k not in SIM_KEYS:
            fail(f"unknown sim field {k!r}; allowed: {sorted(SIM_KEYS)}", k)
    if seed is None and os.environ.get("MKV_SEED"):
        try:
            seed = int(os.environ["MKV_SEED"])
        except ValueError:
            fail(f"MKV_SEED must be an integer, got {os.environ['MKV_SEED']!r}")
    if seed is None:
        seed = data.get("seed", sim.get("seed", verify.DEFAULT_SEED))
    if not isinstance(seed, int) or isinstance(seed, bool):
        fail(f"seed must be an integer, got {seed!r}", "seed")
    sim["seed"] = seed
    model = dict(data.get("model", {}))
    if exp not in ("verify", "rates") and "name" not in model:
        fail("model.name is required for this experiment", "model")
    if "name" in model and model["name"] not in models.CATALOG:
        fail(f"unknown model {model['name']!r}; known: {sorted(models.CATALOG)}", "name")
    out_dir = out or data.get("output_dir") or f"mkv_out/{exp}"
    return {"experiment": exp, "seed": seed, "output_dir": str(out_dir), "model": model,
            "sim": sim, "options": dict(data.get("options", {}))}


def _build(cfg: dict):
    model_cfg = dict(cfg["model"])
    name = model_cfg.pop("name")
    try:
        model = models.build_model(name, **model_cfg)
    except models.ModelError as exc:
        raise ConfigError(str(exc)) from None
    return model


def _sim(cfg: dict, **defaults) -> simulate.SimConfig:
    try:
        return simulate.SimConfig(**{**defaults, **cfg["sim"]})
    except (simulate.ConfigurationError, TypeError) as exc:
        raise ConfigError(f"invalid sim settings: {exc}") from None


# ---------------------------------------------------------------- output

class Output:
    """Writes artifacts and remembers every path for the manifest."""

    def __init__(self, root):
        self.root = Path(root)
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"output_dir not writable: {exc.strerror}") from None
        self.files: list[str] = []

    def _path(self, name):
        self.files.append(name)
        return self.root / name

    def json(self, name, obj):
        with self._path(name).open("w") as fh:
            json.dump(_plain(obj), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def series(self, name, t, values):
        with self._path(name).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "value"])
            for a, b in zip(t, values):
                w.writerow([repr(float(a)), repr(float(b))])

    def cloud(self, name, points):
        EmpiricalMeasure(points).to_csv(self._path(name))

    def run(self, prefix, run: simulate.RunResult):
        for key, vals in run.series.items():
            self.series(f"{prefix}{key}.csv", run.times, vals)
            if key in run.stderr:
                self.series(f"{prefix}{key}_stderr.csv", run.times, run.stderr[key])
        if not run.diverged:
            self.cloud(f"{prefix}final.csv", run.final)
        for t, snap in sorted(run.snapshots.items()):
            self.cloud(f"{prefix}snapshot_t{t:g}.csv", snap.points)

    def manifest(self, cfg, model=None, extra=None):
        self.files.append("manifest.json")
        body = {"experiment": cfg["experiment"], "config": cfg, "seed": cfg["seed"],
                "code_version": __version__, "model": model.manifest() if model else None,
                "files": list(self.files), **(extra or {})}
        with (self.root / "manifest.json").open("w") as fh:
            json.dump(_plain(body), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items() if not str(k).startswith("_")}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if dataclasses.is_dataclass(obj):
        return _plain(dataclasses.asdict(obj))
    return obj


def _initial_cloud(model, n, opts, seed, prefix="init"):
    if f"{prefix}_file" in opts:
        pts = EmpiricalMeasure.from_csv(opts[f"{prefix}_file"]).points
        if len(pts) != n:
            raise ConfigError(f"{opts[prefix + '_file']} holds {len(pts)} particles, sim.N = {n}")
        return pts
    mean = float(opts.get(f"{prefix}_mean", 0.0))
    std = float(opts.get(f"{prefix}_std", 1.0))
    return np.random.default_rng(seed).normal(mean, std, (n, model.state_dim))


# ---------------------------------------------------------------- experiments

def exp_rates(cfg, out: Output) -> int:
    opts = cfg["options"]
    model = _build(cfg) if "name" in cfg["model"] else None
    regime = opts.get("regime", "brownian_first_order")
    report: dict = {"regime": regime}
    if regime == "brownian_first_order":
        if model is not None and model.phi is not None:
            phi, alpha = model.phi, model.ellipticity_alpha or 1.0
        else:
            phi = rates.PhiSpec(float(opts.get("l1", 1.0)), float(opts.get("l2", 1.0)),
                                float(opts.get("r0", 1.0)))
            alpha = float(opts.get("alpha", 1.0))
        prof = rates.rate_profile(phi, alpha)
        report["rate_profile"] = dataclasses.asdict(prof)
        report.update(C1=prof.C1, C2=prof.C2, K=prof.K, c0=prof.c0, lambda0=prof.lambda0)
        scan = rates.threshold_scan(regime, c0=prof.c0, lambda0=prof.lambda0, K=prof.K,
                                    resolution=int(opts.get("resolution", 1)))
    else:
        if model is None:
            raise ConfigError(f"regime {regime!r} needs a model")
        c0, lam0 = opts.get("c0"), opts.get("lambda0")
        if c0 is None or lam0 is None:
            sim = _sim(cfg, h=0.01, T=20.0, N=2000)
            rep = analysis.contraction_report(model, None, sim)
            if rep.get("lambda_hat") is None or not rep["lambda_hat"] > 0:
                raise ConfigError("could not estimate contraction constants for this model")
            c0, lam0 = max(1.0, rep["c_hat"]), rep["lambda_hat"]
            report["empirical_fit"] = rep.get("fit")
        p = model.params
        kw = {"brownian_kinetic": {"L_b": p.L_b},
              "stable_first_order": {"K1": p.K1, "stable_alpha": getattr(model.noise, "stable_alpha", None)},
              "stable_kinetic": {"L_b": p.L_b, "stable_alpha": getattr(model.noise, "stable_alpha", None)}}
        if regime not in kw:
            raise ConfigError(f"unknown regime {regime!r}")
        scan = rates.threshold_scan(regime, c0=float(c0), lambda0=float(lam0), empirical=True,
                                    resolution=int(opts.get("resolution", 1)), **kw[regime])
        if model.kind == "kinetic":
            report["kinetic_condition"] = rates.kinetic_condition_check(
                p.K1, p.L_b, model.gamma, "stable_kinetic" if model.is_stable else "brownian_kinetic")
    report["threshold"] = scan.to_dict()
    report.update({k: v for k, v in scan.to_dict().items() if k not in report})
    report["verdict"] = "pass"
    out.json("report.json", report)
    out.manifest(cfg, model)
    print(json.dumps(_plain(report), indent=2, sort_keys=True))
    return EXIT_OK


def exp_simulate(cfg, out: Output) -> int:
    model = _build(cfg)
    opts = cfg["options"]
    sim = _sim(cfg)
    eta = _initial_cloud(model, sim.N, opts, sim.seed)
    snaps = tuple(opts.get("snapshot_times", ()))
    if opts.get("frozen", False):
        run = simulate.run_frozen(model, EmpiricalMeasure(eta), eta, sim, snapshot_times=snaps)
    else:
        run = simulate.run_mckean_vlasov(model, eta, sim, snapshot_times=snaps)
    out.run("", run)
    report = {"t_end": run.t_end, "diverged": run.diverged, "blowup_time": run.blowup_time,
              "counter": run.counter, "verdict": "pass"}
    out.json("report.json", report)
    out.manifest(cfg, model, {"run": run.manifest})
    print(json.dumps(_plain(report), sort_keys=True))
    return EXIT_OK


def exp_couple(cfg, out: Output) -> int:
    model = _build(cfg)
    opts = cfg["options"]
    sim = _sim(cfg)
    rng = np.random.default_rng(sim.seed)
    e1 = rng.normal(float(opts.get("mean1", -2.0)), float(opts.get("std1", 0.5)), (sim.N, model.state_dim))
    e2 = rng.normal(float(opts.get("mean2", 2.0)), float(opts.get("std2", 0.5)), (sim.N, model.state_dim))
    prof = None
    if model.has_elliptic_split and model.phi is not None:
        prof = rates.rate_profile(model.phi, model.ellipticity_alpha)
    rep = analysis.contraction_report(model, prof, sim, eta1=e1, eta2=e2,
                                      mu_frozen=EmpiricalMeasure(np.zeros((1, model.state_dim))))
    run = rep.get("_run")
    if run is not None:
        out.run("coupling_", run)
    out.json("report.json", rep)
    out.manifest(cfg, model)
    print(json.dumps(_plain(rep), indent=2, sort_keys=True))
    return EXIT_FAIL if rep["verdict"] == "fail" else EXIT_OK


def exp_fixed_point(cfg, out: Output) -> int:
    model = _build(cfg)
    opts = cfg["options"]
    sim = _sim(cfg, h=0.01, T=12.0, N=2000, burn_in=8.0, window=2.0)
    mu0 = EmpiricalMeasure(_initial_cloud(model, sim.N, opts, sim.seed))
    tol = float(opts.get("tol", sim.tol_stationary))
    try:
        mu, gaps = simulate.gamma_fixed_point(model, mu0, sim, int(opts.get("max_iter", 10)),
                                              tol=tol)
    except simulate.NonStationaryError as exc:
        rep = {"verdict": "fail", "error": str(exc)}
        out.json("report.json", rep)
        out.manifest(cfg, model)
        print(json.dumps(rep))
        return EXIT_FAIL
    ratios = [gaps[k] / gaps[k - 1] if gaps[k - 1] > 0 else 0.0 for k in range(1, len(gaps))]
    converged = gaps[-1] < tol
    contracting = all(r < 1 for r in ratios[1:])
    rep = {"gaps": gaps, "ratios": ratios, "converged": converged,
           "verdict": "pass" if converged or contracting else "fail"}
    out.series("gaps.csv", range(1, len(gaps) + 1), gaps)
    out.cloud("fixed_point.csv", mu.points)
    out.json("report.json", rep)
    out.manifest(cfg, model)
    print(json.dumps(_plain(rep), sort_keys=True))
    return EXIT_FAIL if rep["verdict"] == "fail" else EXIT_OK


def exp_phase(cfg, out: Output) -> int:
    opts = cfg["options"]
    model_cfg = cfg["model"]
    if model_cfg.get("name") != "example33":
        raise ConfigError("the phase experiment runs model.name = \"example33\"")
    eps = float(model_cfg.get("epsilon", 0.5))
    mode = opts.get("mode", "simulate")
    if mode not in ("simulate", "closed_form"):
        raise ConfigError(f"unknown phase mode {mode!r}")
    sim = _sim(cfg, h=1e-3, T=20.0, N=10_000, record_every=0.1) if mode == "simulate" else None
    rep = analysis.example33(eps, mode, sim)
    run = rep.pop("_run", None)
    if run is not None:
        out.run("", run)
    for key in ("times", "m_hat", "mean_abs"):
        rep.pop(key, None)
    rep["no_invariant_measure"] = rep.get("regime") == "supercritical"
    out.json("report.json", rep)
    out.manifest(cfg, _build(cfg))
    print(json.dumps(_plain(rep), indent=2, sort_keys=True))
    return EXIT_FAIL if rep["verdict"] == "fail" else EXIT_OK


def exp_verify(cfg, out: Output, only: str | None = None) -> int:
    only = only or cfg["options"].get("only")
    if only is not None and only not in verify.MODULES:
        raise ConfigError(f"--only must be one of {verify.MODULES}, got {only!r}")
    print(f"{'':6s} {'#':>2s} {'criterion':<22s} (module, runtime)")
    results = verify.run_checks(only=only, seed=cfg["seed"],
                                progress=lambda r: print(r.line(), flush=True))
    rows = [{"number": r.number, "criterion": r.key, "module": r.module, "passed": r.passed,
             "runtime_s": round(r.runtime, 3), "details": r.details} for r in results]
    out.json("report.json", {"seed": cfg["seed"], "only": only, "results": rows,
                             "verdict": "pass" if all(r.passed for r in results) else "fail"})
    with out._path("verify_table.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["number", "criterion", "module", "passed"])
        for r in results:
            w.writerow([r.number, r.key, r.module, r.passed])
    out.manifest(cfg)
    n_fail = sum(not r.passed for r in results)
    print(f"{len(results) - n_fail}/{len(results)} criteria passed")
    return EXIT_FAIL if n_fail else EXIT_OK


RUNNERS = {"rates": exp_rates, "simulate": exp_simulate, "couple": exp_couple,
           "fixed_point": exp_fixed_point, "phase": exp_phase}


def run_experiment(cfg: dict, only: str | None = None) -> int:
    out = Output(cfg["output_dir"])
    if cfg["experiment"] == "verify":
        return exp_verify(cfg, out, only)
    return RUNNERS[cfg["experiment"]](cfg, out)


# ---------------------------------------------------------------- argv

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mkv", description="Mean-field SDE particle experiments.")
    p.add_argument("--version", action="version", version=f"mkv {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("rates", "simulate", "couple", "fixed-point", "phase", "verify"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="TOML or JSON experiment file")
        sp.add_argument("--seed", type=int, help="base seed (overrides MKV_SEED and the file)")
        sp.add_argument("--out", help="output directory")
        if name == "verify":
            sp.add_argument("--only", choices=verify.MODULES, help="run one module's checks")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    experiment = args.command.replace("-", "_")
    try:
        if args.config:
            data, text = load_config(args.config)
        elif experiment == "verify":
            data, text = {}, ""
        else:
            raise ConfigError(f"{args.command} needs --config")
        cfg = resolve(data, text, args.config, experiment=experiment, seed=args.seed, out=args.out)
        return run_experiment(cfg, getattr(args, "only", None))
    except (ConfigError, simulate.ConfigurationError, models.ModelError,
            rates.RateError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
