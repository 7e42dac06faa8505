"""Command-line entry point.

Every command resolves its configuration as defaults < JSON config file <
command-line flags, writes its outputs under --out, and records the resolved
configuration with output checksums in manifest.json. Wall-clock timing goes
to timing.json so the manifest itself is reproducible.

Exit codes: 0 success, 1 runtime failure, 2 invalid input or configuration.
"""

from __future__ import annotations

import argparse
import contextlib
import datetime as dt
import hashlib
import json
import logging
import platform
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Callable

import numpy as np
import pandas as pd
import scipy

from . import __version__
from .dataio import (
    DataError,
    load_calendar,
    load_period_series,
    load_service_series,
    write_calendar,
    write_period_series,
    write_service_series,
)
from .designspace import CovarianceSpec, FixedEffectsSpec
from .forecaster import (
    ModelSpec,
    compare_service_models,
    fit_for_origin,
    fit_service_model,
    run_pipeline,
)
from .gausslik import ForecastSet
from .harness import default_origins, lead_time_sweep, resolution_sweep, rolling_eval
from .poisscreen import screen_series
from .staffing import erlang_a_exact, performance_ratio_report
from .synthlab import GeneratorConfig, generate_counts, generate_services, simulate_erlang_a, sinusoid_counts

log = logging.getLogger("callmix")


class ConfigError(ValueError):
    pass


# option name -> default; every command accepts the shared block
SHARED = {"out": "out", "seed": 0, "workers": 1, "verbose": 0}
MODEL = {
    "model": "mixed",
    "pattern": "three",
    "intra": "ar1",
    "inter": "ar1",
    "sigma2": "fixed",
    "sigma2_value": 0.25,
    "exogenous": [],
    "learn_days": 42,
    "lead": 7,
    "horizon": 1,
    "level": 0.95,
}
INPUTS = {"arrivals": None, "calendar": None, "period_minutes": 30}
ORIGINS = {"origins": [], "first_origin": None, "last_origin": None, "max_origins": None}

COMMANDS: dict[str, dict[str, Any]] = {
    "screen": {**INPUTS, "alpha": 0.05},
    "fit": {**INPUTS, **MODEL, "origin": None, "services": None},
    "forecast": {**INPUTS, **MODEL, "origin": None},
    "staff": {
        **INPUTS,
        "forecast": None,
        "services": None,
        "pred_services": None,
        "beta": [-1.0, 0.0, 1.0],
        "ratio": [0.1, 1.0, 2.0],
    },
    "evaluate": {**INPUTS, **MODEL, **ORIGINS},
    "sweep-lead": {**INPUTS, **MODEL, **ORIGINS, "leads": [1, 2, 3, 4, 5, 6, 7]},
    "sweep-resolution": {**INPUTS, **MODEL, **ORIGINS, "factors": [1, 2, 4, 16]},
    "generate": {
        "kind": "mixed",
        "days": 60,
        "periods": 24,
        "sigma_g2": 1.0,
        "rho_g": 0.6,
        "sigma_r2": 0.8,
        "rho_r": 0.5,
        "delta": None,
        "start": "2004-01-04",
        "period_minutes": 30,
    },
    "simulate": {"lam": None, "mu": None, "theta": None, "servers": None, "horizon_minutes": 50000.0,
                 "warmup_minutes": 1000.0, "batches": 20},
}

HELP = {
    "screen": "Poisson screening of billing/delivery indicators on daily totals",
    "fit": "fit a forecasting model (and service-time regressions) on one learning window",
    "forecast": "forecast the horizon at one origin",
    "staff": "staffing levels and forecast-error impact on service quality",
    "evaluate": "rolling-origin backtest",
    "sweep-lead": "rolling-origin backtest across lead times",
    "sweep-resolution": "rolling-origin backtest across interval resolutions",
    "generate": "write a synthetic dataset",
    "simulate": "discrete-event Erlang-A simulation next to the exact steady state",
}


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _strs(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


# flag-specific argparse settings; anything absent is inferred from the default
FLAG_TYPES: dict[str, dict[str, Any]] = {
    "model": {"choices": ["mixed", "benchmark1", "benchmark2", "industry"]},
    "pattern": {"choices": ["three", "multi"]},
    "intra": {"choices": ["ar1", "arma11", "indep"]},
    "inter": {"choices": ["ar1", "none"]},
    "sigma2": {"choices": ["fixed", "estimate"]},
    "kind": {"choices": ["mixed", "sinusoid"]},
    "beta": {"type": _floats},
    "ratio": {"type": _floats},
    "leads": {"type": _ints},
    "factors": {"type": _ints},
    "exogenous": {"type": _strs},
    "origins": {"type": _strs},
    "delta": {"type": float},
    "lam": {"type": float},
    "mu": {"type": float},
    "theta": {"type": float},
    "servers": {"type": int},
    "max_origins": {"type": int},
    "verbose": {"action": "count"},
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="callmix", description="Call-arrival forecasting and staffing toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", default=None, help="JSON file of option values (flags take precedence)")
        for key, default in {**SHARED, **opts}.items():
            kw = dict(FLAG_TYPES.get(key, {}))
            if "type" not in kw and "action" not in kw and default is not None and not isinstance(default, (str, list)):
                kw["type"] = type(default)
            flag = "--" + key.replace("_", "-")
            aliases = ["-v"] if key == "verbose" else []
            p.add_argument(flag, *aliases, dest=key, default=None, **kw)
    return parser


def resolve_config(args: argparse.Namespace) -> dict[str, Any]:
    """Merge defaults, the --config file and explicit flags; reject unknown keys."""
    defaults = {**SHARED, **COMMANDS[args.command]}
    cfg = dict(defaults)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        data = {k.replace("-", "_"): v for k, v in data.items()}
        unknown = sorted(set(data) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown config keys for '{args.command}': {', '.join(unknown)}")
        cfg.update(data)
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    cfg["command"] = args.command
    return cfg


# ---------------------------------------------------------------------------
# input helpers


def _need(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise ConfigError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"input file not found: {p}")
    return p


def _date(text) -> dt.date:
    if isinstance(text, dt.date):
        return text
    try:
        return dt.date.fromisoformat(str(text))
    except ValueError as exc:
        raise ConfigError(f"bad date {text!r}") from exc


def load_arrivals(cfg: dict):
    _need(cfg, "arrivals", "calendar")
    cal = load_calendar(_existing(cfg["calendar"]))
    return load_period_series(_existing(cfg["arrivals"]), period_minutes=int(cfg["period_minutes"]), calendar=cal), cal


def model_spec(cfg: dict) -> ModelSpec:
    try:
        return ModelSpec(
            fx=FixedEffectsSpec(cfg["pattern"], tuple(cfg["exogenous"])),
            cov=CovarianceSpec(cfg["intra"], cfg["inter"], cfg["sigma2"], float(cfg["sigma2_value"])),
            pipeline=cfg["model"],
            learn_window_days=int(cfg["learn_days"]),
            lead_time_days=int(cfg["lead"]),
            horizon_days=int(cfg["horizon"]),
            level=float(cfg["level"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def select_origins(cfg: dict, spec: ModelSpec, data) -> list[dt.date]:
    if cfg["origins"]:
        origins = [_date(o) for o in cfg["origins"]]
    else:
        origins = default_origins(spec, data)
        if cfg["first_origin"]:
            origins = [o for o in origins if o >= _date(cfg["first_origin"])]
        if cfg["last_origin"]:
            origins = [o for o in origins if o <= _date(cfg["last_origin"])]
    if cfg["max_origins"] is not None:
        origins = origins[: int(cfg["max_origins"])]
    if not origins:
        raise ConfigError("no forecast origins selected")
    return origins


@contextlib.contextmanager
def worker_pool(n: int):
    if n and int(n) > 1:
        with ProcessPoolExecutor(max_workers=int(n)) as ex:
            yield ex
    else:
        yield None


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


# ---------------------------------------------------------------------------
# commands: each takes (cfg, out_dir), returns output paths; validation
# happens in a separate prepare step so it can map to exit code 2


def prep_screen(cfg):
    data, _ = load_arrivals(cfg)
    return lambda out: _run_screen(cfg, data, out)


def _run_screen(cfg, data, out):
    rep = screen_series(data, alpha=float(cfg["alpha"]))
    (out / "screening.json").write_text(rep.to_json() + "\n")
    (out / "screening.txt").write_text(rep.to_text())
    return ["screening.json", "screening.txt"]


def prep_fit(cfg):
    data, cal = load_arrivals(cfg)
    spec = model_spec(cfg)
    origin = _date(cfg["origin"]) if cfg["origin"] else data.days[-1].date + dt.timedelta(days=spec.lead_time_days)
    services = load_service_series(_existing(cfg["services"]), calendar=cal) if cfg["services"] else None
    if spec.pipeline == "industry":
        raise ConfigError("the averaging model has no parameters to fit")

    def run(out):
        fit = fit_for_origin(spec, data, origin)
        _write_json(out / "fit.json", {"origin": origin.isoformat(), **fit.to_dict()})
        files = ["fit.json"]
        if services is not None:
            reg = services.regular()
            fits = {m: fit_service_model(m, reg) for m in (3, 1, 2)}
            comps = {}
            for a, b in ((3, 1), (1, 2), (3, 2)):
                stat, df, p = compare_service_models(fits[a], fits[b])
                comps[f"{a}_vs_{b}"] = {"statistic": stat, "df": df, "p_value": p}
            _write_json(out / "service_models.json",
                        {"models": {str(m): f.to_dict() for m, f in fits.items()}, "comparisons": comps})
            files.append("service_models.json")
        return files

    return run


def prep_forecast(cfg):
    data, _ = load_arrivals(cfg)
    spec = model_spec(cfg)
    _need(cfg, "origin")
    origin = _date(cfg["origin"])

    def run(out):
        fs = run_pipeline(spec, data, origin)
        fs.to_csv(out / "forecast.csv")
        return ["forecast.csv"]

    return run


def prep_staff(cfg):
    _need(cfg, "forecast", "services")
    data, cal = load_arrivals(cfg)
    fs = ForecastSet.read_csv(_existing(cfg["forecast"]))
    true_s = load_service_series(_existing(cfg["services"]), calendar=cal)
    pred_s = load_service_series(_existing(cfg["pred_services"]), calendar=cal) if cfg["pred_services"] else true_s

    def run(out):
        rep = performance_ratio_report(fs, data, pred_s, true_s, cfg["beta"], cfg["ratio"])
        rep.to_csv(out / "staffing.csv")
        agg = rep.aggregate()
        agg.to_csv(out / "staffing_periods.csv", index=False, float_format="%.10g", lineterminator="\n")
        (out / "staffing_periods.json").write_text(rep.to_json() + "\n")
        return ["staffing.csv", "staffing_periods.csv", "staffing_periods.json"]

    return run


def _eval_runner(cfg, fn):
    data, _ = load_arrivals(cfg)
    spec = model_spec(cfg)
    origins = select_origins(cfg, spec, data)

    def run(out):
        with worker_pool(cfg["workers"]) as ex:
            ev = fn(spec, data, origins, ex)
        paths = ev.write(out)
        if ev.failures:
            log.warning("%d origin(s) failed; see failures.csv", len(ev.failures))
        return sorted(Path(p).name for p in paths.values())

    return run


def prep_evaluate(cfg):
    return _eval_runner(cfg, lambda spec, data, origins, ex: rolling_eval(spec, data, origins, ex))


def prep_sweep_lead(cfg):
    leads = [int(x) for x in cfg["leads"]]
    if not leads or min(leads) < 1:
        raise ConfigError("leads must be positive integers")
    return _eval_runner(cfg, lambda spec, data, origins, ex: lead_time_sweep(spec, leads, data, origins, ex))


def prep_sweep_resolution(cfg):
    factors = [int(x) for x in cfg["factors"]]
    if not factors or min(factors) < 1:
        raise ConfigError("factors must be positive integers")
    return _eval_runner(cfg, lambda spec, data, origins, ex: resolution_sweep(spec, factors, data, origins, ex))


def prep_generate(cfg):
    try:
        start = _date(cfg["start"])
        gcfg = GeneratorConfig(
            D=int(cfg["days"]),
            K=int(cfg["periods"]),
            sigma_G2=float(cfg["sigma_g2"]),
            rho_G=float(cfg["rho_g"]),
            sigma_R2=float(cfg["sigma_r2"]),
            rho_R=float(cfg["rho_r"]),
            delta=None if cfg["delta"] is None else float(cfg["delta"]),
            seed=int(cfg["seed"]),
            start=start,
            period_minutes=int(cfg["period_minutes"]),
        )
        gcfg.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    def run(out):
        if cfg["kind"] == "sinusoid":
            series = sinusoid_counts(gcfg.D, gcfg.K, gcfg.seed, period_minutes=gcfg.period_minutes)
        else:
            series, _ = generate_counts(gcfg)
        services = generate_services(series.days, series.K, gcfg.seed + 1, period_minutes=series.period_minutes)
        write_period_series(series, out / "arrivals.csv")
        write_calendar(series.days, out / "calendar.csv")
        write_service_series(services, out / "services.csv")
        return ["arrivals.csv", "calendar.csv", "services.csv"]

    return run


def prep_simulate(cfg):
    _need(cfg, "lam", "mu", "theta", "servers")
    lam, mu, theta, N = float(cfg["lam"]), float(cfg["mu"]), float(cfg["theta"]), int(cfg["servers"])
    if min(lam, mu, theta) <= 0 or N < 1:
        raise ConfigError("rates must be positive and servers >= 1")
    if float(cfg["horizon_minutes"]) <= float(cfg["warmup_minutes"]):
        raise ConfigError("horizon must exceed warmup")

    def run(out):
        sim = simulate_erlang_a(lam, mu, theta, N, float(cfg["horizon_minutes"]), float(cfg["warmup_minutes"]),
                                int(cfg["seed"]), int(cfg["batches"]))
        ex = erlang_a_exact(lam, mu, theta, N)
        _write_json(out / "simulation.json", {
            "simulated": sim.to_dict(),
            "exact": {"p_wait": ex.p_wait, "p_ab": ex.p_ab, "e_wait": ex.e_wait},
        })
        return ["simulation.json"]

    return run


PREPARE: dict[str, Callable] = {
    "screen": prep_screen,
    "fit": prep_fit,
    "forecast": prep_forecast,
    "staff": prep_staff,
    "evaluate": prep_evaluate,
    "sweep-lead": prep_sweep_lead,
    "sweep-resolution": prep_sweep_resolution,
    "generate": prep_generate,
    "simulate": prep_simulate,
}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def versions() -> dict[str, str]:
    return {
        "callmix": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
    }


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on bad usage, 0 on --help
        return int(exc.code or 0)
    started = time.time()
    try:
        cfg = resolve_config(args)
        logging.basicConfig(level=logging.WARNING - 10 * min(int(cfg["verbose"] or 0), 2),
                            format="%(levelname)s %(message)s")
        if int(cfg["workers"]) < 1:
            raise ConfigError("workers must be >= 1")
        run = PREPARE[cfg["command"]](cfg)
    except (ConfigError, DataError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        with warnings.catch_warnings():
            if not cfg["verbose"]:
                warnings.simplefilter("ignore")
            files = run(out)
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    manifest = {
        "command": cfg["command"],
        # the output location lives in timing.json so reruns elsewhere stay byte-identical
        "config": {k: v for k, v in sorted(cfg.items()) if k not in ("command", "out")},
        "seed": cfg["seed"],
        "versions": versions(),
        "outputs": {f: _sha256(out / f) for f in sorted(files)},
    }
    _write_json(out / "manifest.json", manifest)
    _write_json(out / "timing.json", {"out": str(out), "started_unix": started, "wall_seconds": time.time() - started})
    return 0


if __name__ == "__main__":
    sys.exit(main())
