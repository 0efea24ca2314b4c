"""Command-line front end.

Commands::

    frailmort fit       --config run.cfg [--out DIR]
    frailmort forecast  --fit-dir DIR [--config run.cfg] [--out DIR] [--seed N]
    frailmort backtest  --config run.cfg [--out DIR] [--threads N]
    frailmort simulate  --config sim.cfg [--out DIR] [--seed N]

A configuration file holds ``key = value`` lines (``#`` starts a comment).
``--set key=value`` and the dedicated flags override the file.  Each run
writes CSV files and a ``manifest.json`` (configuration echo, seed, input
hashes, results, versions) to its output directory, which defaults to
``runs/<timestamp>-<config hash>``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import platform
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .baseline import BaselineModel, BaselineParams, params_from_rows, params_to_rows
from .data import CumulativeHazardTable, HazardMode, LexisWindow, build_surface, simulate_surface
from .errors import ConfigError, DataError, FrailMortError, NumericalError
from .estimation import (
    FitMode,
    FittedModel,
    SearchConfig,
    backtest_sigma2,
    em_fit_additive,
    fit_fixed_frailty,
    profile_fit,
    profile_grid,
    switching_fit,
)
from .forecasting import forecast
from .frailty import Family, FrailtySpec
from .hmd import Column, format_hmd_table, read_hmd_file
from .io import read_grid, read_rows, write_grid, write_rows

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

METHODS = ("profile", "switching", "fixed")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


@dataclass(frozen=True)
class RunConfig:
    """Validated run configuration.  Field names are the configuration keys."""

    deaths: str = ""
    exposures: str = ""
    sex: str = "Total"
    t_min: int = 0
    t_max: int = 0
    x_min: int = 0
    x_max: int = 0
    baseline: str = "gompertz"
    frailty: str = "gamma"
    mode: str = "cohort"
    background: str = "none"
    method: str = "profile"
    sigma2: float = 0.5
    alpha: float = 0.25
    search_upper: float = 2.0
    search_xtol: float = 1e-8
    grid_alpha: tuple = ()
    grid_sigma2: tuple = ()
    horizon: int = 0
    draws: int = 0
    x0: int = 60
    test_t_max: int = 0
    backtest_points: int = 41
    seed: int = 0
    threads: int = 1
    # simulation truth
    exposure: float = 1e6
    level: float = -10.0
    level_drift: float = -0.01
    slope: float = 0.1
    background_level: float = 0.0
    background_drift: float = 0.0
    poisson: bool = True

    def __post_init__(self):
        if self.t_min > self.t_max:
            raise ConfigError(f"t_min ({self.t_min}) must not exceed t_max ({self.t_max})")
        if self.x_min > self.x_max:
            raise ConfigError(f"x_min ({self.x_min}) must not exceed x_max ({self.x_max})")
        if self.x_min < 0:
            raise ConfigError(f"x_min must be non-negative, got {self.x_min}")
        if self.horizon < 0:
            raise ConfigError(f"horizon must be non-negative, got {self.horizon}")
        if self.draws < 0:
            raise ConfigError(f"draws must be non-negative, got {self.draws}")
        if self.threads < 1:
            raise ConfigError(f"threads must be at least 1, got {self.threads}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {', '.join(METHODS)}, got {self.method!r}")
        if not self.search_upper > 0:
            raise ConfigError(f"search_upper must be positive, got {self.search_upper}")
        if not self.exposure > 0:
            raise ConfigError(f"exposure must be positive, got {self.exposure}")
        for key, parse in (("baseline", BaselineModel.parse), ("frailty", Family.parse), ("mode", FitMode.parse),
                           ("sex", Column.parse)):
            try:
                parse(getattr(self, key))
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
        if self.background not in ("none", "constant"):
            raise ConfigError(f"background must be 'none' or 'constant', got {self.background!r}")
        if (self.background == "constant") != (FitMode.parse(self.mode) is FitMode.COHORT_ADDITIVE):
            raise ConfigError("mode = additive requires background = constant and vice versa")

    @property
    def window(self) -> LexisWindow:
        return LexisWindow(self.t_min, self.t_max, self.x_min, self.x_max)

    @property
    def family(self) -> Family:
        return Family.parse(self.frailty)

    def frailty_spec(self) -> FrailtySpec:
        alpha = self.alpha if self.family is Family.STABLE else 0.0
        return FrailtySpec.of(self.family, self.sigma2, alpha)

    def search(self) -> SearchConfig:
        return SearchConfig(upper=self.search_upper, xtol=self.search_xtol, alpha_start=self.alpha,
                            sigma2_start=self.sigma2 if self.sigma2 > 0 else 0.5, threads=self.threads)

    def echo(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.echo(), sort_keys=True).encode()).hexdigest()


def _coerce(key: str, text: str):
    field = {f.name: f for f in dataclasses.fields(RunConfig)}.get(key)
    if field is None:
        raise ConfigError(f"unknown configuration key {key!r}")
    default = field.default
    try:
        if isinstance(default, bool):
            low = text.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return _floats(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r}") from None
    return text.strip()


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines into raw strings."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


def load_config(path=None, overrides: dict | None = None, base: Path | None = None) -> RunConfig:
    """Build a :class:`RunConfig` from an optional file and overrides (overrides win).

    Relative data paths are resolved against the configuration file's directory.
    """
    raw = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"configuration file {path} not found")
        raw.update(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
        base = path.parent
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    values = {k: _coerce(k, str(v)) for k, v in raw.items()}
    for key in ("deaths", "exposures"):
        if values.get(key) and base is not None and not Path(values[key]).is_absolute():
            values[key] = str((base / values[key]).resolve())
    return RunConfig(**values)


# -- helpers -----------------------------------------------------------------

def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _versions() -> dict:
    return {"frailmort": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _output_dir(out, command: str, cfg: RunConfig) -> Path:
    if out is None:
        stamp = time.strftime("%Y%m%dT%H%M%S")
        out = Path("runs") / f"{stamp}-{command}-{cfg.digest()[:8]}"
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, cfg: RunConfig, inputs: dict, results: dict) -> None:
    manifest = {
        "command": command,
        "config": cfg.echo(),
        "seed": cfg.seed,
        "inputs": inputs,
        "results": results,
        "versions": _versions(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_surface(cfg: RunConfig, window: LexisWindow | None = None):
    """Read the configured HMD deaths and exposures files into a surface."""
    for key in ("deaths", "exposures"):
        path = getattr(cfg, key)
        if not path:
            raise ConfigError(f"{key}: no input file given")
        if not Path(path).is_file():
            raise ConfigError(f"{key}: file {path} not found")
    deaths = read_hmd_file(cfg.deaths, cfg.sex)
    exposures = read_hmd_file(cfg.exposures, cfg.sex)
    surface = build_surface(deaths, exposures, window or cfg.window)
    return surface, {cfg.deaths: _sha256(cfg.deaths), cfg.exposures: _sha256(cfg.exposures)}


def run_fit(cfg: RunConfig, surface) -> tuple[FittedModel, object]:
    """The library call behind ``fit`` (returns the fit and an optional profile grid)."""
    mode = FitMode.parse(cfg.mode)
    background = "constant" if cfg.background == "constant" else None
    search = cfg.search()
    family = cfg.family
    grid = None
    if cfg.method == "fixed" or family is Family.DEGENERATE:
        spec = cfg.frailty_spec() if family is not Family.DEGENERATE else FrailtySpec.degenerate()
        if mode is FitMode.COHORT_ADDITIVE:
            fitted = em_fit_additive(spec, surface, cfg.baseline, background, max_iter=search.em_max_iter)
        else:
            fitted = fit_fixed_frailty(spec, surface, mode, cfg.baseline)
    elif cfg.method == "switching":
        fitted = switching_fit(family, surface, mode, cfg.baseline, cfg.frailty_spec(), config=search)
    else:
        fitted = profile_fit(family, surface, mode, cfg.baseline, config=search, background_model=background)
        if cfg.grid_sigma2:
            alphas = cfg.grid_alpha if family is Family.STABLE and cfg.grid_alpha else (0.0,)
            grid = profile_grid(family, surface, mode, cfg.baseline, alphas, cfg.grid_sigma2,
                                background_model=background, threads=cfg.threads, config=search)
    return fitted, grid


def _frailty_rows(spec: FrailtySpec) -> list[tuple]:
    return [("sigma2", 0, 1, spec.sigma2), ("alpha", 0, 1, spec.alpha)]


def cmd_fit(cfg: RunConfig, out: Path) -> dict:
    surface, inputs = load_surface(cfg)
    fitted, grid = run_fit(cfg, surface)
    rows = _frailty_rows(fitted.frailty) + params_to_rows(fitted.baseline)
    if fitted.background is not None:
        rows += params_to_rows(fitted.background, prefix="bg_")
    write_rows(out / "params.csv", ["series", "t_or_x", "component", "value"], rows)
    write_rows(out / "trace.csv", ["iteration", "loglik_rel"], enumerate(fitted.trace))
    write_grid(out / "fitted_mu.csv", fitted.window, fitted.fitted_rates(), "mu")
    write_grid(out / "hazard.csv", fitted.window, fitted.hazard_table.values, "H")
    profile = fitted.diagnostics.get("profile_evaluations")
    if profile:
        write_rows(out / "profile.csv", ["alpha", "sigma2", "loglik"], profile)
    if grid is not None:
        write_rows(out / "profile_grid.csv", ["alpha", "sigma2", "loglik"], grid.rows())
    results = {
        "loglik": fitted.loglik,
        "family": fitted.frailty.family.value,
        "sigma2": fitted.frailty.sigma2,
        "alpha": fitted.frailty.alpha,
        "mode": fitted.mode.value,
        "hazard_mode": fitted.hazard_table.mode.value,
        "baseline": fitted.baseline.model.value,
        "background": fitted.background.model.value if fitted.background is not None else None,
        "window": [cfg.t_min, cfg.t_max, cfg.x_min, cfg.x_max],
    }
    for key in ("outer_iterations", "n_floored"):
        if key in fitted.diagnostics:
            results[key] = fitted.diagnostics[key]
    _write_manifest(out, "fit", cfg, inputs, results)
    return results


def load_fit(fit_dir) -> FittedModel:
    """Rebuild a :class:`FittedModel` from the files written by ``fit``."""
    fit_dir = Path(fit_dir)
    for name in ("manifest.json", "params.csv", "hazard.csv"):
        if not (fit_dir / name).is_file():
            raise DataError(f"fit artifact {fit_dir / name} is missing")
    manifest = json.loads((fit_dir / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("command") != "fit":
        raise DataError(f"{fit_dir} does not hold fit output")
    res = manifest["results"]
    _, rows = read_rows(fit_dir / "params.csv")
    rows = [(r[0], int(r[1]), int(r[2]), float(r[3])) for r in rows]
    spec = FrailtySpec.of(res["family"], res["sigma2"], res["alpha"])
    baseline = params_from_rows([r for r in rows if not r[0].startswith("bg_") and r[0] not in ("sigma2", "alpha")])
    background = params_from_rows(rows, prefix="bg_") if res.get("background") else None
    window, H = read_grid(fit_dir / "hazard.csv")
    table = CumulativeHazardTable(window, H, HazardMode(res["hazard_mode"]), background is not None)
    _, trace_rows = read_rows(fit_dir / "trace.csv")
    return FittedModel(spec, baseline, table, FitMode.parse(res["mode"]), float(res["loglik"]), background,
                       trace=[float(r[1]) for r in trace_rows])


def cmd_forecast(cfg: RunConfig, out: Path, fit_dir) -> dict:
    if fit_dir is None:
        raise ConfigError("forecast needs --fit-dir pointing at the output of a fit run")
    fitted = load_fit(fit_dir)
    inputs = {str(Path(fit_dir) / n): _sha256(Path(fit_dir) / n) for n in ("manifest.json", "params.csv", "hazard.csv")}
    w = fitted.window
    if cfg.horizon == 0:
        write_grid(out / "mu.csv", w, fitted.fitted_rates(), "mu")
        results = {"horizon": 0}
        _write_manifest(out, "forecast", cfg, inputs, results)
        return results
    res = forecast(fitted, cfg.horizon, draws=cfg.draws, seed=cfg.seed, x0=cfg.x0)
    years = res.forecast_years
    idx = res.index
    rows = []
    for j, t in enumerate(years):
        for c in range(idx.mean.shape[1]):
            rows.append((int(t), c + 1, idx.mean[j, c], idx.lo95[j, c], idx.hi95[j, c],
                         idx.lo95_param[j, c], idx.hi95_param[j, c]))
    write_rows(out / "index.csv", ["t", "component", "mean", "lo95", "hi95", "lo95_param", "hi95_param"], rows)
    write_grid(out / "mu.csv", res.window, res.mu, "mu")
    write_grid(out / "integrated.csv", res.window, res.integrated, "I")
    write_rows(out / "life_expectancy.csv", ["t", "e"], zip((int(t) for t in res.window.years), res.life_expectancy))
    if idx.draws is not None:
        draw_rows = ((d, int(t), c + 1, idx.draws[d, j, c]) for d in range(idx.draws.shape[0])
                     for j, t in enumerate(years) for c in range(idx.draws.shape[2]))
        write_rows(out / "draws.csv", ["draw", "t", "component", "value"], draw_rows)
    results = {
        "horizon": cfg.horizon,
        "drift": res.drift.drift.tolist(),
        "innovation_cov": res.drift.cov.tolist(),
        "n_obs": res.drift.n_obs,
        "x0": cfg.x0,
    }
    _write_manifest(out, "forecast", cfg, inputs, results)
    return results


def cmd_backtest(cfg: RunConfig, out: Path) -> dict:
    if cfg.test_t_max <= cfg.t_max:
        raise ConfigError(f"test_t_max ({cfg.test_t_max}) must exceed t_max ({cfg.t_max})")
    full = LexisWindow(cfg.t_min, cfg.test_t_max, cfg.x_min, cfg.x_max)
    surface, inputs = load_surface(cfg, full)
    test = LexisWindow(cfg.t_max + 1, cfg.test_t_max, cfg.x_min, cfg.x_max)
    grid = np.linspace(0.0, cfg.search_upper, cfg.backtest_points)
    res = backtest_sigma2(surface, cfg.window, test, cfg.baseline, grid=grid, upper=cfg.search_upper,
                          family=cfg.family if cfg.family is not Family.DEGENERATE else Family.GAMMA,
                          threads=cfg.threads)
    write_rows(out / "curve.csv", ["sigma2", "f"], zip(res.curve_sigma2, res.curve_value))
    results = {"sigma2_hat": res.sigma2, "f_hat": res.value, "grid_argmax": res.grid_argmax(),
               "test_window": [test.t_min, test.t_max, test.x_min, test.x_max]}
    _write_manifest(out, "backtest", cfg, inputs, results)
    return results


def cmd_simulate(cfg: RunConfig, out: Path) -> dict:
    w = cfg.window
    years, ages = w.years, w.ages
    baseline = BaselineParams.gompertz(years, ages, cfg.level + cfg.level_drift * (years - w.t_min), cfg.slope)
    background = None
    if cfg.background == "constant":
        if not cfg.background_level > 0:
            raise ConfigError("background_level must be positive when background = constant")
        background = BaselineParams.constant(years, ages, np.log(cfg.background_level)
                                             + cfg.background_drift * (years - w.t_min))
    surface = simulate_surface(cfg.frailty_spec(), baseline, w, cfg.exposure, cfg.seed, background, cfg.poisson)
    deaths = format_hmd_table(surface.deaths, years, ages, "Simulated, Deaths (period 1x1)")
    exposures = format_hmd_table(surface.exposures, years, ages, "Simulated, Exposure to risk (period 1x1)")
    (out / "Deaths_1x1.txt").write_text(deaths, encoding="utf-8")
    (out / "Exposures_1x1.txt").write_text(exposures, encoding="utf-8")
    results = {"deaths_file": "Deaths_1x1.txt", "exposures_file": "Exposures_1x1.txt",
               "total_deaths": float(surface.deaths.sum())}
    _write_manifest(out, "simulate", cfg, {}, results)
    return results


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="frailmort", description="Stochastic frailty mortality models")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("fit", "fit a frailty model"), ("forecast", "forecast a fitted model"),
                       ("backtest", "choose sigma2 by forecast fit"), ("simulate", "simulate HMD-layout data")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a configuration key")
        if name == "forecast":
            p.add_argument("--fit-dir", help="directory written by a fit run")
            p.add_argument("--horizon", type=int)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        overrides = {}
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            overrides[k.strip()] = v.strip()
        for key in ("seed", "threads", "horizon"):
            if getattr(args, key, None) is not None:
                overrides[key] = str(getattr(args, key))
        if args.command == "forecast" and args.config is None:
            cfg = _forecast_config(args.fit_dir, overrides)
        else:
            cfg = load_config(args.config, overrides, base=Path.cwd())
        out = _output_dir(args.out, args.command, cfg)
        if args.command == "fit":
            results = cmd_fit(cfg, out)
        elif args.command == "forecast":
            results = cmd_forecast(cfg, out, args.fit_dir)
        elif args.command == "backtest":
            results = cmd_backtest(cfg, out)
        else:
            results = cmd_simulate(cfg, out)
    except ConfigError as exc:
        print(f"frailmort: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"frailmort: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        trace = getattr(exc, "trace", None)
        extra = f" (after {len(trace)} iterations)" if trace else ""
        print(f"frailmort: numerical failure: {exc}{extra}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FrailMortError as exc:  # pragma: no cover - every subclass is handled above
        print(f"frailmort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(json.dumps({"out": str(out), **{k: v for k, v in results.items() if not isinstance(v, list)}}))
    return EXIT_OK


def _forecast_config(fit_dir, overrides) -> RunConfig:
    # without --config, reuse the configuration echoed by the fit run
    if fit_dir is None:
        raise ConfigError("forecast needs --fit-dir pointing at the output of a fit run")
    manifest = Path(fit_dir) / "manifest.json"
    if not manifest.is_file():
        raise DataError(f"fit artifact {manifest} is missing")
    echo = json.loads(manifest.read_text(encoding="utf-8"))["config"]
    raw = {k: ",".join(map(str, v)) if isinstance(v, list) else str(v) for k, v in echo.items()}
    raw.update(overrides)
    return load_config(None, raw)
