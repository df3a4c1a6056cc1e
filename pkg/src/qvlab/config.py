"""INI run configuration with typed validation and a canonical text form.

Every value is parsed and checked when the file is loaded; errors name the
offending ``section.key``. :meth:`RunConfig.canonical` renders the resolved
configuration deterministically so artifacts can embed it and be regenerated
from it.
"""

from __future__ import annotations

import configparser
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .engine import CovParams, PathGrid
from .errors import ConfigurationError, QVLabError
from .surfaces import VolSurface, make_surface


class ConfigError(ConfigurationError):
    """Invalid or missing configuration value; ``key`` is ``section.key``."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _float(raw: str) -> float:
    v = float(raw)
    if not math.isfinite(v):
        raise ValueError("must be finite")
    return v


def _int(raw: str) -> int:
    v = float(raw)
    if v != int(v):
        raise ValueError("must be an integer")
    return int(v)


def _floats(raw: str) -> tuple[float, ...]:
    vals = tuple(_float(p) for p in raw.split(",") if p.strip())
    if not vals:
        raise ValueError("must list at least one number")
    return vals


def _str(raw: str) -> str:
    return raw.strip()


_FMT: dict[Callable, Callable[[Any], str]] = {
    _float: repr,
    _int: str,
    _floats: lambda v: ", ".join(repr(x) for x in v),
    _str: str,
}

# section -> key -> (parser, default); default None means no default
SCHEMA: dict[str, dict[str, tuple[Callable, Any]]] = {
    "market": {"s0": (_float, 100.0), "r": (_float, 0.0), "V": (_float, 0.0), "H": (_float, None)},
    "surface": {"family": (_str, None), "alpha": (_float, None), "a": (_float, 0.0),
                "omega": (_float, 2 * math.pi), "b": (_float, 0.0), "tau": (_float, 1.0),
                "s_ref": (_float, 100.0)},
    "engine": {"dt": (_float, None), "n_steps": (_int, None), "n_paths": (_int, None),
               "seed": (_int, None), "measure": (_str, "risk_neutral"), "mu": (_float, 0.0)},
    "cov": {"alpha": (_float, None), "beta": (_float, None), "domain_end": (_float, None),
            "z": (_float, 0.0), "times": (_floats, None), "scheme": (_str, "canonical")},
    "qv": {"windows": (_floats, None), "window_start": (_float, 0.0), "csv": (_str, None),
           "theta": (_float, None), "gamma": (_float, None), "T0": (_float, None)},
    "price": {"strikes": (_floats, None), "expiries": (_floats, None),
              "variance_strikes": (_floats, None)},
    "ivsurface": {"strikes": (_floats, None), "expiries": (_floats, None), "n_paths": (_int, None),
                  "dt": (_float, None)},
    "forecast": {"z": (_float, None), "x": (_float, None), "times": (_floats, None),
                 "T": (_float, None), "gamma": (_float, 2.0), "variant": (_str, "corrected"),
                 "s_z": (_float, None), "m": (_float, 0.0)},
    "pv": {"portfolio": (_str, None), "n_samples": (_int, None), "seed": (_int, None)},
    "verify": {"seed": (_int, 20240601), "scale": (_float, 1.0)},
}


@dataclass(frozen=True)
class RunConfig:
    """Parsed configuration: ``values[section][key]`` for keys that are set or defaulted."""

    values: dict
    base_dir: str = "."

    def has(self, section: str) -> bool:
        return section in self.values

    def get(self, section: str, key: str, default: Any = None) -> Any:
        return self.values.get(section, {}).get(key, default)

    def require(self, section: str, key: str) -> Any:
        v = self.get(section, key)
        if v is None:
            raise ConfigError(f"{section}.{key}", "required value is missing")
        return v

    def path(self, section: str, key: str) -> Path:
        p = Path(self.require(section, key))
        return p if p.is_absolute() else Path(self.base_dir) / p

    def canonical(self) -> str:
        lines = []
        for sec, keys in SCHEMA.items():
            if sec not in self.values:
                continue
            lines.append(f"[{sec}]")
            for key, (parser, _) in keys.items():
                v = self.values[sec].get(key)
                if v is not None:
                    lines.append(f"{key} = {_FMT[parser](v)}")
            lines.append("")
        return "\n".join(lines).rstrip("\n") + "\n"

    # builders ---------------------------------------------------------------

    def surface(self) -> VolSurface:
        fam = self.require("surface", "family")
        self.require("surface", "alpha")
        params = {k: v for k, v in self.values["surface"].items() if k != "family" and v is not None}
        return _wrap("surface", lambda: make_surface(fam, **params))

    def grid(self) -> PathGrid:
        dt = self.require("engine", "dt")
        n = self.require("engine", "n_steps")
        return _wrap("engine", lambda: PathGrid(self.get("market", "V", 0.0) or 0.0, dt, n))

    def cov_params(self) -> CovParams:
        a, b = self.require("cov", "alpha"), self.require("cov", "beta")
        return _wrap("cov", lambda: CovParams(a, b, self.get("cov", "domain_end")))


def _wrap(section: str, fn):
    try:
        return fn()
    except ConfigError:
        raise
    except QVLabError as exc:
        msg = str(exc)
        key = msg.split(" ", 1)[0]
        field_ = key if key in SCHEMA[section] else None
        raise ConfigError(f"{section}.{field_}" if field_ else section, msg) from None


def _check_ranges(values: dict) -> None:
    def positive(sec, key):
        v = values.get(sec, {}).get(key)
        if v is not None and not v > 0:
            raise ConfigError(f"{sec}.{key}", f"must be > 0, got {v}")

    for sec, key in [("market", "s0"), ("market", "H"), ("engine", "dt"), ("engine", "n_steps"),
                     ("engine", "n_paths"), ("ivsurface", "n_paths"), ("ivsurface", "dt"),
                     ("forecast", "T"), ("forecast", "z"), ("pv", "n_samples"), ("verify", "scale"),
                     ("qv", "theta"), ("qv", "gamma"), ("qv", "T0"), ("forecast", "gamma")]:
        positive(sec, key)
    for sec, key in [("engine", "seed"), ("pv", "seed"), ("verify", "seed")]:
        v = values.get(sec, {}).get(key)
        if v is not None and v < 0:
            raise ConfigError(f"{sec}.{key}", "must be >= 0")
    m = values.get("engine", {}).get("measure")
    if m is not None and m not in ("risk_neutral", "physical"):
        raise ConfigError("engine.measure", "must be risk_neutral or physical")
    v = values.get("forecast", {}).get("variant")
    if v is not None and v not in ("limit", "corrected"):
        raise ConfigError("forecast.variant", "must be limit or corrected")
    s = values.get("cov", {}).get("scheme")
    if s is not None and s not in ("canonical", "euler"):
        raise ConfigError("cov.scheme", "must be canonical or euler")


def parse_config(text: str, base_dir: str | Path = ".") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
    cp.optionxform = str  # keys are case-sensitive (T, T0, V, H)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("config", f"malformed INI: {exc}") from None
    values: dict[str, dict[str, Any]] = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(sec, "unknown section")
        schema = SCHEMA[sec]
        out = {k: d for k, (_, d) in schema.items()}
        for key, raw in cp.items(sec):
            if key not in schema:
                raise ConfigError(f"{sec}.{key}", "unknown key")
            try:
                out[key] = schema[key][0](raw)
            except ValueError as exc:
                raise ConfigError(f"{sec}.{key}", f"invalid value {raw!r} ({exc})") from None
        values[sec] = out
    _check_ranges(values)
    cfg = RunConfig(values, str(base_dir))
    if cfg.has("surface"):
        cfg.surface()
    if cfg.has("cov") and cfg.get("cov", "alpha") is not None and cfg.get("cov", "beta") is not None:
        cfg.cov_params()
    return cfg


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("config", f"cannot read {p}: {exc.strerror}") from None
    return parse_config(text, p.parent)


CONFIG_MARK = "--- config ---"


def artifact_preamble(command: str, cfg: RunConfig, seed: int | None) -> str:
    """Comment block embedded at the top of CSV artifacts."""
    return f"qvlab {command}\nseed = {seed}\n{CONFIG_MARK}\n{cfg.canonical()}"


def config_from_artifact(path: str | Path) -> RunConfig:
    """Recover the resolved configuration embedded in a CSV or JSON artifact."""
    p = Path(path)
    text = p.read_text(encoding="utf-8")
    if p.suffix == ".json":
        return parse_config(json.loads(text)["config"], p.parent)
    lines = []
    inside = False
    for ln in text.splitlines():
        if not ln.startswith("#"):
            break
        body = ln[2:] if ln.startswith("# ") else ln[1:]
        if inside:
            lines.append(body)
        elif body == CONFIG_MARK:
            inside = True
    if not inside:
        raise ConfigError("config", f"no embedded configuration in {p}")
    return parse_config("\n".join(lines), p.parent)
