"""Gaussian forecasts of scaled log returns, log-normal price forecasts and portfolio present values.

Times are scaled by the horizon ``T``: conditioning on the scaled centered
return ``x = X(zT) / sqrt(T)``, the forecast describes ``X((z + t_i) T) / sqrt(T)``.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats
from scipy.special import ndtr

from . import rng
from .engine import CovParams, ConditionalSamples
from .errors import (ConfigurationError, ConsistencyError, DomainError, ParameterError,
                     ParseError, RegimeError, SingularError)
from .pricing import OptionKind, OptionSpec


class ForecastVariant(str, enum.Enum):
    LIMIT = "limit"
    CORRECTED_GAMMA_GT1 = "corrected_gamma_gt1"


@dataclass(frozen=True, eq=False)
class ForecastDistribution:
    times: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    variant: ForecastVariant
    conditioning: tuple[float, float, float | None]

    def to_json(self) -> dict:
        z, x, T = self.conditioning
        return {"variant": self.variant.value, "z": z, "x": x, "T": T,
                "times": self.times.tolist(), "mean": self.mean.tolist(),
                "cov": self.cov.tolist()}


def _check_times(times, z):
    ts = np.asarray(times, dtype=float)
    if ts.ndim != 1 or ts.size == 0:
        raise DomainError("times must be a non-empty 1-d sequence")
    if np.any(ts <= 0) or np.any(np.diff(ts) < 0):
        raise DomainError("times must be positive and sorted")
    if z == 0:
        raise SingularError("conditioning at z = 0 carries no information")
    if not z > 0:
        raise DomainError("z must be > 0")
    return ts


def _limit_cov(ts, z, alpha):
    lo, hi = np.minimum.outer(ts, ts), np.maximum.outer(ts, ts)
    return alpha * lo * (z + hi) / z


def limit_forecast(x: float, z: float, times: Sequence[float], alpha: float,
                   T: float | None = None) -> ForecastDistribution:
    """``psi_i = (z + t_i)/z * x`` and ``Theta_ij = alpha t_i (z + t_j)/z`` for ``t_i <= t_j``."""
    ts = _check_times(times, z)
    if not alpha > 0:
        raise ParameterError("alpha must be > 0")
    return ForecastDistribution(ts, (z + ts) / z * x, _limit_cov(ts, z, alpha),
                                ForecastVariant.LIMIT, (float(z), float(x), T))


def corrected_forecast(x: float, z: float, times: Sequence[float], cov: CovParams, T: float,
                       gamma: float) -> ForecastDistribution:
    """Limit forecast with its ``1/T`` correction when ``gamma > 1``.

    For ``gamma <= 1`` the correction only changes the error order, so the
    limit forecast is returned.
    """
    ts = _check_times(times, z)
    if not T > 0:
        raise DomainError("T must be > 0")
    if gamma <= 1:
        return limit_forecast(x, z, ts, cov.alpha, T)
    if not cov.beta > 0:
        raise ParameterError("the corrected forecast needs beta > 0")
    a, b = cov.alpha, cov.beta
    c = a / (b * z * z * T)
    mean = ((z + ts) / z - c * ts) * x
    theta = _limit_cov(ts, z, a) - a * c * np.outer(ts, ts)
    eig = np.linalg.eigvalsh(theta)
    if np.any(np.diag(theta) <= 0) or eig.min() < -1e-12 * max(1.0, float(np.trace(theta))):
        raise RegimeError(f"corrected covariance is not positive semidefinite at T={T}; "
                          "use exact conditional simulation instead")
    return ForecastDistribution(ts, mean, theta, ForecastVariant.CORRECTED_GAMMA_GT1,
                                (float(z), float(x), float(T)))


@dataclass(frozen=True, eq=False)
class PriceForecast:
    """Joint Gaussian law of ``log S`` at offsets ``t_i T`` after the conditioning time."""

    offsets: np.ndarray
    log_mean: np.ndarray
    log_cov: np.ndarray
    s_z: float

    def to_json(self) -> dict:
        return {"offsets": self.offsets.tolist(), "log_mean": self.log_mean.tolist(),
                "log_cov": self.log_cov.tolist(), "s_z": self.s_z}


def _as_lambda0(lambda0) -> Callable[[float], float]:
    if lambda0 is None:
        return lambda t: 0.0
    if callable(lambda0):
        return lambda0
    m = float(lambda0)
    return lambda t: m * t


def lognormal_price_forecast(s0: float, s_z: float, lambda0, forecast: ForecastDistribution,
                             T: float | None = None) -> PriceForecast:
    """Map a return forecast to log-normal prices.

    ``lambda0`` is the mean-log-return function (callable, a constant rate, or
    ``None`` for zero). The forecast's ``x`` must equal
    ``(log(s_z/s0) - lambda0(zT)) / sqrt(T)``.
    """
    if not (s0 > 0 and s_z > 0):
        raise DomainError("prices must be > 0")
    z, x, T_f = forecast.conditioning
    T = T if T is not None else T_f
    if T is None or not T > 0:
        raise ConfigurationError("the horizon T is needed to map scaled returns to prices")
    if T_f is not None and abs(T - T_f) > 1e-12 * T:
        raise ConsistencyError(f"T={T} differs from the forecast's T={T_f}")
    lam0 = _as_lambda0(lambda0)
    sq = math.sqrt(T)
    x_implied = (math.log(s_z / s0) - lam0(z * T)) / sq
    if abs(x_implied - x) > 1e-9 * max(1.0, abs(x)):
        raise ConsistencyError(f"forecast conditioned on x={x} but prices imply x={x_implied}")
    abs_t = (z + forecast.times) * T
    log_mean = math.log(s0) + np.array([lam0(t) for t in abs_t]) + sq * forecast.mean
    return PriceForecast(forecast.times * T, log_mean, T * forecast.cov, float(s_z))


def short_horizon_forecast(s_z: float, m_bar: float, alpha: float, t: float, T: float) -> PriceForecast:
    """Short-window form: ``log S`` increment over ``tT`` is normal with mean
    ``m_bar - alpha t T / 2`` and variance ``alpha t T``; ``m_bar`` is the
    user's expected integrated return over the window."""
    if not (s_z > 0 and alpha > 0 and t > 0 and T > 0):
        raise DomainError("need s_z, alpha, t, T > 0")
    v = alpha * t * T
    return PriceForecast(np.array([t * T]), np.array([math.log(s_z) + m_bar - v / 2]),
                         np.array([[v]]), float(s_z))


class Instrument(str, enum.Enum):
    SHARE = "share"
    OPTION = "option"


@dataclass(frozen=True)
class Position:
    quantity: float
    instrument: Instrument
    option: OptionSpec | None = None
    horizon: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "instrument", Instrument(self.instrument))
        if self.instrument is Instrument.OPTION:
            if self.option is None:
                raise ConfigurationError("option position needs an OptionSpec")
            if self.option.kind.is_variance:
                raise ConfigurationError("variance options need a path, not a price forecast")
        elif self.horizon is None or not self.horizon > 0:
            raise ConfigurationError("share position needs a positive valuation horizon")

    @property
    def payoff_time(self) -> float:
        return self.option.expiry if self.instrument is Instrument.OPTION else self.horizon

    def payoff(self, s: np.ndarray) -> np.ndarray:
        if self.instrument is Instrument.SHARE:
            return s
        return self.option.payoff(s_T=s)


@dataclass(frozen=True)
class Portfolio:
    positions: tuple[Position, ...]

    def __post_init__(self):
        object.__setattr__(self, "positions", tuple(self.positions))
        if not self.positions:
            raise ConfigurationError("portfolio is empty")


class PVMethod(str, enum.Enum):
    MONTE_CARLO = "monte_carlo"
    CLOSED_FORM_CHECK = "closed_form_check"


@dataclass(frozen=True)
class PVReport:
    mean_pv: float
    var_pv: float
    n_samples: int
    method: PVMethod
    std_err: float
    closed_form: float | None = None
    closed_form_pass: bool | None = None

    def to_json(self) -> dict:
        return {"mean_pv": self.mean_pv, "var_pv": self.var_pv, "n_samples": self.n_samples,
                "method": self.method.value, "std_err": self.std_err,
                "closed_form": self.closed_form, "closed_form_pass": self.closed_form_pass}


def lognormal_call_value(log_mean: float, log_var: float, strike: float, r: float, tau: float) -> float:
    """``e^(-r tau) E (S - K)+`` for ``log S ~ N(log_mean, log_var)``."""
    sd = math.sqrt(log_var)
    d1 = (log_mean + log_var - math.log(strike)) / sd
    return math.exp(-r * tau) * (math.exp(log_mean + log_var / 2) * ndtr(d1) - strike * ndtr(d1 - sd))


def _psd_root(cov: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(cov)
    if w.min() < -1e-10 * max(1.0, float(np.abs(w).max())):
        raise RegimeError("forecast covariance is not positive semidefinite")
    return v * np.sqrt(np.clip(w, 0.0, None))


def portfolio_pv(portfolio: Portfolio, forecast: PriceForecast, r: float, n_samples: int,
                 seed: int, label: str = "pv") -> PVReport:
    """Mean and variance of the discounted portfolio payoff under the joint log-normal forecast."""
    if n_samples < 2:
        raise DomainError("n_samples must be >= 2")
    cols = []
    for pos in portfolio.positions:
        hit = np.flatnonzero(np.abs(forecast.offsets - pos.payoff_time)
                             <= 1e-9 * max(1.0, pos.payoff_time))
        if hit.size == 0:
            raise ConfigurationError(f"payoff time {pos.payoff_time} is not in the forecast")
        cols.append(int(hit[0]))
    root = _psd_root(forecast.log_cov)
    Z = rng.substream(seed, 0, label).standard_normal((n_samples, forecast.offsets.size))
    S = np.exp(forecast.log_mean + Z @ root.T)
    pv = np.zeros(n_samples)
    for pos, c in zip(portfolio.positions, cols):
        pv += pos.quantity * math.exp(-r * pos.payoff_time) * pos.payoff(S[:, c])
    mean, var = float(pv.mean()), float(pv.var(ddof=1))
    se = math.sqrt(var / n_samples)
    single = portfolio.positions[0] if len(portfolio.positions) == 1 else None
    if single is not None and single.instrument is Instrument.OPTION and single.option.kind is OptionKind.CALL:
        c = cols[0]
        cf = single.quantity * lognormal_call_value(float(forecast.log_mean[c]), float(forecast.log_cov[c, c]),
                                                    single.option.strike, r, single.payoff_time)
        return PVReport(mean, var, n_samples, PVMethod.CLOSED_FORM_CHECK, se, cf,
                        bool(abs(mean - cf) <= 3 * se))
    return PVReport(mean, var, n_samples, PVMethod.MONTE_CARLO, se)


def read_portfolio_csv(path: str | Path) -> Portfolio:
    """``quantity,kind,strike,expiry``; ``kind`` is share, call, put or forward.

    For a share, ``expiry`` is the valuation horizon and ``strike`` is ignored.
    """
    positions = []
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [(n, ln) for n, ln in enumerate(fh, start=1)
                 if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines or [c.strip() for c in lines[0][1].split(",")] != ["quantity", "kind", "strike", "expiry"]:
        raise ParseError("expected header 'quantity,kind,strike,expiry'", lines[0][0] if lines else 1)
    for lineno, raw in lines[1:]:
        parts = [p.strip() for p in next(csv.reader([raw]))]
        if len(parts) != 4:
            raise ParseError(f"expected 4 fields, got {len(parts)}", lineno)
        try:
            qty = float(parts[0])
            expiry = float(parts[3])
            strike = float(parts[2]) if parts[2] else 0.0
        except ValueError:
            raise ParseError(f"non-numeric field in {raw.strip()!r}", lineno) from None
        kind = parts[1].lower()
        try:
            if kind == "share":
                positions.append(Position(qty, Instrument.SHARE, horizon=expiry))
            elif kind in ("call", "put", "forward"):
                positions.append(Position(qty, Instrument.OPTION, OptionSpec(OptionKind(kind), strike, expiry)))
            else:
                raise ParseError(f"unknown instrument kind {parts[1]!r}", lineno)
        except (DomainError, ConfigurationError) as exc:
            raise ParseError(str(exc), lineno) from None
    return Portfolio(tuple(positions))


@dataclass(frozen=True, eq=False)
class CLTAudit:
    ks: np.ndarray
    critical: float
    mean_gap_se: np.ndarray
    cov_gap_se: np.ndarray
    n: int

    @property
    def ks_pass(self) -> bool:
        return bool(np.all(self.ks < self.critical))

    @property
    def moments_pass(self) -> bool:
        return bool(np.all(self.mean_gap_se <= 3) and np.all(self.cov_gap_se <= 3))

    @property
    def passed(self) -> bool:
        return self.ks_pass and self.moments_pass

    def to_json(self) -> dict:
        return {"ks": self.ks.tolist(), "critical": self.critical,
                "mean_gap_se": self.mean_gap_se.tolist(), "cov_gap_se": self.cov_gap_se.tolist(),
                "n": self.n, "pass": self.passed}


def ks_critical(n: int, level: float = 0.01) -> float:
    return float(stats.kstwo.ppf(1 - level, n))


def clt_audit(samples: ConditionalSamples, forecast: ForecastDistribution) -> CLTAudit:
    """Compare conditional samples of ``X`` at ``(z + t_i) T`` with a scaled-return forecast.

    Marginals are standardized by the forecast and tested against the standard
    normal (two-sided KS at the 1% level); sample means and covariances are
    compared with ``psi`` and ``Theta`` in units of their standard errors.
    """
    z, x, T = forecast.conditioning
    if T is None:
        raise ConfigurationError("forecast lacks the horizon T")
    want = (z + forecast.times) * T
    if samples.horizons.shape != want.shape or not np.allclose(samples.horizons, want, rtol=1e-9):
        raise ConfigurationError("sample horizons do not match the forecast times")
    if abs(samples.condition[0] - z * T) > 1e-9 * z * T or \
            abs(samples.condition[1] - x * math.sqrt(T)) > 1e-9 * max(1.0, abs(x * math.sqrt(T))):
        raise ConfigurationError("samples are conditioned differently from the forecast")
    Y = samples.samples / math.sqrt(T)
    n = Y.shape[0]
    if n < 2:
        raise ConfigurationError("need at least two samples")
    sd = np.sqrt(np.diag(forecast.cov))
    ks = np.array([stats.kstest((Y[:, i] - forecast.mean[i]) / sd[i], "norm").statistic
                   for i in range(Y.shape[1])])
    mean_gap = np.abs(Y.mean(axis=0) - forecast.mean) / (sd / math.sqrt(n))
    D = Y - Y.mean(axis=0)
    prods = D[:, :, None] * D[:, None, :]
    scov = prods.sum(axis=0) / (n - 1)
    cov_se = prods.std(axis=0, ddof=1) / math.sqrt(n)
    cov_gap = np.abs(scov - forecast.cov) / cov_se
    return CLTAudit(ks, ks_critical(n), mean_gap, cov_gap, n)


def to_json(obj) -> str:
    return json.dumps(obj.to_json(), sort_keys=True, indent=2)
