"""Realized quadratic variation, the convergence bound, and its parameter fit."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import optimize

from .engine import PathEnsemble
from .errors import DomainError, InsufficientDataError, ParseError, RangeError
from .surfaces import QVParams, VolSurface, integrated_variance

_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class PricePath:
    """A single price trajectory on a possibly non-uniform grid."""

    times: np.ndarray
    prices: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        p = np.asarray(self.prices, dtype=float)
        if t.shape != p.shape or t.ndim != 1:
            raise DomainError("times and prices must be 1-d arrays of equal length")
        if np.any(np.diff(t) <= 0):
            raise DomainError("times must be strictly increasing")
        if np.any(p <= 0):
            raise DomainError("prices must be > 0")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "prices", p)

    @classmethod
    def from_ensemble(cls, ens: PathEnsemble, i: int) -> "PricePath":
        return cls(ens.times, ens.values[i])


@dataclass(frozen=True)
class QVReport:
    window_start: float
    T: float
    qv: float

    @property
    def time_avg(self) -> float:
        return self.qv / self.T


@dataclass(frozen=True)
class BoundCheck:
    report: QVReport
    passed: bool | None
    skipped: bool
    margin: float | None


@dataclass(frozen=True)
class QVFit:
    alpha_hat: float
    theta_hat: float | None
    gamma_hat: float | None
    residual_rms: float | None
    windows_used: int


def _window_slice(times: np.ndarray, t: float, T: float) -> slice:
    if not T > 0:
        raise DomainError(f"window length must be > 0, got {T}")
    tol = _TOL * max(1.0, abs(t + T))
    if t < times[0] - tol or t + T > times[-1] + tol:
        raise RangeError(f"window [{t}, {t + T}] is outside the path [{times[0]}, {times[-1]}]")
    i0 = int(np.searchsorted(times, t - tol))
    i1 = int(np.searchsorted(times, t + T + tol)) - 1
    if i1 - i0 < 1:
        raise RangeError(f"window [{t}, {t + T}] holds fewer than 2 nodes")
    return slice(i0, i1 + 1)


def realized_qv(path: PricePath, t: float, T: float) -> QVReport:
    """Sum of squared log increments between the nodes lying in ``[t, t+T]``."""
    sl = _window_slice(path.times, t, T)
    inc = np.diff(np.log(path.prices[sl]))
    return QVReport(t, T, float(np.sum(inc * inc)))


def ensemble_qv(ens: PathEnsemble, t: float, T: float) -> np.ndarray:
    """Per-path realized QV over ``[t, t+T]`` using the full simulation grid."""
    return ens.qv_between(t, t + T)


def refinement_diagnostic(path: PricePath, t: float, T: float) -> float:
    """QV on the given grid minus QV on every other node of it (same window)."""
    sl = _window_slice(path.times, t, T)
    lp = np.log(path.prices[sl])
    fine = np.sum(np.diff(lp) ** 2)
    coarse_nodes = lp[::2] if (lp.size - 1) % 2 == 0 else np.append(lp[::2], lp[-1])
    return float(fine - np.sum(np.diff(coarse_nodes) ** 2))


def deterministic_qv_report(surface: VolSurface, V: float, T: float) -> QVReport:
    """Report whose QV is the exact integrated variance of a price-independent surface."""
    return QVReport(V, T, integrated_variance(surface, V, T))


def check_bound(reports: Iterable[QVReport], qv: QVParams) -> list[BoundCheck]:
    """Test ``|time_avg - alpha| <= theta / T**gamma``; windows shorter than ``T0`` are skipped.

    The bound is attained exactly by some families (seasonal at half periods),
    so a few ulps of rounding are tolerated.
    """
    out = []
    for rep in reports:
        if rep.T < qv.T0:
            warnings.warn(f"window T={rep.T} is below T0={qv.T0}; skipped", stacklevel=2)
            out.append(BoundCheck(rep, None, True, None))
            continue
        margin = qv.theta / rep.T ** qv.gamma - abs(rep.time_avg - qv.alpha)
        slack = 8 * np.finfo(float).eps * max(qv.alpha, abs(rep.time_avg))
        out.append(BoundCheck(rep, bool(margin >= -slack), False, margin))
    return out


def fit_qv_params(reports: Sequence[QVReport]) -> QVFit:
    """Fit ``(alpha, theta, gamma)`` of ``time_avg ~ alpha + theta / T**gamma``.

    Level first: alpha is the inverse-T-weighted mean of the time averages in the
    largest-T quartile. Rate second: a straight line through
    ``(log T, log |time_avg - alpha|)`` gives ``-gamma`` and ``log theta``.
    The level estimate still carries the transient of the largest windows, so
    the two-stage result seeds a joint least-squares polish with residuals
    measured relative to the fitted transient; the polish is kept only if it
    lowers the residual.
    """
    reports = list(reports)
    T = np.array([r.T for r in reports], dtype=float)
    ta = np.array([r.time_avg for r in reports], dtype=float)
    distinct = np.unique(T)
    if distinct.size < 4:
        raise InsufficientDataError(f"need at least 4 distinct window lengths, got {distinct.size}")
    if distinct[-1] < 10 * distinct[0] * (1 - 1e-12):
        raise InsufficientDataError("window lengths must span at least one decade")

    top = T >= np.quantile(distinct, 0.75)
    alpha0 = float(np.sum(ta[top] / T[top]) / np.sum(1 / T[top]))
    dev = ta - alpha0
    usable = np.abs(dev) > 64 * np.finfo(float).eps * abs(alpha0)
    if not usable.any():
        return QVFit(alpha0, None, None, None, 0)
    n_usable = np.unique(T[usable]).size
    if n_usable < 4:
        raise InsufficientDataError(f"only {n_usable} window lengths deviate measurably from alpha")
    lx, ly = np.log(T[usable]), np.log(np.abs(dev[usable]))
    slope, icpt = np.polyfit(lx, ly, 1)
    gamma0, theta0 = -float(slope), math.exp(icpt)
    rms0 = float(np.sqrt(np.mean((ly - slope * lx - icpt) ** 2)))
    if gamma0 <= 0:
        return QVFit(alpha0, theta0, None, rms0, int(usable.sum()))

    short = T <= np.median(T)
    sign = 1.0 if np.median(dev[short]) >= 0 else -1.0
    scale = theta0 * T ** -gamma0

    def resid(p):
        a, log_th, g = p
        return (ta - a - sign * math.exp(log_th) * T ** -g) / scale

    x0 = np.array([alpha0, math.log(theta0), gamma0])
    sol = optimize.least_squares(resid, x0, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15,
                                 max_nfev=2000)
    a1, th1, g1 = float(sol.x[0]), math.exp(sol.x[1]), float(sol.x[2])
    if sol.success and a1 > 0 and g1 > 0 and np.sum(sol.fun ** 2) <= np.sum(resid(x0) ** 2):
        d1 = np.abs(ta - a1)
        keep = d1 > 64 * np.finfo(float).eps * a1
        rms = float(np.sqrt(np.mean((np.log(d1[keep]) - np.log(th1) + g1 * np.log(T[keep])) ** 2))) \
            if keep.any() else 0.0
        return QVFit(a1, th1, g1, rms, int(usable.sum()))
    return QVFit(alpha0, theta0, gamma0, rms0, int(usable.sum()))


def ingest_price_csv(path: str | Path) -> PricePath:
    """Read a ``t,price`` CSV; lines starting with ``#`` are ignored."""
    times, prices = [], []
    header_seen = False
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if not header_seen:
                if [c.strip() for c in line.split(",")] != ["t", "price"]:
                    raise ParseError("expected header 't,price'", lineno)
                header_seen = True
                continue
            parts = next(csv.reader([line]))
            if len(parts) != 2:
                raise ParseError(f"expected 2 fields, got {len(parts)}", lineno)
            try:
                t, p = float(parts[0]), float(parts[1])
            except ValueError:
                raise ParseError(f"non-numeric field in {line!r}", lineno) from None
            if not (math.isfinite(t) and math.isfinite(p)):
                raise ParseError("non-finite value", lineno)
            if p <= 0:
                raise ParseError(f"price must be > 0, got {p}", lineno)
            if times and t <= times[-1]:
                raise ParseError(f"time {t} does not increase", lineno)
            times.append(t)
            prices.append(p)
    if not header_seen:
        raise ParseError("empty file", 1)
    if len(times) < 2:
        raise ParseError("need at least two rows")
    return PricePath(np.array(times), np.array(prices))


def write_price_csv(path_obj: PricePath, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t,price\n")
        for t, p in zip(path_obj.times, path_obj.prices):
            fh.write(f"{t:.17g},{p:.17g}\n")


def write_qv_reports_csv(reports: Iterable[QVReport], path: str | Path, preamble: str = "") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in preamble.splitlines():
            fh.write(f"# {line}\n")
        fh.write("window_start,T,qv,time_avg\n")
        for r in reports:
            fh.write(f"{r.window_start:.17g},{r.T:.17g},{r.qv:.17g},{r.time_avg:.17g}\n")
