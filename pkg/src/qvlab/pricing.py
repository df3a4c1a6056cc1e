"""Black-Scholes formulas, Monte Carlo option pricing and arbitrage audits."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import ndtr
from scipy.stats import norm

from .engine import DriftSpec, EnsembleKind, Measure, PathEnsemble, PathGrid, simulate_price
from .errors import DomainError, MisuseError, OutOfBandError, RangeError
from .surfaces import QVParams, VolSurface, time_average_envelope


def _kappa_from_constant_family(alpha: float = 0.04) -> float:
    # Constant(alpha): QV/T has discretization sd alpha*sqrt(2 dt/T); a variance
    # call struck one sd above alpha is worth sd * (phi(1) - (1 - Phi(1))).
    return alpha * math.sqrt(2.0) * (norm.pdf(1.0) - norm.sf(1.0))


#: Zero-price tolerance coefficient for variance calls: tolerance = KAPPA * sqrt(dt / T).
KAPPA = float(round(_kappa_from_constant_family(), 6))


class OptionKind(str, enum.Enum):
    CALL = "call"
    PUT = "put"
    FORWARD = "forward"
    VARIANCE_CALL = "variance_call"
    VARIANCE_PUT = "variance_put"

    @property
    def is_variance(self) -> bool:
        return self in (OptionKind.VARIANCE_CALL, OptionKind.VARIANCE_PUT)


@dataclass(frozen=True)
class OptionSpec:
    kind: OptionKind
    strike: float
    expiry: float

    def __post_init__(self):
        object.__setattr__(self, "kind", OptionKind(self.kind))
        if not self.expiry > 0:
            raise DomainError(f"expiry must be > 0, got {self.expiry}")
        if self.kind.is_variance:
            if self.strike < 0:
                raise DomainError("variance strike must be >= 0")
        elif self.kind is OptionKind.FORWARD:
            if self.strike < 0:
                raise DomainError("forward delivery price must be >= 0")
        elif not self.strike > 0:
            raise DomainError("strike must be > 0")

    def payoff(self, s_T: np.ndarray | None = None, qv_avg: np.ndarray | None = None) -> np.ndarray:
        k = self.kind
        if k is OptionKind.CALL:
            return np.maximum(s_T - self.strike, 0.0)
        if k is OptionKind.PUT:
            return np.maximum(self.strike - s_T, 0.0)
        if k is OptionKind.FORWARD:
            return s_T - self.strike
        if k is OptionKind.VARIANCE_CALL:
            return np.maximum(qv_avg - self.strike, 0.0)
        return np.maximum(self.strike - qv_avg, 0.0)


@dataclass(frozen=True)
class PriceEstimate:
    mean: float
    std_err: float
    n_paths: int


@dataclass(frozen=True)
class ImpliedVolSurfacePoint:
    expiry_T: float
    strike: float
    iv: float
    iv2: float
    price: float
    std_err: float
    iv2_std_err: float
    flag: str = ""


@dataclass(frozen=True)
class AuditRecord:
    check: str
    margin: float
    passed: bool

    def to_json(self) -> dict:
        return {"check": self.check, "margin": self.margin, "pass": self.passed}


def _check_bs(s, strike, sigma, tau):
    if not (s > 0 and strike > 0):
        raise DomainError("spot and strike must be > 0")
    if not sigma > 0:
        raise DomainError("volatility must be > 0")
    if not tau > 0:
        raise DomainError("time to expiry must be > 0")


def bs_price(s: float, strike: float, r: float, sigma: float, tau: float,
             kind: OptionKind | str = OptionKind.CALL) -> float:
    """Black-Scholes value of a European call or put."""
    _check_bs(s, strike, sigma, tau)
    kind = OptionKind(kind)
    sd = sigma * math.sqrt(tau)
    disc_k = strike * math.exp(-r * tau)
    d1 = (math.log(s / strike) + r * tau) / sd + sd / 2
    d2 = d1 - sd
    if kind is OptionKind.CALL:
        return float(s * ndtr(d1) - disc_k * ndtr(d2))
    if kind is OptionKind.PUT:
        return float(disc_k * ndtr(-d2) - s * ndtr(-d1))
    raise DomainError(f"bs_price prices calls and puts, not {kind.value}")


def bs_vega(s: float, strike: float, r: float, sigma: float, tau: float) -> float:
    sd = sigma * math.sqrt(tau)
    d1 = (math.log(s / strike) + r * tau) / sd + sd / 2
    return float(s * norm.pdf(d1) * math.sqrt(tau))


def no_arbitrage_band(s: float, strike: float, r: float, tau: float,
                      kind: OptionKind | str) -> tuple[float, float]:
    disc_k = strike * math.exp(-r * tau)
    if OptionKind(kind) is OptionKind.CALL:
        return max(s - disc_k, 0.0), s
    return max(disc_k - s, 0.0), disc_k


def bs_implied_vol(price: float, s: float, strike: float, r: float, tau: float,
                   kind: OptionKind | str = OptionKind.CALL) -> float:
    """Invert :func:`bs_price` by bracketed bisection followed by a Newton polish."""
    kind = OptionKind(kind)
    if kind not in (OptionKind.CALL, OptionKind.PUT):
        raise DomainError("implied volatility is defined for calls and puts")
    _check_bs(s, strike, 1.0, tau)
    lo_b, hi_b = no_arbitrage_band(s, strike, r, tau, kind)
    if not price > lo_b:
        raise OutOfBandError(f"price {price} is at or below the lower no-arbitrage bound {lo_b}", "lower")
    if not price < hi_b:
        raise OutOfBandError(f"price {price} is at or above the upper no-arbitrage bound {hi_b}", "upper")

    lo, hi = 0.0, 1.0
    while bs_price(s, strike, r, hi, tau, kind) < price:
        lo, hi = hi, 2 * hi
        if hi > 1e4:
            raise OutOfBandError(f"price {price} needs a volatility above 1e4", "upper")
    while hi - lo > 1e-12:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if bs_price(s, strike, r, mid, tau, kind) < price:
            lo = mid
        else:
            hi = mid
    sigma = 0.5 * (lo + hi)
    for _ in range(3):
        vega = bs_vega(s, strike, r, sigma, tau)
        if vega <= 0:
            break
        step = (bs_price(s, strike, r, sigma, tau, kind) - price) / vega
        cand = sigma - step
        # keep the polish inside the bisection bracket
        if not lo <= cand <= hi or step == 0:
            break
        sigma = cand
    return sigma


def forward_price(s0: float, strike: float, r: float, tau: float) -> float:
    """Arbitrage-free value today of a forward with delivery price ``strike``."""
    if not s0 > 0 or strike < 0 or not tau > 0:
        raise DomainError("need s0 > 0, strike >= 0, tau > 0")
    return s0 - strike * math.exp(-r * tau)


def _require_risk_neutral(ens: PathEnsemble) -> None:
    if ens.kind is not EnsembleKind.PRICE or ens.measure is not Measure.RISK_NEUTRAL:
        raise MisuseError("pricing needs a risk-neutral price ensemble")


def discounted_payoffs(ens: PathEnsemble, option: OptionSpec, r: float) -> np.ndarray:
    _require_risk_neutral(ens)
    t0 = ens.grid.t_start
    t1 = t0 + option.expiry
    if t1 > ens.grid.t_end * (1 + 1e-12):
        raise RangeError(f"expiry {option.expiry} is beyond the ensemble horizon")
    disc = math.exp(-r * option.expiry)
    if option.kind.is_variance:
        return disc * option.payoff(qv_avg=ens.qv_between(t0, t1) / option.expiry)
    return disc * option.payoff(s_T=ens.at(t1))


def _estimate(x: np.ndarray) -> PriceEstimate:
    n = x.size
    se = float(np.std(x, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return PriceEstimate(float(np.mean(x)), se, n)


def mc_price(ens: PathEnsemble, option: OptionSpec, r: float) -> PriceEstimate:
    """Average discounted payoff over a risk-neutral ensemble."""
    return _estimate(discounted_payoffs(ens, option, r))


def mc_price_controlled(ens: PathEnsemble, option: OptionSpec, r: float) -> PriceEstimate:
    """Monte Carlo price with the discounted terminal price as a martingale control variate.

    The control ``e^(-rT) S_T`` has known mean ``s0``; its coefficient is the
    sample regression slope of the payoff on the control. Deep in the money
    the slope is near one and the estimate tracks put-call parity, so it stays
    inside the no-arbitrage band where the plain average may not.
    """
    y = discounted_payoffs(ens, option, r)
    if option.kind.is_variance:
        return _estimate(y)
    s0 = float(ens.at(ens.grid.t_start)[0])
    f = math.exp(-r * option.expiry) * ens.at(ens.grid.t_start + option.expiry) - s0
    fc = f - f.mean()
    var_f = float(fc @ fc)
    b = float(fc @ (y - y.mean())) / var_f if var_f > 0 else 0.0
    return _estimate(y - b * f)


@dataclass(frozen=True)
class ParityAudit:
    strike: float
    expiry: float
    max_path_residual: float
    aggregate_residual: float
    scale: float

    @property
    def passed(self) -> bool:
        tol = 1e-12 * self.scale
        return self.max_path_residual <= tol and self.aggregate_residual <= tol


def parity_audit(ens: PathEnsemble, strike: float, expiry: float, r: float) -> ParityAudit:
    """Pathwise check of ``(S-C)+ - (C-S)+ = S - C`` and of its discounted average."""
    _require_risk_neutral(ens)
    call = discounted_payoffs(ens, OptionSpec(OptionKind.CALL, strike, expiry), r)
    put = discounted_payoffs(ens, OptionSpec(OptionKind.PUT, strike, expiry), r)
    fwd = discounted_payoffs(ens, OptionSpec(OptionKind.FORWARD, strike, expiry), r)
    s_T = ens.at(ens.grid.t_start + expiry)
    path_res = np.maximum(s_T - strike, 0) - np.maximum(strike - s_T, 0) - (s_T - strike)
    agg = call.mean() - put.mean() - fwd.mean()
    scale = max(float(ens.s0 or 0.0), strike, float(np.max(s_T)))
    return ParityAudit(strike, expiry, float(np.max(np.abs(path_res))), float(abs(agg)), scale)


def variance_audit_tolerance(dt: float, T: float) -> float:
    return KAPPA * math.sqrt(dt / T)


@dataclass(frozen=True)
class VarianceAudit:
    call: PriceEstimate
    put: PriceEstimate
    call_strike: float
    put_strike: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.call.mean <= self.tolerance and self.put.mean <= self.tolerance


def variance_strike_zero_audit(ens: PathEnsemble, qv: QVParams, expiry: float, r: float) -> VarianceAudit:
    """Variance call struck at ``alpha + theta/T**gamma`` and put at ``alpha - theta/T**gamma``.

    Both must be worth zero up to the discretization tolerance
    ``KAPPA * sqrt(dt / T)``.
    """
    if expiry < qv.T0:
        raise DomainError(f"expiry {expiry} is below the onset horizon T0 = {qv.T0}")
    band = qv.theta / expiry ** qv.gamma
    call = mc_price(ens, OptionSpec(OptionKind.VARIANCE_CALL, qv.alpha + band, expiry), r)
    put_strike = max(qv.alpha - band, 0.0)
    put = mc_price(ens, OptionSpec(OptionKind.VARIANCE_PUT, put_strike, expiry), r)
    return VarianceAudit(call, put, qv.alpha + band, put_strike,
                         variance_audit_tolerance(ens.grid.dt, expiry))


def monotonicity_audit(ens: PathEnsemble, strikes: Sequence[float], expiry: float, r: float) -> AuditRecord:
    """Call prices must not increase and put prices must not decrease along a strike ladder."""
    ks = sorted(strikes)
    calls = [mc_price(ens, OptionSpec(OptionKind.CALL, k, expiry), r).mean for k in ks]
    puts = [mc_price(ens, OptionSpec(OptionKind.PUT, k, expiry), r).mean for k in ks]
    margin = min([calls[i] - calls[i + 1] for i in range(len(ks) - 1)]
                 + [puts[i + 1] - puts[i] for i in range(len(ks) - 1)] or [0.0])
    return AuditRecord("strike_monotonicity", float(margin), bool(margin >= 0))


def martingale_audit(ens: PathEnsemble, r: float) -> list[AuditRecord]:
    """Discounted price mean against ``s0`` at every recorded time, in units of 3 standard errors."""
    _require_risk_neutral(ens)
    out = []
    for j, t in enumerate(ens.times):
        if j == 0:
            continue
        x = math.exp(-r * (t - ens.grid.t_start)) * ens.values[:, j]
        est = _estimate(x)
        margin = 3 * est.std_err - abs(est.mean - ens.s0)
        out.append(AuditRecord(f"martingale@t={t:.6g}", margin, bool(margin >= 0)))
    return out


@dataclass(frozen=True, eq=False)
class IVSurface:
    points: list[ImpliedVolSurfacePoint]
    s0: float
    r: float
    n_paths: int
    seed: int
    dt: float


def implied_vol_surface(surface: VolSurface, s0: float, r: float, strikes: Sequence[float],
                        expiries: Sequence[float], n_paths: int, seed: int, *,
                        dt: float | None = None, threads: int | None = None) -> IVSurface:
    """Implied volatilities of Monte Carlo call prices on one common risk-neutral ensemble.

    Prices use :func:`mc_price_controlled`: deep in-the-money calls have a time
    value far below the plain Monte Carlo error, and the martingale control
    removes the error they share with the underlying. Points whose price still
    falls outside the no-arbitrage band are flagged ``"lower"`` or ``"upper"``
    and carry ``nan`` volatilities.
    """
    if not strikes or not expiries:
        raise DomainError("strikes and expiries must be non-empty")
    exps = sorted(float(e) for e in expiries)
    dt = dt if dt is not None else exps[0] / 50
    grid = PathGrid.covering(exps[-1], dt)
    ens = simulate_price(surface, DriftSpec.risk_neutral(r), s0, grid, n_paths, seed,
                         record=exps, threads=threads, label="ivsurface")
    points = []
    for T in exps:
        for k in sorted(float(k) for k in strikes):
            est = mc_price_controlled(ens, OptionSpec(OptionKind.CALL, k, T), r)
            try:
                iv = bs_implied_vol(est.mean, s0, k, r, T, OptionKind.CALL)
            except OutOfBandError as exc:
                points.append(ImpliedVolSurfacePoint(T, k, math.nan, math.nan, est.mean,
                                                     est.std_err, math.nan, exc.bound))
                continue
            vega = bs_vega(s0, k, r, iv, T)
            iv2_se = 2 * iv * est.std_err / vega if vega > 0 else math.inf
            points.append(ImpliedVolSurfacePoint(T, k, iv, iv * iv, est.mean, est.std_err, iv2_se))
    return IVSurface(points, s0, r, n_paths, seed, dt)


def sandwich_report(ivs: IVSurface, surface: VolSurface, V: float = 0.0,
                    n_se: float = 3.0) -> list[AuditRecord]:
    """Implied variance against the time-average envelope, with ``n_se`` MC standard errors of slack."""
    out = []
    for p in ivs.points:
        name = f"sandwich@T={p.expiry_T:.6g},K={p.strike:.6g}"
        if p.flag:
            out.append(AuditRecord(name, math.nan, False))
            continue
        env = time_average_envelope(surface, V, p.expiry_T)
        slack = n_se * p.iv2_std_err
        margin = min(p.iv2 - (env.lower - slack), (env.upper + slack) - p.iv2)
        out.append(AuditRecord(name, float(margin), bool(margin >= 0)))
    return out


def iv2_spread(ivs: IVSurface, expiry: float) -> float:
    vals = [p.iv2 for p in ivs.points if abs(p.expiry_T - expiry) < 1e-12 and not p.flag]
    return float(max(vals) - min(vals)) if vals else math.nan


@dataclass(frozen=True)
class FlatteningRow:
    expiry: float
    included: bool
    worst_margin: float | None
    passed: bool | None


def flattening_report(ivs: IVSurface, surface: VolSurface, qv: QVParams | None = None,
                      n_se: float = 3.0) -> list[FlatteningRow]:
    """Per expiry ``T >= T0``: ``|iv2 - alpha| <= theta/T**gamma + n_se * se(iv2)`` for every strike."""
    qv = qv if qv is not None else surface.qv_params()
    rows = []
    for T in sorted({p.expiry_T for p in ivs.points}):
        if T < qv.T0:
            rows.append(FlatteningRow(T, False, None, None))
            continue
        margins = []
        for p in ivs.points:
            if p.expiry_T != T:
                continue
            if p.flag:
                margins.append(-math.inf)
                continue
            margins.append(qv.theta / T ** qv.gamma + n_se * p.iv2_std_err - abs(p.iv2 - qv.alpha))
        worst = float(min(margins))
        rows.append(FlatteningRow(T, True, worst, worst >= 0))
    return rows


def write_ivsurface_csv(ivs: IVSurface, path: str | Path, preamble: str = "") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in preamble.splitlines():
            fh.write(f"# {line}\n")
        fh.write("expiry,strike,price,std_err,iv,iv2,flag\n")
        for p in ivs.points:
            fh.write(f"{p.expiry_T:.17g},{p.strike:.17g},{p.price:.17g},{p.std_err:.17g},"
                     f"{p.iv:.17g},{p.iv2:.17g},{p.flag}\n")


def audits_to_json(records: Iterable[AuditRecord]) -> list[dict]:
    return [r.to_json() for r in records]
