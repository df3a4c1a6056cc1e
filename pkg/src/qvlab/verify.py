"""Acceptance suites.

Each suite runs one end-to-end experiment at desk scale and returns
:class:`CriterionResult` rows ``{criterion_id, check, measured, bound, pass}``.
``scale`` multiplies path counts (1.0 is the reference size); ``threads`` is
a worker hint that must not change any number.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import rng
from .covmodel import (AutocorrKind, CovarianceModel, empirical_autocorr, empirical_covariance,
                       fit_cov_params, model_covariance, wsm_residual)
from .engine import (CovParams, DriftSpec, PathGrid, simulate_canonical_conditional,
                     simulate_centered_returns, simulate_price)
from .errors import ConfigurationError
from .forecast import (Instrument, Portfolio, Position, clt_audit, corrected_forecast,
                       limit_forecast, lognormal_price_forecast, portfolio_pv)
from .pricing import (OptionKind, OptionSpec, implied_vol_surface, iv2_spread, mc_price,
                      parity_audit, sandwich_report, variance_strike_zero_audit)
from .quadvar import deterministic_qv_report, ensemble_qv, fit_qv_params
from .surfaces import make_surface


@dataclass(frozen=True)
class CriterionResult:
    criterion_id: int
    check: str
    measured: float
    bound: float
    passed: bool

    def to_json(self) -> dict:
        return {"criterion_id": self.criterion_id, "check": self.check,
                "measured": self.measured, "bound": self.bound, "pass": self.passed}


def _n(base: int, scale: float, floor: int = 30) -> int:
    return max(floor, int(round(base * scale)))


def _le(cid, check, measured, bound):
    return CriterionResult(cid, check, float(measured), float(bound), bool(measured <= bound))


def _ge(cid, check, measured, bound):
    return CriterionResult(cid, check, float(measured), float(bound), bool(measured >= bound))


def suite_qv(seed: int, scale: float = 1.0, threads: int | None = None) -> list[CriterionResult]:
    sf = make_surface("constant", alpha=0.04)
    ens = simulate_price(sf, DriftSpec.constant(0.05), 100.0, PathGrid.covering(40, 1e-3),
                         _n(200, scale), seed, record=[5, 10, 20, 40], threads=threads, label="qv")
    out = []
    for T in (5, 10, 20, 40):
        dev = float(np.mean(np.abs(ensemble_qv(ens, 0.0, T) / T - 0.04)))
        if T == 40:
            out.append(_le(1, "mean_abs_dev_T40", dev, 0.002))
    seasonal = make_surface("seasonal", alpha=0.04, a=0.5, omega=2 * math.pi)
    reports = [deterministic_qv_report(seasonal, 0.0, T) for T in (5.25, 10.25, 20.25, 40.25, 80.25)]
    fit = fit_qv_params(reports)
    out.append(_le(1, "seasonal_fit_gamma_gap", abs(fit.gamma_hat - 1.0), 0.1))
    out.append(_le(1, "seasonal_fit_alpha_gap", abs(fit.alpha_hat - 0.04), 0.001))
    return out


def suite_martingale(seed: int, scale: float = 1.0, threads: int | None = None) -> list[CriterionResult]:
    r, s0, T = 0.05, 100.0, 1.0
    ens = simulate_price(make_surface("constant", alpha=0.04), DriftSpec.risk_neutral(r), s0,
                         PathGrid.covering(T, 1 / 250), _n(100_000, scale), seed, record=[T],
                         threads=threads, label="martingale")
    x = math.exp(-r * T) * ens.at(T)
    se = float(np.std(x, ddof=1) / math.sqrt(x.size))
    return [_le(2, "discounted_mean_gap", abs(float(x.mean()) - s0), 3 * se)]


def suite_parity(seed: int, scale: float = 1.0, threads: int | None = None) -> list[CriterionResult]:
    r, s0 = 0.03, 100.0
    strikes, expiries = (80.0, 90.0, 100.0, 110.0, 120.0), (0.25, 0.5, 1.0)
    surfaces = {"constant": make_surface("constant", alpha=0.04),
                "decaying_smile": make_surface("decaying_smile", alpha=0.04, b=0.8, tau=1.0)}
    worst_path, worst_agg = 0.0, 0.0
    for name, sf in surfaces.items():
        ens = simulate_price(sf, DriftSpec.risk_neutral(r), s0, PathGrid.covering(1.0, 1 / 100),
                             _n(10_000, scale), seed, record=expiries, threads=threads,
                             label=f"parity-{name}")
        for T in expiries:
            for k in strikes:
                a = parity_audit(ens, k, T, r)
                worst_path = max(worst_path, a.max_path_residual / a.scale)
                worst_agg = max(worst_agg, a.aggregate_residual / a.scale)
    return [_le(3, "pathwise_residual_over_scale", worst_path, 1e-12),
            _le(3, "aggregate_residual_over_scale", worst_agg, 1e-12)]


def suite_variance(seed: int, scale: float = 1.0, threads: int | None = None) -> list[CriterionResult]:
    sf = make_surface("seasonal", alpha=0.04, a=0.5, omega=2 * math.pi)
    qv = sf.qv_params(T0=1.0)
    T = 10.0
    ens = simulate_price(sf, DriftSpec.risk_neutral(0.0), 100.0, PathGrid.covering(T, 1e-4),
                         _n(2_000, scale), seed, record=[T], threads=threads, label="variance")
    audit = variance_strike_zero_audit(ens, qv, T, 0.0)
    viol = mc_price(ens, OptionSpec(OptionKind.VARIANCE_CALL, qv.alpha - qv.theta / T, T), 0.0)
    return [_le(4, "call_at_upper_strike", audit.call.mean, audit.tolerance),
            _le(4, "put_at_lower_strike", audit.put.mean, audit.tolerance),
            _ge(4, "violation_call_at_lower_strike", viol.mean, 10 * audit.tolerance)]


def suite_ivsurface(seed: int, scale: float = 1.0, threads: int | None = None) -> list[CriterionResult]:
    sf = make_surface("decaying_smile", alpha=0.04, a=0.0, b=0.8, tau=1.0)
    ivs = implied_vol_surface(sf, 100.0, 0.0, [80, 90, 100, 110, 120], [0.25, 1, 5, 25],
                              _n(200_000, scale), seed, dt=0.005, threads=threads)
    flags = sum(1 for p in ivs.points if p.flag)
    sw = sandwich_report(ivs, sf, 0.0, n_se=3.0)
    worst = min(a.margin for a in sw) if flags == 0 else -math.inf
    ratio = iv2_spread(ivs, 25) / iv2_spread(ivs, 0.25)
    return [_le(5, "flagged_points", flags, 0),
            _ge(5, "worst_sandwich_margin", worst, 0.0),
            _le(5, "spread_ratio_T25_over_T0.25", ratio, 0.1)]


def suite_cov(seed: int, scale: float = 1.0, threads: int | None = None) -> list[CriterionResult]:
    cov = CovParams(0.04, 0.01)
    sf = make_surface("constant", alpha=0.04)
    model = CovarianceModel.linear(cov)
    ens = simulate_centered_returns(cov, sf, PathGrid(0.0, 1.0, 13), _n(100_000, scale), seed,
                                    threads=threads, label="cov")
    times = [1.0, 2.0, 4.0, 8.0]
    out = []
    for z in (0.0, 5.0):
        emp = empirical_covariance(ens, z, times)
        exact = model.matrix(times, z)
        out.append(_le(6, f"max_entry_gap_se_z{z:g}", float(np.max(np.abs(emp.matrix - exact) / emp.std_err_matrix)), 3.0))
        fit = fit_cov_params(emp, lam=model.lambda_fn)
        out.append(_le(6, f"fit_alpha_gap_se_z{z:g}", abs(fit.params.alpha - cov.alpha) / fit.alpha_se, 3.0))
        out.append(_le(6, f"fit_beta_gap_se_z{z:g}", abs(fit.params.beta - cov.beta) / fit.beta_se, 3.0))
    return out


def suite_wsm(seed: int, scale: float = 1.0, threads: int | None = None) -> list[CriterionResult]:
    g = rng.substream(seed, 0, "wsm")
    worst = 0.0
    for _ in range(_n(1_000, scale)):
        alpha = g.uniform(0.005, 0.2)
        beta = g.uniform(0.0, 0.05)
        t1, t2, t3 = np.sort(g.uniform(0.01, 20.0, 3))
        model = CovarianceModel.linear(CovParams(alpha, beta))
        worst = max(worst, abs(wsm_residual(lambda a, b: model_covariance(model, 0.0, a, b), t1, t2, t3)))
    return [_le(7, "max_abs_q", worst, 1e-12)]


def suite_autocorr(seed: int, scale: float = 1.0, threads: int | None = None) -> list[CriterionResult]:
    s, t, u, T = 1.0, 2.0, 1.0, 100.0
    sf = make_surface("constant", alpha=0.04)
    grid = PathGrid(0.0, 1.0, int((t + u + s) * T))
    rec = [t * T, (t + s) * T, (t + u) * T, (t + u + s) * T]
    out = []
    for beta, targets in ((0.01, {AutocorrKind.RETURNS: 0.96, AutocorrKind.SQUARED_RETURNS: 0.92}),
                          (0.0, {AutocorrKind.RETURNS: 0.0, AutocorrKind.SQUARED_RETURNS: 0.0})):
        ens = simulate_centered_returns(CovParams(0.04, beta), sf, grid, _n(10_000, scale), seed,
                                        record=rec, threads=threads, label=f"autocorr-{beta:g}")
        for kind, target in targets.items():
            rep = empirical_autocorr(ens, kind, s, t, u, T)
            out.append(_le(8, f"{kind.value}_beta{beta:g}_gap_se", abs(rep.value - target) / rep.std_err, 3.0))
    return out


def suite_clt(seed: int, scale: float = 1.0, threads: int | None = None) -> list[CriterionResult]:
    cov = CovParams(0.04, 0.01)
    z, t, T, x = 1.0, 1.0, 100.0, 0.1
    fc = corrected_forecast(x, z, [t], cov, T, gamma=2.0)
    smp = simulate_canonical_conditional(cov, make_surface("constant", alpha=0.04),
                                         (z * T, x * math.sqrt(T)), [(z + t) * T],
                                         _n(10_000, scale), seed, threads=threads, label="clt")
    audit = clt_audit(smp, fc)
    y = smp.samples[:, 0] / math.sqrt(T)
    n = y.size
    mean_se = float(np.std(y, ddof=1) / math.sqrt(n))
    d2 = (y - y.mean()) ** 2
    var_se = float(np.std(d2, ddof=1) / math.sqrt(n))
    return [_le(9, "ks_statistic", float(audit.ks[0]), audit.critical),
            _le(9, "mean_gap_se", abs(float(y.mean()) - 0.196) / mean_se, 3.0),
            _le(9, "variance_gap_se", abs(float(np.var(y, ddof=1)) - 0.0784) / var_se, 3.0)]


def suite_pv(seed: int, scale: float = 1.0, threads: int | None = None) -> list[CriterionResult]:
    s0, s_z, r, z, t, T, alpha = 100.0, 105.0, 0.02, 1.0, 1.0, 1.0, 0.04
    x = math.log(s_z / s0) / math.sqrt(T)
    pf = lognormal_price_forecast(s0, s_z, None, limit_forecast(x, z, [t], alpha, T))
    fwd = math.exp(pf.log_mean[0] + pf.log_cov[0, 0] / 2)
    n = _n(100_000, scale)
    call = OptionSpec(OptionKind.CALL, fwd, t * T)
    rep = portfolio_pv(Portfolio((Position(1.0, Instrument.OPTION, call),)), pf, r, n, seed, label="pv-call")
    triple = Portfolio((Position(1.0, Instrument.OPTION, call),
                        Position(-1.0, Instrument.OPTION, OptionSpec(OptionKind.PUT, fwd, t * T)),
                        Position(-1.0, Instrument.OPTION, OptionSpec(OptionKind.FORWARD, fwd, t * T))))
    par = portfolio_pv(triple, pf, r, n, seed, label="pv-triple")
    return [_le(10, "atm_call_gap_se", abs(rep.mean_pv - rep.closed_form) / rep.std_err, 3.0),
            _le(10, "parity_triple_abs_mean", abs(par.mean_pv), 0.0),
            _le(10, "parity_triple_var", par.var_pv, 0.0)]


SUITES: dict[str, Callable[..., list[CriterionResult]]] = {
    "qv": suite_qv,
    "martingale": suite_martingale,
    "parity": suite_parity,
    "variance": suite_variance,
    "ivsurface": suite_ivsurface,
    "cov": suite_cov,
    "wsm": suite_wsm,
    "autocorr": suite_autocorr,
    "clt": suite_clt,
    "pv": suite_pv,
}

ALL = (*SUITES, "determinism")


def artifact_bytes(results: list[CriterionResult]) -> bytes:
    return json.dumps([r.to_json() for r in results], sort_keys=True).encode("utf-8")


def suite_determinism(seed: int, scale: float = 1.0, threads: int | None = None,
                      names: tuple[str, ...] | None = None,
                      reference: dict[str, bytes] | None = None) -> list[CriterionResult]:
    """Rerun suites with 1 and 8 workers and compare their artifact bytes.

    ``reference`` may supply already computed 8-worker artifacts.
    """
    out = []
    for name in names or tuple(SUITES):
        a = artifact_bytes(SUITES[name](seed, scale, 1))
        b = reference[name] if reference and name in reference else artifact_bytes(SUITES[name](seed, scale, 8))
        out.append(CriterionResult(11, f"identical_artifacts_{name}", float(a != b), 0.0, a == b))
    return out


def run_suite(name: str, seed: int, scale: float = 1.0, threads: int | None = None) -> list[CriterionResult]:
    if name == "all":
        results, ref = [], {}
        for key, fn in SUITES.items():
            res = fn(seed, scale, 8 if threads is None else threads)
            ref[key] = artifact_bytes(res)
            results.extend(res)
        results.extend(suite_determinism(seed, scale, reference=ref if threads in (None, 8) else None))
        return results
    if name == "determinism":
        return suite_determinism(seed, scale)
    if name not in SUITES:
        raise ConfigurationError(f"unknown suite {name!r}; choose from {', '.join(ALL)} or all")
    return SUITES[name](seed, scale, threads)
