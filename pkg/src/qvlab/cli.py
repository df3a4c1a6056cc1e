"""``qvlab`` command line: config-driven runs that write CSV and JSON artifacts.

Exit codes: 0 success, 1 validation or input error, 2 acceptance failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path
from typing import Sequence

from .config import ConfigError, RunConfig, artifact_preamble, load_config, parse_config
from .covmodel import empirical_covariance, fit_cov_params, write_covariance_csv
from .engine import (DriftSpec, simulate_centered_returns, simulate_price,
                     write_ensemble_csv)
from .errors import QVLabError
from .forecast import (corrected_forecast, limit_forecast, lognormal_price_forecast,
                       portfolio_pv, read_portfolio_csv)
from .pricing import (OptionKind, OptionSpec, audits_to_json, flattening_report,
                      implied_vol_surface, martingale_audit, mc_price, monotonicity_audit,
                      parity_audit, sandwich_report, variance_strike_zero_audit,
                      write_ivsurface_csv, AuditRecord)
from .quadvar import (QVReport, check_bound, fit_qv_params, ingest_price_csv,
                      realized_qv, write_qv_reports_csv)
from .surfaces import LambdaCurve, QVParams
from .verify import ALL, run_suite

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors are validation errors, not acceptance failures
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _clean(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if hasattr(obj, "item"):
        return _clean(obj.item())
    return obj


def _write_json(path: Path, command: str, cfg: RunConfig | None, seed, result) -> None:
    doc = {"command": command, "seed": seed, "config": cfg.canonical() if cfg else None,
           "result": _clean(result)}
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _price_ensemble(cfg: RunConfig, record=None, label="price"):
    sf = cfg.surface()
    grid = cfg.grid()
    s0 = cfg.get("market", "s0", 100.0)
    if cfg.get("engine", "measure") == "physical":
        drift = DriftSpec.constant(cfg.get("engine", "mu", 0.0))
    else:
        drift = DriftSpec.risk_neutral(cfg.get("market", "r", 0.0))
    ens = simulate_price(sf, drift, s0, grid, cfg.require("engine", "n_paths"),
                         cfg.require("engine", "seed"), record=record, label=label)
    return sf, ens


def cmd_simulate(cfg: RunConfig, out: Path) -> int:
    cfg.require("engine", "seed")
    sf, ens = _price_ensemble(cfg, label="simulate")
    write_ensemble_csv(ens, out / "paths.csv", artifact_preamble("simulate", cfg, ens.seed))
    g = ens.grid
    print(f"n_paths={ens.n_paths} grid=[{g.t_start:g}, {g.t_end:g}] dt={g.dt:g} "
          f"n_steps={g.n_steps} seed={ens.seed} -> {out / 'paths.csv'}")
    return EXIT_OK


def cmd_qv(cfg: RunConfig | None, out: Path, fit: bool, csv_path: str | None) -> int:
    src = csv_path or (cfg.get("qv", "csv") if cfg else None)
    windows = cfg.get("qv", "windows") if cfg else None
    start = cfg.get("qv", "window_start", 0.0) if cfg else 0.0
    if src is not None:
        p = Path(src)
        if cfg is not None and not p.is_absolute() and csv_path is None:
            p = Path(cfg.base_dir) / p
        path = ingest_price_csv(p)
        span = float(path.times[-1] - path.times[0])
        if windows is None:
            start, windows = float(path.times[0]), (span,)
        reports = [realized_qv(path, start, T) for T in windows]
        seed = None
    else:
        if cfg is None:
            raise ConfigError("qv.csv", "give --config or --csv")
        if windows is None:
            raise ConfigError("qv.windows", "required value is missing")
        _, ens = _price_ensemble(cfg, record=sorted({start, *(start + T for T in windows)}), label="qv")
        # ensemble-mean QV per window
        reports = [QVReport(start, T, float(ens.qv_between(start, start + T).mean())) for T in windows]
        seed = ens.seed
    preamble = artifact_preamble("qv", cfg, seed) if cfg else f"qvlab qv\nsource = {src}\n"
    write_qv_reports_csv(reports, out / "qv.csv", preamble)
    result: dict = {"reports": [{"window_start": r.window_start, "T": r.T, "qv": r.qv,
                                 "time_avg": r.time_avg} for r in reports]}
    if cfg is not None and all(cfg.get("qv", k) is not None for k in ("theta", "gamma", "T0")):
        qp = QVParams(cfg.get("surface", "alpha") or reports[-1].time_avg, cfg.get("qv", "theta"),
                      cfg.get("qv", "gamma"), cfg.get("qv", "T0"))
        result["bound"] = [{"T": c.report.T, "skipped": c.skipped, "pass": c.passed, "margin": c.margin}
                           for c in check_bound(reports, qp)]
    if fit:
        f = fit_qv_params(reports)
        result["fit"] = {"alpha_hat": f.alpha_hat, "theta_hat": f.theta_hat, "gamma_hat": f.gamma_hat,
                         "residual_rms": f.residual_rms, "windows_used": f.windows_used}
    _write_json(out / "qv.json", "qv", cfg, seed, result)
    for r in reports:
        print(f"T={r.T:g} qv={r.qv:.10g} time_avg={r.time_avg:.10g}")
    if fit:
        print(f"fit: alpha={f.alpha_hat} theta={f.theta_hat} gamma={f.gamma_hat}")
    return EXIT_OK


def cmd_price(cfg: RunConfig, out: Path) -> int:
    strikes = cfg.require("price", "strikes")
    expiries = cfg.require("price", "expiries")
    r = cfg.get("market", "r", 0.0)
    if cfg.get("engine", "measure") == "physical":
        raise ConfigError("engine.measure", "pricing needs risk_neutral")
    sf, ens = _price_ensemble(cfg, record=expiries, label="price")
    rows, audits = [], []
    for T in expiries:
        for k in strikes:
            for kind in (OptionKind.CALL, OptionKind.PUT, OptionKind.FORWARD):
                est = mc_price(ens, OptionSpec(kind, k, T), r)
                rows.append({"kind": kind.value, "strike": k, "expiry": T, "mean": est.mean,
                             "std_err": est.std_err, "n_paths": est.n_paths})
            pa = parity_audit(ens, k, T, r)
            audits.append(AuditRecord(f"parity@T={T:g},K={k:g}", 1e-12 * pa.scale - pa.max_path_residual,
                                      pa.passed))
        for vk in cfg.get("price", "variance_strikes") or ():
            for kind in (OptionKind.VARIANCE_CALL, OptionKind.VARIANCE_PUT):
                est = mc_price(ens, OptionSpec(kind, vk, T), r)
                rows.append({"kind": kind.value, "strike": vk, "expiry": T, "mean": est.mean,
                             "std_err": est.std_err, "n_paths": est.n_paths})
        if len(strikes) > 1:
            m = monotonicity_audit(ens, strikes, T, r)
            audits.append(AuditRecord(f"{m.check}@T={T:g}", m.margin, m.passed))
        if all(cfg.get("qv", k) is not None for k in ("theta", "gamma", "T0")) and T >= cfg.get("qv", "T0"):
            qp = QVParams(sf.alpha, cfg.get("qv", "theta"), cfg.get("qv", "gamma"), cfg.get("qv", "T0"))
            va = variance_strike_zero_audit(ens, qp, T, r)
            audits.append(AuditRecord(f"variance_zero@T={T:g}",
                                      va.tolerance - max(va.call.mean, va.put.mean), va.passed))
    audits.extend(martingale_audit(ens, r))
    _write_json(out / "prices.json", "price", cfg, ens.seed,
                {"prices": rows, "audits": audits_to_json(audits)})
    bad = [a for a in audits if not a.passed]
    print(f"{len(rows)} prices, {len(audits)} audits, {len(bad)} failed -> {out / 'prices.json'}")
    return EXIT_OK


def cmd_ivsurface(cfg: RunConfig, out: Path) -> int:
    sf = cfg.surface()
    seed = cfg.require("engine", "seed")
    n = cfg.get("ivsurface", "n_paths") or cfg.require("engine", "n_paths")
    strikes, expiries = cfg.require("ivsurface", "strikes"), cfg.require("ivsurface", "expiries")
    dt = cfg.get("ivsurface", "dt") or cfg.get("engine", "dt")
    s0, r = cfg.get("market", "s0", 100.0), cfg.get("market", "r", 0.0)
    ivs = implied_vol_surface(sf, s0, r, strikes, expiries, n, seed, dt=dt)
    write_ivsurface_csv(ivs, out / "ivsurface.csv", artifact_preamble("ivsurface", cfg, seed))
    V = cfg.get("market", "V", 0.0)
    audits = sandwich_report(ivs, sf, V)
    flat = [{"expiry": f.expiry, "included": f.included, "worst_margin": f.worst_margin, "pass": f.passed}
            for f in flattening_report(ivs, sf)]
    _write_json(out / "ivsurface_audit.json", "ivsurface", cfg, seed,
                {"sandwich": audits_to_json(audits), "flattening": flat})
    print(f"{len(ivs.points)} points, {sum(1 for p in ivs.points if p.flag)} flagged -> {out / 'ivsurface.csv'}")
    return EXIT_OK


def cmd_cov(cfg: RunConfig, out: Path) -> int:
    cov = cfg.cov_params()
    sf = cfg.surface()
    times = cfg.require("cov", "times")
    z = cfg.get("cov", "z", 0.0)
    seed = cfg.require("engine", "seed")
    grid = cfg.grid()
    lam = LambdaCurve(sf) if not sf.price_dependent else None
    if lam is None:
        raise ConfigError("surface.family", "cov needs a price-independent family (constant or seasonal)")
    ens = simulate_centered_returns(cov, sf, grid, cfg.require("engine", "n_paths"), seed,
                                    scheme=cfg.get("cov", "scheme"), record=[z, *(z + t for t in times)],
                                    label="cov")
    emp = empirical_covariance(ens, z, times)
    write_covariance_csv(emp, out / "cov.csv", artifact_preamble("cov", cfg, seed))
    fit = fit_cov_params(emp, lam=lam, domain_end=cov.domain_end)
    _write_json(out / "cov_fit.json", "cov", cfg, seed, fit.to_json())
    print(f"alpha_hat={fit.params.alpha:.6g} (se {fit.alpha_se:.2g}) "
          f"beta_hat={fit.params.beta:.6g} (se {fit.beta_se:.2g})")
    return EXIT_OK


def _forecast(cfg: RunConfig):
    z, x = cfg.require("forecast", "z"), cfg.require("forecast", "x")
    times, T = cfg.require("forecast", "times"), cfg.require("forecast", "T")
    if cfg.get("forecast", "variant") == "limit":
        alpha = cfg.get("cov", "alpha") or cfg.require("surface", "alpha")
        return limit_forecast(x, z, times, alpha, T)
    return corrected_forecast(x, z, times, cfg.cov_params(), T, cfg.get("forecast", "gamma"))


def _price_forecast(cfg: RunConfig, fc):
    s_z = cfg.require("forecast", "s_z")
    return lognormal_price_forecast(cfg.get("market", "s0", 100.0), s_z, cfg.get("forecast", "m", 0.0), fc)


def cmd_forecast(cfg: RunConfig, out: Path) -> int:
    fc = _forecast(cfg)
    result = {"forecast": fc.to_json()}
    if cfg.get("forecast", "s_z") is not None:
        result["price_forecast"] = _price_forecast(cfg, fc).to_json()
    _write_json(out / "forecast.json", "forecast", cfg, None, result)
    print(f"variant={fc.variant.value} mean={list(map(float, fc.mean))}")
    return EXIT_OK


def cmd_pv(cfg: RunConfig, out: Path) -> int:
    pf = _price_forecast(cfg, _forecast(cfg))
    portfolio = read_portfolio_csv(cfg.path("pv", "portfolio"))
    seed = cfg.require("pv", "seed")
    rep = portfolio_pv(portfolio, pf, cfg.get("market", "r", 0.0), cfg.require("pv", "n_samples"), seed)
    _write_json(out / "pv.json", "pv", cfg, seed, rep.to_json())
    print(f"mean_pv={rep.mean_pv:.10g} var_pv={rep.var_pv:.10g} method={rep.method.value}")
    return EXIT_OK


def cmd_verify(cfg: RunConfig | None, out: Path | None, suite: str) -> int:
    if suite != "all" and suite not in ALL:
        raise ConfigError("verify.suite", f"unknown suite {suite!r}; choose from {', '.join(ALL)}, all")
    if cfg is None or not cfg.has("verify"):
        cfg = parse_config("[verify]\n")
    seed, scale = cfg.get("verify", "seed"), cfg.get("verify", "scale")
    results = run_suite(suite, seed, scale)
    report = [r.to_json() for r in results]
    if out is not None:
        _write_json(out / "verify.json", "verify", cfg, seed, report)
    print(json.dumps(_clean(report), indent=2))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILED


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qvlab", description="Local-volatility simulation, pricing and forecasting toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("simulate", "qv", "price", "ivsurface", "cov", "forecast", "pv", "verify"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=str, default=None, help="INI configuration file")
        sp.add_argument("--out", type=str, default=".", help="output directory")
        if name == "qv":
            sp.add_argument("--fit", action="store_true", help="fit (alpha, theta, gamma)")
            sp.add_argument("--csv", type=str, default=None, help="ingest a t,price CSV")
        if name == "verify":
            sp.add_argument("--suite", type=str, default="all")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else None
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "verify":
            return cmd_verify(cfg, out if args.config or args.out != "." else None, args.suite)
        if args.command == "qv":
            return cmd_qv(cfg, out, args.fit, args.csv)
        if cfg is None:
            raise ConfigError("config", f"{args.command} needs --config")
        return {"simulate": cmd_simulate, "price": cmd_price, "ivsurface": cmd_ivsurface,
                "cov": cmd_cov, "forecast": cmd_forecast, "pv": cmd_pv}[args.command](cfg, out)
    except QVLabError as exc:
        print(f"qvlab {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
