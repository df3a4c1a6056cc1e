"""Simulation, pricing, estimation and forecasting under convergent quadratic variation."""

from __future__ import annotations

from .covmodel import (AutocorrKind, CovarianceModel, EmpiricalCovariance, asymptotic_covariance,
                       autocorr_asymptotic, empirical_autocorr, empirical_covariance,
                       fit_cov_params, model_covariance, wsm_residual)
from .engine import (CovParams, DriftSpec, EnsembleKind, GrowthFunction, Measure, PathEnsemble,
                     PathGrid, drift_from_growth, simulate_canonical_conditional,
                     simulate_centered_returns, simulate_price)
from .forecast import (ForecastDistribution, Portfolio, Position, PVReport, clt_audit,
                       corrected_forecast, limit_forecast, lognormal_price_forecast,
                       portfolio_pv, short_horizon_forecast)
from .pricing import (KAPPA, ImpliedVolSurfacePoint, OptionKind, OptionSpec, PriceEstimate,
                      bs_implied_vol, bs_price, flattening_report, forward_price,
                      implied_vol_surface, mc_price, mc_price_controlled, parity_audit, variance_strike_zero_audit)
from .quadvar import (PricePath, QVFit, QVReport, check_bound, fit_qv_params, ingest_price_csv,
                      realized_qv)
from .surfaces import (Family, LambdaCurve, QVParams, VolSurface, capital_lambda, eval_sigma2,
                       make_surface, time_average_envelope)

__version__ = "0.1.0"
