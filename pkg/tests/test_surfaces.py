from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qvlab.engine import DriftSpec, PathGrid, simulate_price
from qvlab.errors import ConfigurationError, DomainError, ParameterError
from qvlab.surfaces import (Family, LambdaCurve, QVParams, capital_lambda, eval_sigma2,
                            integrated_variance, make_surface, time_average_envelope)


def test_constant_sigma2_everywhere():
    sf = make_surface("constant", alpha=0.04)
    assert eval_sigma2(sf, 1e-6, 0.0) == 0.04
    assert np.all(sf.sigma2(np.array([1.0, 50.0, 1e6]), 3.0) == 0.04)


def test_seasonal_peak_and_trough():
    sf = make_surface("seasonal", alpha=0.04, a=0.5, omega=2 * math.pi)
    assert sf.sigma2(100, 0.25) == pytest.approx(0.06, abs=1e-15)
    assert sf.sigma2(100, 0.75) == pytest.approx(0.02, abs=1e-15)


def test_decaying_smile_at_reference_price():
    sf = make_surface("decaying_smile", alpha=0.04, b=0.8, tau=1.0, s_ref=100)
    assert sf.sigma2(100, 0.0) == 0.04
    # psi(101) = 1/2
    assert sf.sigma2(101, 0.0) == pytest.approx(0.04 * 1.4, abs=1e-15)


def test_certified_bounds_and_theta():
    sf = make_surface("decaying_smile", alpha=0.04, a=0.3, omega=3.0, b=0.5, tau=2.0)
    assert sf.M == pytest.approx(0.078, abs=1e-15)
    assert sf.K == pytest.approx(0.026, abs=1e-15)
    assert sf.theta == pytest.approx(2 * 0.04 * 0.3 / 3.0 + 0.04 * 1.3 * 0.5 * 2.0, abs=1e-15)


@pytest.mark.parametrize("family,params,needle", [
    ("constant", {"alpha": 0.0}, "alpha"),
    ("seasonal", {"alpha": 0.04, "a": 1.0}, "a out of range"),
    ("decaying_smile", {"alpha": 0.04, "b": 1.2}, "b out of range"),
    ("decaying_smile", {"alpha": 0.04, "b": 0.5, "tau": 0.0}, "tau"),
    ("seasonal", {"alpha": 0.04, "omega": -1.0}, "omega"),
    ("constant", {"alpha": 0.04, "a": 0.2}, "constant"),
])
def test_invalid_parameters_name_the_constraint(family, params, needle):
    with pytest.raises(ParameterError, match=needle):
        make_surface(family, **params)


def test_unknown_family_and_parameter():
    with pytest.raises(ParameterError):
        make_surface("heston", alpha=0.04)
    with pytest.raises(ParameterError):
        make_surface("constant", alpha=0.04, kappa=1.0)
    assert Family.parse("Decaying-Smile") is Family.DECAYING_SMILE


def test_sigma2_domain_errors():
    sf = make_surface("constant", alpha=0.04)
    with pytest.raises(DomainError):
        sf.sigma2(0.0, 1.0)
    with pytest.raises(DomainError):
        sf.sigma2(100.0, -1.0)


def test_envelope_matches_quadrature_oracle():
    # frozen from scipy.integrate.quad of the inf/sup integrands
    sf = make_surface("decaying_smile", alpha=0.04, a=0.3, omega=3.0, b=0.5, tau=2.0, s_ref=100)
    env = time_average_envelope(sf, 0.5, 4.0)
    assert env.upper == pytest.approx(0.04626224680103522, abs=1e-14)
    assert env.lower == pytest.approx(0.032756578654518795, abs=1e-14)


def test_constant_envelope_is_degenerate():
    env = time_average_envelope(make_surface("constant", alpha=0.04), 0.0, 3.0)
    assert env.lower == env.upper == 0.04


def test_seasonal_whole_periods_average_to_alpha():
    sf = make_surface("seasonal", alpha=0.04, a=0.5, omega=2 * math.pi)
    env = time_average_envelope(sf, 0.0, 10.0)
    assert env.lower == pytest.approx(0.04, abs=1e-15)
    assert integrated_variance(sf, 0.25, 1.0) == pytest.approx(0.04, abs=1e-15)


@settings(max_examples=200, deadline=None)
@given(alpha=st.floats(0.001, 1.0), a=st.floats(-0.95, 0.95), omega=st.floats(0.1, 20.0),
       b=st.floats(0.0, 0.95), tau=st.floats(0.05, 10.0), V=st.floats(0.0, 20.0),
       T=st.floats(0.5, 200.0))
def test_envelope_within_convergence_band(alpha, a, omega, b, tau, V, T):
    sf = make_surface("decaying_smile", alpha=alpha, a=a, omega=omega, b=b, tau=tau)
    env = time_average_envelope(sf, V, T)
    slack = 1e-12 * alpha
    assert env.lower <= env.upper + slack
    assert abs(env.upper - alpha) <= sf.theta / T + slack
    assert abs(env.lower - alpha) <= sf.theta / T + slack


@settings(max_examples=100, deadline=None)
@given(s=st.floats(1e-3, 1e4), t=st.floats(0.0, 50.0), a=st.floats(-0.9, 0.9), b=st.floats(0.0, 0.9))
def test_sigma2_within_certified_bound(s, t, a, b):
    sf = make_surface("decaying_smile", alpha=0.04, a=a, b=b)
    v = float(sf.sigma2(s, t))
    assert 0 < v <= sf.M * (1 + 1e-12)


def test_lambda_seasonal_matches_quadrature():
    sf = make_surface("seasonal", alpha=0.04, a=0.5, omega=2 * math.pi)
    assert capital_lambda(sf, 0.3) == pytest.approx(0.016166730504921373, abs=1e-15)
    assert LambdaCurve(make_surface("constant", alpha=0.04))(2.5) == pytest.approx(0.1, abs=1e-15)


def test_lambda_price_dependent_requires_ensemble():
    sf = make_surface("decaying_smile", alpha=0.04, b=0.5)
    with pytest.raises(ConfigurationError):
        LambdaCurve(sf)


def test_lambda_monte_carlo_estimate_near_alpha_t():
    sf = make_surface("decaying_smile", alpha=0.04, b=0.5, tau=1.0)
    ens = simulate_price(sf, DriftSpec.constant(0.0), 100.0, PathGrid.covering(2.0, 0.01), 2000, 4)
    lam = LambdaCurve(sf, ens)
    assert not lam.analytic
    # symmetric psi around s_ref keeps Lambda close to alpha t
    assert abs(lam(2.0) - 0.08) <= 3 * lam.std_err(2.0) + 0.004
    with pytest.raises(DomainError):
        lam(3.0)


def test_qvparams_validation():
    with pytest.raises(ParameterError):
        QVParams(0.04, 0.0, 1.0, 1.0)
    assert QVParams(0.04, 0.1, 1.0, 1.0).bound(10.0) == pytest.approx(0.01)
