from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qvlab.covmodel import (AutocorrKind, CovarianceModel, EmpiricalCovariance,
                            asymptotic_covariance, autocorr_asymptotic, autocorr_exact,
                            empirical_autocorr, empirical_covariance, fit_cov_params,
                            increment_covariance, model_covariance, write_covariance_csv, wsm_residual)
from qvlab.engine import CovParams, DriftSpec, PathGrid, simulate_centered_returns, simulate_price
from qvlab.errors import (ConfigurationError, DomainError, InsufficientDataError, MisuseError,
                          ParameterError, SingularError)
from qvlab.surfaces import LambdaCurve, make_surface

COV = CovParams(0.04, 0.01)
LIN = CovarianceModel.linear(COV)
CONST = make_surface("constant", alpha=0.04)


def _synthetic(times, cov_fn, n_paths=10_000):
    ts = np.asarray(times, float)
    m = np.array([[cov_fn(min(a, b), max(a, b)) for b in ts] for a in ts])
    p = ts.size * (ts.size + 1) // 2
    return EmpiricalCovariance(0.0, ts, m, np.full_like(m, 1e-3), n_paths, np.eye(p) * 1e-6)


@pytest.fixture(scope="module")
def centered():
    return simulate_centered_returns(COV, CONST, PathGrid.covering(4.0, 0.1), 20_000, 11)


def test_model_covariance_example():
    assert model_covariance(LIN, 0.0, 1.0, 2.0) == pytest.approx(0.06, abs=1e-15)
    assert model_covariance(LIN, 5.0, 1.0, 2.0) == pytest.approx(0.06, abs=1e-15)
    assert LIN.r(1.0, 2.0) == pytest.approx(0.06, abs=1e-15)


def test_model_covariance_edge_cases():
    brown = CovarianceModel.linear(CovParams(0.04, 0.0))
    assert model_covariance(brown, 0.0, 1.5, 3.0) == pytest.approx(0.06, abs=1e-15)
    assert model_covariance(LIN, 0.0, 0.0, 2.0) == 0.0
    with pytest.raises(DomainError, match="t1 <= t2"):
        model_covariance(LIN, 0.0, 2.0, 1.0)


def test_model_with_seasonal_lambda_matches_curve():
    sf = make_surface("seasonal", alpha=0.04, a=0.3, omega=2 * math.pi)
    lam = LambdaCurve(sf)
    m = CovarianceModel(COV, lam)
    k = 0.01 / 0.04 ** 2
    want = (lam(1.5) - lam(0.5)) * (1 + k * (lam(2.5) - lam(0.5)))
    assert model_covariance(m, 0.5, 1.0, 2.0) == pytest.approx(float(want), rel=1e-14)


def test_asymptotic_examples():
    a = asymptotic_covariance(COV, 0.0, 1.0, 1.0, 100.0, 2.0)
    assert a.value == pytest.approx(104.0) and a.regime == "gamma_gt_1"
    b = asymptotic_covariance(CovParams(0.04, 0.0), 0.0, 1.0, 1.0, 100.0, 2.0)
    assert b.value == pytest.approx(4.0) and b.regime == "beta_zero"
    c = asymptotic_covariance(COV, 0.0, 1.0, 2.0, 100.0, 1.0)
    assert c.value == pytest.approx(200.0) and c.regime == "gamma_le_1"
    with pytest.raises(ParameterError):
        asymptotic_covariance(CovParams(0.04, -1e-4, 10.0), 0.0, 1.0, 1.0, 5.0, 2.0)


def test_asymptotic_relative_gap_shrinks_with_T():
    sf = make_surface("seasonal", alpha=0.04, a=0.5, omega=2 * math.pi)
    m = CovarianceModel(COV, LambdaCurve(sf))
    gaps = []
    for T in (10.25, 100.25, 1000.25):
        exact = model_covariance(m, 0.0, 1.0 * T, 2.0 * T)
        gaps.append(abs(exact / asymptotic_covariance(COV, 0.0, 1.0, 2.0, T, 1.0).value - 1))
    assert gaps[0] > gaps[1] > gaps[2]


def test_autocorr_asymptotic_examples():
    assert autocorr_asymptotic(COV, "returns", 1, 2, 1, 100, 2.0) == pytest.approx(0.96)
    assert autocorr_asymptotic(COV, "squared_returns", 1, 2, 1, 100, 2.0) == pytest.approx(0.92)
    assert autocorr_asymptotic(CovParams(0.04, 0.0), "returns", 1, 2, 1, 100, 2.0) == 0.0
    assert autocorr_asymptotic(COV, "returns", 1, 2, 1, 100, 1.0) == 1.0


def test_autocorr_exact_value():
    # returns over [2T, 3T] and [3T, 4T]: beta s T / (alpha + beta s T)
    assert autocorr_exact(LIN, AutocorrKind.RETURNS, 1, 2, 1, 100) == pytest.approx(1 / 1.04, rel=1e-12)
    assert autocorr_exact(LIN, AutocorrKind.SQUARED_RETURNS, 1, 2, 1, 100) == pytest.approx(1 / 1.04 ** 2, rel=1e-12)


@pytest.mark.parametrize("s,t,u", [(1, 1, 1), (1, 0.5, 1), (2, 2, 1), (0, 2, 1)])
def test_autocorr_preconditions(s, t, u):
    with pytest.raises(DomainError):
        autocorr_asymptotic(COV, "returns", s, t, u, 100, 2.0)


def test_empirical_covariance_close_to_model(centered, tmp_path):
    emp = empirical_covariance(centered, 0.0, [1.0, 2.0, 3.0, 4.0])
    assert abs(emp.r(1.0, 2.0) - 0.06) <= 3 * emp.std_err_matrix[0, 1]
    assert np.allclose(emp.matrix, emp.matrix.T)
    out = tmp_path / "cov.csv"
    write_covariance_csv(emp, out, "x")
    lines = out.read_text().splitlines()
    assert lines[1] == "t_i,t_j,value,std_err" and len(lines) == 2 + 16


def test_empirical_covariance_zero_time_and_guards(centered):
    emp = empirical_covariance(centered, 0.0, [0.0])
    assert emp.matrix[0, 0] == 0.0
    with pytest.raises(DomainError):
        emp.r(1.0, 1.0)
    price = simulate_price(CONST, DriftSpec.risk_neutral(0.0), 100.0, PathGrid.covering(1.0, 0.5), 50, 1)
    with pytest.raises(MisuseError):
        empirical_covariance(price, 0.0, [0.5])
    small = simulate_centered_returns(COV, CONST, PathGrid.covering(1.0, 0.5), 10, 1)
    with pytest.raises(InsufficientDataError):
        empirical_covariance(small, 0.0, [0.5])


def test_wsm_residual_exact_and_corrupted():
    assert wsm_residual(LIN, 1.0, 2.0, 3.0) == pytest.approx(0.0, abs=1e-15)
    assert wsm_residual(CovarianceModel.linear(CovParams(0.04, 0.0)), 1.0, 2.0, 3.0) == pytest.approx(0.0, abs=1e-15)

    def bad(a, b):
        return LIN.r(a, b) + (0.1 * LIN.r(1.0, 1.0) if (a, b) == (1.0, 3.0) else 0.0)

    assert wsm_residual(bad, 1.0, 2.0, 3.0) == pytest.approx(-0.1, abs=1e-12)
    with pytest.raises(SingularError):
        wsm_residual(lambda a, b: 0.0, 1.0, 2.0, 3.0)
    with pytest.raises(DomainError):
        wsm_residual(LIN, 2.0, 1.0, 3.0)


def test_wsm_residual_empirical_within_noise(centered):
    emp = empirical_covariance(centered, 0.0, [1.0, 2.0, 3.0])
    assert abs(wsm_residual(emp, 1.0, 2.0, 3.0)) < 0.05


def test_fit_recovers_noiseless_parameters():
    fit = fit_cov_params(_synthetic([0.5, 1, 2, 3, 4], LIN.r))
    assert fit.params.alpha == pytest.approx(0.04, abs=1e-10)
    assert fit.params.beta == pytest.approx(0.01, abs=1e-10)
    assert fit.residual_rms < 1e-12 and not fit.clamped


def test_fit_clamps_negative_beta_on_unbounded_domain():
    fit = fit_cov_params(_synthetic([1, 2, 3, 4], lambda a, b: 0.04 * a - 1e-3 * a * b))
    assert fit.clamped and fit.params.beta == 0.0 and fit.beta_raw == pytest.approx(-1e-3)


def test_fit_brownian_ensemble_gives_small_beta():
    ens = simulate_centered_returns(CovParams(0.04, 0.0), CONST, PathGrid.covering(4.0, 0.1), 20_000, 3)
    fit = fit_cov_params(empirical_covariance(ens, 0.0, [1, 2, 3, 4]))
    assert abs(fit.params.alpha - 0.04) <= 3 * fit.alpha_se
    assert fit.beta_raw <= 3 * fit.beta_se


def test_fit_simulated_ensemble(centered):
    fit = fit_cov_params(empirical_covariance(centered, 0.0, [1, 2, 3, 4]))
    assert abs(fit.params.alpha - 0.04) <= 3 * fit.alpha_se
    assert abs(fit.params.beta - 0.01) <= 3 * fit.beta_se
    assert set(fit.to_json()) >= {"alpha", "beta", "alpha_se", "beta_se"}


def test_fit_errors():
    with pytest.raises(InsufficientDataError):
        fit_cov_params(_synthetic([1, 2], LIN.r))
    with pytest.raises(InsufficientDataError):
        fit_cov_params(_synthetic([0, 1, 1, 2], LIN.r))
    emp = _synthetic([1, 2, 3], LIN.r)
    shifted = EmpiricalCovariance(1.0, emp.times, emp.matrix, emp.std_err_matrix, 10, emp.entry_cov)
    with pytest.raises(ConfigurationError):
        fit_cov_params(shifted)


def test_empirical_autocorr_matches_exact():
    T = 10.0
    ens = simulate_centered_returns(COV, CONST, PathGrid.covering(4 * T, 1.0), 20_000, 17)
    rep = empirical_autocorr(ens, "returns", 1, 2, 1, T, model=LIN)
    assert abs(rep.value - rep.exact) <= 3 * rep.std_err
    assert rep.asymptotic == pytest.approx(1 - 0.04 / 0.1)
    sq = empirical_autocorr(ens, "squared_returns", 1, 2, 1, T, model=LIN)
    assert abs(sq.value - sq.exact) <= 3 * sq.std_err


@settings(max_examples=60, deadline=None)
@given(alpha=st.floats(0.001, 1), beta=st.floats(0, 1),
       ts=st.lists(st.floats(0.01, 50), min_size=2, max_size=6, unique=True))
def test_model_matrix_is_psd(alpha, beta, ts):
    m = CovarianceModel.linear(CovParams(alpha, beta)).matrix(sorted(ts))
    eig = np.linalg.eigvalsh(m)
    assert eig.min() >= -1e-9 * max(1.0, eig.max())


@settings(max_examples=60, deadline=None)
@given(beta=st.floats(0, 0.1), a=st.floats(0, 5), w=st.floats(0.1, 5), h=st.floats(0, 5))
def test_increments_are_stationary_only_without_growth(beta, a, w, h):
    brown = CovarianceModel.linear(CovParams(0.04, 0.0))
    v0 = increment_covariance(brown.r, a, a + w, a, a + w)
    v1 = increment_covariance(brown.r, a + h, a + h + w, a + h, a + h + w)
    assert v0 == pytest.approx(v1, rel=1e-9)
    grow = CovarianceModel.linear(CovParams(0.04, beta))
    g0 = increment_covariance(grow.r, a, a + w, a, a + w)
    g1 = increment_covariance(grow.r, a + h, a + h + w, a + h, a + h + w)
    assert g1 >= g0 - 1e-12


@settings(max_examples=80, deadline=None)
@given(alpha=st.floats(0.001, 1), beta=st.floats(0, 1), s=st.floats(0.1, 3),
       t=st.floats(1.01, 5), du=st.floats(0, 3), T=st.floats(1, 1000))
def test_autocorrelations_lie_in_unit_interval(alpha, beta, s, t, du, T):
    cov = CovParams(alpha, beta)
    m = CovarianceModel.linear(cov)
    for kind in AutocorrKind:
        assert -1e-12 <= autocorr_exact(m, kind, s, t, s + du, T) <= 1 + 1e-12
        assert autocorr_asymptotic(cov, kind, s, t, s + du, T, 2.0) <= 1
