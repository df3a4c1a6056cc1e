from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from qvlab.engine import DriftSpec, PathGrid, simulate_price
from qvlab.errors import DomainError, MisuseError, OutOfBandError, RangeError
from qvlab.pricing import (KAPPA, OptionKind, OptionSpec, audits_to_json, bs_implied_vol, bs_price,
                           bs_vega, flattening_report, forward_price, implied_vol_surface,
                           iv2_spread, martingale_audit, mc_price, mc_price_controlled, monotonicity_audit,
                           no_arbitrage_band, parity_audit, sandwich_report,
                           variance_audit_tolerance, variance_strike_zero_audit,
                           write_ivsurface_csv)
from qvlab.surfaces import QVParams, make_surface

CONST = make_surface("constant", alpha=0.04)
EPS = np.finfo(float).eps


@pytest.fixture(scope="module")
def rn_const():
    return simulate_price(CONST, DriftSpec.risk_neutral(0.0), 100.0, PathGrid.covering(1.0, 0.01),
                          100_000, 42, record=[0.5, 1.0])


def test_bs_reference_values():
    # oracles from a 30-digit mpmath evaluation of the closed form
    assert bs_price(100, 100, 0, 0.2, 1, "call") == pytest.approx(7.965567455405797, abs=1e-12)
    assert bs_price(100, 80, 0.05, 0.4, 2, "put") == pytest.approx(8.326158303380255, abs=1e-11)
    assert bs_price(90, 100, 0.03, 0.25, 0.5, "call") == pytest.approx(3.228954056876123, abs=1e-11)


def test_bs_atm_put_equals_call_at_zero_rate():
    assert bs_price(100, 100, 0, 0.2, 1, "put") == pytest.approx(bs_price(100, 100, 0, 0.2, 1, "call"), abs=1e-12)


def test_bs_short_expiry_is_intrinsic():
    assert bs_price(110, 100, 0.0, 0.2, 1e-12, "call") == pytest.approx(10.0, abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(s=st.floats(1, 1000), m=st.floats(0.2, 5), r=st.floats(-0.05, 0.2),
       sig=st.floats(0.01, 2), tau=st.floats(0.05, 50))
def test_bs_parity_property(s, m, r, sig, tau):
    k = s / m
    diff = bs_price(s, k, r, sig, tau, "call") - bs_price(s, k, r, sig, tau, "put")
    assert diff == pytest.approx(s - k * math.exp(-r * tau), abs=1e-12 * max(s, k) * 10)


def test_bs_domain_errors():
    for args in [(0, 100, 0, 0.2, 1), (100, 100, 0, 0.0, 1), (100, 100, 0, 0.2, 0.0)]:
        with pytest.raises(DomainError):
            bs_price(*args)


def test_implied_vol_round_trips():
    assert bs_implied_vol(bs_price(100, 100, 0, 0.2, 1), 100, 100, 0, 1) == pytest.approx(0.2, abs=1e-8)
    p = bs_price(100, 80, 0.05, 0.4, 2, "put")
    assert bs_implied_vol(p, 100, 80, 0.05, 2, "put") == pytest.approx(0.4, abs=1e-8)


def test_implied_vol_out_of_band_names_bound():
    with pytest.raises(OutOfBandError) as exc:
        bs_implied_vol(0.0, 110, 100, 0.0, 1.0, "call")
    assert exc.value.bound == "lower"
    with pytest.raises(OutOfBandError) as exc:
        bs_implied_vol(100.0, 100, 100, 0.0, 1.0, "call")
    assert exc.value.bound == "upper"
    with pytest.raises(OutOfBandError) as exc:
        bs_implied_vol(81.0, 100, 80, 0.0, 1.0, "put")
    assert exc.value.bound == "upper"


@settings(max_examples=300, deadline=None)
@given(m=st.floats(0.2, 5), sig=st.floats(0.01, 2), tau=st.floats(0.05, 50),
       r=st.floats(0.0, 0.1), kind=st.sampled_from(["call", "put"]))
def test_implied_vol_round_trip_property(m, sig, tau, r, kind):
    s = 100.0
    k = s / m
    price = bs_price(s, k, r, sig, tau, kind)
    lo, hi = no_arbitrage_band(s, k, r, tau, kind)
    vega = bs_vega(s, k, r, sig, tau)
    # the volatility is only recoverable when the time value clears price rounding
    assume(lo < price < hi)
    assume(vega * 1e-8 > 1e3 * EPS * max(price, s))
    iv = bs_implied_vol(price, s, k, r, tau, kind)
    assert iv == pytest.approx(sig, abs=1e-8)
    assert abs(bs_price(s, k, r, iv, tau, kind) - price) <= 1e-10


def test_forward_price_examples():
    assert forward_price(100, 100, 0.05, 1) == pytest.approx(4.8771, abs=1e-4)
    assert forward_price(100, 100, 0.0, 1) == 0.0
    assert forward_price(100, 0, 0.05, 1) == 100.0


def test_option_spec_invariants():
    with pytest.raises(DomainError):
        OptionSpec(OptionKind.CALL, 0.0, 1.0)
    with pytest.raises(DomainError):
        OptionSpec(OptionKind.VARIANCE_CALL, -0.1, 1.0)
    with pytest.raises(DomainError):
        OptionSpec(OptionKind.PUT, 100.0, 0.0)
    assert OptionSpec("variance_put", 0.0, 1.0).kind is OptionKind.VARIANCE_PUT


def test_mc_call_matches_closed_form(rn_const):
    est = mc_price(rn_const, OptionSpec(OptionKind.CALL, 100.0, 1.0), 0.0)
    assert abs(est.mean - 7.965567455405797) <= 3 * est.std_err
    assert est.n_paths == 100_000 and est.std_err > 0


def test_controlled_price_is_unbiased_and_tighter(rn_const):
    opt = OptionSpec(OptionKind.CALL, 80.0, 1.0)
    plain = mc_price(rn_const, opt, 0.0)
    cv = mc_price_controlled(rn_const, opt, 0.0)
    assert abs(cv.mean - bs_price(100, 80, 0, 0.2, 1)) <= 3 * cv.std_err
    assert cv.std_err < plain.std_err / 5


def test_controlled_price_stays_in_band_for_deep_itm_call():
    ens = simulate_price(CONST, DriftSpec.risk_neutral(0.0), 100.0, PathGrid.covering(0.25, 0.01), 20_000, 2,
                         record=[0.25])
    lo, hi = no_arbitrage_band(100.0, 70.0, 0.0, 0.25, "call")
    est = mc_price_controlled(ens, OptionSpec(OptionKind.CALL, 70.0, 0.25), 0.0)
    assert lo < est.mean < hi


def test_mc_variance_call_zero_strike_is_discounted_alpha(rn_const):
    est = mc_price(rn_const, OptionSpec(OptionKind.VARIANCE_CALL, 0.0, 1.0), 0.0)
    assert abs(est.mean - 0.04) <= 3 * est.std_err


def test_mc_price_requires_risk_neutral_and_grid_expiry(rn_const):
    phys = simulate_price(CONST, DriftSpec.constant(0.1), 100.0, PathGrid.covering(1.0, 0.1), 10, 1)
    with pytest.raises(MisuseError):
        mc_price(phys, OptionSpec(OptionKind.CALL, 100.0, 1.0), 0.0)
    with pytest.raises(RangeError):
        mc_price(rn_const, OptionSpec(OptionKind.CALL, 100.0, 0.25), 0.0)
    with pytest.raises(RangeError):
        mc_price(rn_const, OptionSpec(OptionKind.CALL, 100.0, 2.0), 0.0)


@pytest.mark.parametrize("strike", [50.0, 100.0, 1000.0])
def test_parity_is_exact(strike):
    sf = make_surface("decaying_smile", alpha=0.04, b=0.8)
    ens = simulate_price(sf, DriftSpec.risk_neutral(0.03), 100.0, PathGrid.covering(1.0, 0.02), 2000, 5,
                         record=[1.0])
    a = parity_audit(ens, strike, 1.0, 0.03)
    assert a.passed
    assert a.max_path_residual <= 1e-12 * a.scale
    call = mc_price(ens, OptionSpec(OptionKind.CALL, strike, 1.0), 0.03).mean
    put = mc_price(ens, OptionSpec(OptionKind.PUT, strike, 1.0), 0.03).mean
    fwd = mc_price(ens, OptionSpec(OptionKind.FORWARD, strike, 1.0), 0.03).mean
    assert abs(call - put - fwd) <= 1e-12 * a.scale
    # against the closed-form forward the gap is Monte Carlo error only
    assert abs(fwd - forward_price(100.0, strike, 0.03, 1.0)) < 1.0


def test_strike_monotonicity_is_exact(rn_const):
    rec = monotonicity_audit(rn_const, [70, 85, 95, 100, 105, 120, 150], 1.0, 0.0)
    assert rec.passed and rec.margin >= 0


def test_martingale_audit_passes(rn_const):
    assert all(a.passed for a in martingale_audit(rn_const, 0.0))


def test_kappa_documented_value():
    assert KAPPA == pytest.approx(0.04 * math.sqrt(2) * 0.0833155, rel=1e-5)
    assert variance_audit_tolerance(1e-4, 10.0) == pytest.approx(KAPPA * 1e-2 / math.sqrt(10))


def test_kappa_matches_constant_family_one_sd_call():
    # Monte Carlo check of the calibration: the call struck one discretization sd above alpha
    dt, T = 1e-3, 1.0
    ens = simulate_price(CONST, DriftSpec.risk_neutral(0.0), 100.0, PathGrid.covering(T, dt), 40_000, 8,
                         record=[T])
    sd = 0.04 * math.sqrt(2 * dt / T)
    est = mc_price(ens, OptionSpec(OptionKind.VARIANCE_CALL, 0.04 + sd, T), 0.0)
    assert abs(est.mean - KAPPA * math.sqrt(dt / T)) <= 3 * est.std_err + 0.05 * KAPPA * math.sqrt(dt / T)


def test_variance_zero_audit_and_constructed_violation():
    sf = make_surface("seasonal", alpha=0.04, a=0.5, omega=2 * math.pi)
    qv = sf.qv_params()
    ens = simulate_price(sf, DriftSpec.risk_neutral(0.0), 100.0, PathGrid.covering(10.0, 1e-3), 500, 3,
                         record=[10.0])
    audit = variance_strike_zero_audit(ens, qv, 10.0, 0.0)
    assert audit.call.mean <= 10 * variance_audit_tolerance(1e-3, 10.0)
    viol = mc_price(ens, OptionSpec(OptionKind.VARIANCE_CALL, qv.alpha - qv.theta / 10.0, 10.0), 0.0)
    assert viol.mean > 0
    with pytest.raises(DomainError):
        variance_strike_zero_audit(ens, QVParams(0.04, 0.1, 1.0, 20.0), 10.0, 0.0)


def test_constant_surface_implied_variance_is_flat(tmp_path):
    ivs = implied_vol_surface(CONST, 100.0, 0.02, [90, 100, 110], [0.5, 1.0], 40_000, 3, dt=0.05)
    for p in ivs.points:
        assert not p.flag
        assert abs(p.iv2 - 0.04) <= 3 * p.iv2_std_err + 1e-10
        assert p.iv2 == pytest.approx(p.iv ** 2, rel=1e-15)
    assert all(a.passed for a in sandwich_report(ivs, CONST))
    assert all(r.passed for r in flattening_report(ivs, CONST, QVParams(0.04, 1e-12, 1.0, 0.5)))
    out = tmp_path / "iv.csv"
    write_ivsurface_csv(ivs, out, "cfg")
    lines = out.read_text().splitlines()
    assert lines[0] == "# cfg" and lines[1] == "expiry,strike,price,std_err,iv,iv2,flag"
    assert len(lines) == 2 + 6


def test_out_of_band_points_are_flagged():
    ivs = implied_vol_surface(CONST, 100.0, 0.0, [100, 400], [0.1], 200, 1, dt=0.01)
    far = [p for p in ivs.points if p.strike == 400][0]
    assert far.flag == "lower" and math.isnan(far.iv)


def test_seasonal_flattening_passes():
    sf = make_surface("seasonal", alpha=0.04, a=0.5, omega=2 * math.pi)
    ivs = implied_vol_surface(sf, 100.0, 0.0, [90, 100, 110], [5.0, 10.0, 20.0], 20_000, 4, dt=0.05)
    rows = flattening_report(ivs, sf)
    assert all(r.included and r.passed for r in rows)


def test_decaying_smile_spread_shrinks_and_short_expiry_excluded():
    sf = make_surface("decaying_smile", alpha=0.04, b=0.8, tau=1.0)
    ivs = implied_vol_surface(sf, 100.0, 0.0, [90, 100, 110], [0.25, 25.0], 20_000, 5, dt=0.01)
    assert iv2_spread(ivs, 0.25) > 0
    assert iv2_spread(ivs, 25.0) <= iv2_spread(ivs, 0.25) / 10
    rows = flattening_report(ivs, sf)
    assert not rows[0].included and rows[0].passed is None
    assert all(a.passed for a in sandwich_report(ivs, sf))


def test_audit_json_shape():
    ivs = implied_vol_surface(CONST, 100.0, 0.0, [100], [1.0], 500, 1, dt=0.1)
    doc = json.loads(json.dumps(audits_to_json(sandwich_report(ivs, CONST))))
    assert set(doc[0]) == {"check", "margin", "pass"}
