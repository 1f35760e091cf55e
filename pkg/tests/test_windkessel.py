import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hemopinn.windkessel import (
    MMHG,
    PI0_MMHG,
    TABLE3,
    NonPositiveDecay,
    NonPositivePressure,
    SteadyWindkessel,
    WindkesselError,
    WindkesselParams,
    WindkesselState,
    WindowTooShort,
    analytic_constant_flow,
    cgs_to_mmhg,
    fit_decay_time,
    implicit_coefficients,
    mmhg_to_cgs,
    steady_pressure,
    step_backward_euler,
)

G1 = TABLE3[0]
G5 = TABLE3[4]


def test_table_values():
    assert (G1.Rp, G1.Rd, G1.C) == (713.0, 12023.0, 8.256e-5)
    assert (TABLE3[2].Rp, TABLE3[2].Rd, TABLE3[2].C) == (602.0, 10143.0, 9.785e-5)
    assert G1.Rt == 12736.0
    assert PI0_MMHG == 78.8
    assert MMHG == 1333.22


def test_steady_pressure_gamma1():
    P = steady_pressure(SteadyWindkessel(12.74e3), 25.82)
    assert P == pytest.approx(3.290e5, rel=1e-3)
    # reported 247.96 mmHg; table rounding keeps us within 1%
    assert cgs_to_mmhg(P) == pytest.approx(247.96, rel=0.01)


def test_steady_pressure_gamma5():
    P = steady_pressure(SteadyWindkessel(G5.Rp + G5.Rd), 188.85)
    assert P == pytest.approx(3.301e5, rel=1e-3)
    assert cgs_to_mmhg(P) == pytest.approx(248.15, rel=0.01)


def test_steady_pressure_zero_flow():
    assert steady_pressure(SteadyWindkessel(1.0), 0.0) == 0.0
    assert steady_pressure(G1, 2.0) == G1.Rt * 2.0


def test_unit_round_trip():
    assert cgs_to_mmhg(mmhg_to_cgs(78.8)) == pytest.approx(78.8, rel=1e-15)


def test_homogeneous_step():
    s, P = step_backward_euler(G1, WindkesselState(5.0), 0.0, 1e-3)
    assert s.pi == pytest.approx(5.0 / (1.0 + 1e-3 / G1.tau), rel=1e-15)
    assert P == s.pi
    assert s.t == pytest.approx(1e-3)


def test_step_matches_formula():
    st0 = WindkesselState(1e5)
    dt, Q = 2e-3, 17.0
    s, P = step_backward_euler(G1, st0, Q, dt)
    pi = (st0.pi + dt * Q / G1.C) / (1 + dt / (G1.Rd * G1.C))
    assert s.pi == pytest.approx(pi, rel=1e-15)
    assert P == pytest.approx(G1.Rp * Q + pi, rel=1e-15)
    a, b = implicit_coefficients(G1, st0, dt)
    assert a * Q + b == pytest.approx(P, rel=1e-13)


def _integrate(params, pi0, Q, dt, T):
    state = WindkesselState(pi0)
    P = None
    for _ in range(int(round(T / dt))):
        state, P = step_backward_euler(params, state, Q, dt)
    return P


def test_constant_flow_against_analytic():
    pi0 = mmhg_to_cgs(78.8)
    T = 5 * G1.tau
    P = _integrate(G1, pi0, 25.0, 1e-4, T)
    exact = analytic_constant_flow(G1, pi0, 25.0, T)
    assert abs(P - exact) / exact < 1e-3


def test_first_order_convergence():
    pi0 = mmhg_to_cgs(78.8)
    T = 0.5
    errs = [abs(_integrate(G1, pi0, 25.0, dt, T) - analytic_constant_flow(G1, pi0, 25.0, T))
            for dt in (1e-3, 5e-4, 2.5e-4)]
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.allclose(rates, 1.0, atol=0.05)


def test_small_dt_consistency():
    pi, Q, dt = 1e5, 30.0, 1e-8
    s, _ = step_backward_euler(G1, WindkesselState(pi), Q, dt)
    slope = (Q - pi / G1.Rd) / G1.C
    assert (s.pi - pi) / dt == pytest.approx(slope, rel=1e-6)


def test_analytic_limits():
    assert analytic_constant_flow(G1, 7.0, 3.0, 0.0) == pytest.approx(G1.Rp * 3.0 + 7.0)
    assert analytic_constant_flow(G1, 7.0, 3.0, 1e4) == pytest.approx(G1.Rt * 3.0)
    assert G1.tau == pytest.approx(0.9926, abs=1e-4)
    assert analytic_constant_flow(G1, 1.0, 0.0, G1.tau) == pytest.approx(math.exp(-1.0), rel=1e-12)
    with pytest.raises(WindkesselError):
        analytic_constant_flow(G1, 1.0, 0.0, -1.0)


def test_decay_times_shared_across_outlets():
    taus = np.array([p.tau for p in TABLE3])
    assert np.ptp(taus) / taus.mean() < 1e-3
    assert taus.mean() == pytest.approx(0.9926, abs=5e-4)


def test_fit_decay_exact_curve():
    t = np.arange(0.0, 0.661, 0.03)
    p = 5.0 * np.exp(-t / 0.9926)
    assert fit_decay_time(t, p, 0.3, 0.66) == pytest.approx(0.9926, abs=1e-9)


def test_fit_decay_errors():
    t = np.linspace(0, 1, 11)
    with pytest.raises(NonPositiveDecay):
        fit_decay_time(t, np.full_like(t, 3.0), 0.0, 1.0)
    with pytest.raises(WindowTooShort):
        fit_decay_time(t, np.exp(-t), 0.95, 1.0)
    p = np.exp(-t)
    p[5] = -1.0
    with pytest.raises(NonPositivePressure):
        fit_decay_time(t, p, 0.0, 1.0)


def test_invalid_params():
    with pytest.raises(WindkesselError):
        WindkesselParams(-1.0, 1.0, 1.0)
    with pytest.raises(WindkesselError):
        SteadyWindkessel(0.0)
    with pytest.raises(WindkesselError):
        step_backward_euler(G1, WindkesselState(1.0), 0.0, 0.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(-1e6, 1e6), st.floats(1e-9, 1e3))
def test_unconditional_stability(pi, dt):
    s, _ = step_backward_euler(G1, WindkesselState(pi), 0.0, dt)
    assert abs(s.pi) <= abs(pi)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 200.0), st.floats(0.0, 1e6))
def test_steady_limit_of_stepping(Q, pi0):
    params = WindkesselParams(500.0, 2000.0, 1e-4)
    state = WindkesselState(pi0)
    for _ in range(100_000):
        new, P = step_backward_euler(params, state, Q, 0.05)
        if abs(new.pi - state.pi) < 1e-12 * max(1.0, abs(state.pi)):
            break
        state = new
    assert P == pytest.approx(params.Rt * Q, rel=1e-9)
