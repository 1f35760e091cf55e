import numpy as np
import pytest

from hemopinn.geometry import straight_channel, t_junction
from hemopinn.refsolver import (
    CFLViolation,
    FixedPressure,
    InflowWaveform,
    ProjectionSolver,
    SolverConfig,
    inlet_profile,
    run_steady,
    run_transient,
    step_projection,
)
from hemopinn.windkessel import TABLE3, SteadyWindkessel, mmhg_to_cgs

NU = 0.035 / 1.06


def _stable_dt(h):
    return 0.5 * h * h / (4 * NU)


@pytest.fixture(scope="module")
def tee():
    return t_junction()


@pytest.fixture(scope="module")
def pulse_run(tee):
    cfg = SolverConfig(h=0.125)
    return run_transient(tee, cfg, InflowWaveform.pulse(15.0, 0.5), [TABLE3[0], TABLE3[2]], mmhg_to_cgs(78.8))


def test_inlet_profile_parabola():
    spec = straight_channel(4.0, 1.0)
    wf = InflowWaveform.constant(2.0)
    assert inlet_profile(0.5, 0.0, wf, spec) == pytest.approx(3.0)
    assert inlet_profile(0.0, 0.3, wf, spec) == 0.0
    assert inlet_profile(1.0, 0.3, wf, spec) == 0.0


def test_inlet_profile_integrates_to_flow():
    spec = straight_channel(4.0, 1.0)
    wf = InflowWaveform.pulse(15.0, 0.5)
    y = np.linspace(0.0, 1.0, 201)
    for t in (0.05, 0.125, 0.4):
        flux = np.trapezoid(inlet_profile(y, t, wf, spec), y)
        assert flux == pytest.approx(wf(t), rel=1e-4)
    # trapezoid error of a parabola is exactly -Q/(m-1)^2 relative: remove it and compare tightly
    t = 0.1
    flux = np.trapezoid(inlet_profile(y, t, wf, spec), y) * (1 + 1 / 200**2)
    assert flux == pytest.approx(wf(t), rel=1e-6)


def test_pulse_waveform_shape():
    wf = InflowWaveform.pulse(15.0, 0.5)
    assert wf(0.125) == pytest.approx(15.0, rel=1e-6)
    assert wf(0.5) == pytest.approx(0.5, rel=1e-9)
    assert wf(0.125 + 0.66) == pytest.approx(wf(0.125))


def test_zero_state_is_fixed_point():
    spec = straight_channel(2.0, 1.0)
    solver = ProjectionSolver(spec, SolverConfig(h=0.125), [FixedPressure(0.0)], lambda y, t: 0.0 * y)
    state = solver.initial_state()
    for _ in range(5):
        state = step_projection(solver, state)
    assert not state.u.any() and not state.v.any() and not state.p.any()


def test_poiseuille_channel():
    h = 1.0 / 32
    spec = straight_channel(2.0, 1.0)
    cfg = SolverConfig(h=h, dt=_stable_dt(h), steady_tol=1e-7)
    snap = run_steady(spec, cfg, 1.0, [FixedPressure(0.0)])
    yc = (np.arange(32) + 0.5) * h
    # exact developed profile carrying Q=1: G y (H - y) / (2 mu) with G = 12 mu Q / H^3
    G = 12 * 0.035
    exact = G * yc * (1 - yc) / (2 * 0.035)
    assert np.abs(snap.u[40] - exact).max() / exact.max() < 0.02
    assert abs(snap.Q.sum() - snap.Q_in) / snap.Q_in < 1e-3
    grad = -(snap.p[50].mean() - snap.p[30].mean()) / (20 * h)
    assert grad == pytest.approx(G, rel=0.02)


def test_single_outlet_steady_windkessel():
    spec = straight_channel(2.0, 1.0)
    cfg = SolverConfig(h=0.125, dt=5e-3)
    snap = run_steady(spec, cfg, 2.0, [SteadyWindkessel(500.0)])
    assert snap.P[0] == pytest.approx(500.0 * snap.Q[0], rel=5e-3)
    assert snap.Q[0] == pytest.approx(snap.Q_in, rel=1e-3)


def test_symmetric_t_junction_splits_evenly(tee):
    cfg = SolverConfig(h=0.125, dt=2e-3)
    snap = run_steady(tee, cfg, 8.0, [SteadyWindkessel(5000.0)] * 2)
    assert snap.Q[0] == pytest.approx(snap.Q[1], rel=5e-3)
    assert snap.Q.sum() == pytest.approx(snap.Q_in, rel=1e-3)


def test_unequal_resistances_follow_0d_network(tee):
    cfg = SolverConfig(h=0.125, dt=2e-3)
    R1, R2 = 10000.0, 5000.0
    snap = run_steady(tee, cfg, 8.0, [SteadyWindkessel(R1), SteadyWindkessel(R2)])
    # parallel resistors: Q_k proportional to 1 / R_k (channel resistance is negligible)
    assert snap.Q[0] / snap.Q[1] == pytest.approx(R2 / R1, rel=0.1)
    assert snap.Q.sum() == pytest.approx(snap.Q_in, rel=1e-3)


def test_transient_snapshot_count(pulse_run):
    assert len(pulse_run) == 67
    assert pulse_run[0].t == 0.0
    assert pulse_run[-1].t == pytest.approx(0.66)


def test_transient_initial_pressure(pulse_run):
    assert np.allclose(pulse_run[0].P, mmhg_to_cgs(78.8))


def test_transient_mass_balance(pulse_run):
    t = np.array([s.t for s in pulse_run])
    out = np.array([s.Q.sum() for s in pulse_run])
    qin = np.array([s.Q_in for s in pulse_run])
    stroke = np.trapezoid(qin, t)
    assert abs(np.trapezoid(out - qin, t)) < 0.01 * stroke


def test_transient_dt_self_convergence(tee, pulse_run):
    half = run_transient(tee, SolverConfig(h=0.125, dt=5e-4, save_every=20), InflowWaveform.pulse(15.0, 0.5),
                         [TABLE3[0], TABLE3[2]], mmhg_to_cgs(78.8))
    i = int(np.argmax([s.Q_in for s in pulse_run]))
    assert np.allclose(half[i].Q, pulse_run[i].Q, rtol=0.02)


def test_transient_divergence_free(tee, pulse_run):
    solver = ProjectionSolver(tee, SolverConfig(h=0.125), [TABLE3[0], TABLE3[2]], lambda y, t: 0 * y)
    for s in pulse_run[::10]:
        assert np.abs(solver.divergence(s.u, s.v)).max() < 1e-8 * 15.0


def test_transient_deterministic(tee, pulse_run):
    again = run_transient(tee, SolverConfig(h=0.125), InflowWaveform.pulse(15.0, 0.5),
                          [TABLE3[0], TABLE3[2]], mmhg_to_cgs(78.8))
    for a, b in zip(pulse_run, again):
        assert np.array_equal(a.u, b.u) and np.array_equal(a.p, b.p) and np.array_equal(a.Q, b.Q)


def test_solid_cells_zero(tee, pulse_run):
    solver = ProjectionSolver(tee, SolverConfig(h=0.125), [TABLE3[0], TABLE3[2]], lambda y, t: 0 * y)
    assert not pulse_run[-1].p[~solver.mask.fluid].any()


def test_grid_convergence_poiseuille():
    errs = []
    for n in (8, 16):
        h = 1.0 / n
        snap = run_steady(straight_channel(2.0, 1.0), SolverConfig(h=h, dt=_stable_dt(h), steady_tol=1e-7),
                          1.0, [FixedPressure(0.0)])
        yc = (np.arange(n) + 0.5) * h
        exact = 6 * yc * (1 - yc)
        errs.append(np.abs(snap.u[int(1.25 / h)] - exact).max())
    assert errs[1] <= errs[0]


def test_cfl_guard():
    spec = straight_channel(2.0, 1.0)
    with pytest.raises(CFLViolation):
        ProjectionSolver(spec, SolverConfig(h=0.125, dt=0.5), [FixedPressure(0.0)], lambda y, t: 0 * y)
