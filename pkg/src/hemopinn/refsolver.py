"""Reference Navier-Stokes solutions on a staggered (MAC) grid.

Non-incremental Chorin projection: explicit upwind advection and explicit
diffusion give a provisional velocity, a pressure Poisson problem (Neumann at
walls and inlet, Dirichlet ``p = P_k`` at outlet faces) projects it onto
discretely divergence-free fields.  Outlet pressures come from the Windkessel
models and are solved implicitly together with the projection: the outlet
flows are affine in the outlet pressures, so one small K x K system per step
closes the 3D-0D coupling.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.interpolate import CubicSpline

from .geometry import (
    F_INLET,
    F_INTERIOR,
    F_OUTLET,
    F_SOLID,
    DomainSpec,
    GridMask,
    build_mask,
)
from .windkessel import (
    SteadyWindkessel,
    WindkesselParams,
    WindkesselState,
    implicit_coefficients,
    step_backward_euler,
)

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


class PoissonDiverged(SolverError):
    pass


class CFLViolation(SolverError):
    pass


class NotConverged(SolverError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    rho: float = 1.06
    mu: float = 0.035
    dt: float = 1e-3
    T: float = 0.66
    gamma: float = 1e5
    save_every: int = 10
    beta_backflow: float = 1.0
    h: float = 0.0625
    poisson_tol: float = 1e-10
    steady_tol: float = 1e-8
    max_steps: int = 200_000

    def __post_init__(self):
        for name in ("rho", "mu", "dt", "T", "h", "gamma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"solver.{name} must be positive")
        if not 0.0 <= self.beta_backflow <= 1.0:
            raise ValueError("solver.beta_backflow must lie in [0, 1]")
        if self.save_every < 1:
            raise ValueError("solver.save_every must be >= 1")

    @property
    def nu(self) -> float:
        return self.mu / self.rho

    def diffusion_dt_limit(self) -> float:
        return self.h**2 / (4.0 * self.nu)


@dataclass(frozen=True)
class FixedPressure:
    """Outlet held at a prescribed pressure (dyn/cm^2)."""

    P: float


OutletModel = WindkesselParams | SteadyWindkessel | FixedPressure


@dataclass(frozen=True)
class InflowWaveform:
    """Total inlet flow over one period, cubic in time, periodically continued."""

    t: np.ndarray
    Q: np.ndarray
    period: float
    _spline: CubicSpline = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        Q = np.asarray(self.Q, dtype=float)
        if t.ndim != 1 or t.shape != Q.shape or len(t) < 2:
            raise ValueError("waveform needs matching 1-D sample arrays")
        if not np.all(np.isfinite(Q)):
            raise ValueError("waveform flow must be finite")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "Q", Q)
        bc = "periodic" if np.isclose(Q[0], Q[-1]) and np.isclose(t[-1] - t[0], self.period) else "not-a-knot"
        if bc == "periodic":
            Q = Q.copy()
            Q[-1] = Q[0]
        object.__setattr__(self, "_spline", CubicSpline(t, Q, bc_type=bc))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        tt = self.t[0] + np.mod(t - self.t[0], self.period)
        out = self._spline(tt)
        return float(out) if out.ndim == 0 else out

    @classmethod
    def pulse(cls, q_sys: float, q_dia: float = 0.0, t_sys: float = 0.25, period: float = 0.66, dt: float = 1e-3):
        """Half-sine systole on top of a constant diastolic flow."""
        n = int(round(period / dt))
        t = np.linspace(0.0, period, n + 1)
        Q = np.where(t < t_sys, q_dia + (q_sys - q_dia) * np.sin(np.pi * t / t_sys), q_dia)
        return cls(t, Q, period)

    @classmethod
    def constant(cls, q: float, period: float = 1.0):
        return cls(np.array([0.0, period]), np.array([q, q]), period)


def inlet_profile(y, t, waveform: InflowWaveform | Callable, spec: DomainSpec):
    """Parabolic inflow speed (along the inward normal) carrying ``Q(t)``."""
    seg = spec.segments_for("inlet")[0]
    H = seg.length
    s = np.clip(np.asarray(y, dtype=float) - seg.lo, 0.0, H)
    return 6.0 * waveform(t) / H * s * (H - s) / H**2


@dataclass
class FlowSnapshot:
    t: float
    u: np.ndarray  # (nx+1, ny) x-faces
    v: np.ndarray  # (nx, ny+1) y-faces
    p: np.ndarray  # (nx, ny) cell centres
    Q: np.ndarray  # (K,) outward outlet flow
    P: np.ndarray  # (K,) outlet pressure
    Q_in: float = 0.0


@dataclass
class SolverState:
    t: float
    u: np.ndarray
    v: np.ndarray
    p: np.ndarray
    wk: list  # WindkesselState per outlet (None for non-transient outlets)
    Q: np.ndarray
    P: np.ndarray
    Q_in: float = 0.0
    step: int = 0

    def snapshot(self) -> FlowSnapshot:
        return FlowSnapshot(self.t, self.u.copy(), self.v.copy(), self.p.copy(), self.Q.copy(), self.P.copy(), self.Q_in)


class FaceStencil:
    """Stencil bookkeeping for one staggered velocity component.

    Works in a frame where the component is normal to axis 0; the v component
    is handled through transposed arrays.
    """

    def __init__(self, kind, outlet, other_kind, fluid):
        self.kind = kind
        n0, n1 = kind.shape
        self.active = (kind == F_INTERIOR) | (kind == F_OUTLET)
        self.inlet = kind == F_INLET
        self.outlet = kind == F_OUTLET
        self.outlet_id = outlet
        # outward sign of outlet faces: fluid cell on the low side -> +1
        padf = np.pad(fluid, ((1, 1), (0, 0)))
        low = padf[:-1, :]  # cell i-1
        self.out_sign = np.where(low, 1.0, -1.0)
        self.in_sign = self.out_sign  # inlet faces: same geometric rule, inward = -sign
        # missing neighbours along axis 0 -> zero-gradient
        padk = np.pad(kind, ((1, 1), (0, 0)), constant_values=F_SOLID)
        self.miss_e = padk[2:, :] == F_SOLID
        self.miss_w = padk[:-2, :] == F_SOLID
        # missing neighbours along axis 1 -> ghost with sign (+1 outlet, -1 no-slip)
        padk1 = np.pad(kind, ((0, 0), (1, 1)), constant_values=F_SOLID)
        self.miss_n = padk1[:, 2:] == F_SOLID
        self.miss_s = padk1[:, :-2] == F_SOLID
        ok = np.pad(other_kind, ((1, 1), (0, 0)), constant_values=F_SOLID)  # (n0+1, n1+1)
        # faces of the other component bounding the crossing line
        top_l, top_r = ok[:-1, 1:], ok[1:, 1:]
        bot_l, bot_r = ok[:-1, :-1], ok[1:, :-1]
        self.sign_n = np.where((top_l == F_OUTLET) | (top_r == F_OUTLET), 1.0, -1.0)
        self.sign_s = np.where((bot_l == F_OUTLET) | (bot_r == F_OUTLET), 1.0, -1.0)
        # which of the 4 surrounding other-component faces exist
        self.o_exist = [(x != F_SOLID).astype(float) for x in (bot_l, bot_r, top_l, top_r)]
        cnt = sum(self.o_exist)
        self.o_count = np.where(cnt > 0, cnt, 1.0)

    def tangential(self, b):
        """Average of the other component around each face of this one."""
        bp = np.pad(b, ((1, 1), (0, 0)))
        vals = (bp[:-1, :-1], bp[1:, :-1], bp[:-1, 1:], bp[1:, 1:])
        return sum(w * x for w, x in zip(self.o_exist, vals)) / self.o_count

    def neighbours(self, a):
        ap0 = np.pad(a, ((1, 1), (0, 0)))
        ae = np.where(self.miss_e, a, ap0[2:, :])
        aw = np.where(self.miss_w, a, ap0[:-2, :])
        ap1 = np.pad(a, ((0, 0), (1, 1)))
        an = np.where(self.miss_n, self.sign_n * a, ap1[:, 2:])
        as_ = np.where(self.miss_s, self.sign_s * a, ap1[:, :-2])
        return ae, aw, an, as_


class ProjectionSolver:
    def __init__(
        self,
        spec: DomainSpec,
        config: SolverConfig,
        outlets: Sequence[OutletModel],
        inlet: Callable[[np.ndarray, float], np.ndarray],
        mask: GridMask | None = None,
    ):
        self.spec = spec
        self.config = config
        self.mask = mask if mask is not None else build_mask(spec, config.h)
        self.outlets = list(outlets)
        self.K = spec.n_outlets
        if len(self.outlets) != self.K:
            raise ValueError(f"{self.K} outlets in the domain, {len(self.outlets)} models given")
        if config.dt > config.diffusion_dt_limit():
            raise CFLViolation(
                f"dt={config.dt:g} exceeds the explicit diffusion limit {config.diffusion_dt_limit():g}"
            )
        self.inlet = inlet
        m = self.mask
        h = m.h
        self.cu = FaceStencil(m.u_kind, m.u_outlet, m.v_kind, m.fluid)
        self.cv = FaceStencil(m.v_kind.T, m.v_outlet.T, m.u_kind.T, m.fluid.T)
        # inlet face positions along the inlet (for the profile)
        x0, y0 = m.origin
        iu, ju = np.nonzero(self.cu.inlet)
        iv, jv = np.nonzero(self.cv.inlet)  # transposed frame: (j_cell_x, i_face_y)
        self._inlet_u = (iu, ju, y0 + (ju + 0.5) * h, x0 + iu * h)
        self._inlet_v = (iv, jv, x0 + (jv + 0.5) * h, y0 + iv * h)
        self._build_poisson()

    # -- setup ------------------------------------------------------------
    def _build_poisson(self):
        m = self.mask
        nx, ny = m.nx, m.ny
        ids = -np.ones((nx, ny), dtype=np.int64)
        ids[m.fluid] = np.arange(m.fluid.sum())
        self.cell_ids = ids
        n = int(m.fluid.sum())
        rows, cols, vals = [], [], []
        diag = np.zeros(n)
        B = np.zeros((n, self.K))
        # outlet faces: (cell id, outlet index, orientation data)
        out_faces = []
        for i in range(nx + 1):
            for j in range(ny):
                k = m.u_kind[i, j]
                if k == F_INTERIOR:
                    a, b = ids[i - 1, j], ids[i, j]
                    rows += [a, b]
                    cols += [b, a]
                    vals += [1.0, 1.0]
                    diag[a] -= 1
                    diag[b] -= 1
                elif k == F_OUTLET:
                    c = ids[i - 1, j] if i > 0 and m.fluid[i - 1, j] else ids[i, j]
                    diag[c] -= 2
                    B[c, m.u_outlet[i, j] - 1] += 2
                    out_faces.append(c)
        for i in range(nx):
            for j in range(ny + 1):
                k = m.v_kind[i, j]
                if k == F_INTERIOR:
                    a, b = ids[i, j - 1], ids[i, j]
                    rows += [a, b]
                    cols += [b, a]
                    vals += [1.0, 1.0]
                    diag[a] -= 1
                    diag[b] -= 1
                elif k == F_OUTLET:
                    c = ids[i, j - 1] if j > 0 and m.fluid[i, j - 1] else ids[i, j]
                    diag[c] -= 2
                    B[c, m.v_outlet[i, j] - 1] += 2
        rows += list(range(n))
        cols += list(range(n))
        vals += list(diag)
        A = sp.csc_matrix((vals, (rows, cols)), shape=(n, n))
        self.A = A
        self.B = B
        self._lu = spla.splu(-A)
        dt, rho = self.config.dt, self.config.rho
        # per-outlet sum of adjacent-cell pressures: S @ p  ->  (K,)
        self.S = (B / 2.0).T
        self.n_out_faces = self.S.sum(axis=1)
        # response of outlet flows to unit outlet pressures
        G = np.zeros((self.K, self.K))
        self._unit_p = np.zeros((n, self.K))
        for j in range(self.K):
            pj = self._solve(-B[:, j])
            self._unit_p[:, j] = pj
            G[:, j] = 2 * dt / rho * (self.S @ pj)
            G[j, j] -= 2 * dt / rho * self.n_out_faces[j]
        self.G = G

    def _solve(self, rhs):
        x = -self._lu.solve(rhs)
        r = self.A @ x - rhs
        scale = max(np.linalg.norm(rhs), 1e-300)
        if not np.all(np.isfinite(x)) or np.linalg.norm(r) > self.config.poisson_tol * scale:
            raise PoissonDiverged(f"relative residual {np.linalg.norm(r) / scale:.3e}")
        return x

    # -- state helpers ----------------------------------------------------
    def initial_state(self, pi0: float | Sequence[float] = 0.0) -> SolverState:
        m = self.mask
        pis = np.broadcast_to(np.asarray(pi0, dtype=float), (self.K,))
        wk = [WindkesselState(float(p), 0.0) if isinstance(o, WindkesselParams) else None for o, p in zip(self.outlets, pis)]
        P = np.array([self._outlet_pressure_at_rest(o, s) for o, s in zip(self.outlets, wk)])
        p = np.zeros((m.nx, m.ny))
        return SolverState(0.0, np.zeros((m.nx + 1, m.ny)), np.zeros((m.nx, m.ny + 1)), p, wk, np.zeros(self.K), P)

    @staticmethod
    def _outlet_pressure_at_rest(o, s):
        if isinstance(o, WindkesselParams):
            return s.pi
        if isinstance(o, FixedPressure):
            return o.P
        return 0.0

    def inflow(self, state: SolverState) -> float:
        h = self.mask.h
        iu, ju, _, _ = self._inlet_u
        iv, jv, _, _ = self._inlet_v
        q = -np.sum(self.cu.out_sign[iu, ju] * state.u[iu, ju]) * h
        q -= np.sum(self.cv.out_sign[iv, jv] * state.v.T[iv, jv]) * h
        return float(q)

    def divergence(self, u, v) -> np.ndarray:
        h = self.mask.h
        d = (u[1:, :] - u[:-1, :] + v[:, 1:] - v[:, :-1]) / h
        return np.where(self.mask.fluid, d, 0.0)

    # -- one step ---------------------------------------------------------
    def _predict(self, comp: FaceStencil, a, b, t_next, inlet_speed):
        cfg = self.config
        h, dt, nu = self.mask.h, cfg.dt, cfg.nu
        ae, aw, an, as_ = comp.neighbours(a)
        bb = comp.tangential(b)
        dadx = np.where(a > 0, a - aw, ae - a) / h
        dady = np.where(bb > 0, a - as_, an - a) / h
        adv = a * dadx + bb * dady
        back = comp.outlet & (a * comp.out_sign < 0)
        adv = np.where(back, (1.0 - cfg.beta_backflow) * adv, adv)
        lap = (ae + aw + an + as_ - 4.0 * a) / h**2
        out = np.where(comp.active, a + dt * (-adv + nu * lap), 0.0)
        if inlet_speed is not None:
            i, j, target = inlet_speed
            kappa = dt * cfg.gamma / (cfg.rho * h)
            out[i, j] = (a[i, j] + kappa * target) / (1.0 + kappa)
        return out

    def step(self, state: SolverState) -> SolverState:
        cfg = self.config
        m = self.mask
        h, dt, rho = m.h, cfg.dt, cfg.rho
        t_next = state.t + dt
        umax = max(np.abs(state.u).max(initial=0.0), np.abs(state.v).max(initial=0.0))
        if umax * dt / h > 1.0:
            raise CFLViolation(f"advective CFL {umax * dt / h:.3f} > 1 at t={state.t:.4f}")

        iu, ju, yu, _ = self._inlet_u
        iv, jv, xv, _ = self._inlet_v
        tu = -self.cu.out_sign[iu, ju] * self.inlet(yu, t_next) if len(iu) else None
        tv = -self.cv.out_sign[iv, jv] * self.inlet(xv, t_next) if len(iv) else None
        us = self._predict(self.cu, state.u, state.v, t_next, (iu, ju, tu) if len(iu) else None)
        vs = self._predict(self.cv, state.v.T, state.u.T, t_next, (iv, jv, tv) if len(iv) else None).T

        flux = (us[1:, :] - us[:-1, :] + vs[:, 1:] - vs[:, :-1]) * h
        rhs = (rho / dt) * flux[m.fluid]
        p0 = self._solve(rhs)

        # outlet flows of the provisional field, then affine response to P
        Qs = np.zeros(self.K)
        cu, cv = self.cu, self.cv
        for comp, arr in ((cu, us), (cv, vs.T)):
            sel = comp.outlet
            np.add.at(Qs, comp.outlet_id[sel] - 1, comp.out_sign[sel] * arr[sel] * h)
        Q0 = Qs + 2 * dt / rho * (self.S @ p0)
        a = np.zeros(self.K)
        bvec = np.zeros(self.K)
        for k, (o, s) in enumerate(zip(self.outlets, state.wk)):
            if isinstance(o, WindkesselParams):
                a[k], bvec[k] = implicit_coefficients(o, s, dt)
            elif isinstance(o, SteadyWindkessel):
                a[k] = o.Rt
            else:
                bvec[k] = o.P
        P = np.linalg.solve(np.eye(self.K) - a[:, None] * self.G, a * Q0 + bvec)
        pf = p0 + self._unit_p @ P

        p = np.zeros((m.nx, m.ny))
        p[m.fluid] = pf
        u = us.copy()
        v = vs.copy()
        # interior faces
        gx = (p[1:, :] - p[:-1, :]) / h
        inner = m.u_kind[1:-1, :] == F_INTERIOR
        u[1:-1, :][inner] -= dt / rho * gx[inner]
        gy = (p[:, 1:] - p[:, :-1]) / h
        inner = m.v_kind[:, 1:-1] == F_INTERIOR
        v[:, 1:-1][inner] -= dt / rho * gy[inner]
        # outlet faces: gradient over the half cell to the boundary value P_k
        pp = np.pad(p, 1)
        for arr, comp, axis in ((u, cu, 0), (v.T, cv, 1)):
            i, j = np.nonzero(comp.outlet)
            sign = comp.out_sign[i, j]
            if axis == 0:
                pc = np.where(sign > 0, pp[i, j + 1], pp[i + 1, j + 1])
            else:
                # transposed frame: arr[i, j] is v[j, i]
                pc = np.where(sign > 0, pp[j + 1, i], pp[j + 1, i + 1])
            Pk = P[comp.outlet_id[i, j] - 1]
            arr[i, j] -= dt / rho * sign * (Pk - pc) / (h / 2)

        Q = np.zeros(self.K)
        for comp, arr in ((cu, u), (cv, v.T)):
            sel = comp.outlet
            np.add.at(Q, comp.outlet_id[sel] - 1, comp.out_sign[sel] * arr[sel] * h)

        wk = []
        for k, (o, s) in enumerate(zip(self.outlets, state.wk)):
            if isinstance(o, WindkesselParams):
                s2, _ = step_backward_euler(o, s, Q[k], dt)
                wk.append(s2)
            else:
                wk.append(s)
        new = SolverState(t_next, u, v, p, wk, Q, P, 0.0, state.step + 1)
        new.Q_in = self.inflow(new)
        return new


def step_projection(solver: ProjectionSolver, state: SolverState) -> SolverState:
    return solver.step(state)


def run_transient(
    spec: DomainSpec,
    config: SolverConfig,
    waveform: InflowWaveform,
    outlets: Sequence[OutletModel],
    pi0: float | Sequence[float],
    inlet: Callable | None = None,
) -> list[FlowSnapshot]:
    if inlet is None:
        def inlet(y, t):
            return inlet_profile(y, t, waveform, spec)

    solver = ProjectionSolver(spec, config, outlets, inlet)
    state = solver.initial_state(pi0)
    n_steps = int(round(config.T / config.dt))
    snaps = [state.snapshot()]
    for n in range(1, n_steps + 1):
        state = solver.step(state)
        if n % config.save_every == 0:
            snaps.append(state.snapshot())
    return snaps


def run_steady(
    spec: DomainSpec,
    config: SolverConfig,
    Q_in: float,
    outlets: Sequence[OutletModel],
    inlet: Callable | None = None,
) -> FlowSnapshot:
    """Pseudo-time march to a steady state under constant inflow."""
    waveform = InflowWaveform.constant(Q_in)
    if inlet is None:
        def inlet(y, t):
            return inlet_profile(y, t, waveform, spec)

    solver = ProjectionSolver(spec, config, outlets, inlet)
    state = solver.initial_state(0.0)
    tol = config.steady_tol * spec.U
    for _ in range(config.max_steps):
        new = solver.step(state)
        change = max(np.abs(new.u - state.u).max(), np.abs(new.v - state.v).max())
        state = new
        if change < tol:
            log.info("steady state after %d steps", state.step)
            return state.snapshot()
    raise NotConverged(f"no steady state after {config.max_steps} steps (last update {change:.3e})")
