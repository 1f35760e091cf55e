"""Lumped outlet models: three-element (Rp, Rd, C) and steady total resistance.

Core units are CGS: pressure dyn/cm^2, flow cm^3/s (cm^2/s per unit depth in
the 2D channel), resistance dyn s cm^-5, compliance cm^5/dyn.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MMHG = 1333.22  # dyn/cm^2 per mmHg


def mmhg_to_cgs(p):
    return p * MMHG


def cgs_to_mmhg(p):
    return p / MMHG


class WindkesselError(ValueError):
    pass


class WindowTooShort(WindkesselError):
    pass


class NonPositivePressure(WindkesselError):
    pass


class NonPositiveDecay(WindkesselError):
    pass


@dataclass(frozen=True)
class WindkesselParams:
    Rp: float
    Rd: float
    C: float

    def __post_init__(self):
        if not (self.Rp >= 0 and self.Rd > 0 and self.C > 0):
            raise WindkesselError(f"need Rp >= 0, Rd > 0, C > 0; got {self}")

    @property
    def Rt(self) -> float:
        return self.Rp + self.Rd

    @property
    def tau(self) -> float:
        return self.Rd * self.C


@dataclass(frozen=True)
class SteadyWindkessel:
    Rt: float

    def __post_init__(self):
        if not self.Rt > 0:
            raise WindkesselError(f"need Rt > 0; got {self.Rt}")


@dataclass(frozen=True)
class WindkesselState:
    pi: float
    t: float = 0.0


# Outlet parameters of the aortic model (Gamma_1 .. Gamma_5).
TABLE3 = (
    WindkesselParams(713.0, 12023.0, 8.256e-5),
    WindkesselParams(713.0, 12023.0, 8.256e-5),
    WindkesselParams(602.0, 10143.0, 9.785e-5),
    WindkesselParams(689.0, 11609.0, 8.55e-5),
    WindkesselParams(98.0, 1650.0, 6.015e-4),
)
PI0_MMHG = 78.8


def steady_pressure(params: SteadyWindkessel | WindkesselParams, Q):
    return params.Rt * Q


def step_backward_euler(params: WindkesselParams, state: WindkesselState, Q_next: float, dt: float):
    """One implicit step of ``C dpi/dt + pi/Rd = Q``; returns (state', P_next)."""
    if not dt > 0:
        raise WindkesselError("dt must be positive")
    pi = (state.pi + dt * Q_next / params.C) / (1.0 + dt / (params.Rd * params.C))
    return WindkesselState(pi, state.t + dt), params.Rp * Q_next + pi


def implicit_coefficients(params: WindkesselParams, state: WindkesselState, dt: float) -> tuple[float, float]:
    """(a, b) with P_next = a * Q_next + b for the backward-Euler step."""
    denom = 1.0 + dt / (params.Rd * params.C)
    return params.Rp + dt / (params.C * denom), state.pi / denom


def analytic_constant_flow(params: WindkesselParams, pi0: float, Q: float, t):
    """Outlet pressure under constant flow ``Q`` starting from ``pi(0) = pi0``."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise WindkesselError("t must be >= 0")
    out = params.Rp * Q + Q * params.Rd + (pi0 - Q * params.Rd) * np.exp(-t / params.tau)
    return float(out) if out.ndim == 0 else out


def fit_decay_time(t, p, t_close: float, t_end: float) -> float:
    """Decay time from a least-squares line through ``ln p`` on [t_close, t_end]."""
    t = np.asarray(t, dtype=float)
    p = np.asarray(p, dtype=float)
    sel = (t >= t_close - 1e-12) & (t <= t_end + 1e-12)
    if sel.sum() < 3:
        raise WindowTooShort(f"{sel.sum()} samples in [{t_close}, {t_end}], need >= 3")
    if np.any(p[sel] <= 0):
        raise NonPositivePressure("pressure must be positive inside the fit window")
    slope, _ = np.polyfit(t[sel], np.log(p[sel]), 1)
    if not slope < 0 or not math.isfinite(1.0 / -slope):
        raise NonPositiveDecay(f"log-pressure slope {slope:g} gives no decay")
    return -1.0 / slope
