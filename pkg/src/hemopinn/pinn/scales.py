"""Characteristic scales and the trainable Windkessel parametrization."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..windkessel import SteadyWindkessel, WindkesselParams, fit_decay_time

KINDS = ("length", "velocity", "time", "pressure", "flow", "resistance", "compliance")


@dataclass(frozen=True)
class Scales:
    """Reference length ``L`` (cm) and velocity ``U`` (cm/s).

    ``dim`` selects the flow unit: ``U L**(dim-1)``.  The 2D channel carries
    flow per unit depth, so resistance is ``rho U / L`` and compliance
    ``L**2 / (rho U**2)``; with ``dim=3`` the usual volumetric units apply.
    """

    L: float
    U: float
    rho: float = 1.06
    mu: float = 0.035
    dim: int = 2

    def __post_init__(self):
        if not (self.L > 0 and self.U > 0 and self.rho > 0 and self.mu > 0):
            raise ValueError("L, U, rho and mu must be positive")
        if self.dim not in (2, 3):
            raise ValueError("dim must be 2 or 3")

    @property
    def length(self) -> float:
        return self.L

    @property
    def velocity(self) -> float:
        return self.U

    @property
    def time(self) -> float:
        return self.L / self.U

    @property
    def pressure(self) -> float:
        return self.rho * self.U**2

    @property
    def Re(self) -> float:
        return self.rho * self.U * self.L / self.mu

    @property
    def flow(self) -> float:
        return self.U * self.L ** (self.dim - 1)

    @property
    def resistance(self) -> float:
        return self.pressure / self.flow

    @property
    def compliance(self) -> float:
        return self.flow * self.time / self.pressure

    def nd(self, kind: str, value):
        if kind not in KINDS:
            raise KeyError(kind)
        return np.asarray(value, dtype=float) / getattr(self, kind)

    def phys(self, kind: str, value):
        if kind not in KINDS:
            raise KeyError(kind)
        return np.asarray(value, dtype=float) * getattr(self, kind)


@dataclass
class EstimatedParams:
    """Log-parametrized outlet models in nondimensional units.

    Steady: ``log_Rt``.  Transient: ``log_Rp`` and ``log_Rd`` with a shared
    decay time ``tau`` fixing ``C = tau / Rd``.
    """

    mode: str
    log_Rt: np.ndarray = field(default_factory=lambda: np.empty(0))
    log_Rp: np.ndarray = field(default_factory=lambda: np.empty(0))
    log_Rd: np.ndarray = field(default_factory=lambda: np.empty(0))
    tau: float | None = None

    def __post_init__(self):
        if self.mode not in ("steady", "transient"):
            raise ValueError(f"mode must be 'steady' or 'transient', got {self.mode!r}")
        for name in ("log_Rt", "log_Rp", "log_Rd"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))

    @property
    def K(self) -> int:
        return len(self.log_Rt) if self.mode == "steady" else len(self.log_Rd)

    def vector(self) -> np.ndarray:
        if self.mode == "steady":
            return self.log_Rt.copy()
        return np.concatenate([self.log_Rp, self.log_Rd])

    def with_vector(self, vec) -> "EstimatedParams":
        vec = np.asarray(vec, dtype=float)
        if self.mode == "steady":
            return EstimatedParams("steady", log_Rt=vec.copy())
        K = len(vec) // 2
        return EstimatedParams("transient", log_Rp=vec[:K].copy(), log_Rd=vec[K:].copy(), tau=self.tau)

    @property
    def C(self) -> np.ndarray:
        if self.tau is None:
            raise ValueError("decay time not set")
        return self.tau / np.exp(self.log_Rd)

    def physical(self, scales: Scales) -> list:
        if self.mode == "steady":
            return [SteadyWindkessel(float(scales.phys("resistance", np.exp(r)))) for r in self.log_Rt]
        C = self.C
        return [
            WindkesselParams(
                float(scales.phys("resistance", np.exp(rp))),
                float(scales.phys("resistance", np.exp(rd))),
                float(scales.phys("compliance", c)),
            )
            for rp, rd, c in zip(self.log_Rp, self.log_Rd, C)
        ]


def init_windkessel_guess(reference: Sequence, seed: int, scales: Scales, tau: float | None = None) -> EstimatedParams:
    """Log-uniform draws in [ref/2, 2 ref] for every trainable parameter."""
    rng = np.random.Generator(np.random.Philox(int(seed)))
    half = np.log(2.0)
    if all(isinstance(r, SteadyWindkessel) for r in reference):
        ref = np.log(scales.nd("resistance", [r.Rt for r in reference]))
        return EstimatedParams("steady", log_Rt=ref + rng.uniform(-half, half, len(ref)))
    ref_p = np.array([r.Rp for r in reference], dtype=float)
    ref_d = np.array([r.Rd for r in reference], dtype=float)
    if np.any(ref_p <= 0) or np.any(ref_d <= 0):
        raise ValueError("reference resistances must be positive")
    K = len(reference)
    draw = rng.uniform(-half, half, 2 * K)
    return EstimatedParams(
        "transient",
        log_Rp=np.log(scales.nd("resistance", ref_p)) + draw[:K],
        log_Rd=np.log(scales.nd("resistance", ref_d)) + draw[K:],
        tau=tau,
    )


def estimate_compliance(t, pbar, t_close: float, t_end: float, Rd) -> tuple[float, np.ndarray]:
    """Shared decay time from the mean-pressure curve and ``C_k = tau / Rd_k``.

    Units follow the inputs: nondimensional ``t`` and ``Rd`` give a
    nondimensional ``tau`` and ``C``.
    """
    tau = fit_decay_time(t, pbar, t_close, t_end)
    return tau, tau / np.asarray(Rd, dtype=float)
