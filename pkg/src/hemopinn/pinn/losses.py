"""Loss terms, loss weights and outlet-flow interpolation (all nondimensional)."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np
import torch
from scipy.interpolate import CubicSpline

from ..neural.jet import Jet


class DegreeTooLow(ValueError):
    pass


class TooFewTimes(ValueError):
    pass


class ZeroGradient(UserWarning):
    pass


TERMS = ("ns", "wk", "bc", "udata", "pdata", "gradp")


def velocity_from_potential(psi: Jet, min_degree: int = 3) -> tuple[Jet, Jet]:
    """``u = d psi / dy``, ``v = -d psi / dx`` as jets one degree below ``psi``."""
    if psi.degree < max(1, min_degree):
        raise DegreeTooLow(f"stream-function jet has degree {psi.degree}, need {max(1, min_degree)}")
    return psi.diff(1), -psi.diff(0)


def _mean_sq(*parts: torch.Tensor) -> torch.Tensor:
    return sum(torch.mean(p * p) for p in parts)


def ns_residuals(u: Jet, v: Jet, p: Jet, Re: float):
    """Momentum residuals (x, y) and divergence at every point."""
    if u.degree < 2 or p.degree < 1:
        raise DegreeTooLow("momentum residual needs degree-2 velocity and degree-1 pressure jets")
    transient = u.basis.nvars >= 3
    ru = u.value * u.d(1) + v.value * u.d(0, 1) - (u.d(2) + u.d(0, 2)) / Re + p.d(1)
    rv = u.value * v.d(1) + v.value * v.d(0, 1) - (v.d(2) + v.d(0, 2)) / Re + p.d(0, 1)
    if transient:
        ru = ru + u.d(0, 0, 1)
        rv = rv + v.d(0, 0, 1)
    return ru, rv, u.d(1) + v.d(0, 1)


def loss_ns(u: Jet, v: Jet, p: Jet, Re: float, weight: float = 1.0) -> torch.Tensor:
    ru, rv, div = ns_residuals(u, v, p, Re)
    return weight * (torch.mean(ru * ru + rv * rv) + torch.mean(div * div))


def loss_wk(
    p_out: Sequence[torch.Tensor],
    Q_p: torch.Tensor,
    params: dict[str, torch.Tensor],
    pi_p: torch.Tensor | None = None,
    pi: torch.Tensor | None = None,
    dpi: torch.Tensor | None = None,
    Q_ode: torch.Tensor | None = None,
    weight: float = 1.0,
) -> torch.Tensor:
    """Outlet-model residuals summed over outlets.

    ``p_out[k]`` holds net pressure at outlet ``k`` with shape (n_t, m);
    ``Q_p`` (K, n_t) the outlet flows at those times.  Steady mode passes
    ``params = {"Rt": ...}``; transient mode passes Rp, Rd, C, the internal
    pressures ``pi_p`` (K, n_t) at the pressure times and ``pi``, ``dpi``,
    ``Q_ode`` (K, n_s) at the ODE sample times.
    """
    total = torch.zeros((), dtype=torch.float64)
    steady = "Rt" in params
    for k, pk in enumerate(p_out):
        if steady:
            r = pk - params["Rt"][k] * Q_p[k][:, None]
            total = total + torch.mean(r * r)
            continue
        r = pk - params["Rp"][k] * Q_p[k][:, None] - pi_p[k][:, None]
        ode = params["C"][k] * dpi[k] + pi[k] / params["Rd"][k] - Q_ode[k]
        total = total + torch.mean(r * r) + torch.mean(ode * ode)
    return weight * total


def loss_bc(u: torch.Tensor, v: torch.Tensor, weight: float = 1.0) -> torch.Tensor:
    return weight * torch.mean(u * u + v * v)


def loss_udata(u, v, u_meas, v_meas, weight: float = 1.0) -> torch.Tensor:
    du = u - torch.as_tensor(u_meas, dtype=torch.float64)
    dv = v - torch.as_tensor(v_meas, dtype=torch.float64)
    return weight * torch.mean(du * du + dv * dv)


def pbar_prediction(p_out: Sequence[torch.Tensor], quad_w: Sequence, lengths: Sequence[float]) -> torch.Tensor:
    """Sum over outlets of the outlet-averaged pressure, per time (n_t,)."""
    total = 0.0
    for pk, w, ln in zip(p_out, quad_w, lengths):
        total = total + pk @ torch.as_tensor(np.asarray(w), dtype=torch.float64) / ln
    return total


def loss_pdata(pbar, pbar_meas, weight: float = 1.0) -> torch.Tensor:
    d = pbar - torch.as_tensor(pbar_meas, dtype=torch.float64)
    return weight * torch.mean(d * d)


def loss_gradp(grads: Sequence[tuple[torch.Tensor, torch.Tensor]], weight: float = 1.0) -> torch.Tensor:
    """``grads[k] = (dp/dx, dp/dy)`` at the nodes of outlet ``k``."""
    total = torch.zeros((), dtype=torch.float64)
    for px, py in grads:
        total = total + torch.mean(px * px + py * py)
    return weight * total


class OutletFlow:
    """Outlet flows sampled at measurement times, cubic (not-a-knot) in time.

    A single sample (steady data) gives a constant.
    """

    def __init__(self, times, Q):
        self.times = np.asarray(times, dtype=float)
        self.Q = np.atleast_2d(np.asarray(Q, dtype=float))
        M = len(self.times)
        if self.Q.shape[1] != M:
            raise ValueError("Q must have shape (K, M)")
        if 1 < M < 4:
            raise TooFewTimes(f"cubic interpolation needs at least 4 times, got {M}")
        self._spline = CubicSpline(self.times, self.Q, axis=1, bc_type="not-a-knot") if M > 1 else None

    def __call__(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if self._spline is None:
            return np.repeat(self.Q, len(t), axis=1)
        return self._spline(t)


@dataclass(frozen=True)
class LossWeights:
    ns: float = 1.0
    wk: float = 1.0
    bc: float = 1.0
    data: float = 1.0
    gradp: float = 1.0
    mode: str = "manual"
    alpha: float = 0.1
    period: int = 10

    def __post_init__(self):
        if self.mode not in ("manual", "automatic"):
            raise ValueError(f"weight mode must be 'manual' or 'automatic', got {self.mode!r}")
        for name in ("ns", "wk", "bc", "data", "gradp"):
            if not getattr(self, name) > 0:
                raise ValueError(f"weight {name} must be positive")
        if not 0 < self.alpha <= 1 or self.period < 1:
            raise ValueError("need 0 < alpha <= 1 and period >= 1")

    def of(self, term: str) -> float:
        return getattr(self, "data" if term in ("udata", "pdata") else term)

    def as_dict(self) -> dict:
        return asdict(self)


def update_weights_auto(grads: dict[str, torch.Tensor], weights: LossWeights) -> LossWeights:
    """Exponentially averaged ``||grad L_ns||_1 / mean|grad L_i|`` for every other term.

    ``grads`` maps "ns", "wk", "bc", "data", "gradp" to unweighted gradients
    over the same parameter entries.  A term whose gradient vanishes keeps
    its weight (a ZeroGradient warning is issued).
    """
    num = float(torch.sum(torch.abs(grads["ns"])))
    new = {}
    for name in ("wk", "bc", "data", "gradp"):
        if name not in grads:
            continue
        den = float(torch.mean(torch.abs(grads[name])))
        if den == 0.0:
            warnings.warn(f"zero gradient for loss term {name!r}; weight unchanged", ZeroGradient, stacklevel=2)
            continue
        old = getattr(weights, name)
        new[name] = (1.0 - weights.alpha) * old + weights.alpha * num / den
    return replace(weights, ns=1.0 if weights.mode == "automatic" else weights.ns, **new)
