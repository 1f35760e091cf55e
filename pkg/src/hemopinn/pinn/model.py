"""Network layout for the inverse problem: field net, internal-pressure net, outlet parameters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..geometry import DomainSpec, outlet_quadrature
from ..neural.jet import Jet
from ..neural.mlp import DTYPE, MlpSpec, ParamVector, forward_jet, init_params
from .losses import OutletFlow, velocity_from_potential
from .scales import EstimatedParams, Scales


@dataclass(frozen=True)
class PiNet:
    """Small MLP from nondimensional time to the K internal pressures."""

    spec: MlpSpec

    @classmethod
    def build(cls, K: int, hidden_layers: int, width: int, t_range, shift: float, scale: float) -> "PiNet":
        t0, t1 = t_range
        half = max((t1 - t0) / 2.0, 1e-12)
        spec = MlpSpec(1, hidden_layers, width, K, "swish", (0.5 * (t0 + t1),), (half,), (shift,) * K, (scale,) * K)
        return cls(spec)

    @property
    def K(self) -> int:
        return self.spec.output_dim

    def __call__(self, theta: torch.Tensor, t_nd) -> tuple[torch.Tensor, torch.Tensor]:
        """pi (K, n) and d pi / dt (K, n)."""
        t = torch.as_tensor(np.asarray(t_nd, dtype=float) if not torch.is_tensor(t_nd) else t_nd, dtype=DTYPE)
        jet = forward_jet(theta, self.spec, t.reshape(-1, 1), 1)
        return jet.value.T, jet.d(1).T


class PinnModel:
    """Everything needed to evaluate fields and outlet quantities from one vector.

    Coordinates handed to the networks are nondimensional.  Steady mode maps
    (x, y) to (u, v, p); transient mode maps (x, y, t) to (psi, p) with
    ``u = psi_y`` and ``v = -psi_x``.
    """

    def __init__(
        self,
        domain: DomainSpec,
        scales: Scales,
        mode: str,
        hidden_layers: int,
        width: int,
        vel_scale: float,
        p_shift: float,
        p_scale: float,
        t_range: tuple[float, float] = (0.0, 1.0),
        pi_hidden: int = 6,
        pi_width: int = 10,
        pi_shift: float = 0.0,
        pi_scale: float = 1.0,
    ):
        if mode not in ("steady", "transient"):
            raise ValueError(f"mode must be 'steady' or 'transient', got {mode!r}")
        self.domain = domain
        self.scales = scales
        self.mode = mode
        self.K = domain.n_outlets
        x0, y0, x1, y1 = (c / scales.L for c in domain.bbox)
        cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
        hx, hy = 0.5 * (x1 - x0), 0.5 * (y1 - y0)
        if mode == "steady":
            self.net = MlpSpec(2, hidden_layers, width, 3, "swish", (cx, cy), (hx, hy),
                               (0.0, 0.0, p_shift), (vel_scale, vel_scale, p_scale))
            self.pinet = None
        else:
            t0, t1 = t_range
            ht = max(0.5 * (t1 - t0), 1e-12)
            self.net = MlpSpec(3, hidden_layers, width, 2, "swish", (cx, cy, 0.5 * (t0 + t1)), (hx, hy, ht),
                               (0.0, p_shift), (vel_scale * max(hx, hy), p_scale))
            self.pinet = PiNet.build(self.K, pi_hidden, pi_width, t_range, pi_shift, pi_scale)
        self.Re = scales.Re
        self._quad: dict[int, tuple[np.ndarray, list, list]] = {}

    # -- parameter layout --------------------------------------------------------
    def init_vector(self, seed: int, guess: EstimatedParams) -> ParamVector:
        parts = {"net": init_params(self.net, seed)}
        if self.pinet is not None:
            parts["pinet"] = init_params(self.pinet.spec, seed + 7919)
        parts["wk"] = torch.as_tensor(guess.vector(), dtype=DTYPE)
        return ParamVector.concat(parts)

    def wk_tensors(self, pv: ParamVector, theta: torch.Tensor, tau: float | None) -> dict[str, torch.Tensor]:
        w = pv.view(theta, "wk")
        if self.mode == "steady":
            return {"Rt": torch.exp(w)}
        Rp, Rd = torch.exp(w[: self.K]), torch.exp(w[self.K:])
        return {"Rp": Rp, "Rd": Rd, "C": tau / Rd}

    # -- field evaluation ------------------------------------------------------
    def _inputs(self, pts_nd, t_nd=None) -> torch.Tensor:
        pts = np.asarray(pts_nd, dtype=float).reshape(-1, 2)
        if self.mode == "transient":
            t = np.broadcast_to(np.asarray(0.0 if t_nd is None else t_nd, dtype=float), (len(pts),))
            pts = np.column_stack([pts, t])
        return torch.as_tensor(pts, dtype=DTYPE)

    def fields(self, theta_net: torch.Tensor, pts_nd, t_nd=None, degree: int = 0) -> tuple[Jet, Jet, Jet]:
        """Velocity and pressure jets of the given degree."""
        x = self._inputs(pts_nd, t_nd)
        if self.mode == "steady":
            out = forward_jet(theta_net, self.net, x, degree)
            return out[..., 0], out[..., 1], out[..., 2]
        out = forward_jet(theta_net, self.net, x, degree + 1)
        u, v = velocity_from_potential(out[..., 0], min_degree=degree + 1)
        return u, v, out[..., 1].truncate(degree)

    def pressure(self, theta_net: torch.Tensor, pts_nd, t_nd=None, degree: int = 0) -> Jet:
        out = forward_jet(theta_net, self.net, self._inputs(pts_nd, t_nd), degree)
        return out[..., -1]

    # -- outlets -----------------------------------------------------------------
    def outlet_nodes(self, m: int):
        """Per outlet: nodes (nondim, (m, 2)), weights (nondim), normal, length (nondim)."""
        if m not in self._quad:
            nodes, weights, normals, lengths = [], [], [], []
            for k in range(1, self.K + 1):
                cloud, w = outlet_quadrature(self.domain, k, m, "gauss")
                nodes.append(cloud.points / self.scales.L)
                weights.append(w / self.scales.L)
                normals.append(self.domain.normal(self.domain.outlet(k)))
                lengths.append(self.domain.outlet(k).length / self.scales.L)
            self._quad[m] = (nodes, weights, normals, lengths)
        return self._quad[m]

    def _grid(self, nodes: np.ndarray, times: np.ndarray):
        pts = np.tile(nodes, (len(times), 1))
        t = np.repeat(times, len(nodes))
        return pts, t

    def boundary_flows(self, theta_net: torch.Tensor, times_nd, m: int, which: str = "outlet") -> np.ndarray:
        """Outward flow through each outlet (K, n_t), or inward inlet flow (1, n_t); no gradient."""
        times = np.atleast_1d(np.asarray(times_nd, dtype=float))
        if which == "outlet":
            nodes, weights, normals, _ = self.outlet_nodes(m)
            sign = 1.0
        else:
            seg = self.domain.segments_for("inlet")[0]
            xg, wg = np.polynomial.legendre.leggauss(m)
            s = 0.5 * (xg + 1.0) * seg.length
            nodes = [seg.point(s) / self.scales.L]
            weights = [0.5 * seg.length * wg / self.scales.L]
            normals = [self.domain.normal(seg)]
            sign = -1.0
        out = np.zeros((len(nodes), len(times)))
        with torch.no_grad():
            for k, (nd, w, n) in enumerate(zip(nodes, weights, normals)):
                pts, t = self._grid(nd, times)
                u, v, _ = self.fields(theta_net, pts, t if self.mode == "transient" else None, 0)
                un = (u.value * n[0] + v.value * n[1]).numpy().reshape(len(times), len(nd))
                out[k] = sign * un @ w
        return out

    def outlet_flow_interpolant(self, theta_net: torch.Tensor, times_nd, m: int) -> OutletFlow:
        return OutletFlow(np.atleast_1d(times_nd), self.boundary_flows(theta_net, times_nd, m))

    def outlet_pressure(self, theta_net: torch.Tensor, times_nd, m: int, degree: int = 1):
        """Pressure jets at every outlet node and time; list of (n_t, m)-shaped jets."""
        nodes, _, _, _ = self.outlet_nodes(m)
        times = np.atleast_1d(np.asarray(times_nd, dtype=float))
        pts = np.vstack([self._grid(nd, times)[0] for nd in nodes])
        t = np.concatenate([self._grid(nd, times)[1] for nd in nodes])
        jet = self.pressure(theta_net, pts, t if self.mode == "transient" else None, degree)
        n = len(times) * m
        return [jet[k * n:(k + 1) * n] for k in range(self.K)], len(times)
