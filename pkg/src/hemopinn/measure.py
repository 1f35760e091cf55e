"""Synthetic phase-contrast MRI measurements from reference snapshots.

Velocities are interpolated onto slice pixels, encoded into the phase of a
complex magnetization, corrupted with Gaussian noise on both quadrature
components and reconstructed from the phase difference with a reference
acquisition.  ``SNR_dB = 20 log10(M0 / sigma)`` per component.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .geometry import F_SOLID, DomainSpec, GridMask
from .refsolver import FaceStencil, FlowSnapshot


class MeasurementError(ValueError):
    pass


class PointOutsideDomain(MeasurementError):
    pass


class ZeroReference(MeasurementError):
    pass


class DegenerateField(MeasurementError):
    pass


@dataclass(frozen=True)
class SlicePlan:
    lines: tuple[tuple[tuple[float, float], tuple[float, float]], ...]
    spacing: float
    times: tuple[float, ...]

    def __post_init__(self):
        if not self.spacing > 0:
            raise MeasurementError("pixel spacing must be positive")
        object.__setattr__(self, "lines", tuple((tuple(a), tuple(b)) for a, b in self.lines))
        object.__setattr__(self, "times", tuple(float(t) for t in self.times))

    def pixels(self) -> np.ndarray:
        """Pixel centres of every line, line by line."""
        out = []
        for a, b in self.lines:
            a, b = np.asarray(a, float), np.asarray(b, float)
            length = np.linalg.norm(b - a)
            n = max(1, int(round(length / self.spacing)))
            s = (np.arange(n) + 0.5) / n
            out.append(a + s[:, None] * (b - a))
        return np.vstack(out) if out else np.empty((0, 2))

    @classmethod
    def dense(cls, spec: DomainSpec, spacing: float, times: Sequence[float]) -> "SlicePlan":
        """Horizontal pixel rows filling the whole domain."""
        x0, y0, x1, y1 = spec.bbox
        lines = []
        for y in np.arange(y0 + spacing / 2, y1, spacing):
            spans = sorted((r[0], r[2]) for r in spec.rectangles if r[1] < y < r[3])
            merged: list[list[float]] = []
            for a, b in spans:
                if merged and a <= merged[-1][1] + 1e-12:
                    merged[-1][1] = max(merged[-1][1], b)
                else:
                    merged.append([a, b])
            for a, b in merged:
                lines.append(((a, float(y)), (b, float(y))))
        return cls(tuple(lines), spacing, tuple(times))


def cadence_times(T: float, cadence: float) -> tuple[float, ...]:
    n = int(np.floor(T / cadence + 1e-9))
    return tuple(round(i * cadence, 12) for i in range(n + 1) if i * cadence < T - 1e-12 or n == 0)


@dataclass
class MeasurementSet:
    points: np.ndarray  # (n, 2) cm
    t: np.ndarray  # (n,) s
    u: np.ndarray  # (n,) cm/s
    v: np.ndarray
    venc: float
    snr_db: float
    seed: int
    pbar_t: np.ndarray
    pbar: np.ndarray  # dyn/cm^2
    times: np.ndarray = field(default_factory=lambda: np.empty(0))
    u_clean: np.ndarray | None = None
    v_clean: np.ndarray | None = None


# -- interpolation ------------------------------------------------------------

def _filled(comp: FaceStencil, a: np.ndarray) -> np.ndarray:
    """Face array padded by one row on each side of axis 1, ghosts filled in."""
    n0, n1 = a.shape
    out = np.zeros((n0, n1 + 2))
    out[:, 1:-1] = np.where(comp.kind == F_SOLID, 0.0, a)
    real = comp.kind != F_SOLID
    # missing faces take the mirrored (no-slip) or copied (outlet) neighbour
    for j in range(n1 + 2):
        jj = j - 1
        if 0 <= jj < n1:
            miss = ~real[:, jj]
        else:
            miss = np.ones(n0, dtype=bool)
        if not miss.any():
            continue
        val = np.zeros(n0)
        done = np.zeros(n0, dtype=bool)
        if jj - 1 >= 0:
            ok = miss & real[:, jj - 1]
            val[ok] = comp.sign_n[ok, jj - 1] * a[ok, jj - 1]
            done |= ok
        if jj + 1 < n1:
            ok = miss & ~done & real[:, jj + 1]
            val[ok] = comp.sign_s[ok, jj + 1] * a[ok, jj + 1]
        out[miss, j] = val[miss]
    return out


def _bilinear(arr, fx, fy):
    n0, n1 = arr.shape
    i0 = np.clip(np.floor(fx).astype(int), 0, n0 - 2)
    j0 = np.clip(np.floor(fy).astype(int), 0, n1 - 2)
    tx = fx - i0
    ty = fy - j0
    return (
        arr[i0, j0] * (1 - tx) * (1 - ty)
        + arr[i0 + 1, j0] * tx * (1 - ty)
        + arr[i0, j0 + 1] * (1 - tx) * ty
        + arr[i0 + 1, j0 + 1] * tx * ty
    )


class VelocitySampler:
    """Bilinear interpolation of staggered velocities at arbitrary points."""

    def __init__(self, spec: DomainSpec, mask: GridMask):
        self.spec = spec
        self.mask = mask
        self.cu = FaceStencil(mask.u_kind, mask.u_outlet, mask.v_kind, mask.fluid)
        self.cv = FaceStencil(mask.v_kind.T, mask.v_outlet.T, mask.u_kind.T, mask.fluid.T)

    def __call__(self, u, v, pts) -> tuple[np.ndarray, np.ndarray]:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        inside = self.spec.contains(pts, strict=False)
        if not inside.all():
            bad = pts[~inside][0]
            raise PointOutsideDomain(f"point ({bad[0]:g}, {bad[1]:g}) is outside the fluid domain")
        h = self.mask.h
        x0, y0 = self.mask.origin
        X = (pts[:, 0] - x0) / h
        Y = (pts[:, 1] - y0) / h
        uf = _filled(self.cu, u)
        vf = _filled(self.cv, v.T)
        ui = _bilinear(uf, X, Y - 0.5 + 1.0)
        vi = _bilinear(vf, Y, X - 0.5 + 1.0)
        return ui, vi


def interpolate_to_slices(snapshots: Sequence[FlowSnapshot], plan: SlicePlan, spec: DomainSpec, mask: GridMask):
    """Clean slice samples: (points, t, u, v), nearest snapshot in time."""
    snap_t = np.array([s.t for s in snapshots])
    pix = plan.pixels()
    sampler = VelocitySampler(spec, mask)
    P, T, U, V = [], [], [], []
    for tm in plan.times:
        k = int(np.argmin(np.abs(snap_t - tm)))
        if abs(snap_t[k] - tm) > 0.5 * _cadence(snap_t) + 1e-9:
            raise MeasurementError(f"measurement time {tm} not covered by snapshots")
        u, v = sampler(snapshots[k].u, snapshots[k].v, pix)
        P.append(pix)
        T.append(np.full(len(pix), tm))
        U.append(u)
        V.append(v)
    return np.vstack(P), np.concatenate(T), np.concatenate(U), np.concatenate(V)


def _cadence(t):
    return float(np.min(np.diff(t))) if len(t) > 1 else np.inf


# -- MR signal model ----------------------------------------------------------

def encode(u, venc, M0: float = 1.0, phi0=0.0):
    """Velocity-encoded and reference magnetizations (``venc`` and ``phi0`` may be arrays)."""
    if not (np.all(np.asarray(venc) > 0) and M0 > 0):
        raise MeasurementError("venc and M0 must be positive")
    u = np.asarray(u, dtype=float)
    Mu = M0 * np.exp(1j * (phi0 + np.pi * u / venc))
    Mref = M0 * np.exp(1j * phi0) * np.ones_like(Mu)
    return Mu, Mref


def noise_sigma(snr_db: float, M0: float = 1.0) -> float:
    return 0.0 if np.isinf(snr_db) else M0 * 10.0 ** (-snr_db / 20.0)


def add_noise(M, snr_db: float, M0: float = 1.0, seed: int | np.random.Generator = 0):
    """Independent Gaussian noise on real and imaginary parts."""
    if np.isnan(snr_db):
        raise MeasurementError("snr_db must not be NaN")
    M = np.asarray(M, dtype=complex)
    sigma = noise_sigma(snr_db, M0)
    if sigma == 0.0:
        return M.copy()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.Generator(np.random.Philox(seed))
    z = rng.standard_normal(M.shape + (2,))
    return M + sigma * (z[..., 0] + 1j * z[..., 1])


def reconstruct(Mu, Mref, venc: float):
    """Velocity from the phase difference, angle taken in (-pi, pi]."""
    Mu = np.asarray(Mu, dtype=complex)
    Mref = np.asarray(Mref, dtype=complex)
    if np.any(np.abs(Mref) == 0):
        raise ZeroReference("reference magnetization is zero")
    ang = np.angle(Mu * np.conj(Mref))
    ang = np.where(ang <= -np.pi, ang + 2 * np.pi, ang)
    out = venc * ang / np.pi
    return float(out) if out.ndim == 0 else out


def choose_venc(snapshots: Sequence[FlowSnapshot], factor: float = 1.2) -> float:
    vmax = 0.0
    for s in snapshots:
        vmax = max(vmax, float(np.abs(s.u).max(initial=0.0)), float(np.abs(s.v).max(initial=0.0)))
    if vmax == 0.0:
        raise DegenerateField("velocity field is identically zero")
    return factor * vmax


def mean_pressure_curve(snapshots: Sequence[FlowSnapshot], spec: DomainSpec, times: Sequence[float] | None = None):
    """Sum over outlets of the outlet-averaged pressure, optionally resampled.

    The outlet face pressure equals the imposed ``P_k``, so the outlet average
    is ``P_k`` itself.
    """
    t = np.array([s.t for s in snapshots])
    pbar = np.array([float(np.sum(s.P)) for s in snapshots])
    if len(snapshots) == 1 or times is None:
        return t, pbar
    times = np.asarray(times, dtype=float)
    return times, CubicSpline(t, pbar)(times)


def synthesize(
    snapshots: Sequence[FlowSnapshot],
    spec: DomainSpec,
    mask: GridMask,
    plan: SlicePlan,
    snr_db: float = 18.0,
    seed: int = 0,
    M0: float = 1.0,
    phi0: float = 0.5,
    venc: float | None = None,
) -> MeasurementSet:
    pts, t, uc, vc = interpolate_to_slices(snapshots, plan, spec, mask)
    if venc is None:
        venc = choose_venc(snapshots)
    rng = np.random.Generator(np.random.Philox(seed))
    Mu, Mref = encode(uc, venc, M0, phi0)
    Mv, _ = encode(vc, venc, M0, phi0)
    Mref = add_noise(Mref, snr_db, M0, rng)
    Mu = add_noise(Mu, snr_db, M0, rng)
    Mv = add_noise(Mv, snr_db, M0, rng)
    u = reconstruct(Mu, Mref, venc)
    v = reconstruct(Mv, Mref, venc)
    if len(snapshots) == 1:
        pt, pb = mean_pressure_curve(snapshots, spec)
    else:
        pt, pb = mean_pressure_curve(snapshots, spec, plan.times)
    return MeasurementSet(
        pts, t, np.atleast_1d(u), np.atleast_1d(v), float(venc), float(snr_db), int(seed),
        pt, pb, np.asarray(plan.times), uc, vc,
    )
