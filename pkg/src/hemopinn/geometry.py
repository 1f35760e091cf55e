"""Flow domain: unions of axis-aligned rectangles with tagged boundary segments.

All lengths are in cm. A domain is a parent channel plus daughter branches;
the boundary is split into one inlet, ``K`` outlets and walls.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class GeometryError(ValueError):
    pass


class InvalidDomain(GeometryError):
    pass


class NonConformingGrid(GeometryError):
    pass


class EmptyDomain(GeometryError):
    pass


class UnknownSegment(GeometryError):
    pass


# cell classes of a GridMask
SOLID, FLUID, INLET, OUTLET, WALL_ADJ = 0, 1, 2, 3, 4
# staggered face kinds
F_SOLID, F_INTERIOR, F_WALL, F_INLET, F_OUTLET = 0, 1, 2, 3, 4

_EPS = 1e-9


@dataclass(frozen=True)
class Segment:
    """Boundary segment lying on ``axis = coord`` and spanning ``[lo, hi]``.

    ``axis == "x"`` means a vertical segment at x = coord (spanning y),
    ``axis == "y"`` a horizontal one at y = coord (spanning x).
    """

    axis: str
    coord: float
    lo: float
    hi: float
    tag: str

    def __post_init__(self):
        if self.axis not in ("x", "y"):
            raise InvalidDomain(f"segment axis must be 'x' or 'y', got {self.axis!r}")
        if not self.hi > self.lo:
            raise InvalidDomain(f"segment {self.tag!r} has non-positive length")
        if self.tag != "inlet" and self.tag != "wall" and outlet_index(self.tag) is None:
            raise InvalidDomain(f"unknown segment tag {self.tag!r}")

    @property
    def length(self) -> float:
        return self.hi - self.lo

    def point(self, s):
        """Points at arc-length ``s`` (array) from ``lo``."""
        s = np.asarray(s, dtype=float)
        along = self.lo + s
        fixed = np.full_like(along, self.coord)
        if self.axis == "x":
            return np.stack([fixed, along], axis=-1)
        return np.stack([along, fixed], axis=-1)

    def contains(self, pts, tol=_EPS) -> np.ndarray:
        pts = np.atleast_2d(pts)
        a = 0 if self.axis == "x" else 1
        b = 1 - a
        return (np.abs(pts[:, a] - self.coord) <= tol) & (pts[:, b] >= self.lo - tol) & (
            pts[:, b] <= self.hi + tol
        )


def outlet_index(tag: str) -> int | None:
    if tag.startswith("outlet"):
        rest = tag[len("outlet"):].lstrip(":")
        if rest.isdigit() and int(rest) >= 1:
            return int(rest)
    return None


@dataclass(frozen=True)
class DomainSpec:
    rectangles: tuple[tuple[float, float, float, float], ...]
    segments: tuple[Segment, ...]
    L: float = 1.0
    U: float = 1.0
    normals: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        rects = tuple(tuple(float(c) for c in r) for r in self.rectangles)
        object.__setattr__(self, "rectangles", rects)
        object.__setattr__(self, "segments", tuple(self.segments))
        _validate(self)
        normals = {}
        for seg in self.segments:
            normals[seg] = _outward_normal(self, seg)
        object.__setattr__(self, "normals", normals)

    # -- queries -----------------------------------------------------------
    @property
    def n_outlets(self) -> int:
        return max(outlet_index(s.tag) or 0 for s in self.segments)

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        r = np.array(self.rectangles)
        return (r[:, 0].min(), r[:, 1].min(), r[:, 2].max(), r[:, 3].max())

    @property
    def area(self) -> float:
        return float(sum((r[2] - r[0]) * (r[3] - r[1]) for r in self.rectangles))

    def segments_for(self, which: str) -> list[Segment]:
        if which == "outlet":
            segs = [s for s in self.segments if outlet_index(s.tag) is not None]
        else:
            k = outlet_index(which)
            if k is not None:
                segs = [s for s in self.segments if outlet_index(s.tag) == k]
            else:
                segs = [s for s in self.segments if s.tag == which]
        if not segs:
            raise UnknownSegment(f"no boundary segment tagged {which!r}")
        return segs

    def outlet(self, k: int) -> Segment:
        segs = self.segments_for(f"outlet{k}")
        if len(segs) != 1:
            raise UnknownSegment(f"outlet{k} must be a single segment")
        return segs[0]

    def normal(self, seg: Segment) -> np.ndarray:
        return self.normals[seg]

    def outlet_length(self, k: int) -> float:
        return self.outlet(k).length

    def contains(self, pts, strict: bool = True) -> np.ndarray:
        """Point-in-domain test. ``strict`` excludes the outer boundary."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        inside = np.zeros(len(pts), dtype=bool)
        for x0, y0, x1, y1 in self.rectangles:
            inside |= (pts[:, 0] >= x0) & (pts[:, 0] <= x1) & (pts[:, 1] >= y0) & (pts[:, 1] <= y1)
        if strict:
            inside &= ~self.on_boundary(pts)
        return inside

    def on_boundary(self, pts, tol=_EPS) -> np.ndarray:
        pts = np.atleast_2d(pts)
        hit = np.zeros(len(pts), dtype=bool)
        for seg in self.segments:
            hit |= seg.contains(pts, tol)
        return hit

    def classify_boundary(self, pts, tol=_EPS) -> list[str | None]:
        """Tag of the segment holding each point; ``None`` off the boundary.

        Segment endpoints shared by two segments go to the first listed one.
        """
        pts = np.atleast_2d(pts)
        out: list[str | None] = [None] * len(pts)
        for seg in self.segments:
            for i in np.flatnonzero(seg.contains(pts, tol)):
                if out[i] is None:
                    out[i] = seg.tag
        return out


def _elementary_grid(rects):
    xs = np.unique(np.array([[r[0], r[2]] for r in rects]).ravel())
    ys = np.unique(np.array([[r[1], r[3]] for r in rects]).ravel())
    inside = np.zeros((len(xs) - 1, len(ys) - 1), dtype=bool)
    xc = 0.5 * (xs[1:] + xs[:-1])
    yc = 0.5 * (ys[1:] + ys[:-1])
    for x0, y0, x1, y1 in rects:
        inside |= ((xc >= x0) & (xc <= x1))[:, None] & ((yc >= y0) & (yc <= y1))[None, :]
    return xs, ys, inside


def _boundary_edges(rects):
    """Elementary boundary edges of the union as (axis, coord, lo, hi)."""
    xs, ys, inside = _elementary_grid(rects)
    padded = np.pad(inside, 1)
    edges = []
    nx, ny = inside.shape
    for i in range(nx + 1):
        for j in range(ny):
            if padded[i, j + 1] != padded[i + 1, j + 1]:
                edges.append(("x", xs[i], ys[j], ys[j + 1]))
    for i in range(nx):
        for j in range(ny + 1):
            if padded[i + 1, j] != padded[i + 1, j + 1]:
                edges.append(("y", ys[j], xs[i], xs[i + 1]))
    return edges


def _validate(spec: DomainSpec) -> None:
    rects = spec.rectangles
    if not rects:
        raise InvalidDomain("at least one rectangle is required")
    for r in rects:
        if not (r[2] > r[0] and r[3] > r[1]):
            raise InvalidDomain(f"degenerate rectangle {r}")
    for a in range(len(rects)):
        for b in range(a + 1, len(rects)):
            ra, rb = rects[a], rects[b]
            w = min(ra[2], rb[2]) - max(ra[0], rb[0])
            h = min(ra[3], rb[3]) - max(ra[1], rb[1])
            if w > _EPS and h > _EPS:
                raise InvalidDomain(f"rectangles {ra} and {rb} overlap")
    # connectivity over elementary cells (edge adjacency)
    _, _, inside = _elementary_grid(rects)
    cells = set(zip(*np.nonzero(inside)))
    start = next(iter(cells))
    seen, stack = {start}, [start]
    while stack:
        i, j = stack.pop()
        for nb in ((i + 1, j), (i - 1, j), (i, j + 1), (i, j - 1)):
            if nb in cells and nb not in seen:
                seen.add(nb)
                stack.append(nb)
    if len(seen) != len(cells):
        raise InvalidDomain("rectangle union is not connected")

    if spec.L <= 0 or spec.U <= 0:
        raise InvalidDomain("characteristic length and velocity must be positive")

    segs = spec.segments
    tags = [s.tag for s in segs]
    if tags.count("inlet") < 1:
        raise InvalidDomain("an inlet segment is required")
    ks = sorted({outlet_index(t) for t in tags if outlet_index(t) is not None})
    if not ks:
        raise InvalidDomain("at least one outlet is required")
    if ks != list(range(1, len(ks) + 1)):
        raise InvalidDomain(f"outlet indices must be 1..K, got {ks}")

    # every elementary boundary edge covered by exactly one segment
    covered_len = {id(s): 0.0 for s in segs}
    for axis, c, lo, hi in _boundary_edges(rects):
        owners = [
            s for s in segs
            if s.axis == axis and abs(s.coord - c) <= _EPS and s.lo <= lo + _EPS and s.hi >= hi - _EPS
        ]
        if len(owners) != 1:
            what = "uncovered" if not owners else "covered by several segments"
            raise InvalidDomain(f"boundary edge {axis}={c:g} [{lo:g}, {hi:g}] is {what}")
        covered_len[id(owners[0])] += hi - lo
    for s in segs:
        if abs(covered_len[id(s)] - s.length) > 1e-9 * max(1.0, s.length):
            raise InvalidDomain(f"segment {s.tag!r} at {s.axis}={s.coord:g} leaves the boundary")


def _outward_normal(spec: DomainSpec, seg: Segment) -> np.ndarray:
    mid = 0.5 * (seg.lo + seg.hi)
    d = 1e-6 * max(1.0, seg.length)
    if seg.axis == "x":
        left = spec.contains([[seg.coord - d, mid]], strict=False)[0]
        return np.array([1.0, 0.0]) if left else np.array([-1.0, 0.0])
    below = spec.contains([[mid, seg.coord - d]], strict=False)[0]
    return np.array([0.0, 1.0]) if below else np.array([0.0, -1.0])


# -- canned domains -----------------------------------------------------------

def straight_channel(length: float = 4.0, height: float = 1.0, L: float = 1.0, U: float = 1.0) -> DomainSpec:
    return DomainSpec(
        rectangles=((0.0, 0.0, length, height),),
        segments=(
            Segment("x", 0.0, 0.0, height, "inlet"),
            Segment("x", length, 0.0, height, "outlet1"),
            Segment("y", 0.0, 0.0, length, "wall"),
            Segment("y", height, 0.0, length, "wall"),
        ),
        L=L,
        U=U,
    )


def t_junction(
    parent_length: float = 3.0,
    width: float = 1.0,
    branch_width: float = 1.0,
    branch_length: float = 1.5,
    L: float = 1.0,
    U: float = 1.0,
) -> DomainSpec:
    """Parent channel along x with one branch up and one down at its far end.

    outlet1 is the upper branch, outlet2 the lower one.
    """
    a = parent_length - branch_width
    b = parent_length
    top = width + branch_length
    bot = -branch_length
    return DomainSpec(
        rectangles=((0.0, 0.0, b, width), (a, width, b, top), (a, bot, b, 0.0)),
        segments=(
            Segment("x", 0.0, 0.0, width, "inlet"),
            Segment("y", top, a, b, "outlet1"),
            Segment("y", bot, a, b, "outlet2"),
            Segment("y", 0.0, 0.0, a, "wall"),
            Segment("y", width, 0.0, a, "wall"),
            Segment("x", a, width, top, "wall"),
            Segment("x", a, bot, 0.0, "wall"),
            Segment("x", b, bot, top, "wall"),
        ),
        L=L,
        U=U,
    )


# -- grid classification ------------------------------------------------------

@dataclass(frozen=True)
class GridMask:
    h: float
    nx: int
    ny: int
    origin: tuple[float, float]
    fluid: np.ndarray  # (nx, ny) bool
    cell_class: np.ndarray  # (nx, ny) int
    cell_outlet: np.ndarray  # (nx, ny) outlet index, 0 = none
    u_kind: np.ndarray  # (nx+1, ny)
    u_outlet: np.ndarray
    v_kind: np.ndarray  # (nx, ny+1)
    v_outlet: np.ndarray

    @property
    def xc(self) -> np.ndarray:
        return self.origin[0] + (np.arange(self.nx) + 0.5) * self.h

    @property
    def yc(self) -> np.ndarray:
        return self.origin[1] + (np.arange(self.ny) + 0.5) * self.h

    @property
    def fluid_area(self) -> float:
        return float(self.fluid.sum()) * self.h**2


def _snap(value: float, origin: float, h: float) -> int:
    q = (value - origin) / h
    n = round(q)
    if abs(q - n) > 1e-9 * max(1.0, abs(q)):
        raise NonConformingGrid(f"h={h:g} does not tile coordinate {value:g}")
    return int(n)


def build_mask(spec: DomainSpec, h: float) -> GridMask:
    if h <= 0:
        raise NonConformingGrid("h must be positive")
    x0, y0, x1, y1 = spec.bbox
    for r in spec.rectangles:
        for c, o in ((r[0], x0), (r[2], x0), (r[1], y0), (r[3], y0)):
            _snap(c, o, h)
    for s in spec.segments:
        o_fix, o_run = (x0, y0) if s.axis == "x" else (y0, x0)
        _snap(s.coord, o_fix, h)
        _snap(s.lo, o_run, h)
        _snap(s.hi, o_run, h)
    nx, ny = _snap(x1, x0, h), _snap(y1, y0, h)

    fluid = np.zeros((nx, ny), dtype=bool)
    for r in spec.rectangles:
        i0, i1 = _snap(r[0], x0, h), _snap(r[2], x0, h)
        j0, j1 = _snap(r[1], y0, h), _snap(r[3], y0, h)
        fluid[i0:i1, j0:j1] = True
    if not fluid.any():
        raise EmptyDomain("no fluid cell")

    def seg_at(axis, c, a, b):
        for s in spec.segments:
            if s.axis == axis and abs(s.coord - c) <= 1e-9 * max(1.0, abs(c)) and s.lo <= a + 1e-9 and s.hi >= b - 1e-9:
                return s
        raise InvalidDomain(f"grid face {axis}={c:g} [{a:g},{b:g}] is not on any segment")

    def classify(axis, c, a, b):
        s = seg_at(axis, c, a, b)
        if s.tag == "inlet":
            return F_INLET, 0
        if s.tag == "wall":
            return F_WALL, 0
        return F_OUTLET, outlet_index(s.tag)

    pad = np.pad(fluid, 1)
    u_kind = np.zeros((nx + 1, ny), dtype=np.int8)
    u_out = np.zeros((nx + 1, ny), dtype=np.int16)
    for i in range(nx + 1):
        for j in range(ny):
            left, right = pad[i, j + 1], pad[i + 1, j + 1]
            if left and right:
                u_kind[i, j] = F_INTERIOR
            elif left or right:
                x = x0 + i * h
                u_kind[i, j], u_out[i, j] = classify("x", x, y0 + j * h, y0 + (j + 1) * h)
    v_kind = np.zeros((nx, ny + 1), dtype=np.int8)
    v_out = np.zeros((nx, ny + 1), dtype=np.int16)
    for i in range(nx):
        for j in range(ny + 1):
            below, above = pad[i + 1, j], pad[i + 1, j + 1]
            if below and above:
                v_kind[i, j] = F_INTERIOR
            elif below or above:
                y = y0 + j * h
                v_kind[i, j], v_out[i, j] = classify("y", y, x0 + i * h, x0 + (i + 1) * h)

    cell_class = np.where(fluid, FLUID, SOLID).astype(np.int8)
    cell_out = np.zeros((nx, ny), dtype=np.int16)
    faces = (
        (u_kind[:-1, :], u_out[:-1, :]),
        (u_kind[1:, :], u_out[1:, :]),
        (v_kind[:, :-1], v_out[:, :-1]),
        (v_kind[:, 1:], v_out[:, 1:]),
    )
    for kind, _ in faces:
        cell_class[fluid & (kind == F_WALL) & (cell_class == FLUID)] = WALL_ADJ
    for kind, _ in faces:
        cell_class[fluid & (kind == F_INLET) & (cell_class != OUTLET)] = INLET
    for kind, out in faces:
        hit = fluid & (kind == F_OUTLET)
        cell_class[hit] = OUTLET
        cell_out[hit] = out[hit]

    return GridMask(h, nx, ny, (x0, y0), fluid, cell_class, cell_out, u_kind, u_out, v_kind, v_out)


# -- point sampling -----------------------------------------------------------

@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray  # (n, 2), cm
    tag: str
    seed: int | None = None
    t: np.ndarray | None = None  # (n,), s

    def __len__(self) -> int:
        return len(self.points)


def sample_collocation(spec: DomainSpec, n: int, t_range: Sequence[float] | None, seed: int) -> PointCloud:
    """Uniform interior points (by area), each with an independent uniform time."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    rects = np.array(spec.rectangles)
    areas = (rects[:, 2] - rects[:, 0]) * (rects[:, 3] - rects[:, 1])
    out = np.empty((0, 2))
    while len(out) < n:
        m = n - len(out)
        pick = rng.choice(len(rects), size=m, p=areas / areas.sum())
        r = rects[pick]
        u = rng.random((m, 2))
        pts = np.column_stack([r[:, 0] + u[:, 0] * (r[:, 2] - r[:, 0]), r[:, 1] + u[:, 1] * (r[:, 3] - r[:, 1])])
        out = np.vstack([out, pts[spec.contains(pts, strict=True)]])
    t = None
    if t_range is not None:
        t = rng.uniform(t_range[0], t_range[1], size=n)
    return PointCloud(out[:n], "interior", seed, t)


def sample_boundary(spec: DomainSpec, which: str, n: int, seed: int, jitter: bool = True) -> PointCloud:
    """Stratified points along the arc length of every segment tagged ``which``."""
    segs = spec.segments_for(which)
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    lengths = np.array([s.length for s in segs])
    total = lengths.sum()
    if jitter:
        s = (np.arange(n) + rng.random(n)) / n * total
    else:
        # evenly spaced, endpoints included
        s = np.linspace(0.0, total, n) if n > 1 else np.array([0.5 * total])
    bounds = np.concatenate([[0.0], np.cumsum(lengths)])
    idx = np.clip(np.searchsorted(bounds, s, side="right") - 1, 0, len(segs) - 1)
    pts = np.empty((n, 2))
    for k, seg in enumerate(segs):
        sel = idx == k
        pts[sel] = seg.point(s[sel] - bounds[k])
    return PointCloud(pts, which, seed)


def outlet_quadrature(spec: DomainSpec, k: int, m: int, rule: str = "trapezoid") -> tuple[PointCloud, np.ndarray]:
    """Nodes and weights along outlet ``k``; weights sum to its length.

    ``rule`` is "trapezoid" (composite, endpoints included) or "gauss"
    (Gauss-Legendre, interior nodes only).
    """
    seg = spec.outlet(k)
    if rule == "gauss":
        if m < 1:
            raise ValueError("m must be >= 1")
        x, w = np.polynomial.legendre.leggauss(m)
        return PointCloud(seg.point(0.5 * (x + 1.0) * seg.length), f"outlet{k}"), 0.5 * seg.length * w
    if rule != "trapezoid":
        raise ValueError(f"unknown quadrature rule {rule!r}")
    if m < 2:
        raise ValueError("m must be >= 2")
    s = np.linspace(0.0, seg.length, m)
    w = np.full(m, seg.length / (m - 1))
    w[0] *= 0.5
    w[-1] *= 0.5
    return PointCloud(seg.point(s), f"outlet{k}"), w
