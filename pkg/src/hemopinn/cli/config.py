"""Run configuration: a TOML file with one table per module.

Parsing is strict.  Unknown keys, wrong types and values rejected by the
module constructors all raise :class:`ConfigError` with the offending
section in brackets, e.g. ``[geometry] rectangles must ...``.
"""

from __future__ import annotations

import math
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import tomli

from ..geometry import DomainSpec, GeometryError, Segment
from ..measure import MeasurementError, SlicePlan, cadence_times
from ..pinn import LossWeights, Scales, TrainConfig
from ..refsolver import InflowWaveform, SolverConfig
from ..windkessel import PI0_MMHG, SteadyWindkessel, WindkesselParams, mmhg_to_cgs


class ConfigError(ValueError):
    pass


# -- raw sections ------------------------------------------------------------------
# Field annotations double as the type schema of each table.

@dataclass
class GeometrySection:
    rectangles: list = field(default_factory=list)
    segments: list = field(default_factory=list)


@dataclass
class InflowSection:
    q_sys: float = 15.0
    q_dia: float = 0.5
    t_sys: float = 0.25
    period: float = 0.66
    q: float = 8.0


@dataclass
class SolverSection:
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
    inflow: InflowSection = field(default_factory=InflowSection)


@dataclass
class WindkesselSection:
    outlets: list = field(default_factory=list)
    pi0_mmhg: float = PI0_MMHG


@dataclass
class MeasurementSection:
    lines: list = field(default_factory=list)
    dense: bool = False
    spacing: float = 0.1
    cadence: float = 0.03
    snr_db: float = 18.0
    M0: float = 1.0
    phi0: float = 0.5
    venc: float | None = None


@dataclass
class NetworkSection:
    hidden_layers: int = 4
    width: int = 64
    pi_hidden: int = 6
    pi_width: int = 10


@dataclass
class WeightsSection:
    mode: str = "manual"
    ns: float = 1.0
    wk: float = 1.0
    bc: float = 1.0
    data: float = 1.0
    gradp: float = 1.0
    alpha: float = 0.1
    period: int = 10


@dataclass
class TrainingSection:
    epochs_stage1: int = 120
    epochs_stage2: int = 1250
    steps_per_epoch: int = 1
    batch: int | None = None
    lr_net: float = 1e-3
    lr_params: float = 1e-2
    decay_factor: float = 0.5
    n_collocation: int = 20000
    n_wall: int = 4000
    n_outlet_nodes: int = 16
    n_ode_random: int = 22
    t_close: float = 0.3
    t_end: float | None = None
    realizations: int = 1
    weights: WeightsSection = field(default_factory=WeightsSection)


@dataclass
class ScalesSection:
    L: float = 1.0
    U: float | None = None


@dataclass
class PostprocessSection:
    inlet: str = "pinn"
    inlet_nodes: int = 65
    flow_nodes: int = 32


@dataclass
class ReportSection:
    rmse_frames: int = 4


@dataclass
class RootSection:
    mode: str = "transient"
    seed: int = 0
    geometry: GeometrySection = field(default_factory=GeometrySection)
    solver: SolverSection = field(default_factory=SolverSection)
    windkessel: WindkesselSection = field(default_factory=WindkesselSection)
    measurement: MeasurementSection = field(default_factory=MeasurementSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    scales: ScalesSection = field(default_factory=ScalesSection)
    postprocess: PostprocessSection = field(default_factory=PostprocessSection)
    report: ReportSection = field(default_factory=ReportSection)


def _check(value: Any, tp, where: str, key: str):
    origin = typing.get_origin(tp)
    if origin is typing.Union or type(tp).__name__ == "UnionType":
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return None if value is None else _check(value, args[0], where, key)
    if tp is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if tp is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if tp in (bool, str, list) and isinstance(value, tp):
        return value
    raise ConfigError(f"[{where}] {key} must be of type {tp.__name__}, got {type(value).__name__}")


def _section(cls, table: dict, where: str):
    if not isinstance(table, dict):
        raise ConfigError(f"[{where}] must be a table")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    for key in table:
        if key not in names:
            raise ConfigError(f"[{where}] unknown key {key!r}")
    kwargs = {}
    for key, value in table.items():
        tp = hints[key]
        sub = f"{where}.{key}" if where else key
        if isinstance(tp, type) and hasattr(tp, "__dataclass_fields__"):
            kwargs[key] = _section(tp, value, sub)
        else:
            kwargs[key] = _check(value, tp, where or "root", key)
    return cls(**kwargs)


# -- resolved configuration -----------------------------------------------------------

@dataclass
class RunConfig:
    raw: dict
    mode: str
    seed: int
    domain: DomainSpec
    solver: SolverConfig
    inflow: InflowWaveform | float
    outlets: list
    pi0: float
    plan: SlicePlan
    measurement: MeasurementSection
    training: TrainConfig
    scales: Scales
    postprocess: PostprocessSection
    report: ReportSection

    @property
    def K(self) -> int:
        return self.domain.n_outlets


def _pair_list(items, n: int, where: str, key: str) -> list[tuple[float, ...]]:
    out = []
    for item in items:
        if not isinstance(item, list) or len(item) != n or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in item):
            raise ConfigError(f"[{where}] every entry of {key} must be a list of {n} numbers")
        out.append(tuple(float(v) for v in item))
    return out


def _domain(g: GeometrySection) -> DomainSpec:
    if not g.rectangles or not g.segments:
        raise ConfigError("[geometry] rectangles and segments are required")
    rects = _pair_list(g.rectangles, 4, "geometry", "rectangles")
    segs = []
    for item in g.segments:
        if not isinstance(item, list) or len(item) != 5 or not isinstance(item[0], str) or not isinstance(item[4], str):
            raise ConfigError("[geometry] every segment must be [axis, coordinate, from, to, tag]")
        try:
            segs.append(Segment(item[0], float(item[1]), float(item[2]), float(item[3]), item[4]))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[geometry] {exc}") from exc
    try:
        return DomainSpec(tuple(rects), tuple(segs))
    except GeometryError as exc:
        raise ConfigError(f"[geometry] {exc}") from exc


def _outlets(w: WindkesselSection, mode: str, K: int) -> list:
    if len(w.outlets) != K:
        raise ConfigError(f"[windkessel] expected {K} outlets (one per geometry outlet), got {len(w.outlets)}")
    out = []
    for k, item in enumerate(w.outlets, start=1):
        if not isinstance(item, dict):
            raise ConfigError("[windkessel] outlets must be inline tables")
        keys = set(item)
        allowed = {"Rt"} if mode == "steady" else {"Rp", "Rd", "C"}
        if keys != allowed:
            raise ConfigError(f"[windkessel] outlet {k} needs exactly the keys {sorted(allowed)}, got {sorted(keys)}")
        vals = {key: _check(v, float, "windkessel", key) for key, v in item.items()}
        try:
            out.append(SteadyWindkessel(**vals) if mode == "steady" else WindkesselParams(**vals))
        except ValueError as exc:
            raise ConfigError(f"[windkessel] outlet {k}: {exc}") from exc
    return out


def resolve(raw: dict, seed: int | None = None, realizations: int | None = None) -> RunConfig:
    root: RootSection = _section(RootSection, raw, "")
    if root.mode not in ("steady", "transient"):
        raise ConfigError(f"[root] mode must be 'steady' or 'transient', got {root.mode!r}")
    if seed is not None:
        root.seed = seed
    if realizations is not None:
        root.training.realizations = realizations
    domain = _domain(root.geometry)
    s = root.solver
    try:
        solver = SolverConfig(**{f.name: getattr(s, f.name) for f in fields(SolverConfig)})
    except ValueError as exc:
        raise ConfigError(f"[solver] {exc}") from exc
    fl = s.inflow
    try:
        if root.mode == "steady":
            if not fl.q > 0:
                raise ValueError("q must be positive")
            inflow: InflowWaveform | float = fl.q
        else:
            inflow = InflowWaveform.pulse(fl.q_sys, fl.q_dia, fl.t_sys, fl.period)
    except ValueError as exc:
        raise ConfigError(f"[solver.inflow] {exc}") from exc
    outlets = _outlets(root.windkessel, root.mode, domain.n_outlets)
    m = root.measurement
    try:
        if root.mode == "steady":
            times: tuple[float, ...] = (0.0,)
        else:
            if not m.cadence > 0:
                raise MeasurementError("cadence must be positive")
            times = cadence_times(solver.T, m.cadence)
        if m.dense:
            if m.lines:
                raise MeasurementError("give either lines or dense = true, not both")
            plan = SlicePlan.dense(domain, m.spacing, times)
        else:
            if not m.lines:
                raise MeasurementError("lines are required unless dense = true")
            lines = [((a, b), (c, d)) for a, b, c, d in _pair_list(m.lines, 4, "measurement", "lines")]
            plan = SlicePlan(tuple(lines), m.spacing, times)
        if not (m.snr_db > 0 or math.isinf(m.snr_db)):
            raise MeasurementError("snr_db must be positive or inf")
    except MeasurementError as exc:
        raise ConfigError(f"[measurement] {exc}") from exc
    t = root.training
    n = root.network
    if min(n.hidden_layers, n.width, n.pi_hidden, n.pi_width) < 1:
        raise ConfigError("[network] layer counts and widths must be >= 1")
    try:
        weights = LossWeights(**{f.name: getattr(t.weights, f.name) for f in fields(WeightsSection)})
    except ValueError as exc:
        raise ConfigError(f"[training.weights] {exc}") from exc
    try:
        train_kw = {f.name: getattr(t, f.name) for f in fields(TrainingSection) if f.name != "weights"}
        training = TrainConfig(mode=root.mode, seed=root.seed, weights=weights,
                               **{f.name: getattr(n, f.name) for f in fields(NetworkSection)}, **train_kw)
    except ValueError as exc:
        raise ConfigError(f"[training] {exc}") from exc
    U = root.scales.U if root.scales.U is not None else 5000.0
    try:
        scales = Scales(root.scales.L, U, solver.rho, solver.mu)
    except ValueError as exc:
        raise ConfigError(f"[scales] {exc}") from exc
    p = root.postprocess
    if p.inlet not in ("pinn", "reference"):
        raise ConfigError(f"[postprocess] inlet must be 'pinn' or 'reference', got {p.inlet!r}")
    if p.inlet_nodes < 2 or p.flow_nodes < 2:
        raise ConfigError("[postprocess] node counts must be >= 2")
    if root.report.rmse_frames < 1:
        raise ConfigError("[report] rmse_frames must be >= 1")
    raw = dict(raw)
    raw["seed"] = root.seed
    raw.setdefault("training", {})
    raw["training"] = {**raw["training"], "realizations": root.training.realizations}
    return RunConfig(raw, root.mode, root.seed, domain, solver, inflow, outlets, mmhg_to_cgs(root.windkessel.pi0_mmhg),
                     plan, m, training, scales, p, root.report)


def load(path: str | Path, seed: int | None = None, realizations: int | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"[root] cannot read {path}: {exc}") from exc
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"[root] {path}: {exc}") from exc
    return resolve(raw, seed, realizations)
