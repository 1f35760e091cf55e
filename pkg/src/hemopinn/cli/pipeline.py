"""The five pipeline stages and the run-directory file formats."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import platform
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from scipy.interpolate import CubicSpline

from .. import __version__
from ..geometry import GridMask, build_mask
from ..measure import MeasurementSet, synthesize
from ..neural.mlp import load_checkpoint
from ..pinn import Problem, TrainResult, history_columns, realization_seed, train
from ..pinn.train import TrainConfig
from ..refsolver import FlowSnapshot, run_steady, run_transient
from ..windkessel import SteadyWindkessel, WindkesselParams
from .config import RunConfig

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


class MissingSnapshots(PipelineError):
    pass


class MissingMeasurements(PipelineError):
    pass


class MissingEstimates(PipelineError):
    pass


class MissingHistory(PipelineError):
    pass


class ChecksumMismatch(PipelineError):
    pass


# -- small file helpers -------------------------------------------------------------

def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in row])


def read_csv(path: Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array(rows[1:], dtype=float).reshape(-1, len(rows[0]))


def jsonable(obj):
    """Replace non-finite floats (TOML allows ``inf``) by their string form."""
    if isinstance(obj, dict):
        return {k: jsonable(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _atomic_json(path: Path, obj) -> None:
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def inventory(out: Path) -> dict[str, str]:
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json" and p.suffix != ".tmp")
    return {p.relative_to(out).as_posix(): sha256(p) for p in files}


def update_manifest(out: Path, cfg: RunConfig, stage: str, seconds: float, extra: dict | None = None) -> None:
    path = out / "manifest.json"
    man = json.loads(path.read_text()) if path.exists() else {}
    man["config"] = jsonable(cfg.raw)
    man["versions"] = {"hemopinn": __version__, "numpy": np.__version__, "torch": torch.__version__,
                       "python": platform.python_version()}
    man.setdefault("seeds", {})["global"] = cfg.seed
    man.setdefault("timings", {})[stage] = round(seconds, 3)
    stages = man.setdefault("stages", [])
    if stage not in stages:
        stages.append(stage)
    for k, v in (extra or {}).items():
        man.setdefault("seeds", {})[k] = v
    man["files"] = inventory(out)
    _atomic_json(path, man)


def verify_manifest(out: Path) -> None:
    path = out / "manifest.json"
    if not path.exists():
        return
    for rel, digest in json.loads(path.read_text()).get("files", {}).items():
        p = out / rel
        if p.exists() and sha256(p) != digest:
            raise ChecksumMismatch(f"checksum mismatch for {rel}")


def save_config(out: Path, cfg: RunConfig, source: Path) -> None:
    d = out / "config"
    d.mkdir(parents=True, exist_ok=True)
    (d / "run.toml").write_bytes(Path(source).read_bytes())
    write_json(d / "resolved.json", jsonable(cfg.raw))


# -- snapshots ------------------------------------------------------------------------

def _cell_velocity(mask: GridMask, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    uc = 0.5 * (u[:-1] + u[1:])
    vc = 0.5 * (v[:, :-1] + v[:, 1:])
    return np.where(mask.fluid, uc, 0.0), np.where(mask.fluid, vc, 0.0)


def write_snapshots(d: Path, snaps: Sequence[FlowSnapshot], mask: GridMask) -> None:
    """Raw staggered arrays (``.npy``), outlet series (JSON) and cell-centred CSVs."""
    d.mkdir(parents=True, exist_ok=True)
    for name in ("u", "v", "p"):
        np.save(d / f"{name}.npy", np.stack([getattr(s, name) for s in snaps]).astype("<f8"), allow_pickle=False)
    write_json(d / "outlets.json", {
        "t": [float(s.t) for s in snaps],
        "Q_in": [float(s.Q_in) for s in snaps],
        "Q": [[float(q) for q in s.Q] for s in snaps],
        "P": [[float(p) for p in s.P] for s in snaps],
    })
    I, J = np.meshgrid(np.arange(mask.nx), np.arange(mask.ny), indexing="ij")
    X, Y = np.meshgrid(mask.xc, mask.yc, indexing="ij")
    for n, s in enumerate(snaps):
        uc, vc = _cell_velocity(mask, s.u, s.v)
        cols = (I.ravel(), J.ravel(), X.ravel(), Y.ravel(), uc.ravel(), vc.ravel(), s.p.ravel(), mask.fluid.ravel())
        write_csv(d / f"snapshot-{n:04d}.csv", ("i", "j", "x", "y", "u", "v", "p", "mask"), zip(*cols))


def read_snapshots(d: Path) -> list[FlowSnapshot]:
    if not (d / "outlets.json").exists() or not (d / "u.npy").exists():
        raise MissingSnapshots(f"no snapshots in {d}; run 'simulate' first")
    series = json.loads((d / "outlets.json").read_text())
    u, v, p = (np.load(d / f"{n}.npy", allow_pickle=False) for n in ("u", "v", "p"))
    return [
        FlowSnapshot(t, u[i], v[i], p[i], np.array(series["Q"][i]), np.array(series["P"][i]), series["Q_in"][i])
        for i, t in enumerate(series["t"])
    ]


def cmd_simulate(cfg: RunConfig, out: Path, outlets: Sequence | None = None, inlet=None,
                 dest: str = "snapshots") -> list[FlowSnapshot]:
    outlets = cfg.outlets if outlets is None else outlets
    if cfg.mode == "steady":
        snaps = [run_steady(cfg.domain, cfg.solver, float(cfg.inflow), outlets, inlet)]
    else:
        snaps = run_transient(cfg.domain, cfg.solver, cfg.inflow, outlets, cfg.pi0, inlet)
    write_snapshots(out / dest, snaps, build_mask(cfg.domain, cfg.solver.h))
    return snaps


# -- measurements -----------------------------------------------------------------------

def cmd_measure(cfg: RunConfig, out: Path) -> MeasurementSet:
    snaps = read_snapshots(out / "snapshots")
    m = cfg.measurement
    meas = synthesize(snaps, cfg.domain, build_mask(cfg.domain, cfg.solver.h), cfg.plan, m.snr_db, cfg.seed,
                      m.M0, m.phi0, m.venc)
    d = out / "measurements"
    write_csv(d / "measurements.csv", ("x", "y", "t", "u_meas", "v_meas"),
              zip(meas.points[:, 0], meas.points[:, 1], meas.t, meas.u, meas.v))
    write_json(d / "meta.json", {
        "venc": meas.venc,
        "snr_db": None if math.isinf(meas.snr_db) else meas.snr_db,
        "seed": meas.seed,
        "times": [float(t) for t in meas.times],
        "pbar_t": [float(t) for t in meas.pbar_t],
        "pbar": [float(p) for p in meas.pbar],
        "n_points": int(len(meas.u)),
        "spacing": cfg.plan.spacing,
        "lines": [[a[0], a[1], b[0], b[1]] for a, b in cfg.plan.lines],
    })
    return meas


def read_measurements(out: Path) -> MeasurementSet:
    d = out / "measurements"
    if not (d / "measurements.csv").exists() or not (d / "meta.json").exists():
        raise MissingMeasurements(f"no measurements in {d}; run 'measure' first")
    _, data = read_csv(d / "measurements.csv")
    meta = json.loads((d / "meta.json").read_text())
    snr = math.inf if meta["snr_db"] is None else meta["snr_db"]
    return MeasurementSet(data[:, :2].copy(), data[:, 2].copy(), data[:, 3].copy(), data[:, 4].copy(),
                          meta["venc"], snr, meta["seed"], np.array(meta["pbar_t"]), np.array(meta["pbar"]),
                          np.array(meta["times"]))


# -- training ------------------------------------------------------------------------------

def _param_names(mode: str, K: int) -> list[str]:
    kinds = ("Rt",) if mode == "steady" else ("Rp", "Rd", "C")
    return [f"{p}_{k}" for k in range(1, K + 1) for p in kinds]


def _param_dict(models: Sequence, mode: str) -> dict[str, float]:
    out = {}
    for k, m in enumerate(models, start=1):
        if mode == "steady":
            out[f"Rt_{k}"] = float(m.Rt)
        else:
            out.update({f"Rp_{k}": float(m.Rp), f"Rd_{k}": float(m.Rd), f"C_{k}": float(m.C)})
    return out


def pinn_series(cfg: RunConfig, model, theta_net: torch.Tensor, times: np.ndarray) -> dict[str, np.ndarray]:
    """Inlet flow, outlet flows and outlet-averaged pressures of a trained network (physical units)."""
    sc = cfg.scales
    m = cfg.postprocess.flow_nodes
    t_nd = sc.nd("time", times)
    q_in = model.boundary_flows(theta_net, t_nd, m, "inlet")[0] * sc.flow
    Q = model.boundary_flows(theta_net, t_nd, m) * sc.flow
    nodes, weights, _, lengths = model.outlet_nodes(m)
    P = np.zeros_like(Q)
    with torch.no_grad():
        for k, (nd, w, ln) in enumerate(zip(nodes, weights, lengths)):
            pts = np.tile(nd, (len(times), 1))
            t = np.repeat(t_nd, len(nd))
            p = model.pressure(theta_net, pts, t if cfg.mode == "transient" else None).value.numpy()
            P[k] = p.reshape(len(times), len(nd)) @ w / ln * sc.pressure
    return {"t": np.asarray(times, dtype=float), "Q_in": q_in, "Q": Q, "P": P}


def _write_series(path: Path, s: dict, K: int) -> None:
    header = ["t", "Q_in"] + [f"Q_{k}" for k in range(1, K + 1)] + [f"P_{k}" for k in range(1, K + 1)]
    rows = (
        [s["t"][i], s["Q_in"][i], *s["Q"][:, i], *s["P"][:, i]]
        for i in range(len(s["t"]))
    )
    write_csv(path, header, rows)


def read_series(path: Path) -> dict[str, np.ndarray]:
    header, data = read_csv(path)
    K = (len(header) - 2) // 2
    return {"t": data[:, 0], "Q_in": data[:, 1], "Q": data[:, 2:2 + K].T, "P": data[:, 2 + K:].T}


def reference_series(snaps: Sequence[FlowSnapshot]) -> dict[str, np.ndarray]:
    return {
        "t": np.array([s.t for s in snaps]),
        "Q_in": np.array([s.Q_in for s in snaps]),
        "Q": np.array([s.Q for s in snaps]).T,
        "P": np.array([s.P for s in snaps]).T,
    }


def _same_config(ckpt: Path, tcfg: TrainConfig, seed: int) -> bool:
    head = ckpt / "header.json"
    if not head.exists():
        return False
    h = json.loads(head.read_text())
    return h.get("seed") == seed and h.get("config") == json.loads(json.dumps(tcfg.as_dict()))


def _realization_dir(out: Path, r: int) -> Path:
    return out / "training" / f"realization-{r}"


def cmd_train(cfg: RunConfig, out: Path) -> list[TrainResult]:
    meas = read_measurements(out)
    snaps = read_snapshots(out / "snapshots")
    times = np.array([s.t for s in snaps])
    tcfg = cfg.training
    results = []
    for r in range(tcfg.realizations):
        d = _realization_dir(out, r)
        ckpt = d / "checkpoint"
        resume = _same_config(ckpt, tcfg, realization_seed(tcfg.seed, r))
        res = train(cfg.domain, meas, tcfg, cfg.scales, cfg.outlets, realization=r, checkpoint_dir=ckpt, resume=resume)
        results.append(res)
        write_csv(d / "history.csv", history_columns(cfg.mode, cfg.K),
                  ([row[c] for c in history_columns(cfg.mode, cfg.K)] for row in res.history))
        est = res.estimates.physical(cfg.scales)
        tau = None if res.estimates.tau is None else float(res.estimates.tau * cfg.scales.time)
        write_json(d / "estimates.json", {
            "realization": r, "seed": res.seed, "failed": res.failed, "error": res.error, "mode": cfg.mode,
            "epochs": len(res.history), "tau": tau, "params": _param_dict(est, cfg.mode),
        })
        if not res.failed:
            _write_series(d / "flows.csv", pinn_series(cfg, res.model, res.params["net"], times), cfg.K)
        log.info("realization %d done (failed=%s)", r, res.failed)
    ok = [r for r in results if not r.failed]
    ref = _param_dict(cfg.outlets, cfg.mode)
    agg = {
        "mode": cfg.mode, "K": cfg.K, "reference": ref, "realizations": tcfg.realizations,
        "succeeded": [r.realization for r in ok], "failed": [r.realization for r in results if r.failed],
    }
    if ok:
        table = np.array([[_param_dict(r.estimates.physical(cfg.scales), cfg.mode)[k] for k in ref] for r in ok])
        agg["mean"] = dict(zip(ref, map(float, table.mean(axis=0))))
        if len(ok) > 1:
            agg["std"] = dict(zip(ref, map(float, table.std(axis=0, ddof=1))))
    write_json(out / "training" / "estimates.json", agg)
    if not ok:
        raise PipelineError("all realizations failed: " + "; ".join(r.error for r in results))
    return results


def read_estimates(out: Path) -> dict:
    path = out / "training" / "estimates.json"
    if not path.exists():
        raise MissingEstimates(f"no estimates in {path.parent}; run 'train' first")
    agg = json.loads(path.read_text())
    agg["per_realization"] = {}
    for r in agg["succeeded"]:
        p = _realization_dir(out, r) / "estimates.json"
        if not p.exists():
            raise MissingEstimates(f"missing {p}")
        agg["per_realization"][r] = json.loads(p.read_text())
    return agg


def parameter_error(est: dict[str, float], ref: dict[str, float]) -> float:
    return float(np.mean([abs(math.log(est[k] / ref[k])) for k in ref]))


def median_realization(agg: dict) -> tuple[int, dict[int, float]]:
    errs = {r: parameter_error(e["params"], agg["reference"]) for r, e in agg["per_realization"].items()}
    if not errs:
        raise MissingEstimates("no successful realization to post-process")
    order = sorted(errs, key=lambda r: (errs[r], r))
    return order[(len(order) - 1) // 2], errs


def load_model(cfg: RunConfig, out: Path, r: int, meas: MeasurementSet | None = None):
    """Rebuild the network of realization ``r`` from its checkpoint."""
    meas = read_measurements(out) if meas is None else meas
    ckpt = _realization_dir(out, r) / "checkpoint"
    if not (ckpt / "header.json").exists():
        raise MissingEstimates(f"missing checkpoint {ckpt}")
    pv, head = load_checkpoint(ckpt)
    problem = Problem(cfg.domain, meas, cfg.training, cfg.scales, int(head["seed"]))
    return problem.model, pv


# -- postprocess --------------------------------------------------------------------------------

def _models_from(params: dict[str, float], mode: str, K: int) -> list:
    if mode == "steady":
        return [SteadyWindkessel(params[f"Rt_{k}"]) for k in range(1, K + 1)]
    return [WindkesselParams(params[f"Rp_{k}"], params[f"Rd_{k}"], params[f"C_{k}"]) for k in range(1, K + 1)]


def pinn_inlet(cfg: RunConfig, model, theta_net: torch.Tensor, times: np.ndarray):
    """Inflow speed ``f(s, t)`` along the inlet from the network: linear in ``s``, cubic in time."""
    seg = cfg.domain.segments_for("inlet")[0]
    n = -np.asarray(cfg.domain.normal(seg), dtype=float)
    s = np.linspace(0.0, seg.length, cfg.postprocess.inlet_nodes)
    pts = seg.point(s) / cfg.scales.L
    sc = cfg.scales
    with torch.no_grad():
        rows = []
        for t in times:
            u, v, _ = model.fields(theta_net, pts, sc.nd("time", t) if cfg.mode == "transient" else None, 0)
            rows.append((u.value.numpy() * n[0] + v.value.numpy() * n[1]) * sc.U)
    speed = np.array(rows)
    coord = seg.lo + s
    if len(times) == 1:
        def inlet(y, t):
            return np.interp(y, coord, speed[0])
    else:
        spline = CubicSpline(times, speed, axis=0)

        def inlet(y, t):
            return np.interp(y, coord, spline(min(max(t, times[0]), times[-1])))
    return inlet, float(np.trapezoid(speed[0], coord))


def cmd_postprocess(cfg: RunConfig, out: Path) -> dict:
    agg = read_estimates(out)
    r, errs = median_realization(agg)
    params = agg["per_realization"][r]["params"]
    outlets = _models_from(params, cfg.mode, cfg.K)
    inlet = None
    if cfg.postprocess.inlet == "pinn":
        snaps = read_snapshots(out / "snapshots")
        model, pv = load_model(cfg, out, r)
        inlet, _ = pinn_inlet(cfg, model, pv["net"], np.array([s.t for s in snaps]))
    snaps = cmd_simulate(cfg, out, outlets, inlet, dest="postprocess")
    write_json(out / "postprocess" / "selection.json", {
        "realization": r, "inlet": cfg.postprocess.inlet, "params": params,
        "errors": {str(k): v for k, v in sorted(errs.items())},
    })
    return {"realization": r, "snapshots": snaps}


def total_variation(y) -> float:
    return float(np.abs(np.diff(np.asarray(y, dtype=float))).sum())
