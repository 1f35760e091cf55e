"""Metrics tables and SVG figures of a finished run."""

from __future__ import annotations

import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from ..geometry import build_mask  # noqa: E402
from ..pinn import history_columns  # noqa: E402
from .config import RunConfig  # noqa: E402
from .pipeline import (  # noqa: E402
    MissingHistory,
    _cell_velocity,
    _param_names,
    _realization_dir,
    load_model,
    read_csv,
    read_estimates,
    read_series,
    read_snapshots,
    reference_series,
    total_variation,
    verify_manifest,
    write_csv,
)

plt.rcParams.update({
    "svg.hashsalt": "hemopinn",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
})

FLOW_RED = "#c0392b"
PRESSURE_BLUE = "#5dade2"


def save_svg(fig, path: Path, data_header: list[str], data_rows) -> None:
    """Deterministic SVG with the plotted numbers appended as an XML comment."""
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    lines = [",".join(data_header)] + [",".join(repr(float(v)) for v in row) for row in data_rows]
    comment = "<!-- data\n" + "\n".join(lines).replace("--", "- -") + "\n-->\n"
    svg = buf.getvalue()
    cut = svg.rfind("</svg>")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(svg[:cut] + comment + svg[cut:])


def _histories(out: Path, cfg: RunConfig, realizations) -> dict[int, np.ndarray]:
    cols = history_columns(cfg.mode, cfg.K)
    hist = {}
    for r in realizations:
        p = _realization_dir(out, r) / "history.csv"
        if not p.exists():
            raise MissingHistory(f"missing {p}; run 'train' first")
        header, data = read_csv(p)
        if header != cols:
            raise MissingHistory(f"unexpected columns in {p}")
        hist[r] = data
    return hist


def parameter_table(agg: dict) -> tuple[list[str], list[list]]:
    header = ["outlet", "parameter", "Ref", "Mean"] + (["Std"] if "std" in agg else [])
    rows = []
    for name in _param_names(agg["mode"], agg["K"]):
        kind, k = name.rsplit("_", 1)
        row = [k, kind, agg["reference"][name], agg["mean"][name]]
        if "std" in agg:
            row.append(agg["std"][name])
        rows.append(row)
    return header, rows


def plot_parameter_evolution(cfg: RunConfig, agg: dict, hist: dict[int, np.ndarray], path: Path) -> None:
    cols = history_columns(cfg.mode, cfg.K)
    kinds = ["Rt"] if cfg.mode == "steady" else ["Rp", "Rd", "C"]
    fig, axes = plt.subplots(1, len(kinds), figsize=(3.2 * len(kinds), 2.8), squeeze=False)
    epochs = next(iter(hist.values()))[:, cols.index("epoch")]
    data_header, data_cols = ["epoch"], [epochs]
    for ax, kind in zip(axes[0], kinds):
        for k in range(1, cfg.K + 1):
            name = f"{kind}_{k}"
            ratio = np.array([h[:, cols.index(name)] for h in hist.values()]) / agg["reference"][name]
            lo, hi, mean = ratio.min(axis=0), ratio.max(axis=0), ratio.mean(axis=0)
            line, = ax.plot(epochs, mean, lw=1.2, label=f"outlet {k}")
            ax.fill_between(epochs, lo, hi, color=line.get_color(), alpha=0.25, lw=0)
            data_header += [f"{name}_min", f"{name}_mean", f"{name}_max"]
            data_cols += [lo, mean, hi]
        ax.axhline(1.0, color="k", ls="--", lw=0.8)
        ax.set_xlabel("epoch")
        ax.set_title(f"{kind} / reference")
    axes[0][0].legend(frameon=False, fontsize=7)
    fig.tight_layout()
    save_svg(fig, path, data_header, np.column_stack(data_cols))


def plot_flows(cfg: RunConfig, ref: dict, pinn: dict, post: dict | None, path: Path) -> None:
    K = cfg.K
    fig, axes = plt.subplots(1, K + 1, figsize=(3.0 * (K + 1), 2.8), squeeze=False)
    style = "o" if len(ref["t"]) == 1 else "-"
    header, cols = ["t", "Q_in_ref", "Q_in_pinn"], [ref["t"], ref["Q_in"], pinn["Q_in"]]
    ax = axes[0][0]
    ax.plot(ref["t"], ref["Q_in"], "k--" if style == "-" else "ko", lw=1, label="reference")
    ax.plot(pinn["t"], pinn["Q_in"], style, color=FLOW_RED, lw=1.2, label="PINN")
    ax.set_title("inlet flow")
    ax.set_xlabel("t [s]")
    ax.legend(frameon=False, fontsize=7)
    for k in range(K):
        ax = axes[0][k + 1]
        ax.plot(ref["t"], ref["Q"][k], "--" if style == "-" else "s", color=FLOW_RED, lw=1, alpha=0.7)
        ax.plot(pinn["t"], pinn["Q"][k], style, color=FLOW_RED, lw=1.2)
        header += [f"Q_{k + 1}_ref", f"Q_{k + 1}_pinn", f"P_{k + 1}_ref", f"P_{k + 1}_pinn"]
        cols += [ref["Q"][k], pinn["Q"][k], ref["P"][k], pinn["P"][k]]
        if post is not None:
            ax.plot(post["t"], post["Q"][k], ":" if style == "-" else "^", color=FLOW_RED, lw=1.2)
            header += [f"Q_{k + 1}_post"]
            cols += [post["Q"][k]]
        ax.set_ylabel("flow [cm$^2$/s]", color=FLOW_RED)
        twin = ax.twinx()
        twin.plot(ref["t"], ref["P"][k], "--" if style == "-" else "s", color=PRESSURE_BLUE, lw=1)
        twin.plot(pinn["t"], pinn["P"][k], style, color=PRESSURE_BLUE, lw=1.2)
        twin.set_ylabel("pressure [dyn/cm$^2$]", color=PRESSURE_BLUE)
        twin.spines["right"].set_visible(True)
        ax.set_title(f"outlet {k + 1}")
        ax.set_xlabel("t [s]")
    fig.tight_layout()
    save_svg(fig, path, header, np.column_stack(cols))


def _rms(a, b) -> float:
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


def flow_errors(ref: dict, series: dict, source: str, K: int) -> list[list]:
    peak_in = float(np.max(np.abs(ref["Q_in"])))
    rows = [[source, "inlet", _rms(series["Q_in"], ref["Q_in"]), _rms(series["Q_in"], ref["Q_in"]) / peak_in, 0.0]]
    for k in range(K):
        peak = float(np.max(np.abs(ref["Q"][k])))
        rows.append([source, f"outlet{k + 1}", _rms(series["Q"][k], ref["Q"][k]),
                     _rms(series["Q"][k], ref["Q"][k]) / peak, _rms(series["P"][k], ref["P"][k])])
    return rows


def velocity_rmse(cfg: RunConfig, out: Path, r: int, snaps) -> list[list]:
    mask = build_mask(cfg.domain, cfg.solver.h)
    model, pv = load_model(cfg, out, r)
    X, Y = np.meshgrid(mask.xc, mask.yc, indexing="ij")
    pts = np.column_stack([X[mask.fluid], Y[mask.fluid]])
    sc = cfg.scales
    if cfg.mode == "steady":
        picks = [0]
    else:
        frames = np.asarray(cfg.plan.times)
        idx = np.unique(np.linspace(0, len(frames) - 1, cfg.report.rmse_frames).round().astype(int))
        t_snap = np.array([s.t for s in snaps])
        picks = [int(np.argmin(np.abs(t_snap - frames[i]))) for i in idx]
    rows = []
    with torch.no_grad():
        for i in picks:
            s = snaps[i]
            uc, vc = _cell_velocity(mask, s.u, s.v)
            t_nd = sc.nd("time", np.full(len(pts), s.t)) if cfg.mode == "transient" else None
            u, v, _ = model.fields(pv["net"], pts / sc.L, t_nd, 0)
            du = u.value.numpy() * sc.U - uc[mask.fluid]
            dv = v.value.numpy() * sc.U - vc[mask.fluid]
            rmse = float(np.sqrt(np.mean(du**2 + dv**2)))
            peak = float(np.sqrt(uc**2 + vc**2).max())
            rows.append([s.t, rmse, rmse / peak if peak > 0 else 0.0])
    return rows


def cmd_report(cfg: RunConfig, out: Path) -> dict:
    verify_manifest(out)
    agg = read_estimates(out)
    if not agg["succeeded"]:
        raise MissingHistory("no successful realization")
    hist = _histories(out, cfg, agg["succeeded"])
    d = out / "report"
    header, rows = parameter_table(agg)
    write_csv(d / "parameters.csv", header, rows)
    plot_parameter_evolution(cfg, agg, hist, d / "parameter_evolution.svg")

    cols = history_columns(cfg.mode, cfg.K)
    summary = [[r] + [h[-1, cols.index(c)] for c in cols if c not in ("epoch", "stage") and not c[-1].isdigit()]
               for r, h in hist.items()]
    write_csv(d / "history_summary.csv",
              ["realization"] + [c for c in cols if c not in ("epoch", "stage") and not c[-1].isdigit()], summary)

    snaps = read_snapshots(out / "snapshots")
    ref = reference_series(snaps)
    sel_path = out / "postprocess" / "selection.json"
    r = json.loads(sel_path.read_text())["realization"] if sel_path.exists() else agg["succeeded"][0]
    pinn = read_series(_realization_dir(out, r) / "flows.csv")
    post = reference_series(read_snapshots(out / "postprocess")) if sel_path.exists() else None
    errs = flow_errors(ref, pinn, "pinn", cfg.K) + (flow_errors(ref, post, "postprocess", cfg.K) if post else [])
    write_csv(d / "flow_errors.csv", ["source", "boundary", "flow_rms", "flow_rms_rel_peak", "pressure_rms"], errs)
    if post is not None:
        tv = [[f"outlet{k + 1}", total_variation(pinn["Q"][k]), total_variation(post["Q"][k]),
               total_variation(ref["Q"][k])] for k in range(cfg.K)]
        write_csv(d / "total_variation.csv", ["boundary", "tv_pinn", "tv_postprocess", "tv_reference"], tv)
    write_csv(d / "velocity_rmse.csv", ["t", "rmse", "rmse_rel_peak"], velocity_rmse(cfg, out, r, snaps))
    plot_flows(cfg, ref, pinn, post, d / "flows.svg")
    return {"realization": r}
