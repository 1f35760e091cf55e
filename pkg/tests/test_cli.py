import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from hemopinn.cli import main
from hemopinn.cli.config import ConfigError, load
from hemopinn.cli.pipeline import read_csv, read_snapshots, write_json
from hemopinn.geometry import build_mask
from hemopinn.measure import interpolate_to_slices

GEOMETRY = """
[geometry]
rectangles = [[0.0, 0.0, 3.0, 1.0], [2.0, 1.0, 3.0, 2.5], [2.0, -1.5, 3.0, 0.0]]
segments = [
  ["x", 0.0, 0.0, 1.0, "inlet"],
  ["y", 2.5, 2.0, 3.0, "outlet1"],
  ["y", -1.5, 2.0, 3.0, "outlet2"],
  ["y", 0.0, 0.0, 2.0, "wall"],
  ["y", 1.0, 0.0, 2.0, "wall"],
  ["x", 2.0, 1.0, 2.5, "wall"],
  ["x", 2.0, -1.5, 0.0, "wall"],
  ["x", 3.0, -1.5, 2.5, "wall"],
]
"""

TINY = """
[network]
hidden_layers = 2
width = 8
pi_hidden = 2
pi_width = 4

[training]
epochs_stage1 = 2
epochs_stage2 = 3
n_collocation = 300
n_wall = 100
n_outlet_nodes = 4
n_ode_random = 5
batch = 64
realizations = {realizations}
"""

TRANSIENT = """
mode = "transient"
seed = 1
{geometry}
[solver]
h = 0.125

[windkessel]
outlets = [{{Rp = 713.0, Rd = 12023.0, C = 8.256e-5}}, {{Rp = 602.0, Rd = 10143.0, C = 9.785e-5}}]

[measurement]
lines = [[0.5, 0.0, 0.5, 1.0], [2.0, 1.75, 3.0, 1.75], [2.0, -0.75, 3.0, -0.75]]
snr_db = {snr}
{tiny}
{extra}
"""

STEADY = """
mode = "steady"
seed = 2
{geometry}
[solver]
h = 0.125
dt = 2e-3

[solver.inflow]
q = 8.0

[windkessel]
outlets = [{{Rt = 12736.0}}, {{Rt = 10745.0}}]

[measurement]
lines = [[0.5, 0.0, 0.5, 1.0], [2.0, 1.75, 3.0, 1.75], [2.0, -0.75, 3.0, -0.75]]
{tiny}
"""

STAGES = ("simulate", "measure", "train", "postprocess", "report")


def transient_toml(realizations=2, snr="18.0", extra="", geometry=GEOMETRY):
    return TRANSIENT.format(geometry=geometry, snr=snr, tiny=TINY.format(realizations=realizations), extra=extra)


def write(tmp: Path, text: str, name="run.toml") -> Path:
    p = tmp / name
    p.write_text(text)
    return p


def run_all(cfg: Path, out: Path, stages=STAGES):
    for s in stages:
        assert main([s, "--config", str(cfg), "--out", str(out)]) == 0, s


def hashes(out: Path) -> dict[str, str]:
    return {p.relative_to(out).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(out.rglob("*")) if p.is_file() and p.name != "manifest.json"}


@pytest.fixture(scope="module")
def transient_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("tr")
    cfg = write(tmp, transient_toml())
    run_all(cfg, tmp / "run")
    return cfg, tmp / "run"


# -- configuration errors ----------------------------------------------------------------

def _exit_and_err(capsys, argv):
    code = main(argv)
    return code, capsys.readouterr().err


def test_invalid_geometry_exit_2(tmp_path, capsys):
    bad = GEOMETRY.replace('["x", 3.0, -1.5, 2.5, "wall"],', "")
    cfg = write(tmp_path, transient_toml(geometry=bad))
    code, err = _exit_and_err(capsys, ["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert code == 2 and "[geometry]" in err


def test_overlapping_rectangles_exit_2(tmp_path, capsys):
    bad = GEOMETRY.replace("[2.0, 1.0, 3.0, 2.5]", "[1.0, 0.5, 3.0, 2.5]")
    cfg = write(tmp_path, transient_toml(geometry=bad))
    code, err = _exit_and_err(capsys, ["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert code == 2 and "[geometry]" in err


def test_unknown_key_names_section(tmp_path, capsys):
    cfg = write(tmp_path, transient_toml(extra="[scales]\nU = 300.0\nspeed = 3\n"))
    code, err = _exit_and_err(capsys, ["train", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert code == 2 and "[scales]" in err and "speed" in err


def test_wrong_type_and_bad_values(tmp_path):
    with pytest.raises(ConfigError, match=r"\[solver\]"):
        load(write(tmp_path, transient_toml().replace("h = 0.125", 'h = "fine"')))
    with pytest.raises(ConfigError, match=r"\[solver\]"):
        load(write(tmp_path, transient_toml().replace("h = 0.125", "h = -1.0")))
    with pytest.raises(ConfigError, match=r"\[training\]"):
        load(write(tmp_path, transient_toml().replace("batch = 64", "batch = 5000")))
    with pytest.raises(ConfigError, match=r"\[windkessel\]"):
        load(write(tmp_path, transient_toml().replace("Rp = 602.0, ", "")))
    with pytest.raises(ConfigError, match=r"\[root\]"):
        load(write(tmp_path, "mode = [1, 2\n"))


def test_cli_overrides(tmp_path):
    cfg = load(write(tmp_path, transient_toml()), seed=9, realizations=4)
    assert cfg.seed == 9 and cfg.training.seed == 9 and cfg.training.realizations == 4
    assert cfg.raw["seed"] == 9


def test_missing_inputs_exit_1(tmp_path, capsys):
    cfg = write(tmp_path, transient_toml())
    for stage, name in (("measure", "MissingSnapshots"), ("train", "MissingMeasurements"),
                        ("postprocess", "MissingEstimates"), ("report", "MissingEstimates")):
        code, err = _exit_and_err(capsys, [stage, "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert code == 1 and name in err


# -- transient pipeline -----------------------------------------------------------------

def test_transient_snapshot_count(transient_run):
    _, out = transient_run
    series = json.loads((out / "snapshots" / "outlets.json").read_text())
    assert len(series["t"]) == 67
    assert len(list((out / "snapshots").glob("snapshot-*.csv"))) == 67
    header, data = read_csv(out / "snapshots" / "snapshot-0010.csv")
    assert header == ["i", "j", "x", "y", "u", "v", "p", "mask"]
    assert set(np.unique(data[:, 7])) == {0.0, 1.0}


def test_measurement_frames(transient_run):
    _, out = transient_run
    meta = json.loads((out / "measurements" / "meta.json").read_text())
    assert len(meta["times"]) == 22 and len(meta["pbar"]) == 22
    header, data = read_csv(out / "measurements" / "measurements.csv")
    assert header == ["x", "y", "t", "u_meas", "v_meas"]
    assert len(np.unique(data[:, 2])) == 22
    assert np.all(np.abs(data[:, 3:]) <= meta["venc"])


def test_realizations_and_aggregate(transient_run):
    _, out = transient_run
    agg = json.loads((out / "training" / "estimates.json").read_text())
    assert agg["succeeded"] == [0, 1] and "std" in agg
    assert set(agg["mean"]) == {f"{p}_{k}" for p in ("Rp", "Rd", "C") for k in (1, 2)}
    for r in (0, 1):
        header, data = read_csv(out / "training" / f"realization-{r}" / "history.csv")
        assert len(data) == 5 and header[:2] == ["epoch", "stage"]
        assert np.all(data[:, header.index("lambda_wk")] > 0)
    lines = (out / "report" / "parameters.csv").read_text().splitlines()
    assert lines[0] == "outlet,parameter,Ref,Mean,Std" and len(lines) == 7


def test_single_realization_has_no_std(tmp_path):
    cfg = write(tmp_path, transient_toml(realizations=1))
    run_all(cfg, tmp_path / "run", ("simulate", "measure", "train", "report"))
    agg = json.loads((tmp_path / "run" / "training" / "estimates.json").read_text())
    assert "std" not in agg
    lines = (tmp_path / "run" / "report" / "parameters.csv").read_text().splitlines()
    assert lines[0] == "outlet,parameter,Ref,Mean" and len(lines) == 7


def test_pipeline_byte_identical(transient_run, tmp_path):
    cfg, out = transient_run
    run_all(cfg, tmp_path / "again")
    assert hashes(tmp_path / "again") == hashes(out)


def test_report_idempotent_and_manifest(transient_run):
    cfg, out = transient_run
    before = hashes(out)
    assert main(["report", "--config", str(cfg), "--out", str(out)]) == 0
    assert hashes(out) == before
    man = json.loads((out / "manifest.json").read_text())
    assert man["files"] == before
    assert man["stages"] == list(STAGES)
    assert man["config"]["seed"] == 1
    assert set(man["seeds"]["realizations"]) == {"0", "1"}


def test_report_detects_tampering(transient_run, tmp_path, capsys):
    import shutil
    cfg, out = transient_run
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    with open(copy / "measurements" / "measurements.csv", "a") as fh:
        fh.write("0,0,0,0,0\n")
    code, err = _exit_and_err(capsys, ["report", "--config", str(cfg), "--out", str(copy)])
    assert code == 1 and "checksum" in err


def test_report_svgs(transient_run):
    _, out = transient_run
    for name in ("parameter_evolution.svg", "flows.svg"):
        text = (out / "report" / name).read_text()
        assert text.startswith("<?xml") and "<!-- data" in text and "<dc:date>" not in text


def test_parameter_plot_reference_line(monkeypatch, transient_run):
    from hemopinn.cli import report

    cfg_path, out = transient_run
    cfg = load(cfg_path)
    captured = {}

    def grab(fig, path, header, rows):
        captured["fig"] = fig
        captured["rows"] = rows

    monkeypatch.setattr(report, "save_svg", grab)
    from hemopinn.cli.pipeline import read_estimates
    agg = read_estimates(out)
    report.plot_parameter_evolution(cfg, agg, report._histories(out, cfg, agg["succeeded"]), out / "x.svg")
    for ax in captured["fig"].axes:
        flat = [line for line in ax.get_lines() if np.all(np.asarray(line.get_ydata()) == 1.0)]
        assert len(flat) == 1
    # stage 1 keeps the initial guesses: the band is flat over the first two epochs
    rows = captured["rows"]
    assert np.array_equal(rows[0, 1:], rows[1, 1:])


def test_postprocess_selects_median(transient_run):
    _, out = transient_run
    sel = json.loads((out / "postprocess" / "selection.json").read_text())
    errs = {int(k): v for k, v in sel["errors"].items()}
    assert sel["realization"] == sorted(errs, key=lambda r: (errs[r], r))[(len(errs) - 1) // 2]
    assert len(read_snapshots(out / "postprocess")) == 67


def test_postprocess_with_truth_matches_reference(transient_run, tmp_path):
    import shutil
    cfg, out = transient_run
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    agg = json.loads((copy / "training" / "estimates.json").read_text())
    for r in agg["succeeded"]:
        p = copy / "training" / f"realization-{r}" / "estimates.json"
        est = json.loads(p.read_text())
        est["params"] = agg["reference"]
        write_json(p, est)
    cfg2 = write(tmp_path, cfg.read_text() + '\n[postprocess]\ninlet = "reference"\n', "truth.toml")
    assert main(["postprocess", "--config", str(cfg2), "--out", str(copy)]) == 0
    ref = read_snapshots(copy / "snapshots")
    post = read_snapshots(copy / "postprocess")
    for a, b in zip(ref, post):
        assert np.allclose(a.Q, b.Q, rtol=1e-10, atol=1e-12) and np.allclose(a.P, b.P, rtol=1e-10)


def test_total_variation_table(transient_run):
    _, out = transient_run
    lines = (out / "report" / "total_variation.csv").read_text().splitlines()
    assert lines[0] == "boundary,tv_pinn,tv_postprocess,tv_reference"
    assert [row.split(",")[0] for row in lines[1:]] == ["outlet1", "outlet2"]
    errors = (out / "report" / "flow_errors.csv").read_text().splitlines()
    assert errors[0] == "source,boundary,flow_rms,flow_rms_rel_peak,pressure_rms" and len(errors) == 7


# -- steady and noise-free paths ------------------------------------------------------------

def test_steady_pipeline(tmp_path):
    cfg = write(tmp_path, STEADY.format(geometry=GEOMETRY, tiny=TINY.format(realizations=1)))
    out = tmp_path / "run"
    run_all(cfg, out)
    series = json.loads((out / "snapshots" / "outlets.json").read_text())
    assert len(series["t"]) == 1 and len(series["Q"][0]) == 2
    meta = json.loads((out / "measurements" / "meta.json").read_text())
    assert meta["times"] == [0.0] and len(meta["pbar"]) == 1
    assert meta["pbar"][0] == pytest.approx(sum(series["P"][0]))
    agg = json.loads((out / "training" / "estimates.json").read_text())
    assert set(agg["mean"]) == {"Rt_1", "Rt_2"}


def test_noise_free_measurements_exact(tmp_path):
    cfg_path = write(tmp_path, transient_toml(realizations=1, snr="inf"))
    out = tmp_path / "run"
    run_all(cfg_path, out, ("simulate", "measure"))
    cfg = load(cfg_path)
    _, data = read_csv(out / "measurements" / "measurements.csv")
    _, _, u, v = interpolate_to_slices(read_snapshots(out / "snapshots"), cfg.plan, cfg.domain,
                                       build_mask(cfg.domain, cfg.solver.h))
    assert np.abs(data[:, 3] - u).max() < 1e-12 * max(1.0, np.abs(u).max())
    assert np.abs(data[:, 4] - v).max() < 1e-12 * max(1.0, np.abs(u).max())
    assert json.loads((out / "measurements" / "meta.json").read_text())["snr_db"] is None
