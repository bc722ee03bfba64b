import json

import numpy as np
import pytest

from undercanopy import experiments as ex
from undercanopy.cli import load_pairs, main
from undercanopy.config import (
    ConfigError,
    ExperimentConfig,
    load_config,
    parse_assignments,
    parse_seeds,
    write_config,
)
from undercanopy.evaluation import dbh_metrics
from undercanopy.forest import load_scene, straight_pass
from undercanopy.io import ReferenceTree, Trajectory, load_point_cloud, save_reference_trees, save_trajectory
from undercanopy.stems import detect_stems
from undercanopy.stems.io import load_stems
from undercanopy.stems.pipeline import StemRecord
from undercanopy.stems.io import save_stems


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


# ---------------------------------------------------------------- config


def test_defaults_are_complete():
    cfg = load_config()
    assert cfg.run.seed == 1 and cfg.scenario.name == "evo-medium"
    assert cfg.planner.v_max == 1.0
    assert cfg.effective_mission().ceiling_z == cfg.scenario.ceiling_z


def test_file_then_overrides(tmp_path):
    p = tmp_path / "exp.ini"
    p.write_text("[planner]\nv_max = 0.8\n[run]\nscenario = evo-difficult\n")
    cfg = load_config(p)
    assert cfg.planner.v_max == 0.8
    assert cfg.scenario.density == 2000.0 and cfg.effective_mission().ceiling_z == 2.75
    cfg = load_config(p, parse_assignments(["planner.v_max=0.6", "scenario.flight_length=20"]))
    assert cfg.planner.v_max == 0.6 and cfg.scenario.flight_length == 20.0


def test_write_config_round_trip(tmp_path):
    cfg = load_config(None, parse_assignments(["forest.density=300", "run.tls_mode=yes", "forest.extent=40x20"]))
    again = load_config(write_config(cfg, tmp_path / "c.ini"))
    assert again == cfg
    assert again.effective_pipeline().vertical_bin == 0.20


@pytest.mark.parametrize("items", [["nosuch.key=1"], ["planner.nosuch=1"], ["planner.v_max=fast"],
                                   ["planner.v_max"], ["planner.v_max=-1"], ["drift.seed=3"],
                                   ["run.scenario=moon"], ["forest.extent=1,2,3"]])
def test_bad_config_values(items):
    with pytest.raises(ConfigError):
        load_config(None, parse_assignments(items))


def test_unreadable_config(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")
    bad = tmp_path / "bad.ini"
    bad.write_text("no section header\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_parse_seeds():
    assert parse_seeds("1-3,7") == [1, 2, 3, 7]
    assert parse_seeds("5") == [5]
    for bad in ("", "3-1", "a"):
        with pytest.raises(ConfigError):
            parse_seeds(bad)


# ---------------------------------------------------------------- generate


def test_generate_count_and_determinism(tmp_path, capsys):
    a, b = tmp_path / "a" / "scene.csv", tmp_path / "b" / "scene.csv"
    for out in (a, b):
        code, stdout, _ = run(capsys, "generate", "--density", 650, "--extent", "100x100", "--seed", 7,
                              "--out", out)
        assert code == 0
    n = len(load_scene(a).trees)
    assert abs(n - 650) <= 10
    assert stdout.strip() == f"trees: {n}"
    for suffix in (".csv", ".json"):
        assert a.with_suffix(suffix).read_bytes() == b.with_suffix(suffix).read_bytes()
    assert (a.parent / "scene_reference.csv").read_bytes() == (b.parent / "scene_reference.csv").read_bytes()


def test_generate_missing_density_usage(tmp_path, capsys):
    code, _, err = run(capsys, "generate", "--out", tmp_path / "s.csv")
    assert code == 2
    assert "usage:" in err and "density" in err


def test_bad_flag_and_bad_override_exit_2(capsys):
    assert run(capsys, "generate", "--density", "lots")[0] == 2
    assert run(capsys, "generate", "--density", 100, "--set", "planner.v_max=x")[0] == 2
    assert run(capsys, "frobnicate")[0] == 2


# ---------------------------------------------------------------- scan / detect


@pytest.fixture(scope="module")
def small_stand(tmp_path_factory):
    d = tmp_path_factory.mktemp("stand")
    assert main(["generate", "--density", "650", "--extent", "40x12", "--seed", "3", "--out", str(d / "scene.csv")]) == 0
    return d


def test_scan_empty_scene(tmp_path, capsys):
    assert run(capsys, "generate", "--density", 1, "--extent", "10x10", "--out", tmp_path / "s.csv")[0] == 0
    s = (tmp_path / "s.csv").read_text().splitlines()
    (tmp_path / "empty.csv").write_text(s[0] + "\n")
    (tmp_path / "empty.json").write_text((tmp_path / "s.json").read_text())
    out = tmp_path / "cloud.xyzt"
    code, stdout, _ = run(capsys, "scan", "--scene", tmp_path / "empty.csv", "--line", "1,5,1.3:9,5,1.3",
                          "--set", "scan.ground_returns=false", "--set", "scan.clutter_fraction=0", "--out", out)
    assert code == 0 and stdout.strip() == "points: 0"
    assert out.exists()
    assert [ln for ln in out.read_text().splitlines() if ln.strip() and not ln.startswith("#")] == []


def test_scan_missing_trajectory_exit_2(small_stand, tmp_path, capsys):
    code, _, err = run(capsys, "scan", "--scene", small_stand / "scene.csv", "--trajectory", tmp_path / "nope.csv")
    assert code == 2 and "not found" in err
    assert run(capsys, "scan", "--scene", small_stand / "scene.csv")[0] == 2
    # PLY is a read-only format
    assert run(capsys, "scan", "--scene", small_stand / "scene.csv", "--line", "2,6,1.3:5,6,1.3",
               "--format", "ply-ascii", "--out", tmp_path / "c.ply")[0] == 2


def test_scan_detect_evaluate_chain(small_stand, tmp_path, capsys):
    cloud_path = tmp_path / "cloud.xyzt"
    code, stdout, _ = run(capsys, "scan", "--scene", small_stand / "scene.csv", "--line", "2,6,1.3:37,6,1.3",
                          "--out", cloud_path)
    assert code == 0
    n = int(stdout.split(":")[1])
    assert n > 0 and len(load_point_cloud(cloud_path)) == n

    stems_path = tmp_path / "stems.csv"
    assert run(capsys, "detect", "--cloud", cloud_path, "--out", stems_path)[0] == 0
    cli_stems = load_stems(stems_path)
    lib = detect_stems(load_point_cloud(cloud_path))
    assert len(cli_stems) == len(lib) > 0
    for a, b in zip(cli_stems, lib):
        assert (a.stem_id, a.x, a.y, a.dbh) == (b.stem_id, b.x, b.y, b.dbh)
    assert (tmp_path / "stems_curves").is_dir()

    line = tmp_path / "line.csv"
    save_trajectory(straight_pass([2, 6, 1.3], [37, 6, 1.3]), line)
    metrics = tmp_path / "m.json"
    code, stdout, _ = run(capsys, "evaluate", "--stems", stems_path, "--reference", small_stand / "scene_reference.csv",
                          "--boundary-trajectory", line, "--estimate", line, "--ground-truth", line,
                          "--out", metrics, "--plots", tmp_path / "plots")
    assert code == 0
    rep = json.loads(metrics.read_text())
    assert rep["ate"]["ate_pos"] == pytest.approx(0.0, abs=1e-12)
    assert rep["matching"]["completeness_pct"] >= 60.0
    assert "config" in rep
    assert (tmp_path / "plots" / "dbh_scatter.svg").exists() and (tmp_path / "plots" / "top_view.svg").exists()
    pairs = load_pairs(tmp_path / "m_pairs.csv")
    assert rep["dbh"]["all"] == dbh_metrics(pairs).as_dict()


def test_detect_empty_cloud_is_runtime_failure(tmp_path, capsys):
    p = tmp_path / "c.xyzt"
    p.write_text("")
    code, _, err = run(capsys, "detect", "--cloud", p)
    assert code == 1 and "failed" in err


# ---------------------------------------------------------------- evaluate


def test_evaluate_pairs_equal_library(tmp_path, capsys, rng):
    ref = rng.uniform(10, 50, 25)
    pairs = [(float(e), float(r)) for e, r in zip(ref + rng.normal(scale=2, size=25), ref)]
    p = tmp_path / "pairs.csv"
    p.write_text("estimated_cm,reference_cm\n" + "".join(f"{e!r},{r!r}\n" for e, r in pairs))
    out = tmp_path / "m.json"
    assert run(capsys, "evaluate", "--pairs", p, "--out", out)[0] == 0
    rep = json.loads(out.read_text())
    assert rep["dbh"]["all"] == dbh_metrics(pairs).as_dict()
    lib = ex.evaluate(pairs=pairs, cfg=ExperimentConfig()).report["dbh"]
    assert rep["dbh"] == json.loads(json.dumps(lib))


def test_completeness_two_decimals(tmp_path, capsys):
    refs = [ReferenceTree(i, float(i), 0.0, 25.0) for i in range(1, 30)]
    stems = [StemRecord(i, float(i) + 0.1, 0.0, 0.0, ((1.3, 0.25),), 25.0) for i in range(1, 24)]
    save_reference_trees(refs, tmp_path / "ref.csv")
    save_stems(stems, tmp_path / "stems.csv")
    out = tmp_path / "m.json"
    code, stdout, _ = run(capsys, "evaluate", "--stems", tmp_path / "stems.csv", "--reference", tmp_path / "ref.csv",
                          "--out", out)
    assert code == 0
    assert json.loads(out.read_text())["matching"]["completeness_pct"] == 79.31
    assert "79.31% (23/29)" in stdout


def test_evaluate_identical_trajectories_and_scale_flag(tmp_path, capsys):
    t = np.arange(50) * 0.2
    tr = Trajectory(t, np.column_stack([t, np.sin(t), np.full_like(t, 1.3)]))
    save_trajectory(tr, tmp_path / "a.csv")
    save_trajectory(Trajectory(t, 0.95 * tr.positions), tmp_path / "b.csv")
    out = tmp_path / "m.json"
    assert run(capsys, "evaluate", "--estimate", tmp_path / "a.csv", "--ground-truth", tmp_path / "a.csv",
               "--out", out)[0] == 0
    assert json.loads(out.read_text())["ate"]["ate_pos"] == 0.0 or json.loads(out.read_text())["ate"]["ate_pos"] < 1e-12
    assert run(capsys, "evaluate", "--estimate", tmp_path / "b.csv", "--ground-truth", tmp_path / "a.csv",
               "--with-scale", "--out", out)[0] == 0
    ate = json.loads(out.read_text())["ate"]
    assert ate["alignment"] == "similarity" and ate["ate_pos"] == ate["ate_pos_similarity"] < 1e-9


def test_evaluate_usage_errors(tmp_path, capsys):
    assert run(capsys, "evaluate")[0] == 2
    assert run(capsys, "evaluate", "--stems", tmp_path / "s.csv")[0] == 2
    bad = tmp_path / "pairs.csv"
    bad.write_text("a,b\n1,2\n")
    assert run(capsys, "evaluate", "--pairs", bad)[0] == 2


# ---------------------------------------------------------------- mission / pipeline


def test_mission_empty_scene(tmp_path, capsys):
    code, stdout, _ = run(capsys, "mission", "--scenario", "empty", "--seeds", "1", "--out", tmp_path)
    assert code == 0
    row = stdout.splitlines()[1].split()
    assert row[0] == "empty" and row[3] == "1/1" and row[4] == "1/1"
    summary = json.loads((tmp_path / "summary.json").read_text())["summary"]
    assert summary["success_fraction"] == 1.0 and summary["smooth_fraction"] == 1.0
    assert (tmp_path / "mission_seed1.jsonl").exists() and (tmp_path / "flown_seed1.csv").exists()


SHORT = ["--set", "scenario.flight_length=12", "--set", "scenario.width=16"]


def test_pipeline_tls_report_and_byte_stability(tmp_path, capsys):
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        code, stdout, _ = run(capsys, "pipeline", "--seed", 4, "--tls-mode", *SHORT, "--out", out)
        assert code == 0
        outs.append(out)
    assert "0.20 m height bins, temporal segmentation disabled" in stdout
    rep = json.loads((outs[0] / "report.json").read_text())
    assert rep["segmentation"] == {"tls_mode": True, "vertical_bin_m": 0.2, "temporal_segmentation": False,
                                   "temporal_bin_s": None}
    for key in ("matching", "ate", "mission", "config"):
        assert key in rep
    for name in ("report.json", "stems.csv", "mission.jsonl", "flown.csv", "top_view.svg"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name


def test_pipeline_library_equivalence(tmp_path, capsys):
    out = tmp_path / "p"
    assert run(capsys, "pipeline", "--seed", 2, *SHORT, "--set", "evaluation.plots=false", "--out", out)[0] == 0
    cfg = load_config(None, parse_assignments(["run.seed=2", "scenario.flight_length=12", "scenario.width=16",
                                               "evaluation.plots=false"]))
    lib = ex.pipeline(cfg).report
    from undercanopy.cli import _nan_to_none

    assert json.loads((out / "report.json").read_text()) == json.loads(json.dumps(_nan_to_none(lib)))
    assert not (out / "top_view.svg").exists()
