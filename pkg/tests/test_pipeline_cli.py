import json
import shutil
import subprocess
import sys
from pathlib import Path

import jsonschema
import pytest

from scanrecon import synth
from scanrecon.config import PipelineConfig, load_config
from scanrecon.errors import ConfigError, DataError, StageError
from scanrecon.pipeline import PIPELINE_ORDER, run_pipeline, run_stage, strip_timings

ROOT = Path(__file__).resolve().parents[1]
SCHEMA = json.loads((ROOT / "docs" / "report.schema.json").read_text())


def cli(*args, cwd=None):
    return subprocess.run([sys.executable, "-m", "scanrecon", *map(str, args)],
                          capture_output=True, text=True, cwd=cwd)


def tree_bytes(d, skip=("reports",)):
    d = Path(d)
    out = {}
    for p in sorted(d.rglob("*")):
        rel = p.relative_to(d)
        if p.is_file() and rel.parts[0] not in skip and rel.name != "report.json":
            out[str(rel)] = p.read_bytes()
    return out


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    d = tmp_path_factory.mktemp("scene")
    job = synth.write_scene(synth.mini_scene(seed=3), d)
    cfg = load_config(d / "config.json")
    return job, cfg


@pytest.fixture(scope="module")
def piped(scene, tmp_path_factory):
    job, cfg = scene
    out = tmp_path_factory.mktemp("pipe")
    rep = run_pipeline(job, cfg, out)
    return out, rep


# -- config ---------------------------------------------------------------

def test_config_round_trip():
    cfg = PipelineConfig(knn=12, alpha=0.5, reference="top_x0", cluster_radius=0.3, tool="x {input}")
    assert PipelineConfig.from_json(cfg.to_json()) == cfg
    assert PipelineConfig.from_dict(json.loads(cfg.to_json())).to_dict() == cfg.to_dict()


@pytest.mark.parametrize("bad", [{"tau": 0}, {"epsilon": -1}, {"voxel": float("nan")},
                                 {"r_min": 5, "r_max": 5}, {"r_min": 9, "r_max": 8},
                                 {"knn": 0}, {"recon": "poisson"}, {"mesh_format": "obj"},
                                 {"alpha": -0.1}, {"vote_threshold": 1.5}])
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        PipelineConfig(**bad)


def test_config_unknown_key_and_json(tmp_path):
    with pytest.raises(ConfigError, match="bogus"):
        PipelineConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        PipelineConfig.from_json("[1, 2]")
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"knn": 8.0, "tau": 0.3}))
    cfg = load_config(p, tau=None, alpha=2.0)
    assert cfg.knn == 8 and isinstance(cfg.knn, int) and cfg.tau == 0.3 and cfg.alpha == 2.0


# -- stages ---------------------------------------------------------------

def test_unknown_stage_lists_stages(tmp_path):
    with pytest.raises(ConfigError, match="reconstruct"):
        run_stage("smooth", {}, PipelineConfig(), tmp_path)


def test_ingest_missing_pose_names_scan(tmp_path):
    synth.write_scene(synth.flat_scene(12, 12, 0.5, []), tmp_path)
    poses = json.loads((tmp_path / "poses.json").read_text())
    doc = json.loads((tmp_path / "job.json").read_text())
    doc["scans"].append({"scan_id": "ghost", "path": "scans/flat.txt"})
    (tmp_path / "job.json").write_text(json.dumps(doc))
    assert "ghost" not in json.dumps(poses)
    with pytest.raises(StageError) as ei:
        run_stage("ingest", {"job": tmp_path / "job.json"}, PipelineConfig(), tmp_path / "out")
    assert ei.value.stage == "ingest" and isinstance(ei.value.cause, DataError)
    assert "ghost" in str(ei.value)
    assert not (tmp_path / "out").exists()


def test_denoise_stage_outputs(piped):
    out, rep = piped
    removed = json.loads((out / "denoise" / "removed.json").read_text())
    d = rep["stages"]["denoise"]
    assert set(removed) == set(d["removed"])
    for sid, idx in removed.items():
        assert len(idx) == d["removed"][sid]
        assert d["points"][sid] + len(idx) == rep["stages"]["ingest"]["points"][sid]
        assert (out / "denoise" / "scans" / f"{sid}.txt").exists()
    assert d["total_removed"] > 0


def test_pipeline_report(piped):
    out, rep = piped
    assert rep["registration"]["max_residual_mm"] < 0.05
    assert rep["watertight"]["watertight"] and rep["watertight"]["euler"] == 2
    assert rep["points"]["input"] >= rep["points"]["after_denoise"] >= rep["points"]["merged"] >= rep["points"]["kept"]
    assert set(rep["stages"]) == set(PIPELINE_ORDER)
    doc = json.loads((out / "report.json").read_text())
    jsonschema.validate(doc, SCHEMA)
    assert strip_timings(doc) == json.loads(json.dumps(strip_timings(rep)))
    assert (out / rep["mesh"]["path"]).exists()


def test_register_stage_matches_pipeline(piped, tmp_path):
    out, rep = piped
    r = run_stage("register", {"targets": out / "detect" / "targets.json",
                               "poses": out / "denoise" / "poses.json"}, load_config(**rep["config"]), tmp_path)
    for name in ("poses.json", "registration.json"):
        assert (tmp_path / "register" / name).read_bytes() == (out / "register" / name).read_bytes()
    assert strip_timings(r) == strip_timings(rep["stages"]["register"])


def test_staged_equals_pipeline(piped, scene, tmp_path):
    out, rep = piped
    job, cfg = scene
    for name in PIPELINE_ORDER:
        run_stage(name, {"job": job} if name == "ingest" else {}, cfg, tmp_path)
    assert tree_bytes(tmp_path) == tree_bytes(out)
    for name in PIPELINE_ORDER:
        a = json.loads((tmp_path / "reports" / f"{name}.json").read_text())
        assert strip_timings(a) == strip_timings(rep["stages"][name])


def test_failed_pipeline_removes_artifacts(piped, tmp_path):
    out, rep = piped
    cfg = load_config(**rep["config"]).override(cell=0.05, max_grid_nodes=1000)
    with pytest.raises(StageError) as ei:
        run_pipeline(out / "ingest" / "job.json", cfg, tmp_path / "o")
    assert ei.value.stage == "reconstruct" and ei.value.exit_code == 3
    assert not (tmp_path / "o").exists()


def test_failed_stage_keeps_existing_files(tmp_path):
    (tmp_path / "merge").mkdir()
    keep = tmp_path / "merge" / "keep.txt"
    keep.write_text("x")
    with pytest.raises(StageError):
        run_stage("merge", {}, PipelineConfig(), tmp_path)
    assert keep.exists()


# -- command line ---------------------------------------------------------

def test_cli_help_and_usage_errors(tmp_path):
    assert cli("--help").returncode == 0
    assert cli("smooth").returncode == 2
    assert cli("pipeline").returncode == 2
    r = cli("denoise", "--knn", "0", "--out-dir", tmp_path)
    assert r.returncode == 2 and "knn" in r.stderr


def test_cli_data_error(tmp_path):
    r = cli("ingest", tmp_path / "nope.json", "--out-dir", tmp_path / "o")
    assert r.returncode == 3 and "ingest" in r.stderr


def test_cli_reconstruct_external_without_tool(piped, tmp_path):
    out, _ = piped
    r = cli("reconstruct", "--recon", "external", "--cloud", out / "merge" / "cloud.txt", "--out-dir", tmp_path)
    assert r.returncode == 2 and "tool" in r.stderr


def test_cli_external_tool_missing(piped, tmp_path):
    out, _ = piped
    r = cli("reconstruct", "--recon", "external", "--tool", "no-such-poisson {input} {output}",
            "--cloud", out / "merge" / "cloud.txt", "--out-dir", tmp_path)
    assert r.returncode == 5 and "no-such-poisson" in r.stderr


def test_cli_synth_and_check_mesh(piped, tmp_path):
    out, rep = piped
    r = cli("synth", "--scene", "mini", "--seed", "3", "--out-dir", tmp_path)
    assert r.returncode == 0, r.stderr
    doc = json.loads(r.stdout)
    assert doc["scans"] == 8
    assert tree_bytes(tmp_path)["scans/top_x0.txt"] == tree_bytes(out / "ingest")["scans/top_x0.txt"]
    r = cli("check-mesh", out / rep["mesh"]["path"])
    assert r.returncode == 0
    assert json.loads(r.stdout)["watertight"]["watertight"] is True


def test_cli_register_flags_reach_config(piped, tmp_path):
    out, rep = piped
    for name in ("detect", "denoise"):
        shutil.copytree(out / name, tmp_path / name)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"tau": 0.25, "epsilon": 0.8}))
    r = cli("register", "--config", cfg, "--tau", "0.3", "--out-dir", tmp_path)
    assert r.returncode == 0, r.stderr
    assert json.loads(r.stdout)["edges"]
    # a support demand the end passes cannot meet splits the graph
    r = cli("register", "--min-support", "3", "--targets", tmp_path / "detect" / "targets.json",
            "--poses", tmp_path / "denoise" / "poses.json", "--out-dir", tmp_path / "strict")
    assert r.returncode == 3 and "disconnected" in r.stderr
    assert not (tmp_path / "strict").exists()
    r = cli("register", "--config", tmp_path / "missing.json", "--out-dir", tmp_path)
    assert r.returncode == 2


def test_zero_noise_scene_registers(tmp_path):
    # detected centres carry only discretisation error
    sc = synth.mini_scene(seed=0, depth_noise=0.0, outlier_frac=0.0, pose_error_deg=0.0, pose_error_mm=0.0)
    job = synth.write_scene(sc, tmp_path / "s")
    cfg = load_config(tmp_path / "s" / "config.json")
    for name in ("ingest", "denoise", "detect", "register"):
        rep = run_stage(name, {"job": job} if name == "ingest" else {}, cfg, tmp_path / "o")
    assert rep["max_residual_mm"] < 1e-3 and len(rep["edges"]) >= len(sc.passes) - 1
