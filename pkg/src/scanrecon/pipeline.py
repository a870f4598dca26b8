"""Staged execution. Every stage reads and writes files in an output directory.

``run_pipeline`` simply runs the stages in order against one directory, so
a staged run and a full run produce the same bytes by construction.

Layout under ``out_dir``::

    ingest/job.json, ingest/poses.json, ingest/scans/<id>.txt
    denoise/job.json, denoise/poses.json, denoise/scans/<id>.txt, denoise/removed.json
    detect/targets.json
    register/registration.json, register/poses.json
    merge/cloud.txt
    reconstruct/mesh.stl (or mesh.ply)
    reports/<stage>.json, report.json
"""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from scanrecon import __version__
from scanrecon.config import PipelineConfig
from scanrecon.core import apply, compose
from scanrecon.denoise import remove_outliers
from scanrecon.errors import ConfigError, DataError, ReconError, StageError
from scanrecon.ingest import (load_job, read_cloud, read_poses, read_scan,
                              write_cloud, write_poses, write_scan)
from scanrecon.merge import box_grid_merge, segment_keep_part
from scanrecon.registration import register
from scanrecon.surface.mesh import check_watertight
from scanrecon.surface.meshio import export_mesh, read_mesh
from scanrecon.surface.normals import estimate_normals
from scanrecon.surface.reconstruct import reconstruct_builtin, reconstruct_external
from scanrecon.targets import detect_circles, read_targets, write_targets

log = logging.getLogger(__name__)

STAGES = ("pipeline", "ingest", "denoise", "detect", "register", "merge", "reconstruct",
          "synth", "check-mesh")
PIPELINE_ORDER = ("ingest", "denoise", "detect", "register", "merge", "reconstruct")
TIMING_KEY = "timing_s"


class Artifacts:
    """Records every file a run creates so a failed run can remove them."""

    def __init__(self, out_dir):
        self.out = Path(out_dir)
        self.paths: List[Path] = []
        self.dirs: List[Path] = []

    def dir(self, *parts):
        d = self.out.joinpath(*parts)
        missing = []
        p = d
        while not p.exists():
            missing.append(p)
            p = p.parent
        d.mkdir(parents=True, exist_ok=True)
        self.dirs += reversed(missing)
        return d

    def file(self, path):
        path = Path(path)
        if not path.exists():
            self.paths.append(path)
        return path

    def remove(self):
        for p in reversed(self.paths):
            try:
                p.unlink()
            except OSError:
                pass
        for d in reversed(self.dirs):
            try:
                d.rmdir()
            except OSError:
                pass


def _write_json(arts, path, doc):
    arts.file(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _rel(out, p):
    try:
        return str(Path(p).resolve().relative_to(Path(out).resolve()))
    except ValueError:
        return str(p)


def _write_job(arts, stage_dir, ids, poses):
    write_poses(arts.file(stage_dir / "poses.json"), poses)
    doc = {"scans": [{"scan_id": s, "path": f"scans/{s}.txt"} for s in ids], "poses": "poses.json"}
    _write_json(arts, stage_dir / "job.json", doc)


def stage_ingest(inputs, cfg, arts):
    job = load_job(inputs["job"])
    d = arts.dir("ingest", "scans")
    counts = {}
    for sid, path in job.scans:
        cloud, img = read_scan(path, sid)
        write_scan(arts.file(d / f"{sid}.txt"), cloud, img)
        counts[sid] = len(cloud)
    _write_job(arts, d.parent, job.scan_ids, {s: job.poses[s] for s in job.scan_ids})
    return {"points": counts, "total_points": int(sum(counts.values()))}


def stage_denoise(inputs, cfg, arts):
    job = load_job(inputs.get("job", arts.out / "ingest" / "job.json"))
    d = arts.dir("denoise", "scans")
    removed, kept = {}, {}
    for sid, path in job.scans:
        cloud, img = read_scan(path, sid)
        _, rem = remove_outliers(cloud, cfg.knn, cfg.alpha, workers=cfg.threads)
        keep = np.setdiff1d(np.arange(len(cloud)), rem)
        sub, sub_img = img.subset(cloud, keep)
        write_scan(arts.file(d / f"{sid}.txt"), sub, sub_img)
        removed[sid] = rem.tolist()
        kept[sid] = len(sub)
    _write_job(arts, d.parent, job.scan_ids, job.poses)
    _write_json(arts, d.parent / "removed.json", removed)
    return {"removed": {s: len(v) for s, v in removed.items()}, "points": kept,
            "total_removed": int(sum(len(v) for v in removed.values()))}


def stage_detect(inputs, cfg, arts):
    job = load_job(inputs.get("job", arts.out / "denoise" / "job.json"))
    d = arts.dir("detect")
    found, counts = {}, {}
    dump = inputs.get("accumulator_dir")
    if dump:
        Path(dump).mkdir(parents=True, exist_ok=True)
    for sid, path in job.scans:
        _, img = read_scan(path, sid)
        acc = str(Path(dump) / f"{sid}.pgm") if dump else None
        ts = detect_circles(img, cfg.r_min, cfg.r_max, cfg.vote_threshold, cfg.edge_percentile,
                            accumulator_path=acc)
        found[sid] = ts
        counts[sid] = {"detected": len(ts), "refined": int(sum(t.refined for t in ts))}
    write_targets(arts.file(d / "targets.json"), found)
    return {"targets": counts}


def _coarse_targets(targets, poses, cfg):
    out, index = {}, {}
    for sid in poses:
        ts = targets.get(sid, [])
        idx = [k for k, t in enumerate(ts) if t.refined or not cfg.refined_only]
        P = np.array([ts[k].center3d for k in idx], dtype=np.float64).reshape(-1, 3)
        out[sid] = poses[sid].transform_points(P)
        index[sid] = idx
    return out, index


def stage_register(inputs, cfg, arts):
    targets = read_targets(inputs.get("targets", arts.out / "detect" / "targets.json"))
    poses = read_poses(inputs.get("poses", arts.out / "denoise" / "poses.json"))
    missing = [s for s in targets if s not in poses]
    if missing:
        raise DataError(f"no coarse pose for scan(s): {', '.join(missing)}")
    coarse, index = _coarse_targets(targets, poses, cfg)
    reg = register(coarse, cfg.reference, cfg.tau, cfg.epsilon, cfg.min_support, cfg.max_iters,
                   cfg.match_radius, scans=list(poses))
    final = {s: compose(reg.corrections[s], poses[s]) for s in poses}
    d = arts.dir("register")
    write_poses(arts.file(d / "poses.json"), final)
    matches = []
    for key in sorted(reg.graph.edges):
        for m in reg.graph.edges[key]:
            dm = m.to_dict()
            dm["target_a"] = index[m.scan_a][m.target_a]
            dm["target_b"] = index[m.scan_b][m.target_b]
            matches.append(dm)
    rep = reg.report()
    doc = {"corrections": {s: t.to_dict() for s, t in reg.corrections.items()},
           "matches": matches, "report": rep}
    _write_json(arts, d / "registration.json", doc)
    return rep


def _reference_targets(targets, poses, cfg, matches=None):
    """Target centres in the reference frame.

    With ``matches`` only targets paired across scans are used: a spurious
    detection on a fixture is seen by one scan and would otherwise keep
    the fixture cluster.
    """
    use = None
    if matches is not None:
        use = {(m[s], m[t]) for m in matches for s, t in (("scan_a", "target_a"), ("scan_b", "target_b"))}
    pts = []
    for sid in sorted(targets):
        if sid not in poses:
            continue
        sel = [t.center3d for k, t in enumerate(targets[sid])
               if (t.refined or not cfg.refined_only) and (use is None or (sid, k) in use)]
        if sel:
            pts.append(poses[sid].transform_points(np.array(sel)))
    return np.concatenate(pts) if pts else np.zeros((0, 3))


def stage_merge(inputs, cfg, arts):
    job = load_job(inputs.get("job", arts.out / "denoise" / "job.json"))
    poses = read_poses(inputs.get("poses", arts.out / "register" / "poses.json"))
    targets = read_targets(inputs.get("targets", arts.out / "detect" / "targets.json"))
    clouds = []
    for sid, path in job.scans:
        if sid not in poses:
            raise DataError(f"no registered pose for scan {sid!r}")
        cloud, _ = read_scan(path, sid)
        clouds.append(apply(poses[sid], cloud, frame="reference"))
    merged = box_grid_merge(clouds, cfg.voxel)
    reg_path = Path(inputs.get("registration", arts.out / "register" / "registration.json"))
    matches = json.loads(reg_path.read_text())["matches"] if reg_path.exists() else None
    T = _reference_targets(targets, poses, cfg, matches)
    kept, labels, hit = segment_keep_part(merged, T, cfg.effective_cluster_radius, cfg.keep_radius,
                                          return_labels=True)
    d = arts.dir("merge")
    write_cloud(arts.file(d / "cloud.txt"), kept, pitch=cfg.voxel)
    return {"input_points": int(sum(len(c) for c in clouds)), "merged_points": len(merged),
            "clusters": int(labels.max() + 1), "kept_clusters": int(hit.size),
            "kept_points": len(kept)}


def stage_reconstruct(inputs, cfg, arts):
    if cfg.recon == "external" and not cfg.tool:
        raise ConfigError("recon mode 'external' needs a tool command template (--tool)")
    cloud = read_cloud(inputs.get("cloud", arts.out / "merge" / "cloud.txt"))
    oc = estimate_normals(cloud, cfg.k_normals, cfg.k_orient, workers=cfg.threads)
    if cfg.recon == "external":
        mesh = reconstruct_external(oc, cfg.depth, cfg.tool, output_name=cfg.tool_output)
    else:
        mesh = reconstruct_builtin(oc, cfg.cell, max_nodes=cfg.max_grid_nodes, workers=cfg.threads)
    wt = check_watertight(mesh)
    d = arts.dir("reconstruct")
    ext = "stl" if cfg.mesh_format == "stl-binary" else "ply"
    path = arts.file(d / f"mesh.{ext}")
    export_mesh(mesh, path, cfg.mesh_format)
    return {"points": len(cloud), "vertices": int(len(mesh.vertices)), "facets": int(mesh.n_faces),
            "watertight": wt.to_dict(), "mesh": _rel(arts.out, path)}


def stage_check_mesh(inputs, cfg, arts):
    if "mesh" not in inputs:
        raise ConfigError("check-mesh needs a mesh file")
    m = read_mesh(inputs["mesh"])
    return {"vertices": int(len(m.vertices)), "facets": int(m.n_faces),
            "watertight": check_watertight(m).to_dict()}


def stage_synth(inputs, cfg, arts):
    from scanrecon import synth

    scene = inputs.get("scene", "default")
    kw = {k: inputs[k] for k in ("pitch_x", "pitch_y", "depth_noise", "outlier_frac",
                                 "pose_error_deg", "pose_error_mm") if inputs.get(k) is not None}
    make = {"default": synth.default_scene, "mini": synth.mini_scene}.get(scene)
    if make is None:
        raise ConfigError(f"unknown scene {scene!r}; expected default or mini")
    scene_spec = make(seed=cfg.seed, **kw)
    before = set(arts.out.rglob("*")) if arts.out.exists() else set()
    arts.dir()
    job = synth.write_scene(scene_spec, arts.out)
    arts.paths += [p for p in sorted(arts.out.rglob("*")) if p.is_file() and p not in before]
    gt = json.loads((arts.out / "ground_truth.json").read_text())
    return {"scene": scene, "job": _rel(arts.out, job), "scans": len(gt["passes"]),
            "points": {s: int(sum(v["cluster_counts"].values())) for s, v in gt["passes"].items()},
            "outliers": {s: len(v["outlier_indices"]) for s, v in gt["passes"].items()}}


_RUNNERS = {
    "ingest": stage_ingest, "denoise": stage_denoise, "detect": stage_detect,
    "register": stage_register, "merge": stage_merge, "reconstruct": stage_reconstruct,
    "check-mesh": stage_check_mesh, "synth": stage_synth,
}


def run_stage(stage: str, inputs: Dict, config: PipelineConfig, out_dir, arts: Optional[Artifacts] = None,
              write_report=True):
    """Run one stage; returns its report (with a timing field)."""
    if stage == "pipeline":
        return run_pipeline(inputs["job"], config, out_dir)
    if stage not in _RUNNERS:
        raise ConfigError(f"unknown stage {stage!r}; stages: {', '.join(STAGES)}")
    own = arts is None
    arts = arts or Artifacts(out_dir)
    t0 = time.perf_counter()
    try:
        rep = _RUNNERS[stage](inputs, config, arts)
        if write_report and stage not in ("synth", "check-mesh"):
            arts.dir("reports")
            _write_json(arts, arts.out / "reports" / f"{stage}.json", rep)
    except ReconError as e:
        if own:
            arts.remove()
        raise StageError(stage, e) from e
    except (OSError, ValueError, KeyError) as e:
        if own:
            arts.remove()
        raise StageError(stage, DataError(str(e))) from e
    rep = dict(rep)
    rep[TIMING_KEY] = time.perf_counter() - t0
    return rep


def strip_timings(doc):
    if isinstance(doc, dict):
        return {k: strip_timings(v) for k, v in doc.items() if k != TIMING_KEY}
    if isinstance(doc, list):
        return [strip_timings(v) for v in doc]
    return doc


def run_pipeline(job_path, config: PipelineConfig, out_dir) -> Dict:
    """ingest -> denoise -> detect -> register -> merge -> reconstruct, then report.json."""
    arts = Artifacts(out_dir)
    stages = {}
    t0 = time.perf_counter()
    try:
        for name in PIPELINE_ORDER:
            inputs = {"job": job_path} if name == "ingest" else {}
            stages[name] = run_stage(name, inputs, config, out_dir, arts=arts)
    except StageError:
        arts.remove()
        raise
    reg = stages["register"]
    report = {
        "version": __version__,
        "config": config.to_dict(),
        "stages": stages,
        "points": {
            "input": stages["ingest"]["total_points"],
            "after_denoise": int(sum(stages["denoise"]["points"].values())),
            "merged": stages["merge"]["merged_points"],
            "kept": stages["merge"]["kept_points"],
        },
        "registration": {
            "edges": reg["edges"],
            "max_residual_mm": reg["max_residual_mm"],
        },
        "mesh": {
            "path": stages["reconstruct"]["mesh"],
            "vertices": stages["reconstruct"]["vertices"],
            "facets": stages["reconstruct"]["facets"],
        },
        "watertight": stages["reconstruct"]["watertight"],
        TIMING_KEY: time.perf_counter() - t0,
    }
    _write_json(arts, Path(out_dir) / "report.json", report)
    return report
