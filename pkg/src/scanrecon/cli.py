"""Command line front end: ``scanrecon <subcommand> [flags]``.

Every stage flag overrides the matching key of the ``--config`` JSON file.
The resolved configuration is embedded in the pipeline report.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from scanrecon.config import MESH_FORMATS, RECON_MODES, load_config
from scanrecon.errors import ConfigError, ReconError
from scanrecon.pipeline import run_pipeline, run_stage, strip_timings

# flag -> (config key, type)
STAGE_FLAGS = {
    "--knn": ("knn", int),
    "--alpha": ("alpha", float),
    "--target-radius-min": ("r_min", float),
    "--target-radius-max": ("r_max", float),
    "--vote-threshold": ("vote_threshold", float),
    "--edge-percentile": ("edge_percentile", float),
    "--tau": ("tau", float),
    "--epsilon": ("epsilon", float),
    "--min-support": ("min_support", int),
    "--match-radius": ("match_radius", float),
    "--max-iters": ("max_iters", int),
    "--reference": ("reference", str),
    "--voxel": ("voxel", float),
    "--cluster-radius": ("cluster_radius", float),
    "--keep-radius": ("keep_radius", float),
    "--k-normals": ("k_normals", int),
    "--k-orient": ("k_orient", int),
    "--depth": ("depth", int),
    "--cell": ("cell", float),
    "--tool": ("tool", str),
    "--tool-output": ("tool_output", str),
    "--max-grid-nodes": ("max_grid_nodes", int),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage problems are configuration errors
        self.print_usage(sys.stderr)
        self.exit(ConfigError.exit_code, f"{self.prog}: error: {message}\n")


def _global_flags(p, top):
    # defaults only on the top-level parser so a flag given before the
    # subcommand is not reset by the subparser
    d = None if top else argparse.SUPPRESS
    g = p.add_argument_group("global")
    g.add_argument("--config", default=d, help="JSON config file")
    g.add_argument("--out-dir", default=d, help="output directory (default: out)")
    g.add_argument("--threads", type=int, default=d)
    g.add_argument("--seed", type=int, default=d)
    g.add_argument("-v", "--verbose", action="store_true", default=d or False)


def _stage_flags(p):
    g = p.add_argument_group("stage parameters")
    for flag, (key, typ) in STAGE_FLAGS.items():
        g.add_argument(flag, dest=key, type=typ, default=None)
    g.add_argument("--recon", dest="recon", choices=RECON_MODES, default=None)
    g.add_argument("--mesh-format", dest="mesh_format", choices=MESH_FORMATS, default=None)
    g.add_argument("--accumulator-dump", default=None,
                   help="detect: write each scan's Hough accumulator as PGM into this directory")


def build_parser():
    p = _Parser(prog="scanrecon", description="Target-based multi-pass scan reconstruction.")
    _global_flags(p, top=True)
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def cmd(name, help_):
        s = sub.add_parser(name, help=help_)
        _global_flags(s, top=False)
        _stage_flags(s)
        return s

    cmd("pipeline", "run every stage on a job file").add_argument("job")
    cmd("ingest", "read and check the scans of a job").add_argument("job")
    s = cmd("denoise", "statistical outlier removal")
    s.add_argument("--job", help="job file (default: OUT/ingest/job.json)")
    s = cmd("detect", "find circular targets in each range image")
    s.add_argument("--job", help="job file (default: OUT/denoise/job.json)")
    s = cmd("register", "match targets and solve for scan poses")
    s.add_argument("--targets", help="default: OUT/detect/targets.json")
    s.add_argument("--poses", help="coarse poses (default: OUT/denoise/poses.json)")
    s = cmd("merge", "merge registered scans and keep the part")
    s.add_argument("--job", help="default: OUT/denoise/job.json")
    s.add_argument("--poses", help="registered poses (default: OUT/register/poses.json)")
    s.add_argument("--targets", help="default: OUT/detect/targets.json")
    s.add_argument("--registration", help="default: OUT/register/registration.json")
    s = cmd("reconstruct", "normals and surface mesh from the merged cloud")
    s.add_argument("--cloud", help="default: OUT/merge/cloud.txt")
    s = cmd("synth", "write a simulated scene (scans, poses, ground truth, job)")
    s.add_argument("--scene", choices=("default", "mini"), default="default")
    s.add_argument("--pitch", type=float, default=None, help="sample pitch in mm")
    s.add_argument("--noise", type=float, default=None, help="depth noise sigma in mm")
    s.add_argument("--outlier-frac", type=float, default=None)
    s.add_argument("--pose-error-deg", type=float, default=None)
    s.add_argument("--pose-error-mm", type=float, default=None)
    cmd("check-mesh", "report watertightness of a mesh file").add_argument("mesh")
    return p


def _inputs(args):
    keys = ("job", "targets", "poses", "registration", "cloud", "mesh")
    inp = {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}
    if args.command == "detect" and args.accumulator_dump:
        inp["accumulator_dir"] = args.accumulator_dump
    if args.command == "synth":
        inp["scene"] = args.scene
        inp.update(pitch_x=args.pitch, pitch_y=args.pitch, depth_noise=args.noise,
                   outlier_frac=args.outlier_frac, pose_error_deg=args.pose_error_deg,
                   pose_error_mm=args.pose_error_mm)
    return inp


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {key: getattr(args, key, None) for key, _ in STAGE_FLAGS.values()}
    overrides.update(recon=args.recon, mesh_format=args.mesh_format,
                     threads=getattr(args, "threads", None), seed=getattr(args, "seed", None))
    out_dir = getattr(args, "out_dir", None) or "out"
    try:
        cfg = load_config(getattr(args, "config", None), **overrides)
        if args.command == "pipeline":
            rep = run_pipeline(args.job, cfg, out_dir)
        else:
            rep = run_stage(args.command, _inputs(args), cfg, out_dir)
    except ReconError as e:
        print(f"scanrecon: error: {e}", file=sys.stderr)
        return e.exit_code
    json.dump(strip_timings(rep), sys.stdout, indent=1, sort_keys=True)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
