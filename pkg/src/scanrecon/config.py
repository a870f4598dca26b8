"""Pipeline configuration: one flat JSON document, every key CLI-overridable."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

from scanrecon.errors import ConfigError

RECON_MODES = ("builtin", "external")
MESH_FORMATS = ("stl-binary", "ply")


@dataclass(frozen=True)
class PipelineConfig:
    # denoise
    knn: int = 30
    alpha: float = 1.0
    # target detection (radii in mm)
    r_min: float = 2.0
    r_max: float = 8.0
    vote_threshold: float = 0.5
    edge_percentile: float = 90.0
    refined_only: bool = True
    # registration (mm)
    tau: float = 0.2
    epsilon: float = 0.5
    min_support: int = 2
    match_radius: float = 10.0
    max_iters: int = 100
    reference: Optional[str] = None
    # merge / segmentation (mm); cluster_radius None means 2 * voxel
    voxel: float = 0.1
    cluster_radius: Optional[float] = None
    keep_radius: float = 5.0
    # surface
    k_normals: int = 100
    k_orient: int = 10
    depth: int = 12
    cell: float = 1.0
    recon: str = "builtin"
    tool: Optional[str] = None
    tool_output: str = "output.ply"
    max_grid_nodes: int = 30_000_000
    mesh_format: str = "stl-binary"
    # execution
    threads: int = 1
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def effective_cluster_radius(self):
        return 2.0 * self.voxel if self.cluster_radius is None else self.cluster_radius

    def validate(self):
        def pos(name):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v) or v <= 0:
                raise ConfigError(f"{name} must be a positive number, got {v!r}")

        for name in ("r_min", "r_max", "vote_threshold", "tau", "epsilon", "match_radius",
                     "voxel", "keep_radius", "cell", "edge_percentile"):
            pos(name)
        for name in ("knn", "min_support", "max_iters", "k_normals", "k_orient", "depth",
                     "max_grid_nodes", "threads"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.cluster_radius is not None:
            pos("cluster_radius")
        if isinstance(self.alpha, bool) or not isinstance(self.alpha, (int, float)) or not self.alpha >= 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha!r}")
        if not self.r_min < self.r_max:
            raise ConfigError(f"r_min ({self.r_min}) must be below r_max ({self.r_max})")
        if self.vote_threshold > 1:
            raise ConfigError("vote_threshold must lie in (0, 1]")
        if self.edge_percentile >= 100:
            raise ConfigError("edge_percentile must lie in (0, 100)")
        if self.recon not in RECON_MODES:
            raise ConfigError(f"recon must be one of {RECON_MODES}, got {self.recon!r}")
        if self.mesh_format not in MESH_FORMATS:
            raise ConfigError(f"mesh_format must be one of {MESH_FORMATS}, got {self.mesh_format!r}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError("seed must be an integer")

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        # JSON has one number type; accept 1.0 for integer fields
        ints = {f.name for f in fields(cls) if f.type in ("int", int)}
        clean = {}
        for k, v in d.items():
            if k in ints and isinstance(v, float) and v.is_integer():
                v = int(v)
            clean[k] = v
        try:
            return cls(**clean)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def from_json(cls, text):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def override(self, **kw):
        """Copy with the given keys replaced; ``None`` values are ignored."""
        kw = {k: v for k, v in kw.items() if v is not None}
        unknown = sorted(set(kw) - {f.name for f in fields(self)})
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        return replace(self, **kw)


def load_config(path=None, **overrides) -> PipelineConfig:
    base = PipelineConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        base = PipelineConfig.from_json(text)
    return base.override(**overrides)
