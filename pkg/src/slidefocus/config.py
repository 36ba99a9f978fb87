"""Pipeline configuration, presets, and validation."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass


# model-size presets: name -> (width, heads, global depth, group depth, inter depth)
PRESETS = {
    "main": dict(d_model=512, heads=4, depth_global=12, depth_group=12, depth_inter=12),
    "supp": dict(d_model=384, heads=6, depth_global=12, depth_group=8, depth_inter=8),
    "desk": dict(d_model=128, heads=4, depth_global=4, depth_group=4, depth_inter=4),
}
DEFAULT_PRESET = "desk"

# parameter-name prefixes trained at the head learning rate
HEAD_PREFIXES = ("global/head", "local/head", "focus/", "fusion/")


@dataclass
class PipelineConfig:
    """Everything needed to build, train, and run the two-branch model."""

    # model
    preset: str = DEFAULT_PRESET
    d_model: int = 128
    heads: int = 4
    depth_global: int = 4
    depth_group: int = 4
    depth_inter: int = 4
    gcn_layers: int = 3
    bins: int = 16
    class_count: int = 2
    dtype: str = "float64"

    # geometry
    thumbnail_factor: int = 2
    local_factor: int = 1
    n_global: int = 144
    n_local: int = 24
    subgraph_size: int = 8     # T nodes per selected subgraph
    k_subgraphs: int = 4       # K disjoint subgraphs
    compactness: float = 10.0
    slic_iterations: int = 10
    footprint_quantum: int = 32  # thumbnail-space rect snapping for crop reuse

    # prototypes and marker mining
    prototype_count: int = 16
    kmeans_iterations: int = 100
    kmeans_tol: float = 1e-6
    marker_clusters: int = 8

    # losses
    w_global: float = 1.0
    w_focus: float = 1.0
    w_local: float = 1.0
    w_cst: float = 1.0
    w_all: float = 1.0

    # focus supervision: "phased" = saliency targets until the global branch
    # converges, then calibrated mixtures; "supervised" = mask-derived targets
    focus_supervision: str = "supervised"
    selection_source: str = "focus"    # "focus" | "gradcam"
    enable_local: bool = True

    # optimization
    lr_trunk: float = 5e-4
    lr_heads: float = 1e-3
    lr_focus: float = 0.01     # the focus head tracks a moving trunk, so it runs hot
    momentum: float = 0.9
    weight_decay: float = 5e-4
    grad_clip: float = 3.0     # max L2 norm of the summed batch gradient; 0 disables
    batch_size: int = 4
    max_epochs_global: int = 30
    max_epochs_joint: int = 50
    patience: int = 3
    convergence_tol: float = 1e-3
    joint_patience: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.preset in PRESETS:
            for k, v in PRESETS[self.preset].items():
                setattr(self, k, v)
        self.validate()

    def validate(self) -> None:
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if self.d_model % self.heads != 0:
            raise ValueError("d_model must be divisible by heads")
        if self.thumbnail_factor % self.local_factor != 0:
            raise ValueError("thumbnail_factor must be an integer multiple of local_factor")
        if self.k_subgraphs * self.subgraph_size > self.n_global:
            raise ValueError("K * T exceeds the global node budget")
        if self.focus_supervision not in ("phased", "supervised"):
            raise ValueError("focus_supervision must be 'phased' or 'supervised'")
        if self.selection_source not in ("focus", "gradcam"):
            raise ValueError("selection_source must be 'focus' or 'gradcam'")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be 'float64' or 'float32'")
        if self.class_count < 2:
            raise ValueError("need at least two classes")

    @property
    def zoom(self) -> int:
        return self.thumbnail_factor // self.local_factor

    @property
    def np_dtype(self):
        import numpy as np

        return np.float64 if self.dtype == "float64" else np.float32

    def geometry_signature(self) -> dict:
        """Structural fields a checkpoint must agree on to be loadable."""
        keys = ("d_model", "heads", "depth_global", "depth_group", "depth_inter",
                "gcn_layers", "bins", "class_count", "n_global", "n_local",
                "subgraph_size", "prototype_count")
        return {k: getattr(self, k) for k in keys}

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "PipelineConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        base = dict(d)
        preset = base.get("preset", DEFAULT_PRESET)
        cfg = cls(**{**base, "preset": preset})
        # explicit dims win over the preset when both are given
        for k in PRESETS[preset]:
            if k in base:
                setattr(cfg, k, base[k])
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path) as fh:
            return cls.from_json(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)


def replace(cfg: PipelineConfig, **overrides) -> PipelineConfig:
    """Copy with field overrides; explicit dims survive the preset reapply."""
    return PipelineConfig.from_json({**cfg.to_json(), **overrides})


def lr_for_name(cfg: PipelineConfig):
    """Per-parameter learning-rate rule: heads fast, trunk slow."""

    def rule(name: str) -> float:
        if name.startswith("focus/"):
            return cfg.lr_focus
        if name.startswith(HEAD_PREFIXES):
            return cfg.lr_heads
        return cfg.lr_trunk

    return rule
