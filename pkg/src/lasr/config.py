"""Run configuration: dataclass defaults, optionally overridden by YAML then CLI."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from lasr.errors import ParameterError
from lasr.losses import LossWeights


@dataclass
class StageConfig:
    name: str
    epochs: int
    bones: int
    target_vertices: int | None = None  # remesh target; None keeps the current mesh


@dataclass
class PipelineConfig:
    seed: int = 0
    working_size: int = 64            # optimisation resolution (measurements are area-downsampled)
    batch: int = 8
    steps_per_epoch: int | None = None  # None: ceil((T - 1) / batch)
    lr: float = 5e-3
    root_lr: float | None = 2e-2      # root pose and focal group; None uses lr
    lr_final: float = 0.05            # cosine decay within each stage down to this fraction of lr
    init_subdivisions: int = 3        # icosphere level of the initial shape (642 vertices)
    init_radius: float = 1.0
    init_depth: float = 3.0
    init_focal: float = 0.75          # focal length as a fraction of the working width
    sigma: float = 1e-4
    gamma: float = 1e-4
    rigid_epochs: int = 20
    refine_epochs: int = 10
    bones: tuple = (0, 8, 16, 24)
    vertex_growth: float = 1.5
    vertex_cap: int = 4000
    remesh_grid: int = 64
    coarse_to_fine: bool = True
    skinning: str = "gmm"             # "gmm" or "free"
    use_backward_flow: bool = True
    optimize_principal_point: bool = True
    temporal_basis: int = 0           # > 0: per-frame tables via K sinusoidal features
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.bones = tuple(int(b) for b in self.bones)
        if self.skinning not in ("gmm", "free"):
            raise ParameterError(f"unknown skinning model {self.skinning!r}")
        if self.working_size < 8 or self.batch < 1 or self.lr <= 0:
            raise ParameterError("working_size >= 8, batch >= 1 and lr > 0 are required")
        if not self.bones or self.bones[0] != 0:
            raise ParameterError("the first stage must be rigid (0 bones)")
        if not 0 < self.lr_final <= 1:
            raise ParameterError("lr_final must be in (0, 1]")
        if self.sigma <= 0 or self.gamma <= 0:
            raise ParameterError("sigma and gamma must be positive")

    def stages(self, initial_vertices: int) -> list[StageConfig]:
        """Stage schedule: rigid S0 then one stage per further bone count."""
        if not self.coarse_to_fine:
            final = max(self.bones)
            epochs = self.rigid_epochs + self.refine_epochs * (len(self.bones) - 1)
            return [StageConfig("S0", epochs, final)]
        out = [StageConfig("S0", self.rigid_epochs, 0)]
        for k, b in enumerate(self.bones[1:], start=1):
            target = min(self.vertex_cap, int(round(initial_vertices * self.vertex_growth ** k)))
            out.append(StageConfig(f"S{k}", self.refine_epochs, b, target))
        return out

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["bones"] = list(self.bones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def ablation(cfg: PipelineConfig, variant: str) -> PipelineConfig:
    """Copy of ``cfg`` with one component removed."""
    d = cfg.to_dict()
    if variant == "full":
        pass
    elif variant == "no_flow":
        d["weights"]["beta2"] = 0.0
    elif variant == "no_lbs":
        d["bones"] = [0]
    elif variant == "no_c2f":
        d["coarse_to_fine"] = False
    elif variant == "no_gmm":
        d["skinning"] = "free"
    else:
        raise ParameterError(f"unknown ablation {variant!r}")
    return PipelineConfig.from_dict(d)


ABLATIONS = ("full", "no_flow", "no_lbs", "no_c2f", "no_gmm")


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Defaults, then a YAML file, then explicit overrides (e.g. from the CLI)."""
    d = PipelineConfig().to_dict()
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ParameterError(f"config {path} is not a mapping")
        _merge(d, loaded)
    if overrides:
        _merge(d, {k: v for k, v in overrides.items() if v is not None})
    return PipelineConfig.from_dict(d)


def _merge(base: dict, upd: dict) -> None:
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v
