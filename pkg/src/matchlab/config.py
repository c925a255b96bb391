"""Model configuration: the five design axes plus network sizes."""
from __future__ import annotations

import itertools
import warnings
from dataclasses import asdict, dataclass, fields, replace

DISTANCES = ("set_align", "agg_hinge", "agg_mlp", "agg_ntn")
STAGES = ("early", "late")
STRUCTURES = ("injective", "non_injective")
NONLINEARITIES = ("neural", "dot", "hinge")
GRANULARITIES = ("node", "edge")

# interaction-module name for each structure
STRUCTURE_KIND = {"injective": "sinkhorn", "non_injective": "attention"}


class ConfigError(ValueError):
    """An invalid combination of settings."""


@dataclass(frozen=True)
class ModelConfig:
    distance: str = "set_align"
    stage: str = "early"
    structure: str = "injective"
    nonlinearity: str = "hinge"
    granularity: str = "edge"
    layers: int = 5
    dim_h: int = 10
    dim_m: int = 20
    lrl_out: int = 16
    ntn_latent: int = 16
    tau: float = 0.1
    sinkhorn_steps: int = 20
    gumbel: bool = False

    def __post_init__(self):
        for name, allowed in (("distance", DISTANCES), ("stage", STAGES),
                              ("structure", STRUCTURES), ("nonlinearity", NONLINEARITIES),
                              ("granularity", GRANULARITIES)):
            value = getattr(self, name)
            if value not in allowed:
                raise ConfigError(f"{name}={value!r}; expected one of {allowed}")
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if min(self.dim_h, self.dim_m, self.lrl_out, self.ntn_latent) < 1:
            raise ConfigError("all widths must be >= 1")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.sinkhorn_steps < 1:
            raise ConfigError(f"sinkhorn_steps must be >= 1, got {self.sinkhorn_steps}")

    @property
    def uses_alignment(self) -> bool:
        """False exactly for late models with an aggregated head."""
        return self.stage == "early" or self.distance == "set_align"

    @property
    def structure_kind(self) -> str:
        return STRUCTURE_KIND[self.structure]

    @property
    def width(self) -> int:
        """Row width of the embeddings that get aligned and scored."""
        return self.dim_h if self.granularity == "node" else self.dim_m

    def axes(self) -> dict:
        out = {"distance": self.distance, "stage": self.stage, "granularity": self.granularity}
        if self.uses_alignment:
            out["structure"] = self.structure
            out["nonlinearity"] = self.nonlinearity
        else:
            out["structure"] = "NA"
            out["nonlinearity"] = "NA"
        return out

    def label(self) -> str:
        a = self.axes()
        return "/".join(a[k] for k in ("distance", "stage", "structure", "nonlinearity",
                                       "granularity"))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict, warn: bool = True) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown model settings {sorted(unknown)}")
        cfg = cls(**doc)
        if warn and not cfg.uses_alignment and (
                "structure" in doc or "nonlinearity" in doc):
            warnings.warn(f"structure/nonlinearity are ignored for late {cfg.distance} models",
                          stacklevel=2)
        return cfg

    def replace(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


def best_config(**kw) -> ModelConfig:
    """Set alignment, early, injective, hinge, edge."""
    return ModelConfig(**kw)


def design_space(**kw) -> list[ModelConfig]:
    """Every distinct configuration of the five axes (66 in total).

    Set alignment always aligns, so all 24 combinations count.  Aggregated heads
    only align during early interaction, so late ones vary by granularity alone.
    """
    out = []
    for dist, stage, struct, nl, gran in itertools.product(
            DISTANCES, STAGES, STRUCTURES, NONLINEARITIES, GRANULARITIES):
        cfg = ModelConfig(dist, stage, struct, nl, gran, **kw)
        if not cfg.uses_alignment and (struct, nl) != (STRUCTURES[0], NONLINEARITIES[0]):
            continue
        out.append(cfg)
    return out
