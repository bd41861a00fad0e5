"""
Run configuration for mvad - strict YAML config with dotted overrides

Every section is a pydantic model that forbids unknown keys. Validation
errors are mapped back to the line/column of the offending key in the
YAML file when it came from there.
"""

from __future__ import annotations

from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from utils.errors import ConfigParseError

ARTIFACT_VERSION = "0.3.0"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


# ─────────────────────────────────────────────────────────────────────────────
# Synthetic scene
# ─────────────────────────────────────────────────────────────────────────────

class TextureConfig(_Section):
    octaves: int = Field(3, ge=1, le=6)
    base_cells: int = Field(3, ge=1)
    palette_seed: int = 7
    jitter: float = Field(0.04, ge=0.0, le=1.0)


class CameraConfig(_Section):
    rotation_deg: float = Field(8.0, ge=0.0)
    translation_px: float = Field(3.0, ge=0.0)
    scale: float = Field(0.05, ge=0.0, lt=0.5)
    tilt: float = Field(4e-4, ge=0.0)


class DefectType(str, Enum):
    SCRATCH = "scratch"
    BLOB = "blob"
    MISSING = "missing"


class DefectConfig(_Section):
    types: List[DefectType] = Field(default_factory=lambda: list(DefectType))
    size_range: Tuple[float, float] = (4.0, 12.0)
    contrast_range: Tuple[float, float] = (0.03, 0.35)

    @field_validator("size_range", "contrast_range")
    @classmethod
    def _ordered(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        lo, hi = value
        if lo < 0 or hi < lo:
            raise ValueError("range must satisfy 0 <= low <= high")
        return value


class SceneConfig(_Section):
    num_views: int = Field(5, ge=2)
    image_size: int = Field(64, ge=8)
    texture: TextureConfig = Field(default_factory=TextureConfig)
    camera: CameraConfig = Field(default_factory=CameraConfig)
    defect: DefectConfig = Field(default_factory=DefectConfig)
    rng_seed: int = 0


class DataConfig(_Section):
    train_normal: int = Field(40, ge=0)
    test_normal: int = Field(10, ge=0)
    test_defective: int = Field(10, ge=0)
    category: str = "synthetic"


# ─────────────────────────────────────────────────────────────────────────────
# Model / alignment / diffusion
# ─────────────────────────────────────────────────────────────────────────────

class Topology(str, Enum):
    RING = "ring"
    FULL = "full"
    EXPLICIT = "explicit"


class AlignConfig(_Section):
    radius: int = Field(3, ge=1)
    include_self: bool = True


class ModelConfig(_Section):
    in_channels: int = Field(3, ge=1)
    latent_factor: int = Field(4, ge=1)
    base_channels: int = Field(32, ge=4)
    channel_mult: Tuple[int, int] = (1, 2)
    norm_groups: int = Field(8, ge=1)
    attention_dim: Optional[int] = None
    se_reduction: int = Field(4, ge=1)
    pe_base: float = Field(10000.0, gt=0.0)
    use_mvam: bool = True
    use_frm: bool = True
    mvam_in_encoder: bool = False
    topology: Topology = Topology.RING
    neighbors: Optional[List[List[int]]] = None

    @model_validator(mode="after")
    def _check_channels(self) -> "ModelConfig":
        for mult in self.channel_mult:
            width = self.base_channels * mult
            if width % self.norm_groups:
                raise ValueError(f"width {width} not divisible by norm_groups")
            if width % 4:
                raise ValueError(f"width {width} must be divisible by 4 for the displacement encoding")
        if self.topology == Topology.EXPLICIT and self.neighbors is None:
            raise ValueError("topology 'explicit' requires 'neighbors'")
        return self

    @property
    def latent_channels(self) -> int:
        return self.in_channels * self.latent_factor ** 2

    @property
    def num_decoder_levels(self) -> int:
        return len(self.channel_mult) + 2


class ScheduleKind(str, Enum):
    LINEAR_BETA = "linear_beta"
    COSINE = "cosine"


class DiffusionConfig(_Section):
    timesteps: int = Field(1000, ge=2)
    schedule: ScheduleKind = ScheduleKind.LINEAR_BETA
    inversion_steps: int = Field(10, ge=1)
    t_extract: int = Field(250, ge=1)

    @model_validator(mode="after")
    def _check_extract(self) -> "DiffusionConfig":
        if self.t_extract > self.timesteps:
            raise ValueError("t_extract must not exceed timesteps")
        if self.inversion_steps > self.t_extract:
            raise ValueError("inversion_steps must not exceed t_extract")
        return self


class TrainConfig(_Section):
    epochs: int = Field(10, ge=1)
    batch_size: int = Field(4, ge=1)
    learning_rate: float = Field(1e-3, gt=0.0)
    weight_decay: float = Field(1e-2, ge=0.0)
    lambda_: float = Field(0.1, ge=0.0, alias="lambda")
    rng_seed: int = 0


# ─────────────────────────────────────────────────────────────────────────────
# Scoring / evaluation / runtime
# ─────────────────────────────────────────────────────────────────────────────

class ScoreConfig(_Section):
    levels: List[int] = Field(default_factory=lambda: [4, 3])
    level_weights: Optional[List[float]] = None
    coreset_fraction: float = Field(1.0, gt=0.0, le=1.0)
    coreset_seed: int = 0
    neighbor_count: int = Field(1, ge=1)
    gaussian_sigma: float = Field(0.0, ge=0.0)

    @model_validator(mode="after")
    def _check_weights(self) -> "ScoreConfig":
        if not self.levels:
            raise ValueError("at least one level is required")
        if len(set(self.levels)) != len(self.levels):
            raise ValueError("levels must be distinct")
        if self.level_weights is not None:
            if len(self.level_weights) != len(self.levels):
                raise ValueError("level_weights must match levels")
            if any(w < 0 for w in self.level_weights) or not any(self.level_weights):
                raise ValueError("weights must be >= 0 and not all zero")
        return self

    def weights(self) -> Dict[int, float]:
        if self.level_weights is None:
            return {lvl: 1.0 / len(self.levels) for lvl in self.levels}
        return dict(zip(self.levels, self.level_weights))


class EvalConfig(_Section):
    export_maps: bool = False
    export_features: bool = False


class RuntimeConfig(_Section):
    seed: int = 0
    workers: int = Field(1, ge=1)
    deterministic: bool = False
    cache_dir: Optional[str] = None


class Provenance(_Section):
    config_path: Optional[str] = None
    overrides: List[str] = Field(default_factory=list)
    seed: int = 0
    version: str = ARTIFACT_VERSION


class RunConfig(_Section):
    scene: SceneConfig = Field(default_factory=SceneConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    align: AlignConfig = Field(default_factory=AlignConfig)
    diffusion: DiffusionConfig = Field(default_factory=DiffusionConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    score: ScoreConfig = Field(default_factory=ScoreConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    runtime: RuntimeConfig = Field(default_factory=RuntimeConfig)
    provenance: Provenance = Field(default_factory=Provenance)

    def to_dict(self) -> Dict[str, Any]:
        return self.model_dump(mode="json", by_alias=True)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, out_dir: Path | str) -> Path:
        path = Path(out_dir) / "run_config.yaml"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_yaml(), encoding="utf-8")
        return path

    def with_updates(self, updates: Dict[str, Any]) -> "RunConfig":
        """Return a copy with dotted-key updates applied and re-validated."""
        tree = self.to_dict()
        for key, value in updates.items():
            _set_dotted(tree, key, value)
        return _validate(tree, source=None)


# ─────────────────────────────────────────────────────────────────────────────
# Loading
# ─────────────────────────────────────────────────────────────────────────────

def _set_dotted(tree: Dict[str, Any], dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = tree
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            if part in node and node[part] is not None:
                raise ConfigParseError("cannot descend into a scalar", key=dotted)
            node[part] = {}
        node = node[part]
    node[parts[-1]] = value


def _node_mark(root: Optional[yaml.Node], loc: Sequence[Any]) -> Optional[yaml.Mark]:
    """Find the start mark of the key at `loc` in a composed YAML tree."""
    node = root
    mark = None
    for part in loc:
        if isinstance(node, yaml.MappingNode):
            for key_node, value_node in node.value:
                if key_node.value == str(part):
                    mark = key_node.start_mark
                    node = value_node
                    break
            else:
                return mark
        elif isinstance(node, yaml.SequenceNode) and isinstance(part, int):
            if part >= len(node.value):
                return mark
            node = node.value[part]
            mark = node.start_mark
        else:
            return mark
    return mark


def _validate(tree: Dict[str, Any], source: Optional[yaml.Node]) -> RunConfig:
    try:
        return RunConfig.model_validate(tree)
    except ValidationError as exc:
        err = exc.errors()[0]
        loc = [p for p in err["loc"] if not (isinstance(p, str) and p.startswith("function-"))]
        key = ".".join(str(p) for p in loc)
        message = "unknown key" if err["type"] == "extra_forbidden" else err["msg"]
        mark = _node_mark(source, loc)
        if mark is not None:
            raise ConfigParseError(message, key=key, line=mark.line + 1,
                                   column=mark.column + 1) from None
        raise ConfigParseError(message, key=key) from None


def load_run_config(path: Optional[Path | str] = None,
                    overrides: Sequence[str] = (),
                    seed: Optional[int] = None) -> RunConfig:
    """
    Load and fully resolve a run configuration.

    Args:
        path: YAML config file; defaults are used when omitted
        overrides: "dotted.key=value" strings, values parsed as YAML scalars
        seed: master seed overriding runtime/scene/train seeds

    Returns:
        Validated RunConfig with provenance filled in
    """
    tree: Dict[str, Any] = {}
    source = None
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        try:
            source = yaml.compose(text)
            tree = yaml.safe_load(text) or {}
        except yaml.MarkedYAMLError as exc:
            mark = exc.problem_mark
            raise ConfigParseError(str(exc.problem), line=mark.line + 1 if mark else None,
                                   column=mark.column + 1 if mark else None) from None
        if not isinstance(tree, dict):
            raise ConfigParseError("top level must be a mapping")

    for item in overrides:
        if "=" not in item:
            raise ConfigParseError(f"override '{item}' is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError:
            value = raw
        _set_dotted(tree, key.strip(), value)

    if seed is not None:
        for dotted in ("runtime.seed", "scene.rng_seed", "train.rng_seed"):
            _set_dotted(tree, dotted, seed)

    tree.setdefault("provenance", {})
    tree["provenance"].update({
        "config_path": str(path) if path is not None else None,
        "overrides": list(overrides),
        "seed": seed if seed is not None else tree.get("runtime", {}).get("seed", 0),
        "version": ARTIFACT_VERSION,
    })
    return _validate(tree, source)
