import json
import logging
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError, ReportIOError
from .services.fusion import FusorKind
from .services.scenario import MODALITY_ORDER, Modality
from .services.twin import TwinOp

logger = logging.getLogger(__name__)

MANIFEST_KIND = "twin-run-manifest"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class WorldConfig(_Strict):
    """Synthetic multi-area world"""

    seed: int = Field(0, ge=0)
    areas: int = Field(4, ge=1)
    steps_per_area: int = Field(160, ge=1)
    window: int = Field(8, ge=1)
    noise_std: Dict[Modality, float] = Field(
        default_factory=lambda: {m: 0.0 for m in MODALITY_ORDER}
    )
    walk_step_std: float = Field(0.02, ge=0.0)
    loop_radius: float = Field(4.0, gt=0.0)
    turn_rate: float = Field(0.25, gt=0.0)
    ap_positions: Optional[List[Tuple[float, float]]] = None
    area_seeds: Optional[List[int]] = None
    train_fraction: float = Field(0.75, gt=0.0, le=1.0)

    @field_validator("noise_std")
    @classmethod
    def _noise_non_negative(cls, value):
        for modality, std in value.items():
            if std < 0:
                raise ValueError(f"noise_std[{modality.value}] must be >= 0")
        return value

    @model_validator(mode="after")
    def _check_shapes(self):
        if self.window > self.steps_per_area:
            raise ValueError("window must not exceed steps_per_area")
        if self.ap_positions is not None and len(self.ap_positions) != self.areas:
            raise ValueError("ap_positions needs one entry per area")
        if self.area_seeds is not None and len(self.area_seeds) != self.areas:
            raise ValueError("area_seeds needs one entry per area")
        return self

    def noise_for(self, modality: Modality) -> float:
        return float(self.noise_std.get(modality, 0.0))

    def ap_position(self, area: int) -> Tuple[float, float]:
        if self.ap_positions is not None:
            return tuple(self.ap_positions[area])
        # area-local frame: the loop is centred on the origin
        return (3.0, 0.0)


class FedConfig(_Strict):
    """Distributed mapping loop and aggregation rule"""

    rounds: int = Field(20, ge=0)
    local_steps: int = Field(5, ge=0)
    local_lr: float = Field(0.05, gt=0.0)
    global_lr: float = Field(10.0, gt=0.0)
    epsilon: float = Field(0.9, ge=0.0, le=1.0)
    mu: float = Field(1e-3, gt=0.0)
    alpha: Optional[List[float]] = None
    aggregation: Literal["mean", "gated"] = "mean"
    batch_size: int = Field(16, ge=0)
    G: Optional[float] = Field(None, gt=0.0)
    L: Optional[float] = Field(None, gt=0.0)
    step_size_policy: Literal["warn", "enforce"] = "warn"
    estimate_samples: int = Field(4, ge=2)
    estimate_radius: float = Field(0.01, gt=0.0)
    # gated runs stop when local_lr exceeds the bound by more than this factor
    step_size_fatal_factor: float = Field(10.0, ge=1.0)

    @field_validator("alpha")
    @classmethod
    def _alpha_simplex(cls, value):
        if value is None:
            return value
        if any(a < 0 for a in value):
            raise ValueError("alpha entries must be non-negative")
        if abs(sum(value) - 1.0) > 1e-9:
            raise ValueError("alpha entries must sum to 1")
        return value

    def mixture_weights(self, modality_count: int) -> List[float]:
        if self.alpha is None:
            return [1.0 / modality_count] * modality_count
        if len(self.alpha) != modality_count:
            raise ConfigError(
                f"alpha has {len(self.alpha)} entries but there are {modality_count} modalities"
            )
        return list(self.alpha)


class TwinBuildConfig(_Strict):
    """Encoder/decoder architecture and fusor choice"""

    latent_dim: int = Field(16, ge=1)
    conv_layers: int = Field(2, ge=0)
    conv_channels: int = Field(8, ge=1)
    kernel_width: int = Field(3, ge=1)
    pool_stride: int = Field(2, ge=1)
    dense_layers: int = Field(2, ge=1)
    hidden: int = Field(32, ge=1)
    fusor: FusorKind = FusorKind.GATING
    fusors: Optional[List[FusorKind]] = None
    reconstruction_space: Literal["raw", "feature"] = "raw"

    def fusor_sweep(self) -> List[FusorKind]:
        return list(self.fusors) if self.fusors else [self.fusor]


class TransformConfig(_Strict):
    """Training budget for twin-to-twin transforms"""

    steps: int = Field(800, ge=0)
    lr: float = Field(0.01, gt=0.0)
    batch_size: int = Field(16, ge=0)
    optimizer: Literal["adam", "sgd"] = "adam"
    fine_tune: bool = True
    fine_tune_scale: float = Field(0.1, ge=0.0)


class OpSpec(_Strict):
    kind: Literal["transfer", "merge", "split", "map"]
    sources: List[Modality]
    targets: List[Modality]

    @model_validator(mode="before")
    @classmethod
    def _from_arrow(cls, value):
        if isinstance(value, str):
            try:
                return TwinOp.parse(value).to_dict()
            except ConfigError as e:
                raise ValueError(str(e)) from e
        return value

    def to_op(self) -> TwinOp:
        try:
            return TwinOp.create(self.kind, self.sources, self.targets)
        except ConfigError as e:
            raise ValueError(str(e)) from e

    @model_validator(mode="after")
    def _check_invariants(self):
        self.to_op()
        return self


class ExperimentConfig(_Strict):
    """One experiment: world, mapping, twin build, transforms, seeds"""

    world: WorldConfig = Field(default_factory=WorldConfig)
    fed: FedConfig = Field(default_factory=FedConfig)
    twin: TwinBuildConfig = Field(default_factory=TwinBuildConfig)
    transform: TransformConfig = Field(default_factory=TransformConfig)
    ops: List[OpSpec] = Field(default_factory=lambda: [OpSpec.model_validate("V->W")])
    seeds: List[int] = Field(default_factory=lambda: [0])
    output_dir: str = "results"
    dataset_dir: Optional[str] = None
    mode: Literal["unified", "specific"] = "specific"
    threads: int = Field(1, ge=1)
    charts: bool = True
    checkpoints: bool = True

    @field_validator("seeds")
    @classmethod
    def _seeds_present(cls, value):
        if not value:
            raise ValueError("at least one seed is required")
        if any(s < 0 for s in value):
            raise ValueError("seeds must be non-negative")
        return value

    def twin_ops(self) -> List[TwinOp]:
        return [spec.to_op() for spec in self.ops]


def format_validation_errors(error: ValidationError) -> List[str]:
    """One readable line per schema violation"""
    lines = []
    for item in error.errors():
        location = ".".join(str(part) for part in item.get("loc", ())) or "<root>"
        lines.append(f"{location}: {item.get('msg')}")
    return lines


def parse_config(data: Dict[str, Any]) -> ExperimentConfig:
    """
    Validate a config (or replayable run manifest) document

    Raises:
        ConfigError: listing every schema violation
    """
    if isinstance(data, dict) and data.get("kind") == MANIFEST_KIND:
        data = data.get("config", {})
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        problems = format_validation_errors(e)
        for problem in problems:
            logger.error(f"Config violation: {problem}")
        raise ConfigError("invalid configuration:\n" + "\n".join(problems)) from e


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ReportIOError("config file not found", path=path) from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    except OSError as e:
        raise ReportIOError(f"cannot read config: {e}", path=path) from e
    return parse_config(data)


def effective_config_dict(config: ExperimentConfig) -> Dict[str, Any]:
    """JSON-ready dump of the config after defaults and overrides"""
    data = config.model_dump(mode="json")
    data["ops"] = [spec.to_op().notation() for spec in config.ops]
    return data
