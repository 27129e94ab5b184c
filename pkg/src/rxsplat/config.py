"""Configuration schemas and loading for rxsplat.

Every config is a JSON document with a ``schema_version`` and no unknown
keys. Training configs name a hyperparameter preset; any field left out is
filled from that preset before validation.
"""

import json
from pathlib import Path
from typing import Literal, Optional, Type, TypeVar, Union

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)

from rxsplat.errors import ConfigError
from rxsplat.presets import DEFAULT_PRESET, get_preset
from rxsplat.version import CONFIG_SCHEMA_VERSION

Modality = Literal["rssi", "csi", "spectrum"]
Vec3 = tuple[float, float, float]

ABLATIONS = ("full", "joint", "global_only", "local_only", "additive_only", "no_occlusion")

# Split protocol defaults
DEFAULT_SPLIT_SEED = 8371
DEFAULT_TEST_FRACTION = 0.2

ModelT = TypeVar("ModelT", bound=BaseModel)


class StrictModel(BaseModel):
    """Base for all config sections: unknown keys are errors."""

    model_config = ConfigDict(extra="forbid")


class ScattererSpec(StrictModel):
    position: Vec3
    reflection: tuple[float, float] = (0.5, 0.0)

    @field_validator("reflection")
    @classmethod
    def _passive(cls, value):
        if value[0] ** 2 + value[1] ** 2 > 1.0 + 1e-12:
            raise ValueError("reflection coefficient magnitude must be <= 1")
        return value


class SceneConfig(StrictModel):
    wavelength: float = Field(0.125, gt=0)
    max_bounces: int = Field(2, ge=0)
    room_min: Vec3 = (0.0, 0.0, 0.0)
    room_max: Vec3 = (8.0, 6.0, 3.0)
    scatterers: Optional[list[ScattererSpec]] = None
    random_scatterers: int = Field(0, ge=0)
    reflection_range: tuple[float, float] = (0.3, 0.9)

    @model_validator(mode="after")
    def _bounds(self):
        if any(lo >= hi for lo, hi in zip(self.room_min, self.room_max)):
            raise ValueError("room_min must be strictly below room_max on every axis")
        return self


class PositionsConfig(StrictModel):
    """Either explicit positions or a seeded random draw inside the room."""

    positions: Optional[list[Vec3]] = None
    count: Optional[int] = Field(None, ge=1)
    height: Optional[float] = None
    margin: float = Field(0.25, ge=0)

    @model_validator(mode="after")
    def _one_source(self):
        if (self.positions is None) == (self.count is None):
            raise ValueError("give exactly one of 'positions' or 'count'")
        if self.positions is not None and not self.positions:
            raise ValueError("positions must not be empty")
        return self


class GridConfig(StrictModel):
    n_theta: int = Field(9, ge=1)
    n_phi: int = Field(18, ge=1)
    tile_size: int = Field(6, ge=1)
    radius: float = Field(0.05, ge=0)
    theta_min: float = Field(0.0, ge=0)
    theta_max: float = Field(3.141592653589793, le=3.141592653589793)

    @model_validator(mode="after")
    def _span(self):
        if self.theta_min >= self.theta_max:
            raise ValueError("theta_min must be below theta_max")
        return self


class CsiConfig(StrictModel):
    channels: int = Field(4, ge=1)
    fractional_bandwidth: float = Field(0.04, ge=0, lt=1)


class SpectrumConfig(StrictModel):
    kappa: Optional[float] = Field(None, gt=0)
    normalize: bool = True


class SimulateConfig(StrictModel):
    schema_version: Literal[1] = CONFIG_SCHEMA_VERSION
    seed: int = Field(0, ge=0)
    modality: Modality = "rssi"
    scene: SceneConfig = SceneConfig()
    tx: PositionsConfig
    rx: PositionsConfig
    grid: GridConfig = GridConfig()
    csi: CsiConfig = CsiConfig()
    spectrum: SpectrumConfig = SpectrumConfig()
    output_dir: str = "dataset"
    threads: int = Field(1, ge=1)


class ConditioningConfig(StrictModel):
    fourier_bands: int = Field(4, ge=1)
    hidden_dim: int = Field(32, ge=1)
    embed_dim: int = Field(8, ge=1)
    probe_samples: int = Field(16, ge=1)
    grid_resolution: int = Field(32, ge=2)
    occupancy_lookup: Literal["trilinear", "nearest"] = "trilinear"


class TrainConfig(StrictModel):
    schema_version: Literal[1] = CONFIG_SCHEMA_VERSION
    seed: int = Field(0, ge=0)
    preset: str = DEFAULT_PRESET
    modality: Modality = "rssi"
    dataset: Optional[str] = None
    split: Optional[str] = None
    output_dir: str = "run"
    stage1_iters: int = Field(..., ge=0)
    stage2_iters: int = Field(..., ge=0)
    reference_rx: Union[int, Literal["avg"]] = "avg"
    lambda_ssim: float = Field(0.2, ge=0)
    lambda_fft: float = Field(0.1, ge=0)
    dynamic_range: float = Field(1.0, gt=0)
    k_init: int = Field(..., ge=2)
    l_max: int = Field(..., ge=0, le=32)
    t_ramp: int = Field(..., ge=1)
    coeff_init_std: float = Field(1e-4, ge=0)
    real_radiance: bool = False
    densify_from: int = Field(500, ge=0)
    densify_interval: int = Field(100, ge=1)
    densify_until: Optional[int] = Field(None, ge=0)
    densify_grad_threshold: float = Field(..., gt=0)
    transmittance_reset_interval: int = Field(..., ge=1)
    lr_position_init: float = Field(..., gt=0)
    lr_position_final: float = Field(..., gt=0)
    lr_position_delay_mult: float = Field(0.01, gt=0, le=1)
    lr_position_delay_steps: int = Field(0, ge=0)
    lr_feature: float = Field(..., gt=0)
    rest_lr_ratio: float = Field(..., gt=0)
    lr_transmittance: float = Field(..., gt=0)
    lr_scaling: float = Field(..., gt=0)
    lr_rotation: float = Field(..., gt=0)
    lr_conditioning: float = Field(1e-3, gt=0)
    ablation: Literal[ABLATIONS] = "full"
    grid: GridConfig = GridConfig()
    conditioning: ConditioningConfig = ConditioningConfig()
    log_interval: int = Field(100, ge=1)
    checkpoint_interval: int = Field(0, ge=0)
    smoothing_window: int = Field(50, ge=1)
    threads: int = Field(1, ge=1)

    @model_validator(mode="before")
    @classmethod
    def _fill_from_preset(cls, data):
        if not isinstance(data, dict):
            return data
        try:
            preset = get_preset(data.get("preset"))
        except ValueError as e:
            raise ValueError(str(e).replace("\n", " ")) from None
        merged = dict(data)
        for key in cls.model_fields:
            if key not in merged and key in preset:
                merged[key] = preset[key]
        grid = dict(merged.get("grid") or {})
        for key in ("n_theta", "n_phi", "radius"):
            grid.setdefault(key, preset[key])
        merged["grid"] = grid
        cond = dict(merged.get("conditioning") or {})
        for key in ("fourier_bands", "hidden_dim", "embed_dim", "probe_samples", "grid_resolution"):
            cond.setdefault(key, preset[key])
        merged["conditioning"] = cond
        return merged

    @model_validator(mode="after")
    def _lambdas(self):
        if self.lambda_ssim + self.lambda_fft >= 1.0:
            raise ValueError("lambda_ssim + lambda_fft must be below 1")
        return self


class SplitSpec(StrictModel):
    """Which transmitters and receivers are used for training and testing."""

    schema_version: Literal[1] = CONFIG_SCHEMA_VERSION
    train_tx: list[int]
    test_tx: list[int]
    seen_rx: list[int]
    unseen_rx: list[int] = []

    @model_validator(mode="after")
    def _disjoint(self):
        if set(self.train_tx) & set(self.test_tx):
            raise ValueError("train_tx and test_tx overlap")
        if set(self.seen_rx) & set(self.unseen_rx):
            raise ValueError("seen_rx and unseen_rx overlap")
        if not self.train_tx or not self.seen_rx:
            raise ValueError("train_tx and seen_rx must not be empty")
        return self


def format_validation_error(error: ValidationError) -> str:
    """Render pydantic errors as 'field.path: message' lines."""
    lines = []
    for item in error.errors():
        path = ".".join(str(part) for part in item["loc"]) or "<root>"
        lines.append(f"{path}: {item['msg']}")
    return "\n".join(lines)


def parse_config(data: dict, model: Type[ModelT]) -> ModelT:
    """Validate a config dict.

    Args:
        data: Parsed JSON document
        model: Config class to validate against

    Returns:
        Validated config instance

    Raises:
        ConfigError: With one 'field.path: message' line per violation
    """
    try:
        return model.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid {model.__name__}:\n{format_validation_error(e)}") from None


def load_config(path, model: Type[ModelT]) -> ModelT:
    """Load and validate a JSON config file.

    Args:
        path: Path to the JSON file
        model: Config class to validate against

    Returns:
        Validated config instance

    Raises:
        ConfigError: If the file is missing, not JSON, or fails validation
    """
    config_file = Path(path)
    if not config_file.exists():
        raise ConfigError(f"Config file not found: {config_file}")
    try:
        with open(config_file) as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file is not valid JSON: {config_file} ({e})") from None
    return parse_config(data, model)


def save_config(config: BaseModel, path) -> None:
    """Save a config as indented JSON."""
    with open(path, "w") as f:
        json.dump(config.model_dump(mode="json"), f, indent=2)
