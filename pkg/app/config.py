from __future__ import annotations

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticValidationError, field_validator

from app.errors import ConfigError


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    knots: int = Field(3, ge=1)
    v: float = Field(1e-4, gt=0)
    penalty_power: float = Field(2.0, gt=0)
    per_knot_alpha: bool = False
    soft_constraints: bool = False
    sigma_eps: float = Field(1e-3, gt=0)
    monotonicity: bool = True
    saturation: bool = True
    center_inputs: bool = False
    alpha_prior_scale: float = Field(1.0, gt=0)
    sigma_prior_scale: float = Field(1.0, gt=0)
    rho_prior_shape: float = Field(1.0, gt=0)
    rho_prior_rate: float = Field(0.1, gt=0)
    beta_prior_scale: float = Field(1.0, gt=0)

    @property
    def uses_derivatives(self) -> bool:
        return self.monotonicity or self.saturation

    @property
    def tag(self) -> str:
        return "with_derivatives" if self.uses_derivatives else "without_derivatives"

    def without_derivatives(self) -> "ModelConfig":
        return self.model_copy(update={"monotonicity": False, "saturation": False})


class SamplerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    chains: int = 3
    warmup: int = Field(1000, ge=10)
    samples: int = Field(1000, ge=4)
    target_accept: float = Field(0.8, gt=0, lt=1)
    max_treedepth: int = Field(10, ge=1, le=20)
    seed: int = Field(0, ge=0, lt=2**64)
    algorithm: Literal["nuts", "static"] = "nuts"
    n_leapfrog: int = Field(16, ge=1)
    init_scale: float = Field(0.1, gt=0)
    threads: int = Field(1, ge=1)

    @field_validator("chains")
    @classmethod
    def _split_rhat_needs_two_chains(cls, value: int) -> int:
        if value < 2:
            raise ValueError("at least 2 chains are required; split-Rhat is undefined for a single chain")
        return value


class PredictConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    max_resample: int = Field(50, ge=0)
    monotone_tolerance: float = Field(1e-6, ge=0)
    map_block_size: int = Field(2048, ge=1)
    map_max_draws: int = Field(500, ge=1)
    perceptible_threshold: float = 3.5
    variance_map: bool = False
    gray_max: Optional[float] = Field(None, gt=0)


class PathsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    data: Optional[Path] = None
    grid: Optional[Path] = None
    out: Optional[Path] = None
    run: Optional[Path] = None


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    paths: PathsConfig = PathsConfig()
    model: ModelConfig = ModelConfig()
    sampler: SamplerConfig = SamplerConfig()
    predict: PredictConfig = PredictConfig()
    force: bool = False


def read_config_file(path: str | Path) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file {path} not found.")
    try:
        with path.open("rb") as handle:
            return tomllib.load(handle)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"Config file {path} is not valid TOML: {exc}") from exc


def merge_overrides(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Nested merge where override values win; ``None`` means "not given"."""
    merged = dict(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict):
            merged[key] = merge_overrides(dict(merged.get(key) or {}), value)
        else:
            merged[key] = value
    return merged


def build_run_config(config_path: str | Path | None = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    raw = read_config_file(config_path) if config_path else {}
    raw = merge_overrides(raw, overrides or {})
    try:
        return RunConfig.model_validate(raw)
    except PydanticValidationError as exc:
        details = "; ".join(
            f"{'.'.join(str(part) for part in err['loc'])}: {err['msg']}" for err in exc.errors()
        )
        raise ConfigError(f"Invalid configuration: {details}") from exc
