"""
Cyclone Grid Forecaster Configuration.

Environment settings with variable overrides, plus the pydantic schemas
for the model, training and pipeline configuration file.
"""

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

DEFAULT_HURDAT_URL = "https://www.nhc.noaa.gov/data/hurdat/hurdat2-1851-2022-042723.txt"


def _optional_int(name: str) -> Optional[int]:
    raw = os.getenv(name, "").strip()
    return int(raw) if raw else None


@dataclass
class Settings:
    """Process-wide settings read from the environment."""

    # Logging
    log_level: str = os.getenv("CGF_LOG_LEVEL", "INFO")
    log_file: str = os.getenv("CGF_LOG_FILE", "")

    # Reproducibility
    seed_override: Optional[int] = _optional_int("CGF_SEED")

    # Archive download
    hurdat_url: str = os.getenv("CGF_HURDAT_URL", DEFAULT_HURDAT_URL)
    fetch_timeout: int = int(os.getenv("CGF_FETCH_TIMEOUT", "60"))
    fetch_retries: int = int(os.getenv("CGF_FETCH_RETRIES", "3"))

    # Normalized test inputs beyond this magnitude are clamped
    clamp_limit: float = float(os.getenv("CGF_CLAMP_LIMIT", "1.5"))


settings = Settings()


class ModelConfig(BaseModel):
    """Shape of the encoder-only forecasting network."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    seq_len: int = Field(12, ge=1)
    in_features: int = Field(5, ge=1)
    d_model: int = Field(32, ge=2)
    n_heads: int = Field(4, ge=1)
    n_layers: int = Field(3, ge=0)
    ffn_hidden: int = Field(64, ge=1)
    head_hidden: int = Field(12, ge=1)
    use_layer_norm: bool = True
    seed: int = 0

    @model_validator(mode="after")
    def _heads_divide_width(self) -> "ModelConfig":
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )
        return self

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


class TrainConfig(BaseModel):
    """Adam/MSE training settings."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    epochs: int = Field(100, ge=1)
    batch_size: int = Field(64, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    beta1: float = Field(0.9, gt=0, lt=1)
    beta2: float = Field(0.999, gt=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    seed: int = 0
    shuffle: bool = True


class PipelineConfig(BaseModel):
    """Everything one end-to-end run needs, loadable from a JSON file."""

    model_config = ConfigDict(extra="forbid")

    data_path: Optional[str] = None
    year_range: Tuple[int, int] = (1944, 2022)
    resolution: float = Field(1.0, gt=0)
    window: int = Field(12, ge=1)
    horizon: int = Field(1, ge=1)
    pad_length: int = Field(100, ge=1)
    split_ratio: float = Field(0.85, gt=0, lt=1)
    split_seed: int = 0
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    output_dir: str = "out"

    @field_validator("year_range")
    @classmethod
    def _ordered_years(cls, value: Tuple[int, int]) -> Tuple[int, int]:
        if value[0] > value[1]:
            raise ValueError(f"year range {value} is reversed")
        return value

    @model_validator(mode="after")
    def _window_matches_model(self) -> "PipelineConfig":
        if self.model.seq_len != self.window:
            raise ValueError(
                f"model.seq_len={self.model.seq_len} must equal window={self.window}"
            )
        return self

    @classmethod
    def from_file(cls, path: str) -> "PipelineConfig":
        """Load a JSON config file; missing keys keep their defaults."""
        with open(path, "r") as f:
            return cls.model_validate(json.load(f))

    def with_seed(self, seed: Optional[int]) -> "PipelineConfig":
        """Return a copy whose split, model and training seeds all equal ``seed``."""
        if seed is None:
            return self
        return self.model_copy(
            update={
                "split_seed": seed,
                "model": self.model.model_copy(update={"seed": seed}),
                "train": self.train.model_copy(update={"seed": seed}),
            }
        )

    @property
    def output_path(self) -> Path:
        return Path(self.output_dir)
