"""
Configuration for the bevsearch engine
Environment defaults via .env, typed configs via pydantic
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, Field, field_validator, model_validator

from .errors import UsageError

# Load environment variables
load_dotenv()

DEFAULT_SEED = int(os.getenv("BEVSEARCH_SEED", "0"))
LOG_LEVEL = os.getenv("BEVSEARCH_LOG_LEVEL", "INFO")


def setup_logging(level: Optional[str] = None) -> None:
    """Configure root logging once; everything goes to stderr"""
    logging.basicConfig(
        level=getattr(logging, (level or LOG_LEVEL).upper(), logging.INFO),
        format="%(levelname)s %(name)s: %(message)s",
    )


def default_seed() -> int:
    """Seed used when no --seed flag is given (re-reads the environment)"""
    return int(os.getenv("BEVSEARCH_SEED", str(DEFAULT_SEED)))


class KgeTrainConfig(BaseModel):
    """Knowledge graph embedding training hyperparameters"""
    scorer: Literal["transe-l1", "transe-l2", "distmult"] = "transe-l2"
    dim: int = Field(32, gt=0)
    learning_rate: float = Field(0.25, gt=0)
    iterations: int = Field(16000, gt=0)
    margin: float = Field(1.0, gt=0)
    negatives_per_positive: int = Field(4, gt=0)
    batch_size: int = Field(128, gt=0)
    regularization: float = Field(0.0, ge=0)
    seed: int = Field(default_factory=default_seed)

    @classmethod
    def full_scale(cls, **overrides: Any) -> "KgeTrainConfig":
        """Full-scale settings: 1024-dim embeddings at the default 16k SGD iterations"""
        values: Dict[str, Any] = {"dim": 1024}
        values.update(overrides)
        return cls(**values)


class TextEncoderConfig(BaseModel):
    """Widths of the desk text encoder"""
    d_tok: int = Field(64, gt=0)
    d_lang: int = Field(64, gt=0)


class DecoderConfig(BaseModel):
    """Widths of the caption decoder"""
    d_ff: int = Field(128, gt=0)
    max_tokens: int = Field(48, ge=2)


class AlignTrainConfig(BaseModel):
    """Shared cross-modal alignment training hyperparameters"""
    batch_size: int = 16
    epochs: int = Field(60, gt=0)
    learning_rate: float = Field(0.5, gt=0)
    min_learning_rate: float = Field(0.0, ge=0)
    optimizer: Literal["sgd", "adamw"] = "sgd"
    weight_decay: float = Field(0.01, ge=0)
    temperature: float = Field(0.07, gt=0)
    lambda_cg: float = Field(0.15, ge=0)
    k: int = Field(16, ge=1)
    d_c: int = Field(64, gt=0)
    text: TextEncoderConfig = Field(default_factory=TextEncoderConfig)
    decoder: DecoderConfig = Field(default_factory=DecoderConfig)
    use_sce: bool = True
    use_kgp: bool = True
    use_cg: bool = True
    seed: int = Field(default_factory=default_seed)

    @field_validator("batch_size")
    @classmethod
    def _contrastive_batch(cls, value: int) -> int:
        if value < 2:
            raise ValueError("batch_size must be >= 2; a single-pair batch has zero contrastive loss")
        return value

    @model_validator(mode="after")
    def _annealing_floor(self) -> "AlignTrainConfig":
        if self.min_learning_rate > self.learning_rate:
            raise ValueError("min_learning_rate cannot exceed learning_rate")
        return self

    @classmethod
    def full_scale(cls, **overrides: Any) -> "AlignTrainConfig":
        """Full-scale settings from the reference training recipe"""
        values: Dict[str, Any] = {
            "batch_size": 128,
            "epochs": 80,
            "learning_rate": 1e-4,
            "optimizer": "adamw",
            "k": 4096,
            "d_c": 1024,
            "text": TextEncoderConfig(d_tok=4096, d_lang=4096),
        }
        values.update(overrides)
        return cls(**values)


class SynthSpec(BaseModel):
    """Parameters of a synthetic paired scene/text corpus"""
    num_classes: int = Field(8, ge=2)
    samples_per_class: int = Field(4, ge=1)
    n: int = Field(16, ge=1)
    d_b: int = Field(32, ge=1)
    noise_sigma: float = Field(0.05, ge=0)
    validation_per_class: int = Field(1, ge=0)
    seed: int = Field(default_factory=default_seed)

    @model_validator(mode="after")
    def _split_fits(self) -> "SynthSpec":
        if self.validation_per_class > self.samples_per_class:
            raise ValueError("validation_per_class cannot exceed samples_per_class")
        return self


class RunConfig(BaseModel):
    """Resolved parameters of one CLI invocation"""
    subcommand: str
    seed: int
    paths: Dict[str, str] = Field(default_factory=dict)
    params: Dict[str, Any] = Field(default_factory=dict)


def load_config_file(path: Optional[str]) -> Dict[str, Any]:
    """Read a JSON config file; missing path means no overrides"""
    if not path:
        return {}
    file_path = Path(path)
    if not file_path.exists():
        raise UsageError(f"config file not found: {file_path}")
    try:
        with open(file_path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {file_path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise UsageError(f"config file {file_path} must contain a JSON object")
    return data


def resolve(defaults: Dict[str, Any], file_values: Dict[str, Any], flags: Dict[str, Any]) -> Dict[str, Any]:
    """Flags override the config file, which overrides built-in defaults; None flags are unset"""
    resolved = dict(defaults)
    resolved.update(file_values)
    resolved.update({key: value for key, value in flags.items() if value is not None})
    return resolved
