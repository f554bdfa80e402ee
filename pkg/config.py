import json
import os
from typing import Any, Dict, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from exceptions import ArtifactIOError, UsageError

# Load environment variables
load_dotenv()


class Config:
    # Logging Configuration
    LOG_LEVEL = os.getenv("PANET_LOG_LEVEL", "INFO")

    # Filesystem Configuration
    DATA_DIR = os.getenv("PANET_DATA_DIR", "data")
    RUNS_DIR = os.getenv("PANET_RUNS_DIR", "runs")

    # Execution Configuration
    WORKERS = int(os.getenv("PANET_WORKERS", 1))
    SEED = int(os.getenv("PANET_SEED", 0))

    # Tool and file-format identity
    VERSION = "1.0.0"
    DATASET_MAGIC = b"PANETDS1"
    DATASET_FORMAT_VERSION = 1
    CHECKPOINT_MAGIC = b"PANETCK1"
    CHECKPOINT_FORMAT_VERSION = 1

    # Numerical Configuration
    LAYER_NORM_EPS = 1e-5
    FINITE_DIFF_STEP = 1e-5
    LOG_CLAMP = 1e-12
    ATTENTION_BLOCK_ROWS = int(os.getenv("PANET_ATTENTION_BLOCK_ROWS", 128))

    # Dataset splits; the test split of a run is rendered from seed + offset
    TEST_SEED_OFFSET = 10_000


# Rate suited to a pretrained backbone; a from-scratch encoder needs the larger default below
PRETRAINED_LEARNING_RATE = 1e-5

REGIMES = ("aligned", "rotated", "arbitrary")
SAMPLERS = ("random", "fps")
SPLITS = ("train", "test")


def split_seed(seed: int, split: str) -> int:
    """Seed a split is rendered from; train and test never share objects"""
    if split not in SPLITS:
        raise UsageError(f"Unknown split '{split}', expected one of {SPLITS}")
    return seed if split == "train" else seed + Config.TEST_SEED_OFFSET


class PANetConfig(BaseModel):
    """Architecture hyperparameters (K, R, C, M, L, D, h and the encoder widths)"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    num_classes: int = Field(6, ge=2)
    resolution: int = Field(32, ge=4)
    channels: int = Field(64, ge=2)
    attention_maps: int = Field(64, ge=1)
    parts: int = Field(16, ge=1)
    depth: int = Field(2, ge=0)
    heads: int = Field(4, ge=1)
    encoder_widths: Tuple[int, ...] = (16, 32, 64)
    mlp_ratio: int = Field(4, ge=1)
    use_cva: bool = True
    token_std: float = Field(0.02, gt=0)

    @model_validator(mode="after")
    def _check_shapes(self):
        if self.channels % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide channels ({self.channels})")
        if any(w < 1 for w in self.encoder_widths):
            raise ValueError("encoder widths must be positive")
        factor = 2 ** (len(self.encoder_widths) + 1)
        if self.resolution % factor:
            raise ValueError(f"resolution {self.resolution} is not divisible by {factor}")
        return self

    @property
    def feature_size(self) -> int:
        """Spatial extent H = W of the encoder output"""
        return self.resolution // 2 ** (len(self.encoder_widths) + 1)

    def architecture(self) -> Dict[str, Any]:
        """Fields that shape the computation; token_std only matters at initialization"""
        return self.model_dump(exclude={"token_std"})

    def header(self) -> Tuple[int, int, int, int, int, int, int]:
        """(K, R, C, M, L, D, h) as stored in checkpoint headers"""
        return (self.num_classes, self.resolution, self.channels, self.attention_maps,
                self.parts, self.depth, self.heads)


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    learning_rate: float = Field(1e-3, gt=0)
    betas: Tuple[float, float] = (0.9, 0.999)
    weight_decay: float = Field(0.01, ge=0)
    adam_eps: float = Field(1e-8, gt=0)
    epochs: int = Field(30, ge=0)
    batch_size: int = Field(8, ge=1)
    gamma: float = Field(1.0, ge=0)
    smoothing: float = Field(0.1, ge=0, lt=1)
    seed: int = 0
    regime: str = "arbitrary"
    sampler: str = "random"
    augment: bool = True

    @model_validator(mode="after")
    def _check_choices(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime '{self.regime}', expected one of {REGIMES}")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"unknown sampler '{self.sampler}', expected one of {SAMPLERS}")
        if not all(0 <= b < 1 for b in self.betas):
            raise ValueError("betas must lie in [0, 1)")
        return self


class DataConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    train_per_class: int = Field(100, ge=1)
    test_per_class: int = Field(30, ge=1)
    min_views: int = Field(10, ge=1, le=20)
    max_views: int = Field(20, ge=1, le=20)
    fps_pool: int = Field(256, ge=1)

    @model_validator(mode="after")
    def _check_views(self):
        if self.min_views > self.max_views:
            raise ValueError("min_views must not exceed max_views")
        return self


class RunConfig(BaseModel):
    """The fully resolved configuration of one command invocation"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    network: PANetConfig = PANetConfig()
    train: TrainConfig = TrainConfig()
    data: DataConfig = DataConfig()

    @classmethod
    def from_flat(cls, values: Dict[str, Any]) -> "RunConfig":
        """Build from the flat key-value form used by config files"""
        groups: Dict[str, Dict[str, Any]] = {"network": {}, "train": {}, "data": {}}
        owners = {
            "network": PANetConfig.model_fields,
            "train": TrainConfig.model_fields,
            "data": DataConfig.model_fields,
        }
        unknown = []
        for key, value in values.items():
            for group, fields in owners.items():
                if key in fields:
                    groups[group][key] = value
                    break
            else:
                unknown.append(key)
        if unknown:
            raise UsageError(f"Unknown config keys: {sorted(unknown)}")
        try:
            return cls(network=PANetConfig(**groups["network"]),
                       train=TrainConfig(**groups["train"]),
                       data=DataConfig(**groups["data"]))
        except ValidationError as e:
            raise UsageError(f"Invalid configuration: {e.errors()[0]['msg']}") from e

    def to_flat(self) -> Dict[str, Any]:
        flat: Dict[str, Any] = {}
        for part in (self.network, self.train, self.data):
            flat.update(part.model_dump(mode="json"))
        return flat


PRESETS: Dict[str, Dict[str, Any]] = {
    "default": {},
    "tiny": {
        "num_classes": 3,
        "resolution": 8,
        "encoder_widths": [2],
        "channels": 4,
        "attention_maps": 3,
        "parts": 2,
        "depth": 2,
        "heads": 2,
        "train_per_class": 2,
        "test_per_class": 2,
    },
}


def resolve_run_config(source: Optional[str] = None,
                       overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Merge defaults, a preset name or JSON file, and flag overrides (in that order)"""
    values: Dict[str, Any] = {}
    if source:
        if source in PRESETS:
            values.update(PRESETS[source])
        elif os.path.exists(source):
            try:
                with open(source, "r") as f:
                    loaded = json.load(f)
            except (OSError, json.JSONDecodeError) as e:
                raise ArtifactIOError(f"{source}: cannot read config file: {e}") from e
            if not isinstance(loaded, dict):
                raise UsageError(f"{source}: config file must hold a flat JSON object")
            values.update(loaded)
        else:
            raise UsageError(f"Config '{source}' is neither a preset {sorted(PRESETS)} nor an existing file")
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    return RunConfig.from_flat(values)
