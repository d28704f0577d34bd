"""
Pydantic models for configuration, benchmark records and service responses
"""

from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

CONFIG_VERSION = 1


class TokenShift(str, Enum):
    ORIGINAL_1D = "original_1d"
    QSHIFT = "qshift"
    CONV_SHIFT = "conv_shift"


class ScanKind(str, Enum):
    CAUSAL = "causal"
    BIDIRECTIONAL = "bidirectional"


class FusionKind(str, Enum):
    AVERAGE = "average"
    WEIGHTED_GATE = "weighted_gate"


class CuePosition(str, Enum):
    ANYWHERE = "anywhere"
    EARLY_10PCT = "early_10pct"


class Precision(str, Enum):
    F32 = "f32"
    F64 = "f64"

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self is Precision.F64 else torch.float32


class BenchOperator(str, Enum):
    WKV7 = "wkv7"
    WKV7_BI = "wkv7_bi"
    ATTENTION = "attention"
    ATTENTION_CAUSAL = "attention_causal"


def _split_pair(value: Any) -> Any:
    if isinstance(value, str):
        return tuple(int(part) for part in value.replace("x", ",").split(",") if part.strip())
    return value


class VersionedConfig(BaseModel):
    """Common behaviour of the flat key=value config files"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    config_version: int = CONFIG_VERSION

    @field_validator("config_version")
    @classmethod
    def _check_version(cls, value: int) -> int:
        if value != CONFIG_VERSION:
            raise ValueError(f"unsupported config_version {value}, expected {CONFIG_VERSION}")
        return value

    def with_overrides(self, **overrides: Any):
        """Return a validated copy with some fields replaced"""
        return type(self).model_validate({**self.model_dump(), **overrides})


class ModelConfig(VersionedConfig):
    """Full architectural description of an A-RWKV network"""

    embed_dim: int = Field(..., ge=4, description="Embedding dimension D")
    depth: int = Field(..., ge=1, description="Number of blocks N")
    head_dim: int = Field(64, ge=1, description="Per-head dimension d")
    patch: Tuple[int, int] = (16, 16)
    input_size: Tuple[int, int] = Field((128, 1024), description="(n_mels, n_frames)")
    token_shift: TokenShift = TokenShift.CONV_SHIFT
    scan: ScanKind = ScanKind.BIDIRECTIONAL
    fusion: FusionKind = FusionKind.WEIGHTED_GATE
    conv_kernel: int = Field(3, ge=1)
    lora_rank_w: Optional[int] = Field(None, ge=1)
    lora_rank_a: Optional[int] = Field(None, ge=1)
    lora_rank_g: Optional[int] = Field(None, ge=1)
    channel_mix_ratio: float = Field(4.0, gt=0)
    num_classes: int = Field(..., ge=1)
    drop_path_rate: float = Field(0.0, ge=0.0, lt=1.0)
    bonus_enabled: bool = False
    interpolate_pos: bool = False

    @field_validator("patch", "input_size", mode="before")
    @classmethod
    def _split_pairs(cls, value: Any) -> Any:
        return _split_pair(value)

    @model_validator(mode="after")
    def _check_geometry(self) -> "ModelConfig":
        if self.embed_dim % self.head_dim:
            raise ValueError(f"embed_dim ({self.embed_dim}) must be divisible by head_dim ({self.head_dim})")
        n_mels, n_frames = self.input_size
        ph, pw = self.patch
        if min(ph, pw, n_mels, n_frames) < 1:
            raise ValueError("patch and input_size entries must be positive")
        if n_mels % ph or n_frames % pw:
            raise ValueError(
                f"input_size {self.input_size} is not divisible by patch {self.patch} (no implicit crop)"
            )
        if self.conv_kernel % 2 == 0:
            raise ValueError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.token_shift is TokenShift.QSHIFT and self.embed_dim % 4:
            raise ValueError(f"embed_dim ({self.embed_dim}) must be divisible by 4 for qshift")
        return self

    @property
    def num_heads(self) -> int:
        return self.embed_dim // self.head_dim

    @property
    def grid_shape(self) -> Tuple[int, int]:
        return self.input_size[0] // self.patch[0], self.input_size[1] // self.patch[1]

    @property
    def seq_len(self) -> int:
        rows, cols = self.grid_shape
        return rows * cols

    @property
    def hidden_dim(self) -> int:
        return int(round(self.channel_mix_ratio * self.embed_dim))

    def _rank(self, value: Optional[int]) -> int:
        return value if value is not None else max(1, self.embed_dim // 12)

    @property
    def rank_w(self) -> int:
        return self._rank(self.lora_rank_w)

    @property
    def rank_a(self) -> int:
        return self._rank(self.lora_rank_a)

    @property
    def rank_g(self) -> int:
        return self._rank(self.lora_rank_g)


class TrainRecipe(VersionedConfig):
    """Optimizer, schedule, augmentation and seed for one training run"""

    base_lr: float = Field(2e-5, gt=0)
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(1e-8, gt=0)
    weight_decay: float = Field(0.01, ge=0)
    batch_size: int = Field(..., ge=1)
    micro_batch_size: Optional[int] = Field(None, ge=1)
    total_steps: int = Field(..., ge=1)
    warmup_steps: Optional[int] = Field(None, ge=0)
    min_lr: Optional[float] = Field(None, ge=0)
    mixup_alpha: float = Field(1.0, gt=0)
    cutmix_alpha: float = Field(0.8, gt=0)
    mixup_enabled: bool = True
    cutmix_enabled: bool = True
    label_smoothing: float = Field(0.1, ge=0, lt=1)
    drop_path_rate: Optional[float] = Field(None, ge=0, lt=1)
    seed: int = 0
    eval_every: int = Field(0, ge=0)
    precision: Precision = Precision.F32

    @field_validator("betas", mode="before")
    @classmethod
    def _split_betas(cls, value: Any) -> Any:
        if isinstance(value, str):
            return tuple(float(part) for part in value.split(","))
        return value

    @model_validator(mode="after")
    def _check_schedule(self) -> "TrainRecipe":
        if self.warmup_steps is not None and self.warmup_steps > self.total_steps:
            raise ValueError(f"warmup_steps ({self.warmup_steps}) exceeds total_steps ({self.total_steps})")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError(f"betas must lie in [0, 1), got {self.betas}")
        if self.min_lr is not None and self.min_lr > self.base_lr:
            raise ValueError("min_lr must not exceed base_lr")
        return self

    @property
    def resolved_warmup(self) -> int:
        if self.warmup_steps is not None:
            return self.warmup_steps
        return int(round(0.05 * self.total_steps))

    @property
    def resolved_min_lr(self) -> float:
        return self.min_lr if self.min_lr is not None else self.base_lr / 100.0

    @property
    def resolved_micro_batch(self) -> int:
        return min(self.micro_batch_size or self.batch_size, self.batch_size)


class SyntheticTaskSpec(VersionedConfig):
    """Synthetic chirp-classification task"""

    num_classes: int = Field(10, ge=2)
    n_mels: int = Field(64, ge=4)
    n_frames: int = Field(256, ge=2)
    snr_db: float = 10.0
    cue_position: CuePosition = CuePosition.ANYWHERE
    seed: int = 0
    n_train: int = Field(2000, ge=1)
    n_val: int = Field(500, ge=0)


class BenchPoint(BaseModel):
    """One (operator, length) measurement of the scaling benchmark"""

    operator: BenchOperator
    seq_len: int
    channels: int
    batch: int
    reps: int
    wall_ms: Optional[float] = None
    tokens_per_sec: Optional[float] = None
    peak_bytes: int
    status: str = "ok"


# Presets. T/S/B follow the published scaling table; micro is the desk-scale model.
PRESETS: Dict[str, Dict[str, Any]] = {
    "micro": dict(embed_dim=96, depth=4, head_dim=32, input_size=(64, 256), num_classes=10),
    "tiny": dict(embed_dim=192, depth=12, head_dim=64, num_classes=527, drop_path_rate=0.05),
    "small": dict(embed_dim=384, depth=12, head_dim=64, num_classes=527, drop_path_rate=0.35),
    "base": dict(embed_dim=768, depth=12, head_dim=64, num_classes=527, drop_path_rate=0.5),
}
PRESET_ALIASES = {"t": "tiny", "s": "small", "b": "base"}

# Per-preset regularisation defaults from the scaling experiments.
PRESET_RECIPES: Dict[str, Dict[str, Any]] = {
    "micro": dict(drop_path_rate=0.0, cutmix_alpha=0.8),
    "tiny": dict(drop_path_rate=0.05, cutmix_alpha=0.2),
    "small": dict(drop_path_rate=0.35, cutmix_alpha=1.0),
    "base": dict(drop_path_rate=0.5, cutmix_alpha=0.8),
}


def resolve_preset_name(name: str) -> str:
    key = PRESET_ALIASES.get(name.lower(), name.lower())
    if key not in PRESETS:
        raise KeyError(f"Unknown preset '{name}'. Available: {sorted(PRESETS)}")
    return key


def preset_config(name: str, **overrides: Any) -> ModelConfig:
    """Build a ModelConfig from a named preset"""
    return ModelConfig.model_validate({**PRESETS[resolve_preset_name(name)], **overrides})


# ----------------------------------------------------------------------------
# Service models
# ----------------------------------------------------------------------------

class HealthResponse(BaseModel):
    """Health check response"""
    status: str
    message: str
    timestamp: str
    version: str
    model_loaded: bool = False


class ModelInfoResponse(BaseModel):
    """Loaded model description"""
    success: bool
    config: Dict[str, Any]
    param_count: int
    seq_len: int
    grid: Tuple[int, int]


class ClassScore(BaseModel):
    """Single class probability"""
    index: int
    probability: float = Field(..., ge=0.0, le=1.0)


class PredictionResponse(BaseModel):
    """Response model for single spectrogram prediction"""
    success: bool
    sample_id: str
    top_classes: List[ClassScore]
    predicted_at: str


class BatchPredictionResponse(BaseModel):
    """Response model for batch prediction"""
    success: bool
    results: List[PredictionResponse]
    total_processed: int


class ErrorResponse(BaseModel):
    """Error response model"""
    success: bool = False
    error: str
    detail: Optional[str] = None
    timestamp: str
