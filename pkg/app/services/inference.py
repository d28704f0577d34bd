"""
Model loading and prediction for the HTTP service
"""

import logging
import os
from typing import List, Optional, Tuple

import torch

from app.exceptions import ConfigError
from app.services.checkpoint import load_checkpoint
from app.services.network import ARWKV
from app.services.spectrograms import MelSpectrogram

logger = logging.getLogger(__name__)

# Global model instance (cached)
_model: Optional[ARWKV] = None


def get_model(required: bool = True) -> Optional[ARWKV]:
    """
    Get or load the classifier named by ARWKV_CHECKPOINT (singleton pattern)

    Args:
        required: Raise when no checkpoint is configured instead of returning None

    Returns:
        Loaded model in eval mode, or None
    """
    global _model

    if _model is None:
        path = os.getenv("ARWKV_CHECKPOINT")
        if not path:
            if required:
                raise ConfigError("ARWKV_CHECKPOINT is not set; no model to serve", ["ARWKV_CHECKPOINT"])
            return None
        logger.info("📥 Loading checkpoint: %s", path)
        cfg, state = load_checkpoint(path)
        model = ARWKV(cfg)
        model.load_state_dict(state)
        _model = model.eval()
        logger.info("✅ Model loaded: D=%d, depth=%d, %d classes", cfg.embed_dim, cfg.depth, cfg.num_classes)

    return _model


def set_model(model: Optional[ARWKV]) -> None:
    """Install (or clear, with None) the served model"""
    global _model
    _model = model.eval() if model is not None else None


def _normalization() -> Tuple[float, float]:
    mean = float(os.getenv("ARWKV_INPUT_MEAN", "0"))
    std = float(os.getenv("ARWKV_INPUT_STD", "1"))
    if std <= 0:
        raise ConfigError(f"ARWKV_INPUT_STD must be positive, got {std}", ["ARWKV_INPUT_STD"])
    return mean, std


@torch.no_grad()
def predict_proba(model: ARWKV, spectrograms: List[MelSpectrogram]) -> torch.Tensor:
    """Class probabilities [N, num_classes] for equally sized spectrograms"""
    mean, std = _normalization()
    dtype = next(model.parameters()).dtype
    batch = torch.stack([s.to_tensor() for s in spectrograms]).to(dtype)
    logits = model((batch - mean) / std, train_mode=False)
    return torch.softmax(logits, dim=-1)


def top_k(probs: torch.Tensor, k: int) -> List[List[Tuple[int, float]]]:
    """Per row, the k most probable (class index, probability) pairs"""
    k = max(1, min(k, probs.shape[-1]))
    values, indices = probs.topk(k, dim=-1)
    return [
        [(int(i), float(v)) for i, v in zip(row_i.tolist(), row_v.tolist())]
        for row_i, row_v in zip(indices, values)
    ]
