"""
Batch regularisation: soft labels, label smoothing, Mixup, CutMix, stochastic depth

Mixup and CutMix draw from numpy Philox generators (the "augment" stream);
drop-path draws from a torch.Generator (the "drop_path" stream).
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch

from app.exceptions import ContractError
from app.models import TrainRecipe

logger = logging.getLogger(__name__)

ROW_SUM_TOL = 1e-6


@dataclass
class SoftLabelBatch:
    """Spectrograms [B, 1, F, T] with probability-vector targets [B, K]"""
    inputs: torch.Tensor
    targets: torch.Tensor

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def validate(self, tol: float = ROW_SUM_TOL) -> "SoftLabelBatch":
        if self.targets.dim() != 2 or self.targets.shape[0] != self.inputs.shape[0]:
            raise ContractError(
                f"targets must be [B, K] with B={self.inputs.shape[0]}, got {tuple(self.targets.shape)}"
            )
        if bool((self.targets < 0).any()):
            raise ContractError("targets contain negative entries")
        deviation = (self.targets.sum(dim=-1) - 1).abs().max().item()
        if deviation > tol:
            raise ContractError(f"target rows must sum to 1, max deviation {deviation:.2e}")
        return self

    def slice(self, start: int, stop: int) -> "SoftLabelBatch":
        return SoftLabelBatch(self.inputs[start:stop], self.targets[start:stop])

    def paired(self) -> "SoftLabelBatch":
        """The same batch in reverse order, used as the mixing partner"""
        return SoftLabelBatch(self.inputs.flip(0), self.targets.flip(0))


def one_hot(labels: torch.Tensor, num_classes: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise ContractError(f"labels must lie in [0, {num_classes}), got range [{int(labels.min())}, {int(labels.max())}]")
    return torch.nn.functional.one_hot(labels.long(), num_classes).to(dtype)


def smooth_labels(targets: torch.Tensor, eps: float, num_classes: Optional[int] = None) -> torch.Tensor:
    """q <- (1 - eps) q + eps / K; a one-hot row becomes (1 - eps + eps/K, eps/K, ...)"""
    if not 0.0 <= eps < 1.0:
        raise ContractError(f"label smoothing must lie in [0, 1), got {eps}")
    num_classes = num_classes or targets.shape[-1]
    if num_classes != targets.shape[-1]:
        raise ContractError(f"targets have {targets.shape[-1]} classes, expected {num_classes}")
    if eps == 0.0:
        return targets
    return targets * (1.0 - eps) + eps / num_classes


def sample_lambda(alpha: float, generator: np.random.Generator) -> float:
    if alpha <= 0:
        raise ContractError(f"mixing alpha must be positive, got {alpha}")
    return float(generator.beta(alpha, alpha))


def mixup(
    batch_a: SoftLabelBatch,
    batch_b: SoftLabelBatch,
    alpha: float,
    generator: np.random.Generator,
    lam: Optional[float] = None,
) -> SoftLabelBatch:
    """Convex combination of inputs and targets with one lambda ~ Beta(alpha, alpha)"""
    if lam is None:
        lam = sample_lambda(alpha, generator)
    return SoftLabelBatch(
        lam * batch_a.inputs + (1.0 - lam) * batch_b.inputs,
        lam * batch_a.targets + (1.0 - lam) * batch_b.targets,
    )


def cutmix_box(height: int, width: int, lam: float, generator: np.random.Generator) -> Tuple[int, int, int, int]:
    """
    Random rectangle covering roughly (1 - lam) of the plane, clipped to it

    Returns:
        (top, bottom, left, right), half-open
    """
    ratio = math.sqrt(1.0 - lam)
    cut_h, cut_w = int(height * ratio), int(width * ratio)
    cy, cx = int(generator.integers(height)), int(generator.integers(width))
    top, bottom = max(cy - cut_h // 2, 0), min(cy + cut_h // 2, height)
    left, right = max(cx - cut_w // 2, 0), min(cx + cut_w // 2, width)
    return top, bottom, left, right


def cutmix(
    batch_a: SoftLabelBatch,
    batch_b: SoftLabelBatch,
    alpha: float,
    generator: np.random.Generator,
    box: Optional[Tuple[int, int, int, int]] = None,
) -> SoftLabelBatch:
    """
    Paste a rectangle of batch_b into batch_a

    The target weight of batch_a is the exact share of pixels left untouched
    by the clipped rectangle, not the sampled lambda.
    """
    height, width = batch_a.inputs.shape[-2:]
    if box is None:
        box = cutmix_box(height, width, sample_lambda(alpha, generator), generator)
    top, bottom, left, right = box
    inputs = batch_a.inputs.clone()
    inputs[..., top:bottom, left:right] = batch_b.inputs[..., top:bottom, left:right]
    area = max(bottom - top, 0) * max(right - left, 0)
    lam = 1.0 - area / float(height * width)
    return SoftLabelBatch(inputs, lam * batch_a.targets + (1.0 - lam) * batch_b.targets)


def mix_batch(batch: SoftLabelBatch, recipe: TrainRecipe, generator: np.random.Generator) -> SoftLabelBatch:
    """Apply Mixup or CutMix against the reversed batch; a fair coin picks one when both are on"""
    use_mixup, use_cutmix = recipe.mixup_enabled, recipe.cutmix_enabled
    if use_mixup and use_cutmix:
        use_mixup = bool(generator.random() < 0.5)
        use_cutmix = not use_mixup
    if use_mixup:
        return mixup(batch, batch.paired(), recipe.mixup_alpha, generator)
    if use_cutmix:
        return cutmix(batch, batch.paired(), recipe.cutmix_alpha, generator)
    return batch


# ----------------------------------------------------------------------------
# Stochastic depth
# ----------------------------------------------------------------------------

def layer_drop_rate(rate: float, layer_index: int, depth: int) -> float:
    """rate * i / (depth - 1): 0 for the first block, `rate` for the deepest"""
    if depth <= 1:
        return rate
    return rate * layer_index / (depth - 1)


def drop_path(
    x: torch.Tensor,
    rate: float,
    layer_index: int,
    depth: int,
    train_mode: bool,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Drop a residual branch per sample; kept samples are scaled by 1/keep_prob"""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"drop-path rate must lie in [0, 1), got {rate}")
    layer_rate = layer_drop_rate(rate, layer_index, depth)
    if not train_mode or layer_rate == 0.0:
        return x
    keep = 1.0 - layer_rate
    shape = (x.shape[0],) + (1,) * (x.dim() - 1)
    mask = (torch.rand(shape, generator=generator, dtype=x.dtype) < keep).to(x.dtype)
    return x * mask / keep
