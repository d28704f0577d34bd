"""
Component ablation ladder

    A  causal scan, 1D token shift, no CutMix
    B  A + CutMix
    C  bidirectional scan, average fusion
    D  bidirectional scan, weighted-gate fusion
    E  D with Q-Shift
    F  D with ConvShift

Every variant trains on the same data in the same order from the same seed.
"""

import logging
from collections import OrderedDict
from typing import Dict, List, Optional, Sequence

from app.exceptions import ConfigError
from app.models import FusionKind, ModelConfig, ScanKind, TokenShift, TrainRecipe
from app.services.network import ARWKV
from app.services.spectrograms import SpectrogramDataset
from app.services.training import evaluate, train_loop
from app.utils.rng import RngStreams

logger = logging.getLogger(__name__)

VARIANTS: "OrderedDict[str, Dict[str, object]]" = OrderedDict(
    A=dict(scan=ScanKind.CAUSAL, fusion=FusionKind.AVERAGE, token_shift=TokenShift.ORIGINAL_1D, cutmix=False),
    B=dict(scan=ScanKind.CAUSAL, fusion=FusionKind.AVERAGE, token_shift=TokenShift.ORIGINAL_1D, cutmix=True),
    C=dict(scan=ScanKind.BIDIRECTIONAL, fusion=FusionKind.AVERAGE, token_shift=TokenShift.ORIGINAL_1D, cutmix=True),
    D=dict(scan=ScanKind.BIDIRECTIONAL, fusion=FusionKind.WEIGHTED_GATE, token_shift=TokenShift.ORIGINAL_1D, cutmix=True),
    E=dict(scan=ScanKind.BIDIRECTIONAL, fusion=FusionKind.WEIGHTED_GATE, token_shift=TokenShift.QSHIFT, cutmix=True),
    F=dict(scan=ScanKind.BIDIRECTIONAL, fusion=FusionKind.WEIGHTED_GATE, token_shift=TokenShift.CONV_SHIFT, cutmix=True),
)


def variant_config(base: ModelConfig, label: str) -> ModelConfig:
    if label not in VARIANTS:
        raise ConfigError(f"Unknown ablation variant '{label}'. Known: {list(VARIANTS)}", ["variant"])
    spec = VARIANTS[label]
    return base.with_overrides(scan=spec["scan"], fusion=spec["fusion"], token_shift=spec["token_shift"])


def variant_recipe(recipe: TrainRecipe, label: str, steps: Optional[int] = None) -> TrainRecipe:
    overrides = {"cutmix_enabled": bool(VARIANTS[label]["cutmix"])}
    if steps is not None:
        overrides["total_steps"] = steps
        if recipe.warmup_steps is not None and recipe.warmup_steps > steps:
            overrides["warmup_steps"] = None
    return recipe.with_overrides(**overrides)


def run_ablation(
    base: ModelConfig,
    recipe: TrainRecipe,
    train: SpectrogramDataset,
    val: SpectrogramDataset,
    variants: Optional[Sequence[str]] = None,
    steps: Optional[int] = None,
) -> List[Dict[str, object]]:
    """Train each variant and return one comparison row per variant"""
    labels = list(variants or VARIANTS)
    rows = []
    for label in labels:
        cfg = variant_config(base, label)
        run_recipe = variant_recipe(recipe, label, steps)
        logger.info("🧪 Variant %s: %s", label, VARIANTS[label])
        model = ARWKV(cfg, generator=RngStreams(run_recipe.seed).torch("init"))
        history = train_loop(model, train, run_recipe, record_timing=False, log_every=0)
        result = evaluate(model, val, batch_size=run_recipe.batch_size, dtype=run_recipe.precision.dtype)
        spec = VARIANTS[label]
        rows.append({
            "variant": label,
            "scan": spec["scan"].value,
            "fusion": spec["fusion"].value,
            "token_shift": spec["token_shift"].value,
            "cutmix": "true" if spec["cutmix"] else "false",
            "seed": run_recipe.seed,
            "steps": run_recipe.total_steps,
            "final_loss": float(history.steps[-1]["loss"]),
            "accuracy": result.accuracy,
            "mAP": None if result.mean_ap != result.mean_ap else result.mean_ap,
            "data_hash": history.data_hash,
        })
        logger.info("✅ Variant %s accuracy %.4f", label, result.accuracy)
    return rows
