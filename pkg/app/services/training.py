"""
Training: AdamW, warmup + cosine schedule, soft-target cross-entropy, the loop

The loop is deterministic given the recipe seed: data order, augmentation and
drop-path each draw from their own RNG stream.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.metrics import average_precision_score

from app.exceptions import ContractError, NumericError
from app.models import TrainRecipe
from app.services.augment import ROW_SUM_TOL, SoftLabelBatch, mix_batch, smooth_labels
from app.services.checkpoint import save_checkpoint
from app.services.network import ARWKV
from app.services.reporting import METRICS_SCHEMA, CsvAppender
from app.services.spectrograms import SpectrogramDataset, batch_iter, endless_batches
from app.services.tensor_ops import GradTape, backward, finish_op
from app.utils.helpers import format_score, sequence_hash
from app.utils.rng import RngStreams

logger = logging.getLogger(__name__)

LAST_GOOD_CHECKPOINT = "last_good.arwk"
BEST_CHECKPOINT = "best.arwk"
FINAL_CHECKPOINT = "final.arwk"
METRICS_FILE = "metrics.csv"


def lr_at(step: int, recipe: TrainRecipe) -> float:
    """
    Linear warmup from 0 to base_lr, then cosine decay to min_lr

    Steps past total_steps stay at min_lr.
    """
    if step < 0:
        raise ContractError(f"step must be >= 0, got {step}")
    warmup = recipe.resolved_warmup
    base, floor = recipe.base_lr, recipe.resolved_min_lr
    if step < warmup:
        return base * step / warmup
    if step >= recipe.total_steps:
        return floor
    decay_steps = recipe.total_steps - warmup
    progress = (step - warmup) / decay_steps
    return floor + 0.5 * (base - floor) * (1.0 + math.cos(math.pi * progress))


def soft_ce_loss(logits: torch.Tensor, targets: Union[torch.Tensor, SoftLabelBatch]) -> torch.Tensor:
    """Mean over the batch of -sum_c q_c log softmax(logits)_c"""
    if isinstance(targets, SoftLabelBatch):
        targets = targets.targets
    if logits.shape != targets.shape:
        raise ContractError(f"logits {tuple(logits.shape)} and targets {tuple(targets.shape)} differ")
    if bool((targets < 0).any()):
        raise ContractError("targets contain negative entries")
    deviation = (targets.sum(dim=-1) - 1).abs().max().item()
    if deviation > ROW_SUM_TOL:
        raise ContractError(f"target rows must sum to 1, max deviation {deviation:.2e}")
    loss = -(targets * F.log_softmax(logits, dim=-1)).sum(dim=-1).mean()
    return finish_op("soft_ce_loss", (logits, targets), loss)


# ----------------------------------------------------------------------------
# Optimizer
# ----------------------------------------------------------------------------

def decay_parameter_names(model: torch.nn.Module) -> Tuple[List[str], List[str]]:
    """Matrix-shaped parameters get weight decay; vectors (LN, mu, biases, scales) do not"""
    decay, no_decay = [], []
    for name, param in model.named_parameters():
        if not param.requires_grad:
            continue
        (decay if param.dim() >= 2 and name != "pos_embed" else no_decay).append(name)
    return decay, no_decay


def build_optimizer(model: torch.nn.Module, recipe: TrainRecipe) -> torch.optim.AdamW:
    params = dict(model.named_parameters())
    decay, no_decay = decay_parameter_names(model)
    groups = [
        {"params": [params[n] for n in decay], "names": decay, "weight_decay": recipe.weight_decay},
        {"params": [params[n] for n in no_decay], "names": no_decay, "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(
        groups,
        lr=recipe.base_lr,
        betas=recipe.betas,
        eps=recipe.adam_eps,
        foreach=False,
    )


def grad_norm(grads: Mapping[str, torch.Tensor]) -> float:
    total = sum(float(g.double().pow(2).sum()) for g in grads.values())
    return math.sqrt(total)


def adamw_step(
    optimizer: torch.optim.Optimizer,
    named_params: Mapping[str, torch.nn.Parameter],
    grads: Mapping[str, torch.Tensor],
    lr: float,
) -> None:
    """
    Install `grads` and take one decoupled-weight-decay Adam step at `lr`

    Raises:
        NumericError: naming the first parameter whose gradient is not finite;
            no parameter is touched in that case
    """
    for name, grad in grads.items():
        if not bool(torch.isfinite(grad).all()):
            raise NumericError(f"non-finite gradient for parameter '{name}'", op="adamw_step")
    for name, param in named_params.items():
        if name in grads:
            param.grad = grads[name].to(param.dtype)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
    for param in named_params.values():
        param.grad = None


# ----------------------------------------------------------------------------
# Evaluation
# ----------------------------------------------------------------------------

@dataclass
class EvalResult:
    accuracy: float
    mean_ap: float
    loss: float
    count: int


def macro_average_precision(targets: np.ndarray, scores: np.ndarray) -> float:
    """Macro AP over the classes that have at least one positive"""
    positive = targets > 0
    present = positive.any(axis=0)
    if not present.any():
        return float("nan")
    return float(average_precision_score(positive[:, present], scores[:, present], average="macro"))


@torch.no_grad()
def evaluate(
    model: ARWKV,
    dataset: SpectrogramDataset,
    batch_size: int = 64,
    dtype: torch.dtype = torch.float32,
) -> EvalResult:
    """Top-1 accuracy, macro mAP and soft-CE over a dataset in order"""
    probs, losses = [], []
    for chunk in batch_iter(len(dataset), batch_size, shuffle_seed=None):
        batch = dataset.batch(chunk.indices, dtype)
        logits = model(batch.inputs, train_mode=False)
        losses.append(float(soft_ce_loss(logits, batch.targets)) * len(chunk.indices))
        probs.append(torch.softmax(logits, dim=-1).double().numpy())
    scores = np.concatenate(probs)
    accuracy = float((scores.argmax(axis=1) == dataset.labels.numpy()).mean())
    mean_ap = macro_average_precision(dataset.targets.numpy(), scores)
    return EvalResult(accuracy, mean_ap, sum(losses) / len(dataset), len(dataset))


# ----------------------------------------------------------------------------
# Loop
# ----------------------------------------------------------------------------

@dataclass
class TrainHistory:
    steps: List[Dict[str, object]] = field(default_factory=list)
    evals: List[Dict[str, object]] = field(default_factory=list)
    data_hash: str = ""
    best_accuracy: Optional[float] = None
    best_step: Optional[int] = None

    @property
    def losses(self) -> List[float]:
        return [row["loss"] for row in self.steps]

    @property
    def lrs(self) -> List[float]:
        return [row["lr"] for row in self.steps]

    @property
    def final_eval(self) -> Optional[Dict[str, object]]:
        return self.evals[-1] if self.evals else None


def _accumulated_step(
    model: ARWKV,
    tape: GradTape,
    batch: SoftLabelBatch,
    micro_batch: int,
    generator: torch.Generator,
) -> float:
    """Forward/backward over micro-batches; each loss weighted by its share of the batch"""
    tape.reset()
    total = 0.0
    with tape:
        for start in range(0, len(batch), micro_batch):
            part = batch.slice(start, start + micro_batch)
            logits = model(part.inputs, train_mode=True, generator=generator)
            loss = soft_ce_loss(logits, part.targets) * (len(part) / len(batch))
            backward(tape, loss, accumulate=True)
            total += float(loss.detach())
    return total


def train_loop(
    model: ARWKV,
    dataset: SpectrogramDataset,
    recipe: TrainRecipe,
    val_dataset: Optional[SpectrogramDataset] = None,
    out_dir: Optional[Union[str, Path]] = None,
    record_timing: bool = True,
    log_every: int = 50,
) -> TrainHistory:
    """
    Train for recipe.total_steps optimizer steps

    Writes metrics.csv plus best/final checkpoints when out_dir is given.

    Raises:
        NumericError: on a non-finite loss or gradient, after writing last_good.arwk
    """
    if not len(dataset):
        raise ContractError("training dataset is empty")
    dtype = recipe.precision.dtype
    model.to(dtype)
    streams = RngStreams(recipe.seed)
    augment_rng = streams.numpy("augment")
    drop_generator = streams.torch("drop_path")
    optimizer = build_optimizer(model, recipe)
    named = dict(model.named_parameters())
    tape = GradTape().watch_module(model)

    out_path = Path(out_dir) if out_dir is not None else None
    metrics = CsvAppender(out_path / METRICS_FILE, METRICS_SCHEMA) if out_path else None
    history = TrainHistory()
    order: List[Iterable[int]] = []
    batches = endless_batches(len(dataset), recipe.batch_size, recipe.seed)
    micro_batch = recipe.resolved_micro_batch

    logger.info(
        "🚀 Training %d steps: batch %d (micro %d), %d samples, %s",
        recipe.total_steps, recipe.batch_size, micro_batch, len(dataset), recipe.precision.value,
    )
    for step in range(1, recipe.total_steps + 1):
        chunk = next(batches)
        order.append(chunk.indices.tolist())
        batch = dataset.batch(chunk.indices, dtype)
        batch = SoftLabelBatch(batch.inputs, smooth_labels(batch.targets, recipe.label_smoothing))
        batch = mix_batch(batch, recipe, augment_rng)
        lr = lr_at(step, recipe)

        started = time.perf_counter()
        try:
            loss = _accumulated_step(model, tape, batch, micro_batch, drop_generator)
            if not math.isfinite(loss):
                raise NumericError(f"loss became {loss}", op="soft_ce_loss", step=step)
            grads = dict(tape.grads)
            norm = grad_norm(grads)
            adamw_step(optimizer, named, grads, lr)
        except NumericError as e:
            if out_path is not None:
                save_checkpoint(out_path / LAST_GOOD_CHECKPOINT, model.cfg, model.state_dict())
            logger.error("❌ Non-finite value at step %d: %s", step, e)
            raise NumericError(f"training halted at step {step}: {e}", op=e.op, step=step) from e
        wall_ms = (time.perf_counter() - started) * 1000.0 if record_timing else 0.0

        row = {"kind": "train", "step": step, "lr": lr, "loss": loss, "grad_norm": norm, "wall_ms": wall_ms}
        history.steps.append(row)
        if metrics:
            metrics.append(row)
        if log_every and step % log_every == 0:
            logger.info("📈 step %d loss %.4f lr %.3e grad %.3f", step, loss, lr, norm)

        is_last = step == recipe.total_steps
        if val_dataset is not None and ((recipe.eval_every and step % recipe.eval_every == 0) or is_last):
            result = evaluate(model, val_dataset, batch_size=max(recipe.batch_size, 1), dtype=dtype)
            eval_row = {"kind": "eval", "step": step, "loss": result.loss, "split": "val",
                        "accuracy": result.accuracy, "mAP": result.mean_ap}
            history.evals.append(eval_row)
            if metrics:
                metrics.append(eval_row)
            logger.info("✅ step %d val accuracy %s mAP %.4f", step, format_score(result.accuracy), result.mean_ap)
            if history.best_accuracy is None or result.accuracy > history.best_accuracy:
                history.best_accuracy, history.best_step = result.accuracy, step
                if out_path is not None:
                    save_checkpoint(out_path / BEST_CHECKPOINT, model.cfg, model.state_dict())

    history.data_hash = sequence_hash(order)
    if out_path is not None:
        save_checkpoint(out_path / FINAL_CHECKPOINT, model.cfg, model.state_dict())
    logger.info("🏁 Training finished, final loss %.4f", history.steps[-1]["loss"])
    return history
