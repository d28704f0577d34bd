"""
Tensor primitives with recorded reverse-mode differentiation

All math runs on torch tensors. The ops here add what the model needs on top
of torch: shape contracts with readable errors, a NaN/Inf guard on every
output, and an optional GradTape that records which ops ran and hands back a
name -> gradient map for the leaves it watches.
"""

import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F

from app.exceptions import ConfigError, ContractError, DimensionError, NumericError

logger = logging.getLogger(__name__)

# exp(-exp(x)) never returns less than this, so decays stay strictly positive.
NEG_EXP_EXP_FLOOR = 1e-38
_NEG_EXP_EXP_CAP = 80.0

_state = threading.local()


@dataclass
class TapeNode:
    """One executed op"""
    op: str
    input_shapes: Tuple[Tuple[int, ...], ...]
    output_shape: Tuple[int, ...]


@dataclass
class GradTape:
    """
    Records ops executed inside `with tape:` and owns gradient buffers for the
    leaves registered with `watch`.

    The graph itself is torch's autograd graph; the tape keeps the op log and
    the per-leaf gradient buffers, which are cleared by every non-accumulating
    `backward` call and by `reset`.
    """
    nodes: List[TapeNode] = field(default_factory=list)
    leaves: Dict[str, torch.Tensor] = field(default_factory=dict)
    grads: Dict[str, torch.Tensor] = field(default_factory=dict)

    def watch(self, name: str, tensor: torch.Tensor) -> torch.Tensor:
        if not tensor.is_leaf:
            raise ContractError(f"GradTape can only watch leaf tensors, '{name}' is derived")
        if not tensor.requires_grad:
            tensor.requires_grad_(True)
        self.leaves[name] = tensor
        return tensor

    def watch_module(self, module: torch.nn.Module) -> "GradTape":
        for name, param in module.named_parameters():
            if param.requires_grad:
                self.watch(name, param)
        return self

    def record(self, op: str, inputs: Sequence[torch.Tensor], output: torch.Tensor) -> None:
        self.nodes.append(
            TapeNode(op, tuple(tuple(t.shape) for t in inputs), tuple(output.shape))
        )

    def reset(self) -> None:
        self.nodes.clear()
        self.grads.clear()

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()


def _tape_stack() -> List[GradTape]:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def finish_op(op: str, inputs: Sequence[torch.Tensor], out: torch.Tensor) -> torch.Tensor:
    if out.is_floating_point() and not bool(torch.isfinite(out).all()):
        raise NumericError(f"{op} produced non-finite values", op=op)
    stack = _tape_stack()
    if stack:
        stack[-1].record(op, inputs, out)
    return out


def _broadcast(op: str, *shapes: torch.Size) -> torch.Size:
    try:
        return torch.broadcast_shapes(*shapes)
    except RuntimeError as e:
        raise DimensionError(f"{op}: cannot broadcast shapes {[tuple(s) for s in shapes]}") from e


def _axis(x: torch.Tensor, axis: int, op: str) -> int:
    if not -x.dim() <= axis < x.dim():
        raise DimensionError(f"{op}: axis {axis} out of range for tensor of rank {x.dim()}")
    return axis % x.dim()


# ----------------------------------------------------------------------------
# Ops
# ----------------------------------------------------------------------------

def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Batched contraction [.., M, K] x [.., K, N] -> [.., M, N]"""
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {tuple(a.shape)} and {tuple(b.shape)} do not contract")
    _broadcast("matmul", a.shape[:-2], b.shape[:-2])
    return finish_op("matmul", (a, b), torch.matmul(a, b))


def _neg_exp_exp(x: torch.Tensor) -> torch.Tensor:
    return torch.exp(-torch.exp(x.clamp(max=_NEG_EXP_EXP_CAP))).clamp(min=NEG_EXP_EXP_FLOOR)


def _lerp(x: torch.Tensor, y: torch.Tensor, t) -> torch.Tensor:
    return x + (y - x) * t


_ELEMENTWISE: Dict[str, Tuple[int, Callable[..., torch.Tensor]]] = {
    "add": (2, torch.add),
    "sub": (2, torch.sub),
    "mul": (2, torch.mul),
    "sigmoid": (1, torch.sigmoid),
    "tanh": (1, torch.tanh),
    "relu": (1, torch.relu),
    "exp": (1, torch.exp),
    "neg_exp_exp": (1, _neg_exp_exp),
    "square": (1, torch.square),
    "lerp": (3, _lerp),
}


def elementwise(kind: str, *operands) -> torch.Tensor:
    """
    Pointwise op with broadcasting

    Args:
        kind: One of add, sub, mul, sigmoid, tanh, relu, exp, neg_exp_exp, square, lerp
        operands: Tensors (lerp's weight may also be a Python number)
    """
    if kind not in _ELEMENTWISE:
        raise ContractError(f"Unknown elementwise op '{kind}'. Known: {sorted(_ELEMENTWISE)}")
    arity, fn = _ELEMENTWISE[kind]
    if len(operands) != arity:
        raise ContractError(f"{kind} takes {arity} operand(s), got {len(operands)}")
    tensors = [t for t in operands if isinstance(t, torch.Tensor)]
    if len(tensors) > 1:
        _broadcast(kind, *(t.shape for t in tensors))
    return finish_op(kind, tensors, fn(*operands))


def conv2d(
    x: torch.Tensor,
    weight: torch.Tensor,
    stride: Union[int, Tuple[int, int]] = 1,
    padding: int = 0,
    bias: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Zero-padded 2D convolution [B, Cin, H, W] * [Cout, Cin, kh, kw], stride per axis or shared"""
    if x.dim() != 4 or weight.dim() != 4:
        raise DimensionError(f"conv2d expects 4D input and weight, got {tuple(x.shape)} and {tuple(weight.shape)}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv2d: input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    strides = (stride, stride) if isinstance(stride, int) else tuple(stride)
    if min(strides) < 1 or padding < 0:
        raise ContractError(f"conv2d: stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    kh, kw = weight.shape[-2:]
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {x.shape[2] + 2 * padding}x{x.shape[3] + 2 * padding}"
        )
    out = F.conv2d(x, weight, bias, stride=strides, padding=padding)
    return finish_op("conv2d", (x, weight), out)


def dwconv2d(x: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Shape-preserving depthwise convolution [B, C, H, W] * [C, 1, kh, kw] with odd kernels"""
    if x.dim() != 4 or weight.dim() != 4 or weight.shape[1] != 1:
        raise DimensionError(f"dwconv2d expects [B,C,H,W] and [C,1,kh,kw], got {tuple(x.shape)} and {tuple(weight.shape)}")
    kh, kw = weight.shape[-2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"dwconv2d needs odd kernel sizes, got {kh}x{kw}", ["conv_kernel"])
    channels = x.shape[1]
    if weight.shape[0] != channels:
        raise DimensionError(f"dwconv2d: input has {channels} channels, weight has {weight.shape[0]}")
    out = F.conv2d(x, weight, None, stride=1, padding=((kh - 1) // 2, (kw - 1) // 2), groups=channels)
    return finish_op("dwconv2d", (x, weight), out)


def layernorm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Per-row normalisation over the last dimension, then affine"""
    dim = x.shape[-1]
    if gamma.shape != (dim,) or beta.shape != (dim,):
        raise DimensionError(f"layernorm: gamma/beta must have shape ({dim},), got {tuple(gamma.shape)}, {tuple(beta.shape)}")
    if eps <= 0:
        raise ContractError("layernorm: eps must be positive")
    return finish_op("layernorm", (x, gamma, beta), F.layer_norm(x, (dim,), gamma, beta, eps))


def rms_norm(x: torch.Tensor, scale: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Root-mean-square normalisation over the last dimension, times `scale` (broadcast)"""
    out = F.rms_norm(x, (x.shape[-1],), None, eps) * scale
    return finish_op("rms_norm", (x, scale), out)


def l2_normalize(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Unit L2 norm along the last dimension; near-zero vectors are divided by eps instead"""
    if eps <= 0:
        raise ContractError("l2_normalize: eps must be positive")
    return finish_op("l2_normalize", (x,), F.normalize(x, p=2.0, dim=-1, eps=eps))


def flip(x: torch.Tensor, axis: int) -> torch.Tensor:
    """Reverse along one axis"""
    axis = _axis(x, axis, "flip")
    return finish_op("flip", (x,), torch.flip(x, dims=(axis,)))


# ----------------------------------------------------------------------------
# Differentiation
# ----------------------------------------------------------------------------

def backward(tape: GradTape, loss: torch.Tensor, accumulate: bool = False) -> Dict[str, torch.Tensor]:
    """
    Replay adjoints from a scalar loss to every watched leaf

    Args:
        tape: Tape with watched leaves
        loss: Scalar tensor
        accumulate: Add into the tape's existing buffers instead of replacing them

    Returns:
        Mapping leaf name -> total gradient (zeros for unreachable leaves)
    """
    if loss.numel() != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not accumulate:
        tape.grads.clear()
    names = list(tape.leaves)
    leaves = [tape.leaves[name] for name in names]
    if loss.requires_grad and leaves:
        raw = torch.autograd.grad(loss.reshape(()), leaves, allow_unused=True)
    else:
        raw = [None] * len(leaves)
    for name, leaf, grad in zip(names, leaves, raw):
        grad = torch.zeros_like(leaf) if grad is None else grad.detach()
        if accumulate and name in tape.grads:
            tape.grads[name] = tape.grads[name] + grad
        else:
            tape.grads[name] = grad
    tape.nodes.clear()
    return dict(tape.grads)


@dataclass
class GradcheckReport:
    """Outcome of comparing reverse-mode gradients to central differences"""
    name: str
    max_rel_err: float
    passed: bool
    tol: float
    worst_input: Optional[int] = None
    worst_index: Optional[int] = None
    message: str = ""


def _coordinates(numel: int, max_coords: Optional[int], generator: Optional[torch.Generator]) -> List[int]:
    if max_coords is None or numel <= max_coords:
        return list(range(numel))
    return torch.randperm(numel, generator=generator)[:max_coords].tolist()


def gradcheck(
    f: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    h: float = 1e-5,
    tol: float = 1e-6,
    name: str = "f",
    max_coords: Optional[int] = None,
    generator: Optional[torch.Generator] = None,
) -> GradcheckReport:
    """
    Compare autograd gradients of a scalar function to central differences

    Relative error per coordinate is |a - n| / max(1, |a|, |n|).

    Args:
        f: Function of the input tensors returning a scalar
        inputs: float64 tensors
        h: Finite-difference step
        tol: Pass threshold on the maximum relative error
        name: Label used in the report
        max_coords: Check at most this many random coordinates per input
        generator: Source of the coordinate sample
    """
    if any(t.dtype != torch.float64 for t in inputs):
        raise ContractError("gradcheck requires float64 inputs")
    xs = [t.detach().clone().requires_grad_(True) for t in inputs]
    try:
        out = f(*xs)
    except NumericError as e:
        return GradcheckReport(name, math.inf, False, tol, message=f"{name}: forward failed ({e})")
    if out.numel() != 1:
        raise ContractError(f"gradcheck: {name} must return a scalar, got shape {tuple(out.shape)}")
    analytic = torch.autograd.grad(out.reshape(()), xs, allow_unused=True)
    analytic = [torch.zeros_like(x) if g is None else g.detach() for x, g in zip(xs, analytic)]

    worst = (0.0, None, None)
    with torch.no_grad():
        for i, (x, grad) in enumerate(zip(xs, analytic)):
            flat = x.view(-1)
            grad_flat = grad.reshape(-1)
            for j in _coordinates(flat.numel(), max_coords, generator):
                original = flat[j].item()
                flat[j] = original + h
                f_plus = f(*xs).item()
                flat[j] = original - h
                f_minus = f(*xs).item()
                flat[j] = original
                numeric = (f_plus - f_minus) / (2.0 * h)
                a = grad_flat[j].item()
                if math.isnan(a) or math.isnan(numeric):
                    return GradcheckReport(
                        name, math.nan, False, tol, i, j,
                        message=f"{name}: NaN gradient at input {i}, coordinate {j}",
                    )
                rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                if rel > worst[0]:
                    worst = (rel, i, j)

    max_rel, worst_input, worst_index = worst
    passed = max_rel <= tol
    message = "" if passed else f"{name}: max rel err {max_rel:.3e} at input {worst_input}, coordinate {worst_index}"
    return GradcheckReport(name, max_rel, passed, tol, worst_input, worst_index, message)
