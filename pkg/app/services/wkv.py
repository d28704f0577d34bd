"""
WKV7 recurrence: causal scan, time-reversed scan, bidirectional fusion

Per (batch, head) the state S is a d x d matrix with rows indexed by value
channel and columns by key channel. One step is

    S_t = S_{t-1} (diag(w_t) - kappa_t (a_t * kappa_t)^T) + v_t k~_t^T
    p_t = S_t r_t

The scan applies the transition as a rank-1 correction, so a step costs
O(d^2) and a sequence O(L d^2). Gradients come from a reverse-time
recurrence over the cached states instead of autograd through the loop.
"""

import logging
import math
from dataclasses import dataclass, fields
from enum import Enum
from typing import Callable, Optional, Tuple

import torch

from app.exceptions import ContractError, DimensionError, NumericError
from app.services.tensor_ops import elementwise, finish_op, flip

logger = logging.getLogger(__name__)

KAPPA_NORM_TOL = 1e-3
ORACLE_MAX_SIZE = 4096


class ScanDirection(str, Enum):
    FORWARD = "forward"
    BACKWARD = "backward"


@dataclass
class WKVStepInputs:
    """Per-token projected quantities, each [B, L, H, d]"""
    r: torch.Tensor
    w: torch.Tensor
    kappa_hat: torch.Tensor
    a: torch.Tensor
    k_tilde: torch.Tensor
    v: torch.Tensor

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return tuple(self.r.shape)

    def validate(self) -> "WKVStepInputs":
        if self.r.dim() != 4:
            raise DimensionError(f"WKV inputs must be [B, L, H, d], got r with shape {tuple(self.r.shape)}")
        for item in fields(self):
            tensor = getattr(self, item.name)
            if tensor.shape != self.r.shape:
                raise DimensionError(
                    f"WKV input '{item.name}' has shape {tuple(tensor.shape)}, expected {tuple(self.r.shape)}"
                )
        if self.r.shape[1] < 1:
            raise ContractError("WKV scan needs at least one token")
        return self

    def check_invariants(self, norm_tol: float = 1e-5) -> None:
        """Raise ContractError unless 0<w<1, 0<a<1 and every kappa_hat has unit norm"""
        if not bool(((self.w > 0) & (self.w < 1)).all()):
            raise ContractError("decay w must lie in (0, 1)")
        if not bool(((self.a > 0) & (self.a < 1)).all()):
            raise ContractError("in-context learning rate a must lie in (0, 1)")
        deviation = (self.kappa_hat.norm(dim=-1) - 1).abs().max().item()
        if deviation > norm_tol:
            raise ContractError(f"kappa_hat norm deviates from 1 by {deviation:.2e}")

    def map(self, fn: Callable[[torch.Tensor], torch.Tensor]) -> "WKVStepInputs":
        return WKVStepInputs(*(fn(getattr(self, item.name)) for item in fields(self)))

    def reversed(self) -> "WKVStepInputs":
        return self.map(lambda t: flip(t, 1))


@dataclass
class WKVState:
    """Recurrent state S[B, H, d_value, d_key]"""
    S: torch.Tensor

    @classmethod
    def zeros(cls, batch: int, heads: int, head_dim: int, dtype=torch.float32, device=None) -> "WKVState":
        return cls(torch.zeros(batch, heads, head_dim, head_dim, dtype=dtype, device=device))


# ----------------------------------------------------------------------------
# Transition matrix
# ----------------------------------------------------------------------------

def transition_matrix(w: torch.Tensor, kappa_hat: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    """
    D = diag(w) - kappa_hat (a * kappa_hat)^T for per-head vectors [..., d]

    Raises:
        ContractError: if some kappa_hat is not unit norm (deviation > 1e-3)
    """
    deviation = (kappa_hat.norm(dim=-1) - 1).abs()
    if deviation.numel() and deviation.max().item() > KAPPA_NORM_TOL:
        raise ContractError(f"removal key must be unit norm, deviation {deviation.max().item():.2e}")
    return torch.diag_embed(w) - kappa_hat.unsqueeze(-1) * (a * kappa_hat).unsqueeze(-2)


def transition_spectral_norm(w: torch.Tensor, kappa_hat: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    """
    Operator 2-norm of D in the metric weighted by diag(sqrt(a))

    diag(sqrt(a)) D diag(1/sqrt(a)) = diag(w) - u u^T with u = sqrt(a) * kappa_hat,
    a symmetric matrix whose eigenvalues lie in (-1, 1] whenever w, a are in
    (0, 1) and kappa_hat is unit norm. The plain 2-norm of D is not bounded by 1
    once `a` varies across channels.
    """
    D = transition_matrix(w, kappa_hat, a)
    root = torch.sqrt(a)
    similar = D * root.unsqueeze(-1) / root.unsqueeze(-2)
    return torch.linalg.matrix_norm(similar, ord=2)


def spectral_radius(matrix: torch.Tensor) -> torch.Tensor:
    """Largest eigenvalue magnitude of [..., d, d]"""
    return torch.linalg.eigvals(matrix).abs().amax(dim=-1)


# ----------------------------------------------------------------------------
# Scan
# ----------------------------------------------------------------------------

def _scan_forward(r, w, kappa, a, k_tilde, v, S0, keep_states: bool):
    batch, length, heads, d = r.shape
    S = S0.clone()
    out = r.new_empty(batch, length, heads, d)
    states = r.new_empty(length + 1, batch, heads, d, d) if keep_states else None
    if keep_states:
        states[0] = S
    c = a * kappa
    for t in range(length):
        removed = S @ kappa[:, t, :, :, None]
        S = S * w[:, t, :, None, :] - removed * c[:, t, :, None, :] + v[:, t, :, :, None] * k_tilde[:, t, :, None, :]
        out[:, t] = (S @ r[:, t, :, :, None]).squeeze(-1)
        if keep_states:
            states[t + 1] = S
    return out, S, states


class _WKV7Scan(torch.autograd.Function):
    """Causal scan with a reverse-time adjoint over cached states"""

    @staticmethod
    def forward(ctx, r, w, kappa, a, k_tilde, v, S0):
        out, S_final, states = _scan_forward(r, w, kappa, a, k_tilde, v, S0, keep_states=True)
        ctx.save_for_backward(r, w, kappa, a, k_tilde, v, states)
        return out, S_final

    @staticmethod
    def backward(ctx, d_out, d_state):
        r, w, kappa, a, k_tilde, v, states = ctx.saved_tensors
        length = r.shape[1]
        G = d_state.clone()
        dr, dw, dkappa, da, dk, dv = (torch.zeros_like(t) for t in (r, w, kappa, a, k_tilde, v))
        for t in reversed(range(length)):
            S_t, S_prev = states[t + 1], states[t]
            r_t, w_t, kappa_t, a_t = r[:, t], w[:, t], kappa[:, t], a[:, t]
            c_t = a_t * kappa_t
            dp = d_out[:, t]

            G = G + dp.unsqueeze(-1) * r_t.unsqueeze(-2)
            dr[:, t] = (S_t.transpose(-1, -2) @ dp.unsqueeze(-1)).squeeze(-1)
            dv[:, t] = (G @ k_tilde[:, t].unsqueeze(-1)).squeeze(-1)
            dk[:, t] = (G.transpose(-1, -2) @ v[:, t].unsqueeze(-1)).squeeze(-1)

            # adjoint of D_t is S_prev^T G, never materialised
            dw[:, t] = (S_prev * G).sum(dim=-2)
            Gc = G @ c_t.unsqueeze(-1)
            dkappa_t = -(S_prev.transpose(-1, -2) @ Gc).squeeze(-1)
            dc = -(G.transpose(-1, -2) @ (S_prev @ kappa_t.unsqueeze(-1))).squeeze(-1)
            da[:, t] = dc * kappa_t
            dkappa[:, t] = dkappa_t + dc * a_t

            G = G * w_t.unsqueeze(-2) - Gc * kappa_t.unsqueeze(-2)
        return dr, dw, dkappa, da, dk, dv, G


def _first_nonfinite_step(out: torch.Tensor) -> int:
    bad = ~torch.isfinite(out).flatten(2).all(dim=-1).all(dim=0)
    return int(torch.nonzero(bad)[0].item()) if bool(bad.any()) else -1


def wkv7_scan(
    inputs: WKVStepInputs,
    direction: ScanDirection = ScanDirection.FORWARD,
    S0: Optional[WKVState] = None,
) -> Tuple[torch.Tensor, WKVState]:
    """
    Run the WKV7 recurrence over a sequence

    Args:
        inputs: Step inputs, each [B, L, H, d]
        direction: forward iterates t = 1..L; backward iterates t = L..1 and
            returns outputs in that (reversed) order, so callers flip them back
        S0: Initial state (zeros if None)

    Returns:
        (outputs p [B, L, H, d], final state)
    """
    direction = ScanDirection(direction)
    inputs.validate()
    batch, _, heads, d = inputs.shape
    if direction is ScanDirection.BACKWARD:
        inputs = inputs.reversed()
    if S0 is None:
        S0 = WKVState.zeros(batch, heads, d, dtype=inputs.r.dtype, device=inputs.r.device)
    elif S0.S.shape != (batch, heads, d, d):
        raise DimensionError(f"initial state has shape {tuple(S0.S.shape)}, expected {(batch, heads, d, d)}")

    tensors = (inputs.r, inputs.w, inputs.kappa_hat, inputs.a, inputs.k_tilde, inputs.v, S0.S)
    if torch.is_grad_enabled() and any(t.requires_grad for t in tensors):
        out, S_final = _WKV7Scan.apply(*tensors)
    else:
        with torch.no_grad():
            out, S_final, _ = _scan_forward(*tensors, keep_states=False)

    step = _first_nonfinite_step(out)
    if step >= 0 or not bool(torch.isfinite(S_final).all()):
        raise NumericError(
            f"WKV state became non-finite at step {step} of the {direction.value} scan",
            op="wkv7_scan",
            step=step,
        )
    finish_op(f"wkv7_scan[{direction.value}]", tensors, out)
    return out, WKVState(S_final)


def bi_wkv(inputs: WKVStepInputs, gate: torch.Tensor) -> torch.Tensor:
    """
    Gated fusion of the forward scan and the flipped backward scan

    p = G * p_forward + (1 - G) * flip(p_backward, dim=1)
    """
    inputs.validate()
    if gate.shape != inputs.r.shape:
        raise DimensionError(f"gate has shape {tuple(gate.shape)}, expected {tuple(inputs.r.shape)}")
    if not bool(((gate >= 0) & (gate <= 1)).all()):
        raise ContractError("fusion gate must lie in [0, 1]")
    p_forward, _ = wkv7_scan(inputs, ScanDirection.FORWARD)
    p_backward, _ = wkv7_scan(inputs, ScanDirection.BACKWARD)
    return elementwise(
        "add",
        elementwise("mul", gate, p_forward),
        elementwise("mul", 1 - gate, flip(p_backward, 1)),
    )


def bonus_term(r: torch.Tensor, k_tilde: torch.Tensor, v: torch.Tensor, rho: torch.Tensor) -> torch.Tensor:
    """Per-head current-token bonus ((r * k~ * rho) summed over d) * v, rho is [H, d]"""
    weight = (r * k_tilde * rho).sum(dim=-1, keepdim=True)
    return finish_op("bonus_term", (r, k_tilde, v, rho), weight * v)


# ----------------------------------------------------------------------------
# References
# ----------------------------------------------------------------------------

def naive_attention_weights(q: torch.Tensor, k: torch.Tensor, causal: bool) -> torch.Tensor:
    """softmax(q k^T / sqrt(d)) as [B, H, L, L], optionally lower-triangular"""
    if q.shape != k.shape:
        raise DimensionError(f"q and k shapes differ: {tuple(q.shape)} vs {tuple(k.shape)}")
    qh, kh = q.transpose(1, 2), k.transpose(1, 2)
    scores = qh @ kh.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if causal:
        length = q.shape[1]
        mask = torch.ones(length, length, dtype=torch.bool, device=q.device).triu(1)
        scores = scores.masked_fill(mask, float("-inf"))
    return torch.softmax(scores, dim=-1)


def naive_attention_reference(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, causal: bool = False) -> torch.Tensor:
    """Quadratic softmax attention over [B, L, H, d] inputs"""
    probs = naive_attention_weights(q, k, causal)
    return (probs @ v.transpose(1, 2)).transpose(1, 2)


def wkv_oracle(inputs: WKVStepInputs, S0: Optional[WKVState] = None) -> torch.Tensor:
    """
    Forward scan by explicit per-step matrix construction (tiny sizes only)

    Raises:
        ContractError: if L * d exceeds 4096
    """
    inputs.validate()
    batch, length, heads, d = inputs.shape
    if length * d > ORACLE_MAX_SIZE:
        raise ContractError(f"wkv_oracle is limited to L*d <= {ORACLE_MAX_SIZE}, got {length * d}")
    out = torch.zeros(batch, length, heads, d, dtype=inputs.r.dtype)
    with torch.no_grad():
        for b in range(batch):
            for h in range(heads):
                S = S0.S[b, h].clone() if S0 is not None else torch.zeros(d, d, dtype=inputs.r.dtype)
                for t in range(length):
                    D = transition_matrix(inputs.w[b, t, h], inputs.kappa_hat[b, t, h], inputs.a[b, t, h])
                    S = S @ D + torch.outer(inputs.v[b, t, h], inputs.k_tilde[b, t, h])
                    out[b, t, h] = S @ inputs.r[b, t, h]
    return out
