"""
A-RWKV network

Patch embedding -> N blocks of (bidirectional spatial mix, channel mix) with
pre-LN residuals -> final LN -> mean over tokens -> linear head.

Block parameter names follow the RWKV-7 checkpoint convention (x_r, w0, k_k,
ln_x, ...) so the two are easy to compare side by side.
"""

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from app.exceptions import ConfigError, DimensionError
from app.models import FusionKind, ModelConfig, ScanKind, TokenShift
from app.services.augment import drop_path
from app.services.tensor_ops import (
    conv2d,
    dwconv2d,
    elementwise,
    finish_op,
    l2_normalize,
    layernorm,
    matmul,
    rms_norm,
)
from app.services.wkv import WKVStepInputs, bi_wkv, bonus_term, wkv7_scan

logger = logging.getLogger(__name__)

# Per-head output norm epsilon, as in RWKV-7 (1e-5 * head_size with head_size 64).
HEAD_NORM_EPS = 64e-5
POS_EMBED_STD = 0.02
MIX_NAMES = ("r", "w", "k", "v", "a", "g")


@dataclass(frozen=True)
class PatchGrid:
    """Token grid: rows run over frequency, columns over time, token t = row * cols + col"""
    rows: int
    cols: int

    @property
    def length(self) -> int:
        return self.rows * self.cols

    def check(self, x: torch.Tensor) -> None:
        if x.dim() != 3 or x.shape[1] != self.length:
            raise DimensionError(
                f"expected [B, {self.length}, D] tokens for a {self.rows}x{self.cols} grid, got {tuple(x.shape)}"
            )

    def to_map(self, x: torch.Tensor) -> torch.Tensor:
        """[B, L, D] -> [B, D, rows, cols]"""
        self.check(x)
        return x.transpose(1, 2).reshape(x.shape[0], x.shape[2], self.rows, self.cols)

    def to_tokens(self, fmap: torch.Tensor) -> torch.Tensor:
        """[B, D, rows, cols] -> [B, L, D]"""
        if fmap.shape[-2:] != (self.rows, self.cols):
            raise DimensionError(f"feature map {tuple(fmap.shape)} does not match grid {self.rows}x{self.cols}")
        return fmap.flatten(2).transpose(1, 2)


# ----------------------------------------------------------------------------
# Token shifts
# ----------------------------------------------------------------------------

def token_shift_1d(x: torch.Tensor) -> torch.Tensor:
    """x_res[t] = x[t-1] - x[t] with x[-1] = 0"""
    previous = F.pad(x, (0, 0, 1, 0))[:, :-1]
    return elementwise("sub", previous, x)


def conv_shift_residual(x: torch.Tensor, grid: PatchGrid, kernel: torch.Tensor) -> torch.Tensor:
    """Flatten(DWConv2D(X) - X) on the 2D token grid"""
    fmap = grid.to_map(x)
    return grid.to_tokens(elementwise("sub", dwconv2d(fmap, kernel), fmap))


def _shift_map(fmap: torch.Tensor, dy: int, dx: int) -> torch.Tensor:
    """Move content by (dy, dx) cells, zero fill at the border"""
    rows, cols = fmap.shape[-2:]
    padded = F.pad(fmap, (max(dx, 0), max(-dx, 0), max(dy, 0), max(-dy, 0)))
    top, left = max(-dy, 0), max(-dx, 0)
    return padded[..., top:top + rows, left:left + cols]


def qshift_residual(x: torch.Tensor, grid: PatchGrid) -> torch.Tensor:
    """
    Channel quarters take their content from one cell away: quarter 0 moves
    left, 1 right, 2 up, 3 down. x_res = shifted - x.
    """
    channels = x.shape[-1]
    if channels % 4:
        raise ConfigError(f"qshift needs embed_dim divisible by 4, got {channels}", ["embed_dim"])
    fmap = grid.to_map(x)
    quarters = fmap.chunk(4, dim=1)
    moves = ((0, -1), (0, 1), (-1, 0), (1, 0))
    shifted = torch.cat([_shift_map(q, dy, dx) for q, (dy, dx) in zip(quarters, moves)], dim=1)
    return elementwise("sub", grid.to_tokens(shifted), x)


def token_residual(x: torch.Tensor, grid: PatchGrid, kind: TokenShift, kernel: Optional[torch.Tensor]) -> torch.Tensor:
    if kind is TokenShift.ORIGINAL_1D:
        return token_shift_1d(x)
    if kind is TokenShift.QSHIFT:
        return qshift_residual(x, grid)
    return conv_shift_residual(x, grid, kernel)


def lerp_params(x: torch.Tensor, x_res: torch.Tensor, mu: torch.Tensor) -> torch.Tensor:
    """x + x_res * mu"""
    if mu.shape != (x.shape[-1],):
        raise DimensionError(f"interpolation vector must have shape ({x.shape[-1]},), got {tuple(mu.shape)}")
    return elementwise("add", x, elementwise("mul", x_res, mu))


def neighbour_average_kernel(channels: int, size: int) -> torch.Tensor:
    """[C, 1, k, k] mean over the k*k - 1 neighbours, zero centre"""
    kernel = torch.ones(channels, 1, size, size)
    if size > 1:
        kernel /= size * size - 1
    kernel[:, :, size // 2, size // 2] = 0.0
    return kernel


# ----------------------------------------------------------------------------
# Blocks
# ----------------------------------------------------------------------------

class LayerNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return layernorm(x, self.weight, self.bias)


class SpatialMix(nn.Module):
    """RWKV-7 time mixing re-purposed for the 2D grid, with an optional bidirectional scan"""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.embed_dim
        for name in MIX_NAMES:
            self.register_parameter(f"x_{name}", nn.Parameter(torch.empty(D)))
        self.receptance = nn.Parameter(torch.empty(D, D))
        self.key = nn.Parameter(torch.empty(D, D))
        self.value = nn.Parameter(torch.empty(D, D))
        self.output = nn.Parameter(torch.empty(D, D))
        self.w0 = nn.Parameter(torch.empty(D))
        self.w1 = nn.Parameter(torch.empty(D, cfg.rank_w))
        self.w2 = nn.Parameter(torch.empty(cfg.rank_w, D))
        self.a0 = nn.Parameter(torch.empty(D))
        self.a1 = nn.Parameter(torch.empty(D, cfg.rank_a))
        self.a2 = nn.Parameter(torch.empty(cfg.rank_a, D))
        self.g1 = nn.Parameter(torch.empty(D, cfg.rank_g))
        self.g2 = nn.Parameter(torch.empty(cfg.rank_g, D))
        self.k_k = nn.Parameter(torch.empty(D))
        self.k_a = nn.Parameter(torch.empty(D))
        self.ln_x = nn.Parameter(torch.empty(D))
        if cfg.scan is ScanKind.BIDIRECTIONAL and cfg.fusion is FusionKind.WEIGHTED_GATE:
            self.gate_weight = nn.Parameter(torch.empty(D, D))
            self.gate_bias = nn.Parameter(torch.empty(D))
        else:
            self.gate_weight = self.gate_bias = None
        self.shift_kernel = (
            nn.Parameter(torch.empty(D, 1, cfg.conv_kernel, cfg.conv_kernel))
            if cfg.token_shift is TokenShift.CONV_SHIFT else None
        )
        self.r_k = nn.Parameter(torch.empty(cfg.num_heads, cfg.head_dim)) if cfg.bonus_enabled else None

    @torch.no_grad()
    def reset_parameters(self, generator: Optional[torch.Generator] = None) -> None:
        D = self.cfg.embed_dim
        ramp = torch.linspace(0.0, 1.0, D)
        for name in MIX_NAMES:
            getattr(self, f"x_{name}").copy_(ramp)
        for weight in (self.receptance, self.key, self.value):
            nn.init.orthogonal_(weight, gain=1.0, generator=generator)
        nn.init.orthogonal_(self.output, gain=0.5, generator=generator)
        # decay starts between 0.98 and 0.85 across channels
        target = torch.linspace(0.98, 0.85, D, dtype=torch.float64)
        self.w0.copy_(torch.log(-torch.log(target)))
        self.a0.zero_()
        for low, high in ((self.w1, self.w2), (self.a1, self.a2), (self.g1, self.g2)):
            low.zero_()
            nn.init.orthogonal_(high, gain=0.1, generator=generator)
        self.k_k.fill_(0.85)
        self.k_a.fill_(1.0)
        self.ln_x.fill_(1.0)
        if self.gate_weight is not None:
            self.gate_weight.zero_()
            self.gate_bias.zero_()
        if self.shift_kernel is not None:
            self.shift_kernel.copy_(neighbour_average_kernel(D, self.cfg.conv_kernel))
        if self.r_k is not None:
            self.r_k.zero_()

    def forward(self, x: torch.Tensor, grid: PatchGrid) -> torch.Tensor:
        return spatial_mix(x, self, self.cfg, grid)


class ChannelMix(nn.Module):
    """Squared-ReLU MLP on shifted tokens"""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.embed_dim
        self.x_k = nn.Parameter(torch.empty(D))
        self.key = nn.Parameter(torch.empty(D, cfg.hidden_dim))
        self.value = nn.Parameter(torch.empty(cfg.hidden_dim, D))
        self.shift_kernel = (
            nn.Parameter(torch.empty(D, 1, cfg.conv_kernel, cfg.conv_kernel))
            if cfg.token_shift is TokenShift.CONV_SHIFT else None
        )

    @torch.no_grad()
    def reset_parameters(self, generator: Optional[torch.Generator] = None) -> None:
        self.x_k.copy_(torch.linspace(0.0, 1.0, self.cfg.embed_dim))
        nn.init.orthogonal_(self.key, gain=1.0, generator=generator)
        self.value.zero_()
        if self.shift_kernel is not None:
            self.shift_kernel.copy_(neighbour_average_kernel(self.cfg.embed_dim, self.cfg.conv_kernel))

    def forward(self, x: torch.Tensor, grid: PatchGrid) -> torch.Tensor:
        return channel_mix(x, self, self.cfg, grid)


def spatial_mix(x: torch.Tensor, block: SpatialMix, cfg: ModelConfig, grid: PatchGrid) -> torch.Tensor:
    """
    Token shift, r/w/k/v/a/g projections, WKV7 scan (causal or fused
    bidirectional), per-head RMS norm, output gate, output projection.
    """
    batch, length, D = x.shape
    H, d = cfg.num_heads, cfg.head_dim
    x_res = token_residual(x, grid, cfg.token_shift, block.shift_kernel)
    xr, xw, xk, xv, xa, xg = (lerp_params(x, x_res, getattr(block, f"x_{name}")) for name in MIX_NAMES)

    r = matmul(xr, block.receptance)
    k = matmul(xk, block.key)
    v = matmul(xv, block.value)
    w = elementwise("neg_exp_exp", elementwise("add", block.w0, matmul(elementwise("tanh", matmul(xw, block.w1)), block.w2)))
    a = elementwise("sigmoid", elementwise("add", block.a0, matmul(matmul(xa, block.a1), block.a2)))
    g = elementwise("sigmoid", matmul(matmul(xg, block.g1), block.g2))

    def heads(t: torch.Tensor) -> torch.Tensor:
        return t.reshape(batch, length, H, d)

    kappa_hat = l2_normalize(heads(elementwise("mul", k, block.k_k)))
    # k * (1 + (a - 1) * k_a)
    k_tilde = elementwise("mul", k, elementwise("lerp", 1.0, a, block.k_a))
    inputs = WKVStepInputs(heads(r), heads(w), kappa_hat, heads(a), heads(k_tilde), heads(v))

    if cfg.scan is ScanKind.CAUSAL:
        p, _ = wkv7_scan(inputs)
    else:
        if cfg.fusion is FusionKind.WEIGHTED_GATE:
            gate = elementwise("sigmoid", elementwise("add", matmul(x_res, block.gate_weight), block.gate_bias))
        else:
            gate = torch.full_like(r, 0.5)
        p = bi_wkv(inputs, heads(gate))

    p = rms_norm(p, block.ln_x.reshape(H, d), eps=HEAD_NORM_EPS)
    if cfg.bonus_enabled:
        p = elementwise("add", p, bonus_term(inputs.r, inputs.k_tilde, inputs.v, block.r_k))
    return matmul(elementwise("mul", p.reshape(batch, length, D), g), block.output)


def channel_mix(x: torch.Tensor, block: ChannelMix, cfg: ModelConfig, grid: PatchGrid) -> torch.Tensor:
    """relu(x^k' W_k')^2 W_v'"""
    x_res = token_residual(x, grid, cfg.token_shift, block.shift_kernel)
    xk = lerp_params(x, x_res, block.x_k)
    hidden = elementwise("square", elementwise("relu", matmul(xk, block.key)))
    return matmul(hidden, block.value)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig, layer_index: int):
        super().__init__()
        self.cfg = cfg
        self.layer_index = layer_index
        self.ln1 = LayerNorm(cfg.embed_dim)
        self.ln2 = LayerNorm(cfg.embed_dim)
        self.att = SpatialMix(cfg)
        self.ffn = ChannelMix(cfg)

    def forward(
        self,
        x: torch.Tensor,
        grid: PatchGrid,
        train_mode: bool = False,
        generator: Optional[torch.Generator] = None,
    ) -> torch.Tensor:
        rate, depth = self.cfg.drop_path_rate, self.cfg.depth
        x = elementwise("add", x, drop_path(self.att(self.ln1(x), grid), rate, self.layer_index, depth, train_mode, generator))
        x = elementwise("add", x, drop_path(self.ffn(self.ln2(x), grid), rate, self.layer_index, depth, train_mode, generator))
        return x


# ----------------------------------------------------------------------------
# Network
# ----------------------------------------------------------------------------

def patch_embed(
    spectrogram: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor,
    pos_embed: torch.Tensor,
    ln: LayerNorm,
) -> torch.Tensor:
    """LN(Flatten(Conv2D(S)) + P_pos) with stride equal to the patch size"""
    ph, pw = weight.shape[-2:]
    if spectrogram.dim() != 4 or spectrogram.shape[1] != 1:
        raise DimensionError(f"expected spectrograms [B, 1, n_mels, n_frames], got {tuple(spectrogram.shape)}")
    n_mels, n_frames = spectrogram.shape[-2:]
    if n_mels % ph or n_frames % pw:
        raise ConfigError(
            f"input {n_mels}x{n_frames} is not divisible by patch {ph}x{pw}", ["input_size", "patch"]
        )
    tokens = conv2d(spectrogram, weight, stride=(ph, pw), bias=bias).flatten(2).transpose(1, 2)
    if pos_embed.shape[1:] != tokens.shape[1:]:
        raise ConfigError(
            f"positional embedding covers {pos_embed.shape[1]} tokens, input has {tokens.shape[1]}", ["input_size"]
        )
    return ln(elementwise("add", tokens, pos_embed))


class ARWKV(nn.Module):
    """Audio RWKV classifier over [B, 1, n_mels, n_frames] spectrograms"""

    def __init__(self, cfg: ModelConfig, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.cfg = cfg
        D = cfg.embed_dim
        ph, pw = cfg.patch
        self.grid = PatchGrid(*cfg.grid_shape)
        self.patch_weight = nn.Parameter(torch.empty(D, 1, ph, pw))
        self.patch_bias = nn.Parameter(torch.empty(D))
        self.pos_embed = nn.Parameter(torch.empty(1, self.grid.length, D))
        self.ln0 = LayerNorm(D)
        self.blocks = nn.ModuleList(Block(cfg, i) for i in range(cfg.depth))
        self.ln_out = LayerNorm(D)
        self.head_weight = nn.Parameter(torch.empty(D, cfg.num_classes))
        self.head_bias = nn.Parameter(torch.empty(cfg.num_classes))
        self.reset_parameters(generator)

    @torch.no_grad()
    def reset_parameters(self, generator: Optional[torch.Generator] = None) -> None:
        fan_in = self.patch_weight[0].numel()
        bound = 1.0 / math.sqrt(fan_in)
        nn.init.uniform_(self.patch_weight, -bound, bound, generator=generator)
        self.patch_bias.zero_()
        nn.init.normal_(self.pos_embed, 0.0, POS_EMBED_STD, generator=generator)
        for norm in (self.ln0, self.ln_out):
            norm.weight.fill_(1.0)
            norm.bias.zero_()
        for block in self.blocks:
            block.ln1.weight.fill_(1.0)
            block.ln1.bias.zero_()
            block.ln2.weight.fill_(1.0)
            block.ln2.bias.zero_()
            block.att.reset_parameters(generator)
            block.ffn.reset_parameters(generator)
        nn.init.trunc_normal_(self.head_weight, std=0.02, generator=generator)
        self.head_bias.zero_()

    def _grid_for(self, spectrogram: torch.Tensor) -> Tuple[PatchGrid, torch.Tensor]:
        ph, pw = self.cfg.patch
        n_mels, n_frames = spectrogram.shape[-2:]
        if n_mels % ph or n_frames % pw:
            raise ConfigError(
                f"input {n_mels}x{n_frames} is not divisible by patch {ph}x{pw}", ["input_size", "patch"]
            )
        grid = PatchGrid(n_mels // ph, n_frames // pw)
        if grid == self.grid:
            return grid, self.pos_embed
        if not self.cfg.interpolate_pos:
            raise ConfigError(
                f"input grid {grid.rows}x{grid.cols} differs from the trained {self.grid.rows}x{self.grid.cols}; "
                "set interpolate_pos=true to resample the positional embedding",
                ["input_size", "interpolate_pos"],
            )
        pos = F.interpolate(
            self.grid.to_map(self.pos_embed), size=(grid.rows, grid.cols), mode="bilinear", align_corners=False
        )
        return grid, finish_op("interpolate_pos", (self.pos_embed,), grid.to_tokens(pos))

    def forward_features(
        self,
        spectrogram: torch.Tensor,
        train_mode: bool = False,
        generator: Optional[torch.Generator] = None,
    ) -> torch.Tensor:
        """Final-LN token features [B, L, D] before pooling"""
        grid, pos = self._grid_for(spectrogram)
        x = patch_embed(spectrogram, self.patch_weight, self.patch_bias, pos, self.ln0)
        for block in self.blocks:
            x = block(x, grid, train_mode, generator)
        return self.ln_out(x)

    def forward(
        self,
        spectrogram: torch.Tensor,
        train_mode: bool = False,
        generator: Optional[torch.Generator] = None,
    ) -> torch.Tensor:
        pooled = self.forward_features(spectrogram, train_mode, generator).mean(dim=1)
        return elementwise("add", matmul(pooled, self.head_weight), self.head_bias)


def forward(
    model: ARWKV,
    spectrogram: torch.Tensor,
    train_mode: bool = False,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Logits [B, num_classes]"""
    return model(spectrogram, train_mode, generator)


def param_count(cfg: ModelConfig) -> int:
    """Exact number of learnable scalars of ARWKV(cfg)"""
    D, K = cfg.embed_dim, cfg.num_classes
    ph, pw = cfg.patch
    kernel = cfg.conv_kernel ** 2 * D if cfg.token_shift is TokenShift.CONV_SHIFT else 0

    spatial = len(MIX_NAMES) * D + 4 * D * D
    spatial += D + 2 * D * cfg.rank_w
    spatial += D + 2 * D * cfg.rank_a
    spatial += 2 * D * cfg.rank_g
    spatial += 3 * D  # k_k, k_a, ln_x
    if cfg.scan is ScanKind.BIDIRECTIONAL and cfg.fusion is FusionKind.WEIGHTED_GATE:
        spatial += D * D + D
    if cfg.bonus_enabled:
        spatial += D
    spatial += kernel

    channel = D + 2 * D * cfg.hidden_dim + kernel
    block = spatial + channel + 4 * D

    embed = D * ph * pw + D + cfg.seq_len * D + 2 * D
    head = 2 * D + D * K + K
    return embed + cfg.depth * block + head


def load_pretrained(
    model: ARWKV,
    state: Mapping[str, torch.Tensor],
    skip_head: bool = True,
) -> Dict[str, list]:
    """
    Copy matching tensors from a checkpoint state into `model`

    With skip_head, the classifier is left at its fresh initialisation so a
    model with a different class count can be fine-tuned. A positional
    embedding of another grid is resampled bilinearly.

    Returns:
        {"loaded": [...], "skipped": [...]} parameter names
    """
    own = model.state_dict()
    loaded, skipped = [], []
    updates = OrderedDict()
    for name, tensor in state.items():
        if skip_head and name.startswith("head_"):
            skipped.append(name)
            continue
        if name not in own:
            skipped.append(name)
            continue
        target = own[name]
        if name == "pos_embed" and tensor.shape != target.shape:
            old = _square_grid(tensor.shape[1], model.grid)
            fmap = old.to_map(tensor.to(target.dtype))
            tensor = model.grid.to_tokens(
                F.interpolate(fmap, size=(model.grid.rows, model.grid.cols), mode="bilinear", align_corners=False)
            )
        if tensor.shape != target.shape:
            raise DimensionError(f"checkpoint tensor '{name}' has shape {tuple(tensor.shape)}, model expects {tuple(target.shape)}")
        updates[name] = tensor.to(target.dtype)
        loaded.append(name)
    model.load_state_dict(updates, strict=False)
    logger.info("📦 Loaded %d pretrained tensors, skipped %d", len(loaded), len(skipped))
    return {"loaded": loaded, "skipped": skipped}


def _square_grid(length: int, reference: PatchGrid) -> PatchGrid:
    """Guess the source grid of a positional embedding, keeping the reference row count when possible"""
    if length % reference.rows == 0:
        return PatchGrid(reference.rows, length // reference.rows)
    side = int(round(math.sqrt(length)))
    if side * side != length:
        raise DimensionError(f"cannot infer a 2D grid for a positional embedding of {length} tokens")
    return PatchGrid(side, side)
