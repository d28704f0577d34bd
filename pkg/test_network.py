"""
Tests for the A-RWKV network: shapes, token shifts, parameter counts, causality
"""

import pytest
import torch
from pydantic import ValidationError

from app.exceptions import ConfigError, ContractError
from app.models import FusionKind, ModelConfig, ScanKind, TokenShift, preset_config
from app.services.augment import drop_path, layer_drop_rate
from app.services.network import (
    ARWKV,
    PatchGrid,
    conv_shift_residual,
    forward,
    load_pretrained,
    neighbour_average_kernel,
    param_count,
    patch_embed,
    qshift_residual,
    token_shift_1d,
)


def _spec(cfg: ModelConfig, gen, batch: int = 2, dtype=torch.float32) -> torch.Tensor:
    return torch.randn(batch, 1, *cfg.input_size, generator=gen, dtype=dtype)


def test_forward_shape(tiny_cfg, gen):
    model = ARWKV(tiny_cfg, generator=gen)
    logits = forward(model, _spec(tiny_cfg, gen))
    assert logits.shape == (2, tiny_cfg.num_classes)
    assert bool(torch.isfinite(logits).all())


@pytest.mark.parametrize("shift", list(TokenShift))
@pytest.mark.parametrize("scan,fusion", [
    (ScanKind.CAUSAL, FusionKind.AVERAGE),
    (ScanKind.BIDIRECTIONAL, FusionKind.AVERAGE),
    (ScanKind.BIDIRECTIONAL, FusionKind.WEIGHTED_GATE),
])
def test_param_count_matches_module(tiny_cfg, shift, scan, fusion):
    for bonus in (False, True):
        cfg = tiny_cfg.with_overrides(token_shift=shift, scan=scan, fusion=fusion, bonus_enabled=bonus)
        model = ARWKV(cfg)
        assert param_count(cfg) == sum(p.numel() for p in model.parameters())


@pytest.mark.parametrize("name,target", [("tiny", 6e6), ("small", 23e6), ("base", 91e6), ("t", 6e6)])
def test_preset_budgets(name, target):
    count = param_count(preset_config(name))
    assert 0.8 * target <= count <= 1.2 * target


def test_same_generator_seed_gives_same_init(tiny_cfg):
    a = ARWKV(tiny_cfg, generator=torch.Generator().manual_seed(7))
    b = ARWKV(tiny_cfg, generator=torch.Generator().manual_seed(7))
    for (name, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(pa, pb), name


def test_token_shift_1d_uses_previous_token():
    x = torch.arange(6, dtype=torch.float32).reshape(1, 3, 2)
    res = token_shift_1d(x)
    assert torch.equal(res[0, 0], -x[0, 0])
    assert torch.equal(res[0, 1], x[0, 0] - x[0, 1])


def test_qshift_quarters_move_one_cell():
    grid = PatchGrid(2, 3)
    x = torch.randn(1, grid.length, 4)
    res = qshift_residual(x, grid)
    fmap = grid.to_map(x)
    shifted = grid.to_map(res + x)
    # quarter 0 takes the right neighbour, zero in the last column
    assert torch.allclose(shifted[0, 0, :, :2], fmap[0, 0, :, 1:])
    assert torch.equal(shifted[0, 0, :, 2], torch.zeros(2))
    # quarter 1 takes the left neighbour
    assert torch.allclose(shifted[0, 1, :, 1:], fmap[0, 1, :, :2])
    # quarter 2 takes the row below, quarter 3 the row above
    assert torch.allclose(shifted[0, 2, 0], fmap[0, 2, 1])
    assert torch.allclose(shifted[0, 3, 1], fmap[0, 3, 0])


def test_qshift_requires_channels_divisible_by_four():
    grid = PatchGrid(2, 2)
    with pytest.raises(ConfigError):
        qshift_residual(torch.ones(1, 4, 6), grid)
    with pytest.raises(ValidationError):
        ModelConfig(embed_dim=18, head_dim=6, depth=1, num_classes=2, token_shift="qshift",
                    patch=(4, 4), input_size=(8, 8))


def test_conv_shift_constant_interior_is_zero():
    grid = PatchGrid(4, 4)
    x = torch.ones(1, grid.length, 2)
    res = grid.to_map(conv_shift_residual(x, grid, neighbour_average_kernel(2, 3)))
    assert torch.allclose(res[..., 1:3, 1:3], torch.zeros(1, 2, 2, 2))
    # corners see only three of eight neighbours
    assert res[0, 0, 0, 0].item() == pytest.approx(3 / 8 - 1)


def test_conv_shift_with_delta_kernel_is_zero(gen):
    grid = PatchGrid(3, 5)
    x = torch.randn(2, grid.length, 4, generator=gen)
    kernel = torch.zeros(4, 1, 3, 3)
    kernel[:, :, 1, 1] = 1.0
    assert torch.allclose(conv_shift_residual(x, grid, kernel), torch.zeros_like(x), atol=1e-7)


def test_qshift_on_single_cell_grid_is_negation(gen):
    grid = PatchGrid(1, 1)
    x = torch.randn(3, 1, 8, generator=gen)
    assert torch.equal(qshift_residual(x, grid), -x)


def test_default_input_gives_8_by_64_grid():
    cfg = ModelConfig(embed_dim=16, depth=1, head_dim=8, num_classes=2)
    assert (cfg.patch, cfg.input_size) == ((16, 16), (128, 1024))
    assert cfg.seq_len == 512
    assert ARWKV(cfg).grid == PatchGrid(8, 64)


def test_patch_tokens_are_flattened_row_major():
    grid = PatchGrid(8, 64)
    spec = torch.zeros(1, 1, 128, 1024)
    row, col = 5, 40
    spec[0, 0, 16 * row + 3, 16 * col + 11] = 1.0
    tokens = patch_embed(spec, torch.ones(1, 1, 16, 16), torch.zeros(1), torch.zeros(1, grid.length, 1), lambda t: t)
    assert tokens.shape == (1, 512, 1)
    assert torch.nonzero(tokens[0, :, 0]).flatten().tolist() == [row * grid.cols + col]


def _last_patch_perturbed(spec: torch.Tensor, cfg: ModelConfig) -> torch.Tensor:
    ph, pw = cfg.patch
    changed = spec.clone()
    changed[..., -ph:, -pw:] += 1.0
    return changed


def test_causal_features_ignore_later_tokens(tiny_cfg, gen):
    cfg = tiny_cfg.with_overrides(scan="causal", fusion="average", token_shift="original_1d")
    model = ARWKV(cfg, generator=gen)
    spec = _spec(cfg, gen)
    with torch.no_grad():
        before = model.forward_features(spec)
        after = model.forward_features(_last_patch_perturbed(spec, cfg))
    assert torch.allclose(before[:, :-1], after[:, :-1], atol=1e-6)
    assert not torch.allclose(before[:, -1], after[:, -1])


def test_bidirectional_features_see_later_tokens(tiny_cfg, gen):
    cfg = tiny_cfg.with_overrides(token_shift="original_1d")
    model = ARWKV(cfg, generator=gen)
    spec = _spec(cfg, gen)
    with torch.no_grad():
        before = model.forward_features(spec)
        after = model.forward_features(_last_patch_perturbed(spec, cfg))
    assert not torch.allclose(before[:, 0], after[:, 0], atol=1e-7)


def test_zero_gate_equals_average_fusion(tiny_cfg, gen):
    gated = ARWKV(tiny_cfg.with_overrides(fusion="weighted_gate"), generator=gen)
    with torch.no_grad():
        for block in gated.blocks:
            block.att.gate_weight.zero_()
            block.att.gate_bias.zero_()
    averaged = ARWKV(tiny_cfg.with_overrides(fusion="average"))
    averaged.load_state_dict({k: v for k, v in gated.state_dict().items() if ".gate_" not in k})
    spec = _spec(tiny_cfg, gen)
    with torch.no_grad():
        assert torch.equal(gated(spec), averaged(spec))


def test_forward_is_batch_invariant(tiny_cfg, gen):
    model = ARWKV(tiny_cfg, generator=gen).double()
    a = _spec(tiny_cfg, gen, batch=2, dtype=torch.float64)
    b = _spec(tiny_cfg, gen, batch=3, dtype=torch.float64)
    with torch.no_grad():
        joint = model(torch.cat([a, b]))
        split = torch.cat([model(a), model(b)])
    assert (joint - split).abs().max().item() < 1e-6


def test_indivisible_input_raises_config_error(tiny_cfg, gen):
    model = ARWKV(tiny_cfg, generator=gen)
    with pytest.raises(ConfigError):
        model(torch.randn(1, 1, 8, 18))


def test_other_grid_needs_interpolation(tiny_cfg, gen):
    spec = torch.randn(1, 1, 8, 24, generator=gen)
    with pytest.raises(ConfigError):
        ARWKV(tiny_cfg, generator=gen)(spec)
    model = ARWKV(tiny_cfg.with_overrides(interpolate_pos=True), generator=gen)
    assert model(spec).shape == (1, tiny_cfg.num_classes)


def test_load_pretrained_skips_head_and_resamples_positions(tiny_cfg, gen):
    source = ARWKV(tiny_cfg, generator=gen)
    target_cfg = tiny_cfg.with_overrides(input_size=(8, 32), num_classes=5)
    target = ARWKV(target_cfg, generator=gen)
    head_before = target.head_weight.detach().clone()

    report = load_pretrained(target, source.state_dict())
    assert "pos_embed" in report["loaded"]
    assert {"head_weight", "head_bias"} <= set(report["skipped"])
    assert torch.equal(target.head_weight, head_before)
    assert torch.equal(target.blocks[0].att.receptance, source.blocks[0].att.receptance)
    assert target.pos_embed.shape == (1, target_cfg.seq_len, tiny_cfg.embed_dim)


def test_drop_path_is_identity_in_eval(gen):
    x = torch.randn(4, 3, 2, generator=gen)
    assert torch.equal(drop_path(x, 0.5, 3, 4, train_mode=False), x)
    assert layer_drop_rate(0.5, 0, 4) == 0.0
    assert layer_drop_rate(0.5, 3, 4) == pytest.approx(0.5)


def test_drop_path_drops_whole_samples():
    x = torch.ones(64, 3, 2)
    out = drop_path(x, 0.5, 1, 2, train_mode=True, generator=torch.Generator().manual_seed(0))
    per_sample = out.flatten(1)
    kept = per_sample[:, 0] > 0
    assert torch.all(per_sample[kept] == 2.0)
    assert torch.all(per_sample[~kept] == 0.0)
    assert 0 < int(kept.sum()) < 64


def test_drop_path_rejects_bad_rate():
    with pytest.raises(ContractError):
        drop_path(torch.ones(2, 2), 1.0, 0, 2, train_mode=True)


def test_drop_path_is_unbiased_with_per_layer_rate():
    x = torch.ones(10_000, 2, dtype=torch.float64)
    generator = torch.Generator().manual_seed(3)
    deepest = drop_path(x, 0.5, 3, 4, train_mode=True, generator=generator)
    dropped = (deepest[:, 0] == 0).double().mean().item()
    assert dropped == pytest.approx(0.5, abs=0.03)
    assert deepest.mean().item() == pytest.approx(1.0, abs=0.03)

    middle = drop_path(x, 0.5, 1, 4, train_mode=True, generator=generator)
    assert (middle[:, 0] == 0).double().mean().item() == pytest.approx(0.5 / 3, abs=0.03)
    assert middle.mean().item() == pytest.approx(1.0, abs=0.03)
