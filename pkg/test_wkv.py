"""
Tests for the WKV7 scan, the bidirectional fusion and the transition matrix
"""

import pytest
import torch

from app.exceptions import ContractError, DimensionError, NumericError
from app.services.gradcheck_suites import kernel_suite
from app.services.wkv import (
    ScanDirection,
    WKVState,
    WKVStepInputs,
    bi_wkv,
    naive_attention_reference,
    naive_attention_weights,
    spectral_radius,
    transition_matrix,
    transition_spectral_norm,
    wkv7_scan,
    wkv_oracle,
)


def random_inputs(gen, batch=1, length=5, heads=2, d=4, dtype=torch.float32) -> WKVStepInputs:
    shape = (batch, length, heads, d)

    def uniform(low, high):
        return low + (high - low) * torch.rand(shape, generator=gen, dtype=dtype)

    kappa = torch.randn(shape, generator=gen, dtype=dtype)
    kappa = kappa / kappa.norm(dim=-1, keepdim=True)
    return WKVStepInputs(
        r=torch.randn(shape, generator=gen, dtype=dtype),
        w=uniform(0.05, 0.999),
        kappa_hat=kappa,
        a=uniform(0.01, 0.99),
        k_tilde=torch.randn(shape, generator=gen, dtype=dtype) / d ** 0.5,
        v=0.5 * torch.randn(shape, generator=gen, dtype=dtype),
    )


def test_scan_matches_oracle(gen):
    configs = [(d, length) for d in (2, 4, 8) for length in (1, 3, 17, 64)]
    for trial in range(50):
        d, length = configs[trial % len(configs)]
        batch = 1 + trial % 2
        inputs = random_inputs(gen, batch=batch, length=length, heads=2, d=d)
        out, _ = wkv7_scan(inputs)
        expected = wkv_oracle(inputs)
        assert (out - expected).abs().max().item() < 1e-5, (d, length)


def test_oracle_size_limit(gen):
    inputs = random_inputs(gen, length=1025, heads=1, d=4)
    with pytest.raises(ContractError):
        wkv_oracle(inputs)


def test_forward_scan_is_causal(gen):
    for _ in range(20):
        inputs = random_inputs(gen, length=9)
        t = int(torch.randint(0, 8, (1,), generator=gen))
        out, _ = wkv7_scan(inputs)

        def perturb(x):
            x = x.clone()
            x[:, t + 1:] = x[:, t + 1:] * 0.5 + 0.25
            return x

        changed = WKVStepInputs(
            perturb(inputs.r), inputs.w, inputs.kappa_hat, inputs.a, perturb(inputs.k_tilde), perturb(inputs.v)
        )
        out2, _ = wkv7_scan(changed)
        assert torch.equal(out[:, :t + 1], out2[:, :t + 1])


def test_backward_direction_scans_reversed_sequence(gen):
    inputs = random_inputs(gen, length=6)
    out_back, _ = wkv7_scan(inputs, ScanDirection.BACKWARD)
    out_rev, _ = wkv7_scan(inputs.reversed())
    assert torch.equal(out_back, out_rev)


def test_state_carry_splits_the_sequence(gen):
    inputs = random_inputs(gen, length=8, dtype=torch.float64)
    full, final = wkv7_scan(inputs)
    first = inputs.map(lambda x: x[:, :5])
    second = inputs.map(lambda x: x[:, 5:])
    out1, state = wkv7_scan(first)
    out2, final2 = wkv7_scan(second, S0=state)
    assert torch.allclose(torch.cat([out1, out2], dim=1), full, atol=1e-12)
    assert torch.allclose(final2.S, final.S, atol=1e-12)


def test_float64_scan_matches_oracle_tightly(gen):
    inputs = random_inputs(gen, batch=2, length=64, heads=2, d=8, dtype=torch.float64)
    out, _ = wkv7_scan(inputs)
    assert (out - wkv_oracle(inputs)).abs().max().item() < 1e-10


def test_zero_values_give_zero_output(gen):
    inputs = random_inputs(gen, length=12)
    silent = WKVStepInputs(inputs.r, inputs.w, inputs.kappa_hat, inputs.a, inputs.k_tilde, torch.zeros_like(inputs.v))
    out, state = wkv7_scan(silent)
    assert torch.equal(out, torch.zeros_like(out))
    assert torch.equal(state.S, torch.zeros_like(state.S))


def test_state_norm_stays_bounded_over_long_scans(gen):
    inputs = random_inputs(gen, length=4096, heads=2, d=8, dtype=torch.float64)
    state = None
    norms = []
    for start in range(0, 4096, 16):
        _, state = wkv7_scan(inputs.map(lambda x: x[:, start:start + 16]), S0=state)
        norms.append(state.S.norm().item())
    norms = torch.tensor(norms, dtype=torch.float64)
    assert bool(torch.isfinite(norms).all())
    split = 3 * len(norms) // 4
    assert norms[split:].max() <= 1.5 * norms[:split].max()


def test_initial_state_shape_checked(gen):
    inputs = random_inputs(gen, heads=2, d=4)
    with pytest.raises(DimensionError):
        wkv7_scan(inputs, S0=WKVState.zeros(1, 2, 3))


def test_mismatched_input_shapes(gen):
    inputs = random_inputs(gen)
    inputs.v = inputs.v[:, :-1]
    with pytest.raises(DimensionError):
        wkv7_scan(inputs)


def test_non_finite_input_reports_step(gen):
    inputs = random_inputs(gen, length=6)
    inputs.v[0, 3, 0, 0] = float("nan")
    with pytest.raises(NumericError) as exc:
        wkv7_scan(inputs)
    assert exc.value.step == 3


def test_bi_wkv_reversal_identity(gen):
    inputs = random_inputs(gen, length=7)
    gate = torch.rand(inputs.r.shape, generator=gen)
    out = bi_wkv(inputs, gate)
    mirrored = bi_wkv(inputs.reversed(), torch.flip(1 - gate, dims=(1,)))
    assert torch.allclose(mirrored, torch.flip(out, dims=(1,)), atol=1e-5)


def test_bi_wkv_gate_extremes(gen):
    inputs = random_inputs(gen, length=5)
    forward, _ = wkv7_scan(inputs)
    backward, _ = wkv7_scan(inputs, "backward")
    ones = torch.ones_like(inputs.r)
    assert torch.allclose(bi_wkv(inputs, ones), forward)
    assert torch.allclose(bi_wkv(inputs, torch.zeros_like(ones)), torch.flip(backward, dims=(1,)))


def test_bi_wkv_rejects_gate_outside_unit_interval(gen):
    inputs = random_inputs(gen)
    with pytest.raises(ContractError):
        bi_wkv(inputs, torch.full_like(inputs.r, 1.5))


def test_transition_is_contractive(gen):
    d = 8
    draws = 1000
    w = 1e-3 + (1 - 2e-3) * torch.rand(draws, d, generator=gen, dtype=torch.float64)
    a = 1e-3 + (1 - 2e-3) * torch.rand(draws, d, generator=gen, dtype=torch.float64)
    kappa = torch.randn(draws, d, generator=gen, dtype=torch.float64)
    kappa = kappa / kappa.norm(dim=-1, keepdim=True)
    norms = transition_spectral_norm(w, kappa, a)
    assert norms.max().item() <= 1 + 1e-5
    radius = spectral_radius(transition_matrix(w, kappa, a))
    assert radius.max().item() <= 1 + 1e-5


def test_transition_requires_unit_kappa():
    with pytest.raises(ContractError):
        transition_matrix(torch.full((4,), 0.9), torch.ones(4), torch.full((4,), 0.5))


def test_check_invariants(gen):
    inputs = random_inputs(gen)
    inputs.check_invariants()
    inputs.a[0, 0, 0, 0] = 1.2
    with pytest.raises(ContractError):
        inputs.check_invariants()


def test_naive_causal_attention_first_token(gen):
    q = torch.randn(1, 4, 2, 3, generator=gen)
    k = torch.randn(1, 4, 2, 3, generator=gen)
    v = torch.randn(1, 4, 2, 3, generator=gen)
    out = naive_attention_reference(q, k, v, causal=True)
    assert torch.allclose(out[:, 0], v[:, 0])


def test_kernel_gradients_match_finite_differences():
    reports = kernel_suite()
    failed = [(r.name, r.max_rel_err) for r in reports if not r.passed]
    assert not failed


def test_naive_attention_rows_sum_to_one(gen):
    q = torch.randn(2, 7, 3, 4, generator=gen)
    k = torch.randn(2, 7, 3, 4, generator=gen)
    for causal in (False, True):
        weights = naive_attention_weights(q, k, causal)
        assert weights.shape == (2, 3, 7, 7)
        assert (weights.sum(dim=-1) - 1).abs().max().item() <= 1e-6


def test_non_causal_attention_is_permutation_equivariant(gen):
    q, k, v = (torch.randn(1, 6, 2, 4, generator=gen, dtype=torch.float64) for _ in range(3))
    perm = torch.randperm(6, generator=gen)
    out = naive_attention_reference(q, k, v, causal=False)
    permuted = naive_attention_reference(q[:, perm], k[:, perm], v[:, perm], causal=False)
    assert torch.allclose(permuted, out[:, perm], atol=1e-12)
