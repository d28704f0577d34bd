"""
Tests for the tensor primitives, the gradient tape and the gradient checker
"""

import math

import pytest
import torch

from app.exceptions import ConfigError, ContractError, DimensionError, NumericError
from app.services import tensor_ops as ops
from app.services.gradcheck_suites import (
    MODEL_MAX_COORDS,
    SCOPES,
    bonus_suite,
    gradcheck_config,
    model_suite,
    ops_suite,
    run_suites,
)
from app.services.tensor_ops import GradTape, backward, gradcheck


def test_matmul_rejects_mismatched_inner_dims():
    with pytest.raises(DimensionError):
        ops.matmul(torch.ones(2, 3), torch.ones(4, 5))


def test_matmul_broadcasts_batch_dims():
    out = ops.matmul(torch.ones(2, 1, 3, 4), torch.ones(5, 4, 6))
    assert out.shape == (2, 5, 3, 6)


def test_elementwise_unknown_kind_and_arity():
    with pytest.raises(ContractError):
        ops.elementwise("softplus", torch.ones(2))
    with pytest.raises(ContractError):
        ops.elementwise("add", torch.ones(2))


def test_elementwise_broadcast_error():
    with pytest.raises(DimensionError):
        ops.elementwise("mul", torch.ones(2, 3), torch.ones(4))


def test_lerp_accepts_scalar_start():
    a = torch.tensor([0.2, 0.5])
    t = torch.tensor([1.0, 0.0])
    out = ops.elementwise("lerp", 1.0, a, t)
    assert torch.allclose(out, torch.tensor([0.2, 1.0]))


def test_neg_exp_exp_stays_in_unit_interval():
    x = torch.tensor([-50.0, -1.0, 0.0, 3.0, 200.0])
    out = ops.elementwise("neg_exp_exp", x)
    assert bool((out > 0).all())
    assert bool((out <= 1).all())
    assert out[2].item() == pytest.approx(math.exp(-1.0))


def test_non_finite_output_raises_numeric_error():
    with pytest.raises(NumericError) as exc:
        ops.elementwise("exp", torch.tensor([1000.0]))
    assert exc.value.op == "exp"


def test_dwconv2d_matches_sliding_window(gen):
    x = torch.randn(1, 2, 4, 5, generator=gen, dtype=torch.float64)
    w = torch.randn(2, 1, 3, 3, generator=gen, dtype=torch.float64)
    out = ops.dwconv2d(x, w)
    assert out.shape == x.shape

    padded = torch.nn.functional.pad(x, (1, 1, 1, 1))
    expected = torch.zeros_like(x)
    for c in range(2):
        for i in range(4):
            for j in range(5):
                expected[0, c, i, j] = (padded[0, c, i:i + 3, j:j + 3] * w[c, 0]).sum()
    assert torch.allclose(out, expected, atol=1e-12)


def test_conv2d_matches_sliding_window(gen):
    x = torch.randn(1, 2, 6, 6, generator=gen, dtype=torch.float64)
    w = torch.randn(3, 2, 3, 3, generator=gen, dtype=torch.float64)
    b = torch.randn(3, generator=gen, dtype=torch.float64)
    out = ops.conv2d(x, w, stride=1, padding=1, bias=b)
    assert out.shape == (1, 3, 6, 6)

    padded = torch.nn.functional.pad(x, (1, 1, 1, 1))
    expected = torch.zeros(1, 3, 6, 6, dtype=torch.float64)
    for o in range(3):
        for i in range(6):
            for j in range(6):
                expected[0, o, i, j] = (padded[0, :, i:i + 3, j:j + 3] * w[o]).sum() + b[o]
    assert (out - expected).abs().max().item() < 1e-6


def test_conv2d_patch_stride_visits_each_patch_once(gen):
    x = torch.randn(1, 1, 8, 12, generator=gen, dtype=torch.float64)
    w = torch.randn(2, 1, 4, 4, generator=gen, dtype=torch.float64)
    out = ops.conv2d(x, w, stride=(4, 4))
    assert out.shape == (1, 2, 2, 3)
    for r in range(2):
        for c in range(3):
            patch = x[0, 0, 4 * r:4 * r + 4, 4 * c:4 * c + 4]
            assert out[0, 1, r, c].item() == pytest.approx((patch * w[1, 0]).sum().item(), abs=1e-12)


def test_dwconv2d_rejects_even_kernel():
    with pytest.raises(ConfigError):
        ops.dwconv2d(torch.ones(1, 2, 4, 4), torch.ones(2, 1, 2, 2))


def test_conv2d_kernel_larger_than_input():
    with pytest.raises(DimensionError):
        ops.conv2d(torch.ones(1, 1, 2, 2), torch.ones(1, 1, 3, 3))


def test_layernorm_normalises_rows(gen):
    x = 3.0 + 2.0 * torch.randn(4, 8, generator=gen, dtype=torch.float64)
    out = ops.layernorm(x, torch.ones(8, dtype=torch.float64), torch.zeros(8, dtype=torch.float64))
    assert torch.allclose(out.mean(dim=-1), torch.zeros(4, dtype=torch.float64), atol=1e-10)
    assert torch.allclose(out.var(dim=-1, unbiased=False), torch.ones(4, dtype=torch.float64), atol=1e-4)


def test_l2_normalize_unit_norm_and_zero_row():
    x = torch.tensor([[3.0, 4.0], [0.0, 0.0]])
    out = ops.l2_normalize(x)
    assert torch.allclose(out[0], torch.tensor([0.6, 0.8]))
    assert torch.equal(out[1], torch.zeros(2))


def test_flip_axis_out_of_range():
    with pytest.raises(DimensionError):
        ops.flip(torch.ones(2, 3), 2)


def test_tape_records_ops_and_returns_leaf_gradients():
    tape = GradTape()
    x = tape.watch("x", torch.tensor([1.0, 2.0], requires_grad=True))
    y = tape.watch("y", torch.tensor([3.0, 4.0], requires_grad=True))
    unused = tape.watch("unused", torch.tensor([5.0], requires_grad=True))
    with tape:
        loss = ops.elementwise("mul", x, y).sum()
    assert [node.op for node in tape.nodes] == ["mul"]

    grads = backward(tape, loss)
    assert torch.equal(grads["x"], y.detach())
    assert torch.equal(grads["y"], x.detach())
    assert torch.equal(grads["unused"], torch.zeros_like(unused))


def test_backward_accumulates():
    tape = GradTape()
    x = tape.watch("x", torch.tensor([2.0], requires_grad=True))
    backward(tape, (x * 3).sum())
    grads = backward(tape, (x * 3).sum(), accumulate=True)
    assert grads["x"].item() == pytest.approx(6.0)


def test_backward_requires_scalar():
    tape = GradTape()
    x = tape.watch("x", torch.ones(2, requires_grad=True))
    with pytest.raises(ContractError):
        backward(tape, x * 2)


def test_watch_rejects_derived_tensor():
    x = torch.ones(2, requires_grad=True)
    with pytest.raises(ContractError):
        GradTape().watch("y", x * 2)


def test_gradcheck_passes_on_correct_gradient(gen):
    x = torch.randn(5, generator=gen, dtype=torch.float64)
    report = gradcheck(lambda t: torch.tanh(t).pow(2).sum(), [x], name="tanh_sq")
    assert report.passed
    assert report.max_rel_err < 1e-8


def test_gradcheck_reports_wrong_gradient(gen):
    x = torch.randn(4, generator=gen, dtype=torch.float64) + 2.0
    # analytic gradient is 1, true gradient is 2x + 1
    report = gradcheck(lambda t: (t.detach() ** 2 + t).sum(), [x], name="broken")
    assert not report.passed
    assert report.worst_input == 0
    assert "broken" in report.message


def test_gradcheck_requires_float64():
    with pytest.raises(ContractError):
        gradcheck(lambda t: t.sum(), [torch.ones(2)])


def test_primitive_suite_passes():
    reports = ops_suite()
    failed = [(r.name, r.max_rel_err) for r in reports if not r.passed]
    assert not failed
    names = {r.name for r in reports}
    assert {"matmul", "lerp", "conv2d", "dwconv2d", "layernorm", "rms_norm", "l2_normalize", "flip"} <= names


def test_small_tensors_are_checked_at_every_coordinate(gen):
    calls = []

    def f(t):
        calls.append(1)
        return t.pow(3).sum()

    gradcheck(f, [torch.randn(MODEL_MAX_COORDS, generator=gen, dtype=torch.float64)], max_coords=MODEL_MAX_COORDS)
    # one analytic pass plus two evaluations per coordinate
    assert len(calls) == 1 + 2 * MODEL_MAX_COORDS

    calls.clear()
    gradcheck(f, [torch.randn(4 * MODEL_MAX_COORDS, generator=gen, dtype=torch.float64)],
              max_coords=MODEL_MAX_COORDS, generator=gen)
    assert len(calls) == 1 + 2 * MODEL_MAX_COORDS


def test_model_gradcheck_config_leaves_bonus_off():
    assert not gradcheck_config().bonus_enabled
    assert gradcheck_config(bonus_enabled=True).bonus_enabled
    assert "bonus" in SCOPES


def test_unknown_gradcheck_scope():
    with pytest.raises(ConfigError):
        run_suites("everything")


@pytest.mark.slow
def test_model_suite_passes_for_every_token_shift():
    reports = model_suite()
    assert [r.name for r in reports] == [
        "model[original_1d,bidirectional]",
        "model[qshift,bidirectional]",
        "model[conv_shift,bidirectional]",
    ]
    assert all(r.passed for r in reports), [(r.name, r.max_rel_err) for r in reports]


@pytest.mark.slow
def test_bonus_suite_passes():
    reports = bonus_suite()
    assert all(r.name.endswith(",bonus]") for r in reports)
    assert all(r.passed for r in reports), [(r.name, r.max_rel_err) for r in reports]
