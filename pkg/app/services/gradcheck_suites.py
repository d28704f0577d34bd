"""
Finite-difference gradient suites for primitives, WKV kernels and a whole model

Each check reduces the op output to a scalar with fixed random weights so
every output coordinate contributes to the compared gradient.
"""

import logging
from typing import Callable, Dict, Iterable, List, Sequence

import torch
from rich.console import Console
from rich.table import Table
from torch.func import functional_call

from app.exceptions import ConfigError
from app.models import ModelConfig, ScanKind, TokenShift
from app.services import tensor_ops as ops
from app.services.network import ARWKV
from app.services.tensor_ops import GradcheckReport, gradcheck
from app.services.wkv import WKVStepInputs, bi_wkv, wkv7_scan
from app.utils.rng import RngStreams

logger = logging.getLogger(__name__)

SCOPES = ("ops", "kernel", "model", "bonus")
TOLERANCES: Dict[str, float] = {"ops": 1e-6, "kernel": 1e-4, "model": 1e-3, "bonus": 1e-3}
# Parameter tensors with at most this many entries are checked at every coordinate.
MODEL_MAX_COORDS = 32


def _weighted(out: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    return (out * weights).sum()


def _scalarize(fn: Callable[..., torch.Tensor], shape: Sequence[int], generator: torch.Generator) -> Callable[..., torch.Tensor]:
    weights = torch.randn(*shape, generator=generator, dtype=torch.float64)
    return lambda *xs: _weighted(fn(*xs), weights)


def _randn(generator: torch.Generator, *shape: int) -> torch.Tensor:
    return torch.randn(*shape, generator=generator, dtype=torch.float64)


def ops_suite(seed: int = 0, tol: float = TOLERANCES["ops"]) -> List[GradcheckReport]:
    gen = RngStreams(seed).torch("init", 0)
    x = _randn(gen, 3, 4)
    y = _randn(gen, 3, 4)
    t = torch.rand(3, 4, generator=gen, dtype=torch.float64)
    cases = [
        ("matmul", lambda a, b: ops.matmul(a, b), [_randn(gen, 2, 3, 4), _randn(gen, 2, 4, 5)], (2, 3, 5)),
        ("add", lambda a, b: ops.elementwise("add", a, b), [x, y], (3, 4)),
        ("sub", lambda a, b: ops.elementwise("sub", a, b), [x, y], (3, 4)),
        ("mul", lambda a, b: ops.elementwise("mul", a, b), [x, y], (3, 4)),
        ("sigmoid", lambda a: ops.elementwise("sigmoid", a), [x], (3, 4)),
        ("tanh", lambda a: ops.elementwise("tanh", a), [x], (3, 4)),
        # keep inputs away from the kink at zero
        ("relu", lambda a: ops.elementwise("relu", a), [x.sign() * (x.abs() + 0.1)], (3, 4)),
        ("exp", lambda a: ops.elementwise("exp", a), [x], (3, 4)),
        ("neg_exp_exp", lambda a: ops.elementwise("neg_exp_exp", a), [0.5 * x - 1.0], (3, 4)),
        ("square", lambda a: ops.elementwise("square", a), [x], (3, 4)),
        ("lerp", lambda a, b, w: ops.elementwise("lerp", a, b, w), [x, y, t], (3, 4)),
        ("conv2d", lambda a, w: ops.conv2d(a, w, stride=1, padding=1), [_randn(gen, 1, 2, 5, 5), _randn(gen, 3, 2, 3, 3)], (1, 3, 5, 5)),
        ("dwconv2d", ops.dwconv2d, [_randn(gen, 1, 3, 4, 5), _randn(gen, 3, 1, 3, 3)], (1, 3, 4, 5)),
        ("layernorm", ops.layernorm, [_randn(gen, 3, 6), _randn(gen, 6), _randn(gen, 6)], (3, 6)),
        ("rms_norm", ops.rms_norm, [_randn(gen, 3, 6), _randn(gen, 6)], (3, 6)),
        ("l2_normalize", ops.l2_normalize, [_randn(gen, 3, 6)], (3, 6)),
        ("flip", lambda a: ops.flip(a, 1), [_randn(gen, 2, 5, 3)], (2, 5, 3)),
    ]
    return [gradcheck(_scalarize(fn, shape, gen), inputs, tol=tol, name=name) for name, fn, inputs, shape in cases]


def _kernel_inputs(gen: torch.Generator, batch: int = 1, length: int = 6, heads: int = 2, d: int = 4) -> List[torch.Tensor]:
    shape = (batch, length, heads, d)

    def uniform(low: float, high: float) -> torch.Tensor:
        return low + (high - low) * torch.rand(shape, generator=gen, dtype=torch.float64)

    kappa = _randn(gen, *shape)
    kappa = kappa / kappa.norm(dim=-1, keepdim=True)
    return [_randn(gen, *shape), uniform(0.5, 0.95), kappa, uniform(0.1, 0.9), _randn(gen, *shape), _randn(gen, *shape)]


def kernel_suite(seed: int = 0, tol: float = TOLERANCES["kernel"]) -> List[GradcheckReport]:
    """wkv7_scan in both directions and the gated bidirectional fusion"""
    gen = RngStreams(seed).torch("init", 1)
    inputs = _kernel_inputs(gen)
    shape = tuple(inputs[0].shape)
    gate = 0.2 + 0.6 * torch.rand(shape, generator=gen, dtype=torch.float64)

    def scan(direction: str) -> Callable[..., torch.Tensor]:
        return lambda *xs: wkv7_scan(WKVStepInputs(*xs), direction)[0]

    reports = [
        gradcheck(_scalarize(scan("forward"), shape, gen), inputs, tol=tol, name="wkv7_scan[forward]"),
        gradcheck(_scalarize(scan("backward"), shape, gen), inputs, tol=tol, name="wkv7_scan[backward]"),
        gradcheck(
            _scalarize(lambda *xs: bi_wkv(WKVStepInputs(*xs[:6]), xs[6]), shape, gen),
            inputs + [gate],
            tol=tol,
            name="bi_wkv",
        ),
    ]
    return reports


def gradcheck_config(
    token_shift: TokenShift = TokenShift.CONV_SHIFT,
    scan: ScanKind = ScanKind.BIDIRECTIONAL,
    bonus_enabled: bool = False,
) -> ModelConfig:
    """Two-block model small enough for per-coordinate finite differences"""
    return ModelConfig(
        embed_dim=16,
        depth=2,
        head_dim=8,
        patch=(4, 4),
        input_size=(12, 16),
        num_classes=3,
        token_shift=token_shift,
        scan=scan,
        bonus_enabled=bonus_enabled,
    )


def model_suite(
    seed: int = 0,
    tol: float = TOLERANCES["model"],
    configs: Iterable[ModelConfig] = (),
    max_coords: int = MODEL_MAX_COORDS,
) -> List[GradcheckReport]:
    """
    Cross-entropy of a full forward pass against every parameter tensor

    Zero-initialised projections are perturbed first so every path carries gradient.
    Defaults to the three token shifts on a bidirectional model without the bonus term.
    """
    configs = list(configs) or [gradcheck_config(shift) for shift in TokenShift]
    streams = RngStreams(seed)
    reports = []
    for index, cfg in enumerate(configs):
        gen = streams.torch("init", 10 + index)
        model = ARWKV(cfg, generator=gen).double()
        params = {
            name: (p.detach() + 0.1 * _randn(gen, *p.shape)) for name, p in model.named_parameters()
        }
        names = list(params)
        spec = _randn(gen, 2, 1, *cfg.input_size)
        target = torch.softmax(_randn(gen, 2, cfg.num_classes), dim=-1)

        def loss(*tensors: torch.Tensor) -> torch.Tensor:
            logits = functional_call(model, dict(zip(names, tensors)), (spec,))
            return -(target * torch.log_softmax(logits, dim=-1)).sum()

        label = f"model[{cfg.token_shift.value},{cfg.scan.value}{',bonus' if cfg.bonus_enabled else ''}]"
        reports.append(
            gradcheck(loss, [params[n] for n in names], tol=tol, name=label, max_coords=max_coords, generator=gen)
        )
    return reports


def bonus_suite(seed: int = 0, tol: float = TOLERANCES["bonus"]) -> List[GradcheckReport]:
    """Whole-model check with the r * k * v bonus term switched on, causal and bidirectional"""
    configs = [gradcheck_config(scan=scan, bonus_enabled=True) for scan in ScanKind]
    return model_suite(seed=seed, tol=tol, configs=configs)


def run_suites(scope: str = "all", seed: int = 0) -> Dict[str, List[GradcheckReport]]:
    """Run one scope or all of them"""
    suites = {"ops": ops_suite, "kernel": kernel_suite, "model": model_suite, "bonus": bonus_suite}
    wanted = SCOPES if scope == "all" else (scope,)
    unknown = [s for s in wanted if s not in suites]
    if unknown:
        raise ConfigError(f"Unknown gradcheck scope '{scope}'. Known: {list(SCOPES) + ['all']}", ["scope"])
    results = {}
    for name in wanted:
        logger.info("🔬 Running %s gradcheck suite", name)
        results[name] = suites[name](seed=seed)
        failed = [r.name for r in results[name] if not r.passed]
        if failed:
            logger.warning("⚠️ %s suite failures: %s", name, failed)
    return results


def report_rows(results: Dict[str, List[GradcheckReport]]) -> List[Dict[str, object]]:
    return [
        {
            "scope": scope,
            "name": r.name,
            "max_rel_err": float(r.max_rel_err),
            "tol": r.tol,
            "passed": "true" if r.passed else "false",
            "message": r.message or None,
        }
        for scope, reports in results.items()
        for r in reports
    ]


def render_reports(results: Dict[str, List[GradcheckReport]], console: Console = None) -> None:
    table = Table(title="Gradient Checks", show_header=True, header_style="bold magenta")
    table.add_column("Scope")
    table.add_column("Check")
    table.add_column("Max rel err", justify="right")
    table.add_column("Tol", justify="right")
    table.add_column("Status")
    for scope, reports in results.items():
        for r in reports:
            status = "[green]pass[/green]" if r.passed else "[red]FAIL[/red]"
            table.add_row(scope, r.name, f"{r.max_rel_err:.2e}", f"{r.tol:.0e}", status)
    (console or Console()).print(table)


def all_passed(results: Dict[str, List[GradcheckReport]]) -> bool:
    return all(r.passed for reports in results.values() for r in reports)
