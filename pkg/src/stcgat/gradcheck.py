"""Element-wise central-difference check of every model gradient.

Analytic gradients come from the substrate's reverse pass; numeric ones
from the straight-line reference forward, evaluated for many perturbed
parameter vectors per call. Both run in float64 on a small config.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import substrate as S
from .errors import ConfigError
from .model import STCGAT, ModelConfig, count_parameters, l1_loss
from .reference import reference_forward, reference_l1

TINY = dict(n_nodes=4, window=6, n_features=1, hidden=8, heads=2, embed_dim=4, head_hidden=16)
MAX_ELEMENTS = 20_000
STEP = 1e-5
TOLERANCE = 1e-4
# relative error uses max(|analytic|, |numeric|, FLOOR) as denominator
FLOOR = 1e-6
# elements whose +-h evaluation crosses a kink are retried with h / SHRINK**k
SHRINK = 10.0
SHRINK_TRIES = 3


def tiny_config(**overrides) -> ModelConfig:
    values = dict(TINY, dtype="float64")
    values.update(overrides)
    return ModelConfig(**values)


@dataclass
class ParamCheck:
    name: str
    size: int
    max_rel_error: float
    max_abs_error: float
    worst_index: int
    passed: bool


@dataclass
class GradcheckReport:
    checks: list[ParamCheck]
    tolerance: float
    kink_margin: float
    forward_gap: float
    data_seed: int
    extra: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[str]:
        return [c.name for c in self.checks if not c.passed]


def analytic_gradients(model: STCGAT, x: np.ndarray, target: np.ndarray) -> dict[str, np.ndarray]:
    model.params.zero_grad()
    loss = l1_loss(model.forward(x), target)
    S.backward(loss)
    return {p.name: p.grad.copy() for p in model.params}


def _flatten(model: STCGAT):
    names = model.params.names()
    base = [model.params[n].data.astype(np.float64) for n in names]
    offsets = np.concatenate([[0], np.cumsum([b.size for b in base])]).astype(int)
    return names, base, offsets, np.concatenate([b.ravel() for b in base])


def base_signs(model: STCGAT, x, target) -> tuple[list, float]:
    """Kink sign pattern and smallest kink margin at the unperturbed point."""
    prm = {p.name: p.data[None].astype(np.float64) for p in model.params}
    margins: list = []
    reference_l1(prm, model.config, x, target, model.adjacency, margins)
    return margins[0].signs, float(margins[0].min[0])


def _central(model, x, target, idx, h, signs, chunk):
    names, base, offsets, theta = _flatten(model)
    grad = np.empty(len(idx))
    crossed = np.zeros(len(idx), dtype=bool)
    for lo in range(0, len(idx), chunk):
        part = idx[lo:lo + chunk]
        stacked = np.repeat(theta[None, :], 2 * len(part), axis=0)
        rows = np.arange(len(part))
        stacked[2 * rows, part] += h
        stacked[2 * rows + 1, part] -= h
        prm = {n: stacked[:, offsets[i]:offsets[i + 1]].reshape((-1,) + base[i].shape)
               for i, n in enumerate(names)}
        kinks: list = []
        losses = reference_l1(prm, model.config, x, target, model.adjacency, kinks, signs)
        grad[lo:lo + len(part)] = (losses[0::2] - losses[1::2]) / (2 * h)
        flags = kinks[0].crossed
        crossed[lo:lo + len(part)] = flags[0::2] | flags[1::2]
    return grad, crossed


def numeric_gradients(model: STCGAT, x: np.ndarray, target: np.ndarray, h: float = STEP,
                      chunk: int = 256, signs: list | None = None):
    """Central differences of the reference L1 loss for every parameter element.

    Returns ``(gradients by name, number of elements still crossing a kink)``.
    An element whose perturbation moves any relu / leaky / abs argument
    across zero is recomputed with a smaller step.
    """
    names, base, offsets, theta = _flatten(model)
    if signs is None:
        signs, _ = base_signs(model, x, target)
    idx = np.arange(theta.size)
    grad, crossed = _central(model, x, target, idx, h, signs, chunk)
    step = h
    for _ in range(SHRINK_TRIES):
        if not crossed.any():
            break
        step /= SHRINK
        bad = np.flatnonzero(crossed)
        grad[bad], crossed[bad] = _central(model, x, target, idx[bad], step, signs, chunk)
    out = {n: grad[offsets[i]:offsets[i + 1]].reshape(base[i].shape) for i, n in enumerate(names)}
    return out, int(crossed.sum())


def _sample(model: STCGAT, seed: int, batch: int) -> tuple[np.ndarray, np.ndarray]:
    cfg = model.config
    rng = np.random.default_rng(seed)
    shape = (batch, cfg.n_nodes, cfg.window, cfg.n_features)
    return rng.uniform(-1, 1, shape), rng.uniform(-1, 1, shape)


def gradcheck(config: ModelConfig | None = None, seed: int = 0, batch: int = 2,
              h: float = STEP, tolerance: float = TOLERANCE, adjacency: np.ndarray | None = None,
              corrupt: str | None = None, max_tries: int = 50) -> GradcheckReport:
    """Compare analytic and numeric gradients for every named parameter.

    ``corrupt`` names a parameter whose analytic gradient is deliberately
    perturbed (harness self-test).
    """
    config = (config or tiny_config()).replace(dtype="float64")
    total = count_parameters(config)
    if total > MAX_ELEMENTS:
        raise ConfigError(f"gradcheck config has {total} parameter elements; the bound is {MAX_ELEMENTS}")
    model = STCGAT(config, adjacency=adjacency)
    if corrupt is not None and corrupt not in model.params:
        raise ConfigError(f"unknown parameter {corrupt!r}")

    for data_seed in range(seed, seed + max_tries):
        x, target = _sample(model, data_seed, batch)
        signs, margin = base_signs(model, x, target)
        numeric, crossed = numeric_gradients(model, x, target, h, signs=signs)
        if crossed == 0:
            break
    else:
        raise ConfigError(f"finite differences kept crossing kinks at {max_tries} sample points")

    prm = {p.name: p.data[None] for p in model.params}
    with S.no_grad():
        ours = model.forward(x).data
    gap = float(np.max(np.abs(reference_forward(prm, config, x, model.adjacency)[0] - ours)))

    analytic = analytic_gradients(model, x, target)
    if corrupt is not None:
        g = analytic[corrupt].reshape(-1)
        g[0] += 1e-2 * (1.0 + abs(g[0]))

    checks = []
    for name in model.params.names():
        a, n = analytic[name].ravel(), numeric[name].ravel()
        err = np.abs(a - n)
        rel = err / np.maximum(np.maximum(np.abs(a), np.abs(n)), FLOOR)
        worst = int(np.argmax(rel))
        checks.append(ParamCheck(name, a.size, float(rel[worst]), float(err.max()), worst,
                                 bool(rel[worst] < tolerance)))
    return GradcheckReport(checks, tolerance, margin, gap, data_seed)


def format_report(report: GradcheckReport) -> str:
    width = max(len(c.name) for c in report.checks)
    lines = [f"{'parameter':<{width}} {'size':>6} {'max_rel_err':>12} {'max_abs_err':>12}  status"]
    for c in report.checks:
        lines.append(f"{c.name:<{width}} {c.size:>6} {c.max_rel_error:>12.3e} {c.max_abs_error:>12.3e}  "
                     f"{'ok' if c.passed else 'FAIL'}")
    lines.append(f"tolerance={report.tolerance:g} forward_gap={report.forward_gap:.3e} "
                 f"data_seed={report.data_seed} kink_crossings=0")
    lines.append("PASS" if report.passed else f"FAIL: {', '.join(report.failures())}")
    return "\n".join(lines) + "\n"
