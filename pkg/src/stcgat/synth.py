"""Synthetic traffic-like series on a random geometric graph.

For node ``i`` at step ``t``::

    x_i(t) = base_i + amp_i * sin(2*pi*t / period + phase_i) + e_i(t)
    e_i(t) = rho * e_i(t-1) + coupling * mean_{j ~ i} e_j(t-1) + sigma * xi_i(t)

with ``xi ~ N(0, 1)`` i.i.d. and ``e_i(-1) = 0``. Nodes are uniform points in
the unit square; an edge joins every pair closer than ``radius``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import RawDataset
from .errors import ConfigError


@dataclass
class SynthParams:
    n_nodes: int = 10
    steps: int = 2000
    seed: int = 0
    period: int = 288
    rho: float = 0.6
    coupling: float = 0.3
    sigma: float = 1.0
    base_range: tuple[float, float] = (50.0, 70.0)
    amp_range: tuple[float, float] = (5.0, 15.0)
    phase_spread: float = 0.5
    radius: float | None = None
    unit_minutes: int = 5

    def __post_init__(self):
        if self.n_nodes < 1 or self.steps < 1:
            raise ConfigError("synth needs n_nodes >= 1 and steps >= 1")
        if abs(self.rho) + abs(self.coupling) >= 1.0:
            raise ConfigError(f"|rho| + |coupling| must be < 1 for a stable AR process, got {self.rho} + {self.coupling}")

    def graph_radius(self) -> float:
        # about 2.5 expected neighbours per node
        return self.radius if self.radius is not None else float(np.sqrt(2.5 / (np.pi * max(self.n_nodes, 1))))


@dataclass
class SynthResult:
    dataset: RawDataset
    noise: np.ndarray  # [N, steps]
    seasonal: np.ndarray  # [N, steps]
    positions: np.ndarray  # [N, 2]
    params: SynthParams = field(repr=False, default=None)

    def describe(self) -> str:
        p = self.params
        return "\n".join([
            "# synthetic graph-diffusion series",
            "# x_i(t) = base_i + amp_i*sin(2*pi*t/period + phase_i) + e_i(t)",
            "# e_i(t) = rho*e_i(t-1) + coupling*mean_{j~i} e_j(t-1) + sigma*xi_i(t), xi ~ N(0,1)",
            "# graph: uniform points in [0,1]^2, edge when distance < radius",
            f"n_nodes={p.n_nodes}", f"steps={p.steps}", f"seed={p.seed}", f"period={p.period}",
            f"rho={p.rho!r}", f"coupling={p.coupling!r}", f"sigma={p.sigma!r}",
            f"base_range={p.base_range[0]!r},{p.base_range[1]!r}",
            f"amp_range={p.amp_range[0]!r},{p.amp_range[1]!r}",
            f"phase_spread={p.phase_spread!r}", f"radius={p.graph_radius()!r}",
            f"unit_minutes={p.unit_minutes}", f"edges={len(self.dataset.edges)}",
        ]) + "\n"


def generate(params: SynthParams) -> SynthResult:
    rng = np.random.default_rng(params.seed)
    n, steps = params.n_nodes, params.steps
    pos = rng.uniform(0.0, 1.0, (n, 2))
    dist = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
    r = params.graph_radius()
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if dist[i, j] < r]
    adj = np.zeros((n, n))
    for i, j in edges:
        adj[i, j] = adj[j, i] = 1.0
    degree = adj.sum(axis=1, keepdims=True)
    mix = np.divide(adj, degree, out=np.zeros_like(adj), where=degree > 0)

    base = rng.uniform(*params.base_range, n)
    amp = rng.uniform(*params.amp_range, n)
    phase = rng.uniform(-params.phase_spread, params.phase_spread, n)
    t = np.arange(steps)
    seasonal = base[:, None] + amp[:, None] * np.sin(2 * np.pi * t[None, :] / params.period + phase[:, None])

    xi = rng.standard_normal((steps, n))
    noise = np.zeros((n, steps))
    prev = np.zeros(n)
    for k in range(steps):
        prev = params.rho * prev + params.coupling * (mix @ prev) + params.sigma * xi[k]
        noise[:, k] = prev

    readings = (seasonal + noise).astype(np.float32)[:, :, None]
    ds = RawDataset(readings, params.unit_minutes, edges)
    return SynthResult(ds, noise, seasonal, pos, params)
