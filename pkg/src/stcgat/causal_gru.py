"""Graph-gated recurrence: GRU gates computed by NAL-GAT layers.

State passed between steps is the residual output ``h'``; with the residual
connection disabled it is the plain GRU state. The backward direction runs
on the time-reversed input with independent parameters and its outputs are
re-aligned to forward time before concatenation.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import substrate as S
from .substrate import Tensor

Gate = Callable[[Tensor], Tensor]


@dataclass
class GatedCell:
    gate_z: Gate
    gate_r: Gate
    gate_h: Gate
    hidden: int

    def gates(self):
        return (self.gate_z, self.gate_r, self.gate_h)


@dataclass
class ResidualCell:
    cell: GatedCell
    w_input: Tensor | None = None  # [F, H] 1x1 conv on X_t
    w_hidden: Tensor | None = None  # [H, H] 1x1 conv on h_t

    @property
    def hidden(self) -> int:
        return self.cell.hidden

    @property
    def residual(self) -> bool:
        return self.w_input is not None


@dataclass
class BiRecurrentEncoder:
    forward_cell: ResidualCell
    backward_cell: ResidualCell | None = None  # None: forward-only ablation

    @property
    def out_width(self) -> int:
        return self.forward_cell.hidden * (1 if self.backward_cell is None else 2)


def cell_step(cell: GatedCell, x_t: Tensor, h_prev: Tensor) -> Tensor:
    xh = S.concat([x_t, h_prev], axis=-1)
    z = S.sigmoid(cell.gate_z(xh))
    r = S.sigmoid(cell.gate_r(xh))
    cand = S.tanh(cell.gate_h(S.concat([x_t, r * h_prev], axis=-1)))
    return z * h_prev + (1.0 - z) * cand


def residual_step(rcell: ResidualCell, x_t: Tensor, h_prev: Tensor) -> Tensor:
    h = cell_step(rcell.cell, x_t, h_prev)
    if not rcell.residual:
        return h
    return S.relu(S.matmul(x_t, rcell.w_input) + S.matmul(h, rcell.w_hidden))


@contextlib.contextmanager
def _cached_gates(rcell: ResidualCell):
    with contextlib.ExitStack() as stack:
        for gate in rcell.cell.gates():
            if hasattr(gate, "caching"):
                stack.enter_context(gate.caching())
        yield


def unroll(rcell: ResidualCell, x: Tensor, reverse: bool = False) -> Tensor:
    """Run ``rcell`` over the time axis (-2) of ``x`` ``[..., N, T, F]``.

    Output is ``[..., N, T, H]`` indexed in forward time for both directions.
    """
    steps = x.shape[-2]
    h = Tensor(np.zeros(x.shape[:-2] + (rcell.hidden,), dtype=x.dtype))
    outputs: list[Tensor | None] = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    with _cached_gates(rcell):
        for t in order:
            h = residual_step(rcell, x[..., t, :], h)
            outputs[t] = h
    return S.stack(outputs, axis=-2)


def encode_sequence(encoder: BiRecurrentEncoder, x: Tensor) -> Tensor:
    """``[..., N, T, F] -> [..., N, T, 2H]`` (``H`` when forward-only)."""
    fwd = unroll(encoder.forward_cell, x)
    if encoder.backward_cell is None:
        return fwd
    bwd = unroll(encoder.backward_cell, x, reverse=True)
    return S.concat([fwd, bwd], axis=-1)
