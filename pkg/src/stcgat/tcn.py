"""Dilated causal temporal convolution stack.

Each node's sequence is convolved along time with the ``2F''`` recurrent
features as channels. A block is two weight-normalised causal convolutions
(relu + dropout after each) plus a residual connection and a final relu.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import substrate as S
from .substrate import Tensor


@dataclass
class WeightNormConv:
    v: Tensor  # [C_out, C_in, l]
    g: Tensor  # [C_out]

    def weight(self) -> Tensor:
        return S.weight_norm(self.v, self.g)


@dataclass
class TcnBlock:
    conv1: WeightNormConv
    conv2: WeightNormConv
    dilation: int
    dropout: float = 0.1
    projection: Tensor | None = None  # [C_out, C_in]; None means identity

    @property
    def kernel(self) -> int:
        return self.conv1.v.shape[-1]


@dataclass
class TcnStack:
    blocks: list[TcnBlock]

    def receptive_field(self) -> int:
        return 1 + sum(2 * (b.kernel - 1) * b.dilation for b in self.blocks)


def tcn_block_forward(block: TcnBlock, x: Tensor, training: bool = False,
                      rng: np.random.Generator | None = None) -> Tensor:
    """``[..., C, T] -> [..., C, T]``: ``relu(x + F(x))``."""
    y = S.dilated_causal_conv1d(x, block.conv1.weight(), block.dilation)
    y = S.dropout(S.relu(y), block.dropout, rng, training)
    y = S.dilated_causal_conv1d(y, block.conv2.weight(), block.dilation)
    y = S.dropout(S.relu(y), block.dropout, rng, training)
    res = x if block.projection is None else S.matmul(block.projection, x)
    return S.relu(res + y)


def tcn_forward(stack: TcnStack, h: Tensor, training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
    """``[..., N, T, C] -> [..., N, T, C]``, convolving over T."""
    x = S.swapaxes(h, -1, -2)
    for block in stack.blocks:
        x = tcn_block_forward(block, x, training, rng)
    return S.swapaxes(x, -1, -2)
