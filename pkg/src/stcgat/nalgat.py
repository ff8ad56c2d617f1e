"""Node-adaptive graph attention (NAL-GAT).

A learnable node embedding ``E`` (``N x d``) plays two roles: it induces a
soft adjacency ``softmax(relu(E E^T))`` and, contracted with a weight pool
``W_p`` (``d x F_in x F_out``), it yields one transform matrix per node.
Attention is dense: every node attends to all ``N`` nodes, and the final
aggregation weight is the row-renormalised product of adjacency and
attention.

Both factors are row softmaxes, so the renormalised product equals one
softmax over the summed logits. That form is used throughout: it is exact
and cannot underflow to an all-zero row when the two factors peak on
different neighbours.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from . import substrate as S
from .errors import ConfigError
from .substrate import Tensor


@dataclass
class NodeEmbedding:
    matrix: Tensor  # [N, d]

    @property
    def n_nodes(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


@dataclass
class AttentionHead:
    """One attention mechanism: a weight pool plus its attention vector.

    Without node embeddings ``pool`` is a plain shared ``[F_in, F_out]`` matrix.
    """

    pool: Tensor
    attn: Tensor  # [2 * F_out]

    @property
    def out_width(self) -> int:
        return self.pool.shape[-1]

    def __post_init__(self):
        if self.attn.shape != (2 * self.out_width,):
            raise ConfigError(
                f"attention vector must have length {2 * self.out_width}, got {self.attn.shape}"
            )


# log-weight given to non-edges of a predefined adjacency; exp() of it is 0
NO_EDGE = -1e30


def adjacency_logits(embedding: NodeEmbedding) -> Tensor:
    e = embedding.matrix
    return S.relu(S.matmul(e, S.transpose(e)))


def adaptive_adjacency(embedding: NodeEmbedding) -> Tensor:
    """Row-stochastic adjacency ``softmax(relu(E E^T))``."""
    return S.softmax_rows(adjacency_logits(embedding))


def fixed_logits(adjacency: Tensor) -> Tensor:
    """Logits of a given row-stochastic adjacency (zeros map to ``NO_EDGE``)."""
    a = adjacency.data
    out = np.full(a.shape, NO_EDGE, dtype=a.dtype)
    np.log(a, out=out, where=a > 0)
    return Tensor(out)


def per_node_weights(embedding: NodeEmbedding | None, pool: Tensor) -> Tensor:
    """Contract the embedding with the pool: node ``i`` gets ``sum_k E[i,k] W_p[k]``.

    Returns ``[N, F_in, F_out]``, or the pool itself when ``embedding`` is
    None (shared-weight ablation).
    """
    if embedding is None:
        return pool
    if pool.ndim != 3 or pool.shape[0] != embedding.dim:
        raise ConfigError(
            f"weight pool {pool.shape} does not match embedding dimension {embedding.dim}"
        )
    d, f_in, f_out = pool.shape
    flat = S.matmul(embedding.matrix, S.reshape(pool, (d, f_in * f_out)))
    return S.reshape(flat, (embedding.n_nodes, f_in, f_out))


def node_transform(x: Tensor, weights: Tensor) -> Tensor:
    """Apply per-node (``[N, F_in, F_out]``) or shared (``[F_in, F_out]``) weights to ``[..., N, F_in]``."""
    if weights.ndim == 2:
        return S.matmul(x, weights)
    lead = x.shape[:-2]
    n, f_in = x.shape[-2:]
    m = int(np.prod(lead)) if lead else 1
    xs = S.swapaxes(S.reshape(x, (m, n, f_in)), 0, 1)  # [N, M, F_in]
    z = S.swapaxes(S.matmul(xs, weights), 0, 1)  # [M, N, F_out]
    return S.reshape(z, lead + (n, weights.shape[-1]))


def _logits(z: Tensor, head: AttentionHead, slope: float) -> Tensor:
    width = head.out_width
    # columns: source half and target half of the attention vector
    proj = S.matmul(z, S.transpose(S.reshape(head.attn, (2, width))))  # [..., N, 2]
    src = proj[..., 0:1]
    dst = S.swapaxes(proj[..., 1:2], -1, -2)
    return S.leaky_relu(src + dst, slope)  # [..., N, N]


def attention_logits(h: Tensor, head: AttentionHead, embedding: NodeEmbedding | None,
                     slope: float = 0.2, weights: Tensor | None = None) -> Tensor:
    """Pre-softmax scores ``leaky_relu(a^T [z_i || z_j])``, ``[..., N, N]``."""
    if weights is None:
        weights = per_node_weights(embedding, head.pool)
    return _logits(node_transform(h, weights), head, slope)


def attention_scores(h: Tensor, head: AttentionHead, embedding: NodeEmbedding | None,
                     slope: float = 0.2, weights: Tensor | None = None) -> Tensor:
    """Dense attention coefficients ``alpha`` (``[..., N, N]``, rows sum to 1)."""
    return S.softmax_rows(attention_logits(h, head, embedding, slope, weights))


def combine_weights(adj_logits: Tensor, attn_logits: Tensor) -> Tensor:
    """Row-renormalised ``A * alpha``, computed as ``softmax(adj_logits + attn_logits)``."""
    return S.softmax_rows(adj_logits + attn_logits)


def head_aggregate(h: Tensor, head: AttentionHead, embedding: NodeEmbedding | None,
                   adj_logits: Tensor, slope: float = 0.2, weights: Tensor | None = None) -> Tensor:
    """``leaky_relu(sum_j w_ij z_j)`` with ``w = combine_weights(adj_logits, e)``."""
    if weights is None:
        weights = per_node_weights(embedding, head.pool)
    z = node_transform(h, weights)
    w = combine_weights(adj_logits, _logits(z, head, slope))
    return S.leaky_relu(S.matmul(w, z), slope)


@dataclass
class NalGatLayer:
    """``Q`` parallel heads, concatenated, then one projecting head.

    ``embedding`` drives the adjacency and the per-node weights of the
    parallel heads; ``out_embedding`` drives the projecting head. When
    ``fixed_adjacency`` is given (predefined-graph ablation) both
    embeddings are None and every pool is a shared matrix.
    """

    embedding: NodeEmbedding | None
    heads: list[AttentionHead]
    out_head: AttentionHead
    out_embedding: NodeEmbedding | None
    leaky_slope: float = 0.2
    fixed_adjacency: Tensor | None = None
    _cache: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.heads:
            raise ConfigError("NAL-GAT layer needs at least one head")
        if (self.embedding is None) != (self.fixed_adjacency is not None):
            raise ConfigError("exactly one of embedding / fixed_adjacency must be set")
        concat_width = sum(h.out_width for h in self.heads)
        if self.out_head.pool.shape[-2] != concat_width:
            raise ConfigError(
                f"output head expects width {self.out_head.pool.shape[-2]}, heads give {concat_width}"
            )

    @property
    def out_width(self) -> int:
        return self.out_head.out_width

    @contextlib.contextmanager
    def caching(self):
        """Reuse adjacency and per-node weights across calls inside the block."""
        self._cache = {}
        try:
            yield self
        finally:
            self._cache = None

    def _memo(self, key, fn):
        if self._cache is None:
            return fn()
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    def adjacency(self) -> Tensor:
        if self.fixed_adjacency is not None:
            return self.fixed_adjacency
        return self._memo("adj", lambda: adaptive_adjacency(self.embedding))

    def adjacency_logits(self) -> Tensor:
        if self.fixed_adjacency is not None:
            return self._memo("fixed", lambda: fixed_logits(self.fixed_adjacency))
        return self._memo("logits", lambda: adjacency_logits(self.embedding))

    def head_weights(self, q: int) -> Tensor:
        return self._memo(q, lambda: per_node_weights(self.embedding, self.heads[q].pool))

    def out_weights(self) -> Tensor:
        return self._memo("out", lambda: per_node_weights(self.out_embedding, self.out_head.pool))

    def __call__(self, x: Tensor) -> Tensor:
        return nalgat_forward(self, x)


def nalgat_forward(layer: NalGatLayer, x: Tensor) -> Tensor:
    """``[..., N, F_in] -> [..., N, F_out]``."""
    adj = layer.adjacency_logits()
    outs = [
        head_aggregate(x, head, layer.embedding, adj, layer.leaky_slope, layer.head_weights(q))
        for q, head in enumerate(layer.heads)
    ]
    joined = S.concat(outs, axis=-1)
    return head_aggregate(joined, layer.out_head, layer.out_embedding, adj,
                          layer.leaky_slope, layer.out_weights())
