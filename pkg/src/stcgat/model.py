"""STCGAT assembly: graph-gated bidirectional recurrence, TCN, prediction head."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from typing import Iterable, Iterator, Mapping

import numpy as np

from . import substrate as S
from .causal_gru import BiRecurrentEncoder, GatedCell, ResidualCell, encode_sequence
from .errors import ConfigError, ContractError, DimensionError, NumericError
from .nalgat import AttentionHead, NalGatLayer, NodeEmbedding
from .substrate import Parameter, Tensor
from .tcn import TcnBlock, TcnStack, WeightNormConv, tcn_forward

ABLATIONS = ("no_node_embedding", "no_resnet", "no_reverse_gru", "no_tcn")
DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class ModelConfig:
    n_nodes: int
    n_features: int = 1
    window: int = 12
    embed_dim: int = 10
    hidden: int = 64
    heads: int = 3
    head_hidden: int = 512
    kernel: int = 2
    tcn_levels: int = 4
    dropout: float = 0.1
    leaky_slope: float = 0.2
    lr: float = 1e-3
    batch: int = 64
    max_epochs: int = 300
    patience: int = 15
    seed: int = 0
    dtype: str = "float32"
    no_node_embedding: bool = False
    no_resnet: bool = False
    no_reverse_gru: bool = False
    no_tcn: bool = False

    def __post_init__(self):
        for name in ("n_nodes", "n_features", "window", "embed_dim", "hidden", "heads",
                     "head_hidden", "kernel", "tcn_levels", "batch", "max_epochs", "patience"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    @property
    def dilations(self) -> list[int]:
        return [2 ** k for k in range(self.tcn_levels)]

    @property
    def directions(self) -> int:
        return 1 if self.no_reverse_gru else 2

    @property
    def channels(self) -> int:
        """Width of the recurrent output that feeds the TCN and the head."""
        return self.hidden * self.directions

    @property
    def ablations(self) -> list[str]:
        return [a for a in ABLATIONS if getattr(self, a)]

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def canonical(self) -> str:
        """Key-sorted ``key=value`` lines; the basis of the config hash."""
        items = sorted(self.to_dict().items())
        return "".join(f"{k}={_fmt(v)}\n" for k, v in items)

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    @classmethod
    def from_mapping(cls, values: Mapping[str, object]) -> "ModelConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in kinds:
                raise ConfigError(f"unknown model config key {key!r}")
            kwargs[key] = _coerce(raw, kinds[key], key)
        if "n_nodes" not in kwargs:
            raise ConfigError("model config needs n_nodes")
        return cls(**kwargs)

    @classmethod
    def parse(cls, text: str) -> "ModelConfig":
        values = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise ConfigError(f"malformed config line {line!r}")
            values[key.strip()] = val.strip()
        return cls.from_mapping(values)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(raw, kind, key):
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "bool":
            if isinstance(raw, bool):
                return raw
            text = str(raw).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            return int(raw)
        if kind == "float":
            return float(raw)
        return str(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r}: cannot read {raw!r} as {kind}") from None


def apply_ablation(config: ModelConfig, *flags: str) -> ModelConfig:
    """Return ``config`` with the named ablation flags switched on."""
    for flag in flags:
        if flag not in ABLATIONS:
            raise ConfigError(f"unknown ablation {flag!r}; choose from {', '.join(ABLATIONS)}")
    return config.replace(**{f: True for f in flags})


def predefined_adjacency(edges: Iterable[tuple[int, int]], n_nodes: int) -> np.ndarray:
    """Symmetric binary adjacency with self-loops, row-normalised."""
    adj = np.eye(n_nodes)
    for i, j in edges:
        adj[i, j] = adj[j, i] = 1.0
    return adj / adj.sum(axis=1, keepdims=True)


class ModelParams:
    """Ordered, uniquely named collection of :class:`Parameter`."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, value: np.ndarray) -> Parameter:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        p = Parameter(name, value)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def n_elements(self) -> int:
        return sum(p.data.size for p in self)

    def zero_grad(self):
        S.zero_grads(self)

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state(self, state: Mapping[str, np.ndarray]):
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ConfigError(f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in self._params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ConfigError(f"parameter {name!r}: shape {value.shape} != {p.shape}")
            p.data = value.astype(p.dtype, copy=True)


class _Init:
    def __init__(self, params: ModelParams, rng: np.random.Generator, dtype):
        self.params, self.rng, self.dtype = params, rng, dtype

    def uniform(self, name, shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return self.params.add(name, self.rng.uniform(-bound, bound, shape).astype(self.dtype))

    def embedding(self, name, shape):
        return self.params.add(name, self.rng.uniform(-0.5, 0.5, shape).astype(self.dtype))

    def zeros(self, name, shape):
        return self.params.add(name, np.zeros(shape, dtype=self.dtype))


class STCGAT:
    """The full model. ``adjacency`` is required only for the no-embedding ablation."""

    def __init__(self, config: ModelConfig, adjacency: np.ndarray | None = None):
        self.config = config
        dtype = config.np_dtype
        if config.no_node_embedding:
            if adjacency is None:
                raise ConfigError("no_node_embedding needs a predefined adjacency (edge list)")
            adjacency = np.asarray(adjacency, dtype=dtype)
            if adjacency.shape != (config.n_nodes, config.n_nodes):
                raise ConfigError(f"adjacency shape {adjacency.shape} does not match {config.n_nodes} nodes")
            self.adjacency = adjacency
        else:
            self.adjacency = None
        self.params = ModelParams()
        init = _Init(self.params, np.random.default_rng(config.seed), dtype)

        fwd = self._residual_cell(init, "fwd_gru")
        bwd = None if config.no_reverse_gru else self._residual_cell(init, "bwd_gru")
        self.encoder = BiRecurrentEncoder(fwd, bwd)

        c = config.channels
        self.tcn = None
        if not config.no_tcn:
            blocks = []
            for k, d in enumerate(config.dilations):
                convs = []
                for j in (1, 2):
                    v = init.uniform(f"tcn.block{k}.conv{j}.v", (c, c, config.kernel), c * config.kernel)
                    g = self.params.add(f"tcn.block{k}.conv{j}.g",
                                        np.sqrt((v.data.astype(np.float64) ** 2).sum(axis=(1, 2))).astype(dtype))
                    convs.append(WeightNormConv(v, g))
                blocks.append(TcnBlock(convs[0], convs[1], d, config.dropout))
            self.tcn = TcnStack(blocks)

        t, f, f3 = config.window, config.n_features, config.head_hidden
        self.w1 = init.uniform("head.w1", (t * c, f3), t * c)
        self.b1 = init.zeros("head.b1", (f3,))
        self.w2 = init.uniform("head.w2", (f3, t * f), f3)
        self.b2 = init.zeros("head.b2", (t * f,))

    # -- construction ----------------------------------------------------
    def _gate(self, init: _Init, prefix: str, f_in: int) -> NalGatLayer:
        cfg = self.config
        n, d, width, q = cfg.n_nodes, cfg.embed_dim, cfg.hidden, cfg.heads
        shared = cfg.no_node_embedding
        embedding = None if shared else NodeEmbedding(init.embedding(f"{prefix}.embedding", (n, d)))
        heads = []
        for i in range(q):
            if shared:
                pool = init.uniform(f"{prefix}.head{i}.weight", (f_in, width), f_in)
            else:
                pool = init.uniform(f"{prefix}.head{i}.pool", (d, f_in, width), f_in)
            attn = init.uniform(f"{prefix}.head{i}.attn", (2 * width,), 2 * width)
            heads.append(AttentionHead(pool, attn))
        out_embedding = None if shared else NodeEmbedding(init.embedding(f"{prefix}.out.embedding", (n, d)))
        if shared:
            out_pool = init.uniform(f"{prefix}.out.weight", (q * width, width), q * width)
        else:
            out_pool = init.uniform(f"{prefix}.out.pool", (d, q * width, width), q * width)
        out_attn = init.uniform(f"{prefix}.out.attn", (2 * width,), 2 * width)
        fixed = Tensor(self.adjacency) if shared else None
        return NalGatLayer(embedding, heads, AttentionHead(out_pool, out_attn), out_embedding,
                           cfg.leaky_slope, fixed)

    def _residual_cell(self, init: _Init, prefix: str) -> ResidualCell:
        cfg = self.config
        f_in = cfg.n_features + cfg.hidden
        cell = GatedCell(*(self._gate(init, f"{prefix}.gate_{g}", f_in) for g in ("z", "r", "h")),
                         hidden=cfg.hidden)
        if cfg.no_resnet:
            return ResidualCell(cell)
        w_in = init.uniform(f"{prefix}.residual.w_input", (cfg.n_features, cfg.hidden), cfg.n_features)
        w_h = init.uniform(f"{prefix}.residual.w_hidden", (cfg.hidden, cfg.hidden), cfg.hidden)
        return ResidualCell(cell, w_in, w_h)

    # -- computation -----------------------------------------------------
    def forward(self, x, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """``[B, N, T, F] -> [B, N, T, F]`` in normalised units."""
        cfg = self.config
        x = x if isinstance(x, Tensor) else Tensor(x)
        expected = (cfg.n_nodes, cfg.window, cfg.n_features)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise DimensionError(f"model input must be [B, {', '.join(map(str, expected))}], got {x.shape}")
        if x.dtype != cfg.np_dtype:
            x = Tensor(x.data.astype(cfg.np_dtype))
        b = x.shape[0]
        h = _finite(encode_sequence(self.encoder, x), "encoder")
        if self.tcn is not None:
            h = _finite(tcn_forward(self.tcn, h, training, rng), "tcn")
        flat = S.reshape(h, (b, cfg.n_nodes, cfg.window * cfg.channels))
        hidden = S.relu(S.matmul(flat, self.w1) + self.b1)
        y = S.matmul(hidden, self.w2) + self.b2
        y = _finite(y, "head")
        return S.reshape(y, (b, cfg.n_nodes, cfg.window, cfg.n_features))

    __call__ = forward

    def predict(self, x: np.ndarray, batch: int | None = None) -> np.ndarray:
        """Evaluation-mode forward without taping, batched over the first axis."""
        x = np.asarray(x)
        step = batch or self.config.batch
        with S.no_grad():
            parts = [self.forward(x[i:i + step]).data for i in range(0, len(x), step)]
        return np.concatenate(parts, axis=0)


def _finite(t: Tensor, layer: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values after {layer}")
    return t


def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error over every element."""
    target = S.as_tensor(target, like=pred)
    if pred.shape != target.shape:
        raise ContractError(f"l1_loss: prediction {pred.shape} vs target {target.shape}")
    return S.mean(S.tabs(pred - target))


def count_parameters(config: ModelConfig) -> int:
    """Closed-form learnable element count for ``config``."""
    n, f, d, h, q = config.n_nodes, config.n_features, config.embed_dim, config.hidden, config.heads
    f_in = f + h
    if config.no_node_embedding:
        gate = q * (f_in * h + 2 * h) + q * h * h + 2 * h
    else:
        gate = n * d + q * (d * f_in * h + 2 * h) + n * d + d * q * h * h + 2 * h
    cell = 3 * gate + (0 if config.no_resnet else f * h + h * h)
    c = config.channels
    tcn = 0 if config.no_tcn else config.tcn_levels * 2 * (c * c * config.kernel + c)
    t, f3 = config.window, config.head_hidden
    head = t * c * f3 + f3 + f3 * t * f + t * f
    return config.directions * cell + tcn + head
