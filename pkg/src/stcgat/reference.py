"""Straight-line numpy forward pass, independent of the autodiff substrate.

Every parameter array carries a leading "parameter set" axis ``P`` so one
call evaluates the model under ``P`` parameter vectors at once; this is
what makes element-wise central differences affordable. The pass is
evaluation mode only (no dropout).

``margins`` collects a :class:`_Kinks` tracker holding, for each parameter
set, the smallest distance of any relu / leaky-relu / absolute-value
argument from its kink. Given the sign pattern recorded at a base point it
also flags every parameter set whose evaluation sits on a different side
of some kink, which is exactly when a finite difference is invalid.
"""

from __future__ import annotations

import numpy as np

from .model import ModelConfig


class _Kinks:
    def __init__(self, p: int, base: list | None = None):
        self.min = np.full(p, np.inf)
        self.base = base
        self.signs: list[np.ndarray] = []
        self.crossed = np.zeros(p, dtype=bool)

    def see(self, v: np.ndarray):
        flat = v.reshape(v.shape[0], -1)
        self.min = np.minimum(self.min, np.abs(flat).min(axis=1))
        pos = flat > 0
        if self.base is None:
            self.signs.append(pos[0])
        else:
            self.crossed |= (pos != self.base[len(self.signs)]).any(axis=1)
            self.signs.append(None)


def _softmax(v):
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _leaky(v, slope, k):
    k.see(v)
    return np.where(v < 0, slope * v, v)


def _relu(v, k):
    k.see(v)
    return np.maximum(v, 0.0)


def _attend(inp, pool, attn, emb, adj, slope, k):
    """One head; ``inp`` ``[P,B,N,Fi]`` -> ``[P,B,N,Fo]``."""
    if emb is None:
        z = np.einsum("pbni,pio->pbno", inp, pool)
    else:
        w = np.einsum("pnd,pdio->pnio", emb, pool)
        z = np.einsum("pbni,pnio->pbno", inp, w)
    width = pool.shape[-1]
    src = np.einsum("pbno,po->pbn", z, attn[:, :width])
    dst = np.einsum("pbno,po->pbn", z, attn[:, width:])
    alpha = _softmax(_leaky(src[..., :, None] + dst[..., None, :], slope, k))
    mixed = adj[:, None] * alpha
    mixed = mixed / mixed.sum(axis=-1, keepdims=True)
    return _leaky(np.einsum("pbnm,pbmo->pbno", mixed, z), slope, k)


def _gate(prm, prefix, inp, cfg, fixed_adj, k):
    if cfg.no_node_embedding:
        emb = out_emb = None
        adj = fixed_adj
        pools = [prm[f"{prefix}.head{q}.weight"] for q in range(cfg.heads)]
        out_pool = prm[f"{prefix}.out.weight"]
    else:
        emb = prm[f"{prefix}.embedding"]
        k.see(np.einsum("pnd,pmd->pnm", emb, emb))
        adj = _softmax(np.maximum(np.einsum("pnd,pmd->pnm", emb, emb), 0.0))
        out_emb = prm[f"{prefix}.out.embedding"]
        pools = [prm[f"{prefix}.head{q}.pool"] for q in range(cfg.heads)]
        out_pool = prm[f"{prefix}.out.pool"]
    heads = [_attend(inp, pools[q], prm[f"{prefix}.head{q}.attn"], emb, adj, cfg.leaky_slope, k)
             for q in range(cfg.heads)]
    return _attend(np.concatenate(heads, axis=-1), out_pool, prm[f"{prefix}.out.attn"],
                   out_emb, adj, cfg.leaky_slope, k)


def _sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


def _direction(prm, prefix, x, cfg, fixed_adj, k, reverse):
    p = next(iter(prm.values())).shape[0]
    b, n, t_len, _ = x.shape
    h = np.zeros((p, b, n, cfg.hidden))
    out = [None] * t_len
    steps = range(t_len - 1, -1, -1) if reverse else range(t_len)
    for t in steps:
        xt = np.broadcast_to(x[:, :, t, :], (p, b, n, x.shape[-1]))
        xh = np.concatenate([xt, h], axis=-1)
        z = _sigmoid(_gate(prm, f"{prefix}.gate_z", xh, cfg, fixed_adj, k))
        r = _sigmoid(_gate(prm, f"{prefix}.gate_r", xh, cfg, fixed_adj, k))
        cand = np.tanh(_gate(prm, f"{prefix}.gate_h", np.concatenate([xt, r * h], axis=-1), cfg, fixed_adj, k))
        h_new = z * h + (1.0 - z) * cand
        if not cfg.no_resnet:
            pre = (np.einsum("pbnf,pfh->pbnh", xt, prm[f"{prefix}.residual.w_input"])
                   + np.einsum("pbnh,phk->pbnk", h_new, prm[f"{prefix}.residual.w_hidden"]))
            h_new = _relu(pre, k)
        h = h_new
        out[t] = h
    return np.stack(out, axis=3)  # [P,B,N,T,H]


def _causal_conv(x, w, dilation):
    """``x`` ``[P,B,N,T,C]``, ``w`` ``[P,O,C,l]``: y(s) = sum_i w_i x(s - d*i)."""
    t_len = x.shape[3]
    y = 0.0
    for i in range(w.shape[-1]):
        shift = dilation * i
        if shift >= t_len:
            continue
        xs = np.zeros_like(x)
        xs[:, :, :, shift:] = x[:, :, :, :t_len - shift]
        y = y + np.einsum("pbntc,poc->pbnto", xs, w[..., i])
    return y


def reference_forward(params: dict[str, np.ndarray], cfg: ModelConfig, x: np.ndarray,
                      adjacency: np.ndarray | None = None, margins: list | None = None,
                      base_signs: list | None = None) -> np.ndarray:
    """``[B,N,T,F]`` input and ``[P, ...]`` parameters -> ``[P,B,N,T,F]`` forecast."""
    prm = {name: np.asarray(v, dtype=np.float64) for name, v in params.items()}
    p = next(iter(prm.values())).shape[0]
    x = np.asarray(x, dtype=np.float64)
    k = _Kinks(p, base_signs)
    fixed_adj = None if adjacency is None else np.broadcast_to(np.asarray(adjacency, dtype=np.float64),
                                                              (p,) + np.shape(adjacency))
    h = _direction(prm, "fwd_gru", x, cfg, fixed_adj, k, reverse=False)
    if not cfg.no_reverse_gru:
        h = np.concatenate([h, _direction(prm, "bwd_gru", x, cfg, fixed_adj, k, reverse=True)], axis=-1)
    if not cfg.no_tcn:
        for blk, d in enumerate(cfg.dilations):
            y = h
            for j in (1, 2):
                v = prm[f"tcn.block{blk}.conv{j}.v"]
                g = prm[f"tcn.block{blk}.conv{j}.g"]
                norm = np.sqrt((v * v).sum(axis=(2, 3)))
                w = (g / norm)[:, :, None, None] * v
                y = _relu(_causal_conv(y, w, d), k)
            h = _relu(h + y, k)
    b, n, t_len, c = h.shape[1:]
    flat = h.reshape(p, b, n, t_len * c)
    hid = _relu(np.einsum("pbnk,pkh->pbnh", flat, prm["head.w1"]) + prm["head.b1"][:, None, None, :], k)
    y = np.einsum("pbnh,pho->pbno", hid, prm["head.w2"]) + prm["head.b2"][:, None, None, :]
    if margins is not None:
        margins.append(k)
    return y.reshape(p, b, n, t_len, cfg.n_features)


def reference_l1(params, cfg, x, target, adjacency=None, margins: list | None = None,
                 base_signs: list | None = None) -> np.ndarray:
    """Per-parameter-set mean absolute error, shape ``[P]``."""
    kinks: list = []
    y = reference_forward(params, cfg, x, adjacency, kinks, base_signs)
    resid = y - np.asarray(target, dtype=np.float64)[None]
    k = kinks[0]
    k.see(resid)
    if margins is not None:
        margins.append(k)
    return np.abs(resid).reshape(resid.shape[0], -1).mean(axis=1)
