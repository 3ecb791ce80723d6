"""Scaled dot-product attention and pre-LN Transformer blocks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numeric as nx
from .errors import ShapeMismatch
from .numeric import Tensor


@dataclass
class AttentionParams:
    Wq: Tensor
    Wk: Tensor
    Wv: Tensor
    Wo: Tensor
    heads: int = field(default=1)

    @property
    def width(self) -> int:
        return self.Wq.shape[0]


@dataclass
class TransformerBlockParams:
    ln1_gain: Tensor
    ln1_bias: Tensor
    attn: AttentionParams
    ln2_gain: Tensor
    ln2_bias: Tensor
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor


def init_attention(rng: np.random.Generator, width: int, heads: int = 1) -> AttentionParams:
    if width % heads:
        raise ValueError(f"width {width} is not divisible by {heads} heads")
    return AttentionParams(
        Wq=nx.glorot(rng, width, width),
        Wk=nx.glorot(rng, width, width),
        Wv=nx.glorot(rng, width, width),
        Wo=nx.glorot(rng, width, width, 0.5),
        heads=heads,
    )


def init_transformer_block(rng: np.random.Generator, width: int, heads: int = 1) -> TransformerBlockParams:
    return TransformerBlockParams(
        ln1_gain=nx.parameter(np.ones(width)),
        ln1_bias=nx.parameter(np.zeros(width)),
        attn=init_attention(rng, width, heads),
        ln2_gain=nx.parameter(np.ones(width)),
        ln2_bias=nx.parameter(np.zeros(width)),
        W1=nx.glorot(rng, width, 2 * width),
        b1=nx.parameter(np.zeros(2 * width)),
        W2=nx.glorot(rng, 2 * width, width, 0.5),
        b2=nx.parameter(np.zeros(width)),
    )


def attention_weights(Q, K, d_k: int) -> Tensor:
    """Row-stochastic matrix ``softmax(Q K^T / sqrt(d_k))``."""
    Q, K = nx.as_tensor(Q), nx.as_tensor(K)
    if Q.shape[-1] != K.shape[-1]:
        raise ShapeMismatch(f"query width {Q.shape[-1]} != key width {K.shape[-1]}")
    return nx.softmax_rows((Q * (1.0 / np.sqrt(d_k))) @ K.T)


def attention(Q, K, V, d_k: int | None = None) -> Tensor:
    """``softmax(Q K^T / sqrt(d_k)) V``."""
    Q, K, V = nx.as_tensor(Q), nx.as_tensor(K), nx.as_tensor(V)
    if K.shape[0] != V.shape[0]:
        raise ShapeMismatch(f"{K.shape[0]} keys but {V.shape[0]} values")
    return attention_weights(Q, K, d_k or Q.shape[-1]) @ V


def multi_head(p: AttentionParams, Xq: Tensor, Xkv: Tensor) -> Tensor:
    Q, K, V = Xq @ p.Wq, Xkv @ p.Wk, Xkv @ p.Wv
    if p.heads == 1:
        out = attention(Q, K, V, p.width)
    else:
        dh = p.width // p.heads
        parts = []
        for h in range(p.heads):
            cols = slice(h * dh, (h + 1) * dh)
            parts.append(attention(Q[:, cols], K[:, cols], V[:, cols], dh))
        out = nx.concat(parts, axis=1)
    return out @ p.Wo


def _mlp(p: TransformerBlockParams, F: Tensor) -> Tensor:
    h = nx.silu(nx.linear(nx.layernorm_rows(F, p.ln2_gain, p.ln2_bias), p.W1, p.b1))
    return nx.linear(h, p.W2, p.b2) + F


def _check(p: TransformerBlockParams, *Fs: Tensor) -> None:
    for F in Fs:
        if F.ndim != 2 or F.shape[1] != p.attn.width or F.shape[0] == 0:
            raise ShapeMismatch(f"expected non-empty (M, {p.attn.width}) features, got {F.shape}")


def self_attention_block(p: TransformerBlockParams, F) -> Tensor:
    F = nx.as_tensor(F)
    _check(p, F)
    n = nx.layernorm_rows(F, p.ln1_gain, p.ln1_bias)
    return _mlp(p, multi_head(p.attn, n, n) + F)


def cross_attention_block(p: TransformerBlockParams, F_src, F_tgt) -> tuple[Tensor, Tensor]:
    """Each side attends to the other with the same weights."""
    F_src, F_tgt = nx.as_tensor(F_src), nx.as_tensor(F_tgt)
    _check(p, F_src, F_tgt)
    ns = nx.layernorm_rows(F_src, p.ln1_gain, p.ln1_bias)
    nt = nx.layernorm_rows(F_tgt, p.ln1_gain, p.ln1_bias)
    src = _mlp(p, multi_head(p.attn, ns, nt) + F_src)
    tgt = _mlp(p, multi_head(p.attn, nt, ns) + F_tgt)
    return src, tgt
