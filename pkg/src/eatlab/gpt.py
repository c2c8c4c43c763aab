"""Causal decoder-only transformer on the eatlab autodiff engine.

Pre-norm blocks: x + Attn(LN(x)), then x + MLP(LN(x)), with a final layer
norm. Attention masks strictly-upper positions with a large negative logit
before softmax, so position i only ever reads positions j <= i.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    add,
    dropout,
    gelu,
    layer_norm,
    matmul,
    reshape,
    scale,
    softmax,
    transpose,
)

# Large enough that exp(logit - max) underflows to exactly 0.0 for masked
# entries, which is what makes the causality tests bit-exact.
_MASK_VALUE = -1e30


@dataclass(frozen=True)
class GptConfig:
    n_layers: int = 3
    n_heads: int = 4
    d_model: int = 64
    max_tokens: int = 60
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.max_tokens < 3:
            raise ValueError(f"max_tokens must be >= 3, got {self.max_tokens}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads


_MASK_CACHE: dict[int, np.ndarray] = {}


@dataclass(frozen=True)
class CausalMask:
    token_count: int

    def additive(self) -> np.ndarray:
        n = self.token_count
        m = _MASK_CACHE.get(n)
        if m is None:
            m = np.zeros((n, n))
            m[np.triu_indices(n, k=1)] = _MASK_VALUE
            _MASK_CACHE[n] = m
        return m


def init_gpt_params(cfg: GptConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Normal(0, 0.02) projections, zero biases, unit layer-norm gains."""
    d = cfg.d_model
    params: dict[str, Tensor] = {}

    def w(name, shape):
        params[name] = Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)

    def z(name, shape):
        params[name] = Tensor(np.zeros(shape), requires_grad=True)

    def ones(name, shape):
        params[name] = Tensor(np.ones(shape), requires_grad=True)

    for i in range(cfg.n_layers):
        p = f"block{i}."
        ones(p + "ln1.gain", (d,))
        z(p + "ln1.bias", (d,))
        for proj in ("wq", "wk", "wv", "wo"):
            w(p + "attn." + proj, (d, d))
        z(p + "attn.bo", (d,))
        ones(p + "ln2.gain", (d,))
        z(p + "ln2.bias", (d,))
        w(p + "mlp.w1", (d, 4 * d))
        z(p + "mlp.b1", (4 * d,))
        w(p + "mlp.w2", (4 * d, d))
        z(p + "mlp.b2", (d,))
    ones("ln_f.gain", (d,))
    z("ln_f.bias", (d,))
    return params


def _split_heads(x: Tensor, batch: int, n: int, heads: int, d_k: int) -> Tensor:
    return transpose(reshape(x, (batch, n, heads, d_k)), (0, 2, 1, 3))


def self_attention(
    tokens: Tensor,
    params: dict[str, Tensor],
    cfg: GptConfig,
    mask: CausalMask,
    prefix: str = "block0.",
    dropout_rng: np.random.Generator | None = None,
    collect_attn: list | None = None,
) -> Tensor:
    """Multi-head masked self-attention over tokens of shape (B, n, d)."""
    batch, n, d = tokens.shape
    if n > cfg.max_tokens:
        raise ValueError(f"sequence length {n} exceeds max_tokens {cfg.max_tokens}")
    if n != mask.token_count:
        raise ValueError(f"mask is for {mask.token_count} tokens, got {n}")
    h, dk = cfg.n_heads, cfg.d_k

    # 1/sqrt(d_k) applied to q (smaller than the n x n logits)
    q = _split_heads(scale(matmul(tokens, params[prefix + "attn.wq"]), 1.0 / math.sqrt(dk)),
                     batch, n, h, dk)
    k = _split_heads(matmul(tokens, params[prefix + "attn.wk"]), batch, n, h, dk)
    v = _split_heads(matmul(tokens, params[prefix + "attn.wv"]), batch, n, h, dk)

    logits = add(matmul(q, transpose(k, (0, 1, 3, 2))), Tensor(mask.additive()))
    attn = softmax(logits, axis=-1)
    if collect_attn is not None:
        collect_attn.append(attn.data.copy())
    attn = dropout(attn, cfg.dropout_rate, dropout_rng)

    z = matmul(attn, v)  # (B, h, n, dk)
    z = reshape(transpose(z, (0, 2, 1, 3)), (batch, n, d))
    return add(matmul(z, params[prefix + "attn.wo"]), params[prefix + "attn.bo"])


def transformer_block(
    tokens: Tensor,
    params: dict[str, Tensor],
    cfg: GptConfig,
    mask: CausalMask,
    prefix: str,
    dropout_rng: np.random.Generator | None = None,
    collect_attn: list | None = None,
) -> Tensor:
    normed = layer_norm(tokens, params[prefix + "ln1.gain"], params[prefix + "ln1.bias"])
    x = add(tokens, self_attention(normed, params, cfg, mask, prefix, dropout_rng, collect_attn))
    normed2 = layer_norm(x, params[prefix + "ln2.gain"], params[prefix + "ln2.bias"])
    hidden = gelu(add(matmul(normed2, params[prefix + "mlp.w1"]), params[prefix + "mlp.b1"]))
    out = add(matmul(hidden, params[prefix + "mlp.w2"]), params[prefix + "mlp.b2"])
    out = dropout(out, cfg.dropout_rate, dropout_rng)
    return add(x, out)


def gpt_forward(
    token_embeddings: Tensor,
    params: dict[str, Tensor],
    cfg: GptConfig,
    dropout_rng: np.random.Generator | None = None,
    collect_attn: list | None = None,
) -> Tensor:
    """Run the block stack. Accepts (n, d) or (B, n, d); returns same shape."""
    squeeze = token_embeddings.ndim == 2
    x = token_embeddings
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    n = x.shape[1]
    if n > cfg.max_tokens:
        raise ValueError(f"sequence length {n} exceeds max_tokens {cfg.max_tokens}")
    mask = CausalMask(n)
    for i in range(cfg.n_layers):
        x = transformer_block(x, params, cfg, mask, f"block{i}.", dropout_rng, collect_attn)
    x = layer_norm(x, params["ln_f.gain"], params["ln_f.bias"])
    if squeeze:
        x = reshape(x, x.shape[1:])
    return x
