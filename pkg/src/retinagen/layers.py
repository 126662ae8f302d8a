"""Attention and transformer building blocks on top of the tensor engine.

Parameters live in flat ``dict[str, Tensor]`` maps with dotted prefixes
("enc.0.self.wq0", ...), which keeps them directly usable by the optimizer,
gradient clipping, and the checkpoint container.  Every init_* helper adds
its parameters under a prefix; the matching apply function reads them back.

Blocks follow the post-norm arrangement: x = LN(x + Sublayer(x)).  Attention
masks are additive; masked positions get -1e30, which after the max-shifted
softmax underflows to an exact 0.0 weight, so masked inputs cannot perturb
kept positions even in the last bit.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor, add, concat, dropout, layer_norm, matmul, mul, relu, softmax
from .errors import ConfigError, ShapeError

__all__ = [
    "MASK_VALUE",
    "xavier_uniform",
    "sinusoid_table",
    "causal_mask",
    "init_linear",
    "linear",
    "init_attention",
    "multi_head_attention",
    "init_ffn",
    "ffn",
    "init_layer_norm",
    "layer_norm_affine",
    "init_encoder_layer",
    "encoder_layer",
    "init_decoder_layer",
    "decoder_layer",
]

MASK_VALUE = -1e30


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def sinusoid_table(n_positions: int, dim: int) -> np.ndarray:
    """Fixed sine/cosine position encodings, [n_positions, dim]."""
    if dim % 2 != 0:
        raise ConfigError(f"sinusoid dimension must be even, got {dim}")
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / dim)
    table = np.zeros((n_positions, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


def causal_mask(n: int) -> np.ndarray:
    """Additive [n, n] mask: 0 on and below the diagonal, MASK_VALUE above."""
    mask = np.zeros((n, n), dtype=np.float64)
    mask[np.triu_indices(n, k=1)] = MASK_VALUE
    return mask


# -- linear --------------------------------------------------------------------


def init_linear(rng, params: dict, prefix: str, fan_in: int, fan_out: int, bias: bool = True):
    params[f"{prefix}.w"] = Tensor(xavier_uniform(rng, fan_in, fan_out), requires_grad=True)
    if bias:
        params[f"{prefix}.b"] = Tensor(np.zeros(fan_out), requires_grad=True)


def linear(params: dict, prefix: str, x: Tensor) -> Tensor:
    out = matmul(x, params[f"{prefix}.w"])
    bias = params.get(f"{prefix}.b")
    return add(out, bias) if bias is not None else out


# -- multi-head scaled dot-product attention ---------------------------------------


def init_attention(rng, params: dict, prefix: str, dim: int, n_heads: int) -> None:
    if dim % n_heads != 0:
        raise ConfigError(f"hidden dim {dim} not divisible by {n_heads} heads")
    d_head = dim // n_heads
    for h in range(n_heads):
        for name in ("wq", "wk", "wv"):
            params[f"{prefix}.{name}{h}"] = Tensor(
                xavier_uniform(rng, dim, d_head), requires_grad=True
            )
    params[f"{prefix}.wo"] = Tensor(xavier_uniform(rng, dim, dim), requires_grad=True)


def multi_head_attention(
    params: dict,
    prefix: str,
    query: Tensor,
    keys: Tensor,
    values: Tensor,
    n_heads: int,
    mask: np.ndarray | None = None,
) -> tuple[Tensor, list[Tensor]]:
    """Scaled dot-product attention; returns (output, per-head weight rows).

    ``mask`` is an additive [n_query, n_key] array applied to every head's
    scores before the softmax.
    """
    if keys.shape != values.shape:
        raise ShapeError(f"keys {keys.shape} and values {values.shape} must match")
    d_head = query.shape[1] // n_heads
    scale_factor = 1.0 / math.sqrt(d_head)
    mask_t = Tensor(mask) if mask is not None else None
    head_outs = []
    head_weights = []
    for h in range(n_heads):
        q = matmul(query, params[f"{prefix}.wq{h}"])
        k = matmul(keys, params[f"{prefix}.wk{h}"])
        v = matmul(values, params[f"{prefix}.wv{h}"])
        scores = matmul(q, k.T) * scale_factor
        if mask_t is not None:
            scores = add(scores, mask_t)
        weights = softmax(scores, axis=-1)
        head_weights.append(weights)
        head_outs.append(matmul(weights, v))
    joined = head_outs[0] if n_heads == 1 else concat(head_outs, axis=1)
    return matmul(joined, params[f"{prefix}.wo"]), head_weights


# -- feed-forward ----------------------------------------------------------------


def init_ffn(rng, params: dict, prefix: str, dim: int, ffn_dim: int) -> None:
    init_linear(rng, params, f"{prefix}.in", dim, ffn_dim)
    init_linear(rng, params, f"{prefix}.out", ffn_dim, dim)


def ffn(params: dict, prefix: str, x: Tensor) -> Tensor:
    return linear(params, f"{prefix}.out", relu(linear(params, f"{prefix}.in", x)))


# -- affine layer norm -------------------------------------------------------------


def init_layer_norm(params: dict, prefix: str, dim: int) -> None:
    params[f"{prefix}.gain"] = Tensor(np.ones(dim), requires_grad=True)
    params[f"{prefix}.bias"] = Tensor(np.zeros(dim), requires_grad=True)


def layer_norm_affine(params: dict, prefix: str, x: Tensor) -> Tensor:
    return add(mul(layer_norm(x), params[f"{prefix}.gain"]), params[f"{prefix}.bias"])


# -- transformer layers -------------------------------------------------------------


def _maybe_dropout(x: Tensor, rate: float, train: bool, rng) -> Tensor:
    if rate > 0.0 and train:
        return dropout(x, rate, train=True, rng=rng)
    return x


def init_encoder_layer(rng, params: dict, prefix: str, dim: int, n_heads: int, ffn_dim: int):
    init_attention(rng, params, f"{prefix}.self", dim, n_heads)
    init_layer_norm(params, f"{prefix}.ln1", dim)
    init_ffn(rng, params, f"{prefix}.ffn", dim, ffn_dim)
    init_layer_norm(params, f"{prefix}.ln2", dim)


def encoder_layer(
    params: dict,
    prefix: str,
    x: Tensor,
    n_heads: int,
    dropout_rate: float = 0.0,
    train: bool = False,
    rng=None,
) -> tuple[Tensor, list[Tensor]]:
    """Unmasked self-attention block; returns (output, self-attention weights)."""
    attn_out, weights = multi_head_attention(params, f"{prefix}.self", x, x, x, n_heads)
    attn_out = _maybe_dropout(attn_out, dropout_rate, train, rng)
    x = layer_norm_affine(params, f"{prefix}.ln1", add(x, attn_out))
    ffn_out = _maybe_dropout(ffn(params, f"{prefix}.ffn", x), dropout_rate, train, rng)
    x = layer_norm_affine(params, f"{prefix}.ln2", add(x, ffn_out))
    return x, weights


def init_decoder_layer(rng, params: dict, prefix: str, dim: int, n_heads: int, ffn_dim: int):
    init_attention(rng, params, f"{prefix}.self", dim, n_heads)
    init_layer_norm(params, f"{prefix}.ln1", dim)
    init_attention(rng, params, f"{prefix}.cross", dim, n_heads)
    init_layer_norm(params, f"{prefix}.ln2", dim)
    init_ffn(rng, params, f"{prefix}.ffn", dim, ffn_dim)
    init_layer_norm(params, f"{prefix}.ln3", dim)


def decoder_layer(
    params: dict,
    prefix: str,
    x: Tensor,
    memory: Tensor,
    n_heads: int,
    self_mask: np.ndarray,
    dropout_rate: float = 0.0,
    train: bool = False,
    rng=None,
) -> tuple[Tensor, list[Tensor], list[Tensor]]:
    """Masked self-attention + cross-attention block.

    Returns (output, self-attention weights, cross-attention weights); the
    cross weights are what the explainability trace records.
    """
    self_out, self_w = multi_head_attention(
        params, f"{prefix}.self", x, x, x, n_heads, mask=self_mask
    )
    self_out = _maybe_dropout(self_out, dropout_rate, train, rng)
    x = layer_norm_affine(params, f"{prefix}.ln1", add(x, self_out))
    cross_out, cross_w = multi_head_attention(
        params, f"{prefix}.cross", x, memory, memory, n_heads
    )
    cross_out = _maybe_dropout(cross_out, dropout_rate, train, rng)
    x = layer_norm_affine(params, f"{prefix}.ln2", add(x, cross_out))
    ffn_out = _maybe_dropout(ffn(params, f"{prefix}.ffn", x), dropout_rate, train, rng)
    x = layer_norm_affine(params, f"{prefix}.ln3", add(x, ffn_out))
    return x, self_w, cross_w
