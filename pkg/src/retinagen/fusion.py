"""Fusing image rows and keyword rows into one conditioning context.

Two strategies share the FusedContext interface:

* "average": memory is the raw concatenation of both row blocks and the
  global vector is the midpoint of the two block means.  No parameters.
* "transfuser": each block attends to the other (keywords query image
  patches, patches query keywords), with residual + layer norm; memory is
  the concatenation of the two refined blocks and the global vector is a
  learned sigmoid-gated blend of their means.

Memory always puts the image block first, so row index < num_image_rows
means an image patch and the rest are keywords.  The trace field keeps the
cross-attention maps (mean over heads) for the explainability exporter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, add, concat, matmul, mul, reshape, sigmoid, sub, tmean
from .errors import ConfigError
from .layers import (
    init_attention,
    init_layer_norm,
    init_linear,
    layer_norm_affine,
    linear,
    multi_head_attention,
)

__all__ = ["FusedContext", "FUSION_MODES", "init_fusion", "fuse", "average_fuse", "transfuser_fuse"]

FUSION_MODES = ("average", "transfuser")


@dataclass
class FusedContext:
    """Conditioning bundle handed to the report decoders."""

    fused_global: Tensor          # [1, hidden]
    fused_memory: Tensor          # [num_image_rows + num_keyword_rows, hidden]
    num_image_rows: int
    num_keyword_rows: int
    trace: dict = field(default_factory=dict)


def _row_mean(rows: Tensor) -> Tensor:
    return reshape(tmean(rows, axis=0), (1, rows.shape[1]))


def average_fuse(image_rows: Tensor, keyword_rows: Tensor) -> FusedContext:
    fused_global = 0.5 * add(_row_mean(image_rows), _row_mean(keyword_rows))
    return FusedContext(
        fused_global=fused_global,
        fused_memory=concat([image_rows, keyword_rows], axis=0),
        num_image_rows=image_rows.shape[0],
        num_keyword_rows=keyword_rows.shape[0],
        trace={"mode": "average"},
    )


def init_transfuser(rng, params: dict, prefix: str, hidden: int, n_heads: int) -> None:
    init_attention(rng, params, f"{prefix}.kw2img", hidden, n_heads)
    init_layer_norm(params, f"{prefix}.ln_kw", hidden)
    init_attention(rng, params, f"{prefix}.img2kw", hidden, n_heads)
    init_layer_norm(params, f"{prefix}.ln_img", hidden)
    init_linear(rng, params, f"{prefix}.gate", 2 * hidden, 1)


def transfuser_fuse(
    params: dict, prefix: str, image_rows: Tensor, keyword_rows: Tensor, n_heads: int
) -> FusedContext:
    kw_att, kw_weights = multi_head_attention(
        params, f"{prefix}.kw2img", keyword_rows, image_rows, image_rows, n_heads
    )
    refined_kw = layer_norm_affine(params, f"{prefix}.ln_kw", add(keyword_rows, kw_att))
    img_att, img_weights = multi_head_attention(
        params, f"{prefix}.img2kw", image_rows, keyword_rows, keyword_rows, n_heads
    )
    refined_img = layer_norm_affine(params, f"{prefix}.ln_img", add(image_rows, img_att))

    img_mean = _row_mean(refined_img)
    kw_mean = _row_mean(refined_kw)
    hidden = img_mean.shape[1]
    gate = sigmoid(linear(params, f"{prefix}.gate", concat([img_mean, kw_mean], axis=1)))
    ones_row = Tensor(np.ones((1, hidden)))
    gate_row = matmul(gate, ones_row)                      # broadcast [1,1] -> [1,hidden]
    inv_gate_row = sub(ones_row, gate_row)
    fused_global = add(mul(gate_row, img_mean), mul(inv_gate_row, kw_mean))

    return FusedContext(
        fused_global=fused_global,
        fused_memory=concat([refined_img, refined_kw], axis=0),
        num_image_rows=image_rows.shape[0],
        num_keyword_rows=keyword_rows.shape[0],
        trace={
            "mode": "transfuser",
            "kw_to_img": np.stack([w.data for w in kw_weights]),
            "img_to_kw": np.stack([w.data for w in img_weights]),
            "gate": float(gate.item()),
        },
    )


def init_fusion(rng, params: dict, prefix: str, mode: str, hidden: int, n_heads: int) -> None:
    if mode == "average":
        return
    if mode == "transfuser":
        init_transfuser(rng, params, prefix, hidden, n_heads)
        return
    raise ConfigError(f"unknown fusion mode {mode!r}; expected one of {FUSION_MODES}")


def fuse(
    params: dict,
    prefix: str,
    mode: str,
    image_rows: Tensor,
    keyword_rows: Tensor,
    n_heads: int,
) -> FusedContext:
    if mode == "average":
        return average_fuse(image_rows, keyword_rows)
    if mode == "transfuser":
        return transfuser_fuse(params, prefix, image_rows, keyword_rows, n_heads)
    raise ConfigError(f"unknown fusion mode {mode!r}; expected one of {FUSION_MODES}")
