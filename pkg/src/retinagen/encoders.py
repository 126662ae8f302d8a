"""Image and keyword encoders.

The image encoder projects patch features into the model width, one row per
patch region.  Keywords get one row each from either

* a bag encoder: a plain per-keyword embedding table, or
* a contextual encoder: the words of every keyword run through an unmasked
  transformer, are mean-pooled back to one row per keyword, projected, and
  (by default) added to the bag row as a residual refinement.

Word positions inside a keyword get sinusoidal encodings; keywords as units
get none, and ids are canonically sorted before any lookup, so encoder output
never depends on the order keywords arrived in.  An empty keyword set encodes
as the single reserved null row (bag table row 0).
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, add, embedding_lookup, matmul, tanh
from .errors import ConfigError
from .layers import encoder_layer, init_encoder_layer, init_linear, linear, sinusoid_table, xavier_uniform
from .text import UNK_ID, Vocabulary, tokenize

__all__ = [
    "NULL_KEYWORD_ROW",
    "canonical_keyword_ids",
    "keyword_word_groups",
    "init_image_encoder",
    "encode_image",
    "init_bag_encoder",
    "encode_keywords_bag",
    "init_contextual_encoder",
    "encode_keywords_contextual",
    "KEYWORD_ENCODERS",
]

NULL_KEYWORD_ROW = 0

KEYWORD_ENCODERS = ("bag", "contextual")


def canonical_keyword_ids(keyword_ids) -> tuple[int, ...]:
    """Sorted, deduplicated ids; empty becomes the reserved null row."""
    ids = tuple(sorted(set(int(i) for i in keyword_ids)))
    return ids if ids else (NULL_KEYWORD_ROW,)


def keyword_word_groups(
    keyword_ids, kw_vocab: Vocabulary, kw_word_vocab: Vocabulary
) -> list[list[int]]:
    """Word-id lists per canonical keyword, for the contextual encoder.

    Reserved keyword ids (null, unk) contribute a single unknown-word slot.
    """
    groups = []
    for kid in canonical_keyword_ids(keyword_ids):
        if kid < 4:
            groups.append([UNK_ID])
            continue
        words = tokenize(kw_vocab.decode_id(kid))
        groups.append([kw_word_vocab.encode_token(w) for w in words] or [UNK_ID])
    return groups


# -- image encoder ---------------------------------------------------------------


def init_image_encoder(rng, params: dict, prefix: str, region_dim: int, hidden: int) -> None:
    init_linear(rng, params, f"{prefix}.proj", region_dim, hidden)


def encode_image(params: dict, prefix: str, features: np.ndarray) -> Tensor:
    """Patch features [regions, region_dim] -> tanh projection [regions, hidden]."""
    return tanh(linear(params, f"{prefix}.proj", Tensor(features)))


# -- bag keyword encoder ------------------------------------------------------------


def init_bag_encoder(rng, params: dict, prefix: str, kw_vocab_size: int, hidden: int) -> None:
    params[f"{prefix}.table"] = Tensor(
        xavier_uniform(rng, kw_vocab_size, hidden), requires_grad=True
    )


def encode_keywords_bag(params: dict, prefix: str, keyword_ids) -> Tensor:
    ids = canonical_keyword_ids(keyword_ids)
    return embedding_lookup(params[f"{prefix}.table"], list(ids))


# -- contextual keyword encoder -------------------------------------------------------


def init_contextual_encoder(
    rng,
    params: dict,
    prefix: str,
    kw_word_vocab_size: int,
    hidden: int,
    n_heads: int,
    n_layers: int,
    ffn_dim: int,
) -> None:
    params[f"{prefix}.word_table"] = Tensor(
        xavier_uniform(rng, kw_word_vocab_size, hidden), requires_grad=True
    )
    for i in range(n_layers):
        init_encoder_layer(rng, params, f"{prefix}.layer{i}", hidden, n_heads, ffn_dim)
    params[f"{prefix}.w_ctx"] = Tensor(
        xavier_uniform(rng, hidden, hidden), requires_grad=True
    )


def encode_keywords_contextual(
    params: dict,
    prefix: str,
    word_id_groups: list[list[int]],
    n_heads: int,
    n_layers: int,
    bag_rows: Tensor,
    reinforce_bag: bool = True,
    max_words: int = 64,
) -> Tensor:
    """Contextualize keyword words and pool back to one row per keyword.

    All words of all keywords attend to each other in one unmasked pass; the
    position table indexes the word's offset inside its own keyword, so two
    orderings of the same keyword set produce identical rows.
    """
    if not word_id_groups:
        raise ConfigError("contextual encoder needs at least one keyword group")
    flat_ids: list[int] = []
    intra_pos: list[int] = []
    for group in word_id_groups:
        if not group:
            raise ConfigError("empty word group in contextual encoder input")
        flat_ids.extend(group)
        intra_pos.extend(range(len(group)))
    hidden = bag_rows.shape[1]
    if max(intra_pos) >= max_words:
        raise ConfigError(f"keyword longer than {max_words} words")
    table = sinusoid_table(max_words, hidden)
    x = add(
        embedding_lookup(params[f"{prefix}.word_table"], flat_ids),
        Tensor(table[intra_pos]),
    )
    for i in range(n_layers):
        x, _ = encoder_layer(params, f"{prefix}.layer{i}", x, n_heads)
    pool = np.zeros((len(word_id_groups), len(flat_ids)))
    offset = 0
    for k, group in enumerate(word_id_groups):
        pool[k, offset : offset + len(group)] = 1.0 / len(group)
        offset += len(group)
    pooled = matmul(Tensor(pool), x)
    out = matmul(pooled, params[f"{prefix}.w_ctx"])
    return add(out, bag_rows) if reinforce_bag else out
