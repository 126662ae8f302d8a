"""Tokenization, vocabularies, and keyword-set handling.

Two vocabularies exist side by side: one over report words, one over whole
keyword labels ("macular edema" is a single entry; the contextual encoder
word-tokenizes label surfaces internally).  Both reserve ids 0..3 for
PAD/BOS/EOS/UNK; the keyword vocabulary uses UNK as its UNK-keyword slot.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import DataError

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3

RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase, collapse whitespace, detach punctuation as its own token.

    Reserved marker strings cannot be produced from raw text because the
    angle brackets split off as separate tokens.
    """
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Bidirectional token<->id map with dense ids and reserved specials."""

    def __init__(self, tokens: list[str] | None = None):
        self.id_to_token: list[str] = list(RESERVED_TOKENS)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(self.id_to_token)}
        for tok in tokens or []:
            self._add(tok)

    def _add(self, token: str) -> None:
        if token in self.token_to_id:
            raise DataError(f"duplicate vocabulary token: {token!r}")
        self.token_to_id[token] = len(self.id_to_token)
        self.id_to_token.append(token)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def encode_token(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def decode_id(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.id_to_token):
            raise DataError(f"token id {token_id} out of range [0, {len(self)})")
        return self.id_to_token[token_id]

    def save(self, path) -> None:
        """One non-reserved token per line; line number = id - 4."""
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.id_to_token[4:]:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        return cls(tokens)


def build_vocab(corpus: list[list[str]], min_count: int = 1) -> Vocabulary:
    """Vocabulary over tokens with frequency >= min_count.

    Ids are assigned by frequency descending, then lexicographic, so
    construction is deterministic across runs.  An empty corpus yields a
    vocabulary of only the reserved tokens.
    """
    if min_count < 1:
        raise DataError(f"min_count must be >= 1, got {min_count}")
    counts: dict[str, int] = {}
    for tokens in corpus:
        for tok in tokens:
            counts[tok] = counts.get(tok, 0) + 1
    kept = sorted(
        (tok for tok, c in counts.items() if c >= min_count),
        key=lambda tok: (-counts[tok], tok),
    )
    return Vocabulary(kept)


def encode_report(tokens: list[str], vocab: Vocabulary, max_len: int) -> list[int]:
    """BOS + ids + EOS, truncated so EOS stays final, PAD-padded to max_len."""
    if max_len < 2:
        raise DataError(f"max_len must be >= 2, got {max_len}")
    body = [vocab.encode_token(t) for t in tokens[: max_len - 2]]
    ids = [BOS_ID] + body + [EOS_ID]
    ids.extend([PAD_ID] * (max_len - len(ids)))
    return ids


def decode_ids(ids: list[int], vocab: Vocabulary) -> str:
    """Drop PAD/BOS, stop at first EOS, join with single spaces."""
    words = []
    for token_id in ids:
        if token_id == EOS_ID:
            break
        if token_id in (PAD_ID, BOS_ID):
            continue
        words.append(vocab.decode_id(token_id))
    return " ".join(words)


@dataclass(frozen=True)
class KeywordSet:
    """Unordered keyword label ids stored canonically sorted.

    Equality and iteration order are therefore independent of input order;
    the set may be empty (image-only regime).
    """

    ids: tuple[int, ...]

    def __init__(self, ids=()):
        object.__setattr__(self, "ids", tuple(sorted(set(int(i) for i in ids))))

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    def __contains__(self, keyword_id: int) -> bool:
        return keyword_id in self.ids

    @classmethod
    def from_labels(cls, labels, kw_vocab: Vocabulary) -> "KeywordSet":
        """Map label strings to ids; unknown labels become the UNK keyword."""
        return cls(kw_vocab.encode_token(lab) for lab in labels)

    def labels(self, kw_vocab: Vocabulary) -> tuple[str, ...]:
        return tuple(kw_vocab.decode_id(i) for i in self.ids)


def split_keyword_field(raw: str) -> list[str]:
    """Split a manifest keyword field on ';', trimming and dropping empties."""
    return [part.strip() for part in raw.split(";") if part.strip()]
