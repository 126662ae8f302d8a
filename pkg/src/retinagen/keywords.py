"""Multi-label keyword prediction from image features.

A small head over the shared image-encoder shape: project patches, mean-pool,
one hidden relu layer, one logit per non-reserved keyword vocabulary entry.
Slot i scores keyword id i + 4 (reserved ids are never predicted).

Thresholding never returns an empty set: if nothing clears the threshold the
top fallback_k scores are taken instead, so the downstream generator always
has at least one real keyword row to attend to.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, binary_cross_entropy, concat, no_grad, relu, reshape, tmean
from .data import ImageConfig
from .encoders import encode_image, init_image_encoder
from .errors import ConfigError, DataError
from .layers import init_linear, linear
from .text import KeywordSet, Vocabulary

__all__ = [
    "PredictorSpec",
    "KeywordPredictor",
    "RESERVED_SLOTS",
    "multi_hot",
    "threshold_scores",
    "micro_f1",
]

RESERVED_SLOTS = 4  # keyword ids below this never get a logit slot


@dataclass(frozen=True)
class PredictorSpec:
    hidden: int = 64
    threshold: float = 0.5
    fallback_k: int = 3

    def __post_init__(self):
        if self.hidden < 1:
            raise ConfigError(f"hidden must be >= 1, got {self.hidden}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.fallback_k < 1:
            raise ConfigError(f"fallback_k must be >= 1, got {self.fallback_k}")

    def to_dict(self) -> dict:
        return {"hidden": self.hidden, "threshold": self.threshold, "fallback_k": self.fallback_k}

    @classmethod
    def from_dict(cls, d: dict) -> "PredictorSpec":
        return cls(**d)


def multi_hot(keywords: KeywordSet, n_labels: int) -> np.ndarray:
    """Target vector over label slots; reserved keyword ids are ignored."""
    vec = np.zeros(n_labels)
    for kid in keywords.ids:
        slot = kid - RESERVED_SLOTS
        if 0 <= slot < n_labels:
            vec[slot] = 1.0
    return vec


def threshold_scores(scores: np.ndarray, threshold: float, fallback_k: int) -> list[int]:
    """Slots with score above threshold, else the top fallback_k slots.

    Ties in the fallback ranking break toward the lower slot index.
    """
    chosen = [i for i, s in enumerate(scores) if s > threshold]
    if chosen:
        return chosen
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return sorted(order[: min(fallback_k, len(scores))])


def micro_f1(predicted: list[KeywordSet], gold: list[KeywordSet]) -> float:
    """Corpus-level F1 over keyword assignments (micro average).

    Reserved ids (null/unknown placeholders) are excluded on both sides, so
    the score reflects only real vocabulary labels.
    """
    if len(predicted) != len(gold):
        raise DataError(
            f"micro_f1 got {len(predicted)} predictions for {len(gold)} references"
        )
    tp = fp = fn = 0
    for pred, ref in zip(predicted, gold):
        pred_ids = {i for i in pred.ids if i >= RESERVED_SLOTS}
        ref_ids = {i for i in ref.ids if i >= RESERVED_SLOTS}
        tp += len(pred_ids & ref_ids)
        fp += len(pred_ids - ref_ids)
        fn += len(ref_ids - pred_ids)
    denom = 2 * tp + fp + fn
    return (2.0 * tp / denom) if denom else 0.0


class KeywordPredictor:
    """Sigmoid multi-label classifier over the keyword vocabulary."""

    def __init__(
        self,
        spec: PredictorSpec,
        kw_vocab: Vocabulary,
        image_config: ImageConfig,
        seed: int = 0,
    ):
        self.spec = spec
        self.kw_vocab = kw_vocab
        self.image_config = image_config
        self.n_labels = len(kw_vocab) - RESERVED_SLOTS
        if self.n_labels < 1:
            raise ConfigError("keyword vocabulary has no real labels to predict")
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        init_image_encoder(rng, self.params, "img", image_config.region_dim, spec.hidden)
        init_linear(rng, self.params, "mlp.hidden", spec.hidden, spec.hidden)
        init_linear(rng, self.params, "mlp.out", spec.hidden, self.n_labels)

    def logits(self, features: np.ndarray) -> Tensor:
        rows = encode_image(self.params, "img", features)
        pooled = reshape(tmean(rows, axis=0), (1, self.spec.hidden))
        hidden = relu(linear(self.params, "mlp.hidden", pooled))
        return linear(self.params, "mlp.out", hidden)

    def loss(self, batch) -> Tensor:
        """Mean binary cross entropy over a batch of samples."""
        blocks = [self.logits(s.features) for s in batch]
        logits = blocks[0] if len(blocks) == 1 else concat(blocks, axis=0)
        targets = np.stack([multi_hot(s.keywords, self.n_labels) for s in batch])
        return binary_cross_entropy(logits, targets)

    def scores(self, features: np.ndarray) -> np.ndarray:
        """Per-slot sigmoid scores, [n_labels]."""
        with no_grad():
            logits = self.logits(features).data[0]
        return 1.0 / (1.0 + np.exp(-logits))

    def predict(self, features: np.ndarray) -> KeywordSet:
        slots = threshold_scores(self.scores(features), self.spec.threshold, self.spec.fallback_k)
        return KeywordSet(slot + RESERVED_SLOTS for slot in slots)
