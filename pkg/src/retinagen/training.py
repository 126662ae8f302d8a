"""Training orchestration: config files, the epoch loop, and checkpoints.

A run is described by a flat key=value config file (see TrainConfig).  The
loop is Adam with global-norm gradient clipping; model selection uses the
validation split (average BLEU for the generator, micro-F1 for the keyword
predictor) and keeps the single best checkpoint.  Checkpoints are tensor
containers whose meta block embeds every vocabulary and shape needed to
rebuild the model, so a checkpoint file is self-contained.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import AdamState, adam_step, backward, clip_gradients, load_tensor_file, no_grad, save_tensor_file, zero_grad
from .data import ImageConfig, PreparedData, batch_iter, prepare_dataset
from .errors import CheckpointError, ConfigError, TrainingError
from .generator import GeneratorSpec, ReportGenerator
from .keywords import KeywordPredictor, PredictorSpec, micro_f1
from .metrics import bleu_avg, bleu_corpus, make_pair
from .text import Vocabulary

__all__ = [
    "TrainConfig",
    "TrainResult",
    "read_train_config",
    "write_train_config",
    "prepare_for_config",
    "train_model",
    "save_checkpoint",
    "load_checkpoint",
    "generator_bleu",
]

CONFIG_SCHEMA_VERSION = 1
CHECKPOINT_VERSION = 1
MODEL_KINDS = ("generator", "predictor")


@dataclass(frozen=True)
class TrainConfig:
    schema_version: int = CONFIG_SCHEMA_VERSION
    model: str = "generator"
    seed: int = 0
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 8
    clip_norm: float = 5.0
    patience: int = 10
    hidden: int = 128
    n_heads: int = 4
    kw_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 256
    keyword_encoder: str = "contextual"
    fusion: str = "transfuser"
    decoder: str = "masked"
    max_len: int = 60
    dropout: float = 0.0
    reinforce_bag: bool = True
    threshold: float = 0.5
    fallback_k: int = 3
    stop_at_train_loss: float | None = None
    image_size: int = 64
    image_patch: int = 16
    image_channels: int = 3
    val_fraction: float = 0.15
    test_fraction: float = 0.15
    min_count: int = 1

    def __post_init__(self):
        if self.schema_version != CONFIG_SCHEMA_VERSION:
            raise ConfigError(
                f"config schema_version {self.schema_version} unsupported "
                f"(expected {CONFIG_SCHEMA_VERSION})"
            )
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if not (0.0 <= self.val_fraction < 1.0 and 0.0 <= self.test_fraction < 1.0):
            raise ConfigError("val_fraction and test_fraction must be in [0, 1)")
        if self.val_fraction + self.test_fraction >= 1.0:
            raise ConfigError("val_fraction + test_fraction leaves no training data")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def image_config(self) -> ImageConfig:
        return ImageConfig(
            size=self.image_size, patch=self.image_patch, channels=self.image_channels
        )


def _coerce(name: str, raw: str, target_type) -> object:
    if target_type is bool:
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if target_type is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{name}: expected an integer, got {raw!r}") from None
    if target_type is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{name}: expected a number, got {raw!r}") from None
    return raw


_OPTIONAL_FLOATS = {"stop_at_train_loss"}


def read_train_config(path) -> TrainConfig:
    """Parse a key=value config file; '#' starts a comment, unknown keys fail."""
    field_types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    values: dict[str, object] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {text!r}")
            key, _, raw = text.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in field_types:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            if key in values:
                raise ConfigError(f"{path}:{lineno}: duplicate config key {key!r}")
            if key in _OPTIONAL_FLOATS:
                values[key] = None if raw.lower() == "none" else _coerce(key, raw, float)
                continue
            declared = field_types[key]
            name = declared if isinstance(declared, str) else declared.__name__
            values[key] = _coerce(key, raw, {"int": int, "float": float, "bool": bool}.get(name, str))
    return TrainConfig(**values)


def write_train_config(path, config: TrainConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in config.to_dict().items():
            if value is None:
                value = "none"
            fh.write(f"{key} = {value}\n")


def prepare_for_config(manifest_path, config: TrainConfig) -> PreparedData:
    """Run dataset preparation with the geometry and splits a config names."""
    train_fraction = 1.0 - config.val_fraction - config.test_fraction
    return prepare_dataset(
        manifest_path,
        config.image_config(),
        max_len=config.max_len,
        fractions=(train_fraction, config.val_fraction, config.test_fraction),
        seed=config.seed,
        min_count=config.min_count,
    )


# -- checkpoints --------------------------------------------------------------------


def _vocab_tokens(vocab: Vocabulary) -> list[str]:
    return vocab.id_to_token[4:]


def save_checkpoint(path, model, train_meta: dict | None = None) -> None:
    """Atomically write model parameters plus everything needed to rebuild it."""
    if isinstance(model, ReportGenerator):
        meta = {
            "checkpoint_version": CHECKPOINT_VERSION,
            "kind": "generator",
            "spec": model.spec.to_dict(),
            "image_config": model.image_config.to_dict(),
            "vocab": _vocab_tokens(model.vocab),
            "kw_vocab": _vocab_tokens(model.kw_vocab),
            "kw_word_vocab": _vocab_tokens(model.kw_word_vocab),
        }
    elif isinstance(model, KeywordPredictor):
        meta = {
            "checkpoint_version": CHECKPOINT_VERSION,
            "kind": "predictor",
            "spec": model.spec.to_dict(),
            "image_config": model.image_config.to_dict(),
            "kw_vocab": _vocab_tokens(model.kw_vocab),
        }
    else:
        raise CheckpointError(f"cannot checkpoint object of type {type(model).__name__}")
    meta["train"] = train_meta or {}
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    save_tensor_file(tmp, {name: p.data for name, p in model.params.items()}, meta)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Rebuild the saved model; returns (model, meta)."""
    tensors, meta = load_tensor_file(path)
    if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {meta.get('checkpoint_version')}"
        )
    kind = meta.get("kind")
    image_config = ImageConfig.from_dict(meta["image_config"])
    if kind == "generator":
        model = ReportGenerator(
            GeneratorSpec.from_dict(meta["spec"]),
            Vocabulary(meta["vocab"]),
            Vocabulary(meta["kw_vocab"]),
            Vocabulary(meta["kw_word_vocab"]),
            image_config,
            seed=0,
        )
    elif kind == "predictor":
        model = KeywordPredictor(
            PredictorSpec.from_dict(meta["spec"]),
            Vocabulary(meta["kw_vocab"]),
            image_config,
            seed=0,
        )
    else:
        raise CheckpointError(f"{path}: unknown checkpoint kind {kind!r}")
    saved, expected = set(tensors), set(model.params)
    if saved != expected:
        missing = sorted(expected - saved)
        extra = sorted(saved - expected)
        raise CheckpointError(
            f"{path}: parameter set mismatch (missing {missing}, unexpected {extra})"
        )
    for name, arr in tensors.items():
        if arr.shape != model.params[name].data.shape:
            raise CheckpointError(
                f"{path}: tensor {name} has shape {arr.shape}, "
                f"model wants {model.params[name].data.shape}"
            )
        model.params[name].data = arr
    return model, meta


# -- evaluation hooks used for model selection ---------------------------------------


def generator_bleu(model: ReportGenerator, samples) -> float:
    """Corpus average BLEU of greedy decodes against each sample's report."""
    pairs = []
    for sample in samples:
        result = model.greedy_decode(sample.features, sample.keywords.ids)
        hyp = result.text(model.vocab).split()
        pairs.append(make_pair(hyp, [sample.report_tokens]))
    return bleu_avg(bleu_corpus(pairs))


def _predictor_f1(model: KeywordPredictor, samples) -> float:
    predicted = [model.predict(s.features) for s in samples]
    return micro_f1(predicted, [s.keywords for s in samples])


# -- the loop ------------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint_path: Path
    best_epoch: int
    best_score: float
    epochs_run: int
    history: list[dict]


def _build_model(config: TrainConfig, prepared: PreparedData):
    if config.model == "generator":
        spec = GeneratorSpec(
            hidden=config.hidden,
            n_heads=config.n_heads,
            kw_layers=config.kw_layers,
            dec_layers=config.dec_layers,
            ffn_dim=config.ffn_dim,
            keyword_encoder=config.keyword_encoder,
            fusion=config.fusion,
            decoder=config.decoder,
            max_len=prepared.max_len,
            dropout=config.dropout,
            reinforce_bag=config.reinforce_bag,
        )
        return ReportGenerator(
            spec, prepared.vocab, prepared.kw_vocab, prepared.kw_word_vocab,
            prepared.image_config, seed=config.seed,
        )
    spec = PredictorSpec(
        hidden=config.hidden, threshold=config.threshold, fallback_k=config.fallback_k
    )
    return KeywordPredictor(spec, prepared.kw_vocab, prepared.image_config, seed=config.seed)


def _batch_loss(model, batch, rng):
    if isinstance(model, ReportGenerator):
        loss, n_tokens = model.teacher_forcing_loss(batch, train=True, rng=rng)
        return loss, n_tokens
    return model.loss(batch), len(batch)


def train_model(prepared: PreparedData, config: TrainConfig, out_dir, log=None) -> TrainResult:
    """Run the full loop; the best checkpoint lands at ``out_dir``/model.ckpt.

    Selection scores are greedy average BLEU (generator) or micro-F1
    (predictor) on the validation split; with an empty validation split the
    negated train loss is used instead.  Training stops early after
    ``patience`` epochs without improvement, or as soon as the mean train
    loss reaches ``stop_at_train_loss`` when that is set.
    """
    if not prepared.train:
        raise TrainingError("training split is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_path = out_dir / "model.ckpt"
    history_path = out_dir / "history.jsonl"

    model = _build_model(config, prepared)
    state = AdamState()
    best_score = -math.inf
    best_epoch = -1
    history: list[dict] = []

    with open(history_path, "w", encoding="utf-8") as history_fh:
        for epoch in range(config.epochs):
            loss_sum = 0.0
            weight_sum = 0
            for batch_index, batch in enumerate(
                batch_iter(prepared.train, config.batch_size, config.seed, epoch)
            ):
                rng = np.random.default_rng((config.seed, epoch, batch_index))
                zero_grad(model.params)
                loss, weight = _batch_loss(model, batch, rng)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise TrainingError(
                        f"non-finite loss {value!r} at epoch {epoch} batch {batch_index}"
                    )
                backward(loss)
                clip_gradients(model.params, config.clip_norm)
                adam_step(model.params, state, lr=config.lr)
                loss_sum += value * weight
                weight_sum += weight
            train_loss = loss_sum / max(weight_sum, 1)

            with no_grad():
                if prepared.val:
                    if isinstance(model, ReportGenerator):
                        score = generator_bleu(model, prepared.val)
                    else:
                        score = _predictor_f1(model, prepared.val)
                else:
                    score = -train_loss

            entry = {"epoch": epoch, "train_loss": train_loss, "val_score": score}
            history.append(entry)
            history_fh.write(json.dumps(entry) + "\n")
            history_fh.flush()
            if log:
                log(f"epoch {epoch}: train_loss={train_loss:.4f} val_score={score:.4f}")

            if score > best_score:
                best_score = score
                best_epoch = epoch
                save_checkpoint(
                    checkpoint_path,
                    model,
                    {"epoch": epoch, "val_score": score, "config": config.to_dict()},
                )
            if config.stop_at_train_loss is not None and train_loss <= config.stop_at_train_loss:
                break
            if epoch - best_epoch >= config.patience:
                break

    if best_epoch < 0:
        save_checkpoint(checkpoint_path, model, {"epoch": -1, "config": config.to_dict()})
    return TrainResult(
        checkpoint_path=checkpoint_path,
        best_epoch=best_epoch,
        best_score=best_score,
        epochs_run=len(history),
        history=history,
    )
