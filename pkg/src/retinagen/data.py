"""Dataset ingest: JSONL manifests, image patch features, splits, batching.

A dataset is a directory containing ``manifest.jsonl`` plus the image files it
points at.  The manifest starts with a header line ``{"schema_version": 1}``;
every following line is one record:

    {"id": "...", "image": "images/x.png",
     "keywords": "macular edema; drusen deposits",
     "description": "the fundus photograph ..."}

``image`` paths are resolved relative to the manifest's directory.  ``id`` is
optional and defaults to the image filename stem.  Images may be ordinary
raster files (decoded, resized, split into patch features) or precomputed
``.feat`` files holding the feature matrix directly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError
from .text import (
    KeywordSet,
    Vocabulary,
    build_vocab,
    encode_report,
    split_keyword_field,
    tokenize,
)

__all__ = [
    "ImageConfig",
    "RawRecord",
    "Sample",
    "PreparedData",
    "read_manifest",
    "write_manifest",
    "load_image_features",
    "features_to_raster",
    "save_feature_file",
    "load_feature_file",
    "make_splits",
    "batch_iter",
    "prepare_dataset",
]

MANIFEST_SCHEMA_VERSION = 1
FEATURE_SUFFIX = ".feat"


@dataclass(frozen=True)
class ImageConfig:
    """Raster geometry: a square image cut into a grid of square patches."""

    size: int = 64
    patch: int = 16
    channels: int = 3

    def __post_init__(self):
        if self.size <= 0 or self.patch <= 0:
            raise DataError(f"image size/patch must be positive, got {self.size}/{self.patch}")
        if self.size % self.patch != 0:
            raise DataError(f"patch {self.patch} does not divide image size {self.size}")
        if self.channels not in (1, 3):
            raise DataError(f"channels must be 1 or 3, got {self.channels}")

    @property
    def grid(self) -> int:
        return self.size // self.patch

    @property
    def regions(self) -> int:
        return self.grid * self.grid

    @property
    def region_dim(self) -> int:
        return self.patch * self.patch * self.channels

    def to_dict(self) -> dict:
        return {"size": self.size, "patch": self.patch, "channels": self.channels}

    @classmethod
    def from_dict(cls, d: dict) -> "ImageConfig":
        return cls(size=int(d["size"]), patch=int(d["patch"]), channels=int(d["channels"]))


@dataclass
class RawRecord:
    """One manifest line before any tokenization or image decoding."""

    sample_id: str
    image_path: Path
    keyword_labels: list[str]
    description: str
    lineno: int


def read_manifest(path) -> list[RawRecord]:
    """Parse and validate a manifest; raises DataError with a line locus."""
    path = Path(path)
    base = path.parent
    records: list[RawRecord] = []
    seen_ids: set[str] = set()
    seen_images: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        lines = fh.readlines()
    if not lines:
        raise DataError(f"{path}: empty manifest")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:1: header does not parse: {exc}") from exc
    if not isinstance(header, dict) or header.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise DataError(
            f"{path}:1: expected header {{\"schema_version\": {MANIFEST_SCHEMA_VERSION}}}"
        )
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: record does not parse: {exc}") from exc
        if not isinstance(obj, dict):
            raise DataError(f"{path}:{lineno}: record must be a JSON object")
        for key in ("image", "keywords", "description"):
            if key not in obj:
                raise DataError(f"{path}:{lineno}: record missing field {key!r}")
        image_rel = obj["image"]
        if not isinstance(image_rel, str) or not image_rel:
            raise DataError(f"{path}:{lineno}: 'image' must be a non-empty string")
        if not isinstance(obj["keywords"], str):
            raise DataError(f"{path}:{lineno}: 'keywords' must be a string")
        if not isinstance(obj["description"], str) or not obj["description"].strip():
            raise DataError(f"{path}:{lineno}: 'description' must be a non-empty string")
        image_path = (base / image_rel).resolve()
        if not image_path.is_file():
            raise DataError(f"{path}:{lineno}: image file not found: {image_rel}")
        sample_id = str(obj.get("id") or Path(image_rel).stem)
        if sample_id in seen_ids:
            raise DataError(f"{path}:{lineno}: duplicate sample id {sample_id!r}")
        if image_rel in seen_images:
            raise DataError(f"{path}:{lineno}: duplicate image path {image_rel!r}")
        seen_ids.add(sample_id)
        seen_images.add(image_rel)
        records.append(
            RawRecord(
                sample_id=sample_id,
                image_path=image_path,
                keyword_labels=split_keyword_field(obj["keywords"]),
                description=obj["description"].strip(),
                lineno=lineno,
            )
        )
    if not records:
        raise DataError(f"{path}: manifest has a header but no records")
    return records


def write_manifest(path, records: list[dict]) -> None:
    """Write header plus records; each record is a plain dict."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"schema_version": MANIFEST_SCHEMA_VERSION}) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# -- image features -------------------------------------------------------------


def _patch_grid(pixels: np.ndarray, cfg: ImageConfig) -> np.ndarray:
    g, p, c = cfg.grid, cfg.patch, cfg.channels
    return (
        pixels.reshape(g, p, g, p, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(cfg.regions, cfg.region_dim)
    )


def features_to_raster(features: np.ndarray, cfg: ImageConfig) -> np.ndarray:
    """Invert the patch cut back to a uint8 [size, size, 3] raster.

    Grayscale features are replicated across the three output channels so the
    result is always displayable as RGB.
    """
    if features.shape != (cfg.regions, cfg.region_dim):
        raise DataError(
            f"features shape {features.shape} does not match image config "
            f"({cfg.regions}, {cfg.region_dim})"
        )
    g, p, c = cfg.grid, cfg.patch, cfg.channels
    pixels = (
        features.reshape(g, g, p, p, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(cfg.size, cfg.size, c)
    )
    if c == 1:
        pixels = np.repeat(pixels, 3, axis=2)
    return (pixels * 255.0).round().clip(0, 255).astype(np.uint8)


def load_image_features(path, cfg: ImageConfig) -> np.ndarray:
    """Return the [regions, region_dim] float64 feature matrix for one image.

    ``.feat`` files are loaded directly (and checked against ``cfg``); raster
    files are decoded, bilinearly resized to ``cfg.size``, scaled to [0, 1],
    and cut into non-overlapping patches in row-major grid order.
    """
    path = Path(path)
    if path.suffix == FEATURE_SUFFIX:
        feats = load_feature_file(path)
        if feats.shape != (cfg.regions, cfg.region_dim):
            raise DataError(
                f"{path}: feature shape {feats.shape} does not match image config "
                f"({cfg.regions}, {cfg.region_dim})"
            )
        return feats
    try:
        with Image.open(path) as img:
            img = img.convert("RGB" if cfg.channels == 3 else "L")
            if img.size != (cfg.size, cfg.size):
                img = img.resize((cfg.size, cfg.size), Image.BILINEAR)
            pixels = np.asarray(img, dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: cannot decode image: {exc}") from exc
    if cfg.channels == 1:
        pixels = pixels[:, :, None]
    return _patch_grid(pixels, cfg)


# .feat layout: two uint32 LE extents (regions, region_dim) then the
# row-major float64 LE feature matrix.


def save_feature_file(path, features: np.ndarray) -> None:
    feats = np.ascontiguousarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise DataError(f"feature matrix must be 2-D, got shape {feats.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", feats.shape[0], feats.shape[1]))
        fh.write(feats.astype("<f8").tobytes())


def load_feature_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise DataError(f"{path}: feature file too short for its header")
    rows, cols = struct.unpack("<II", blob[:8])
    expected = 8 + rows * cols * 8
    if len(blob) != expected:
        raise DataError(
            f"{path}: feature file length {len(blob)} does not match "
            f"header extents {rows}x{cols} (expected {expected})"
        )
    return np.frombuffer(blob[8:], dtype="<f8").reshape(rows, cols).copy()


# -- splits and batching ----------------------------------------------------------


def make_splits(records, fractions=(0.7, 0.15, 0.15), seed: int = 0) -> dict[str, list]:
    """Shuffle records and split into train/val/test.

    Counts are floors of n * fraction with the remainder going to the last
    split; a split with a positive fraction must end up non-empty.
    """
    records = list(records)
    names = ("train", "val", "test")
    if len(fractions) != 3:
        raise DataError(f"expected 3 split fractions, got {len(fractions)}")
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"split fractions must be >= 0 and sum to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(records))
    shuffled = [records[i] for i in order]
    counts = [int(len(records) * f) for f in fractions]
    counts[-1] = len(records) - counts[0] - counts[1]
    splits: dict[str, list] = {}
    start = 0
    for name, count, frac in zip(names, counts, fractions):
        splits[name] = shuffled[start : start + count]
        start += count
        if frac > 0 and not splits[name]:
            raise DataError(
                f"split '{name}' is empty: {len(records)} records cannot honor "
                f"fractions {tuple(fractions)}"
            )
    return splits


def batch_iter(items, batch_size: int, seed: int = 0, epoch: int = 0, shuffle: bool = True):
    """Yield lists of at most ``batch_size`` items, reshuffled per epoch.

    The permutation is keyed by (seed, epoch) so a rerun of the same epoch
    sees the identical batch order.
    """
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    items = list(items)
    if shuffle:
        rng = np.random.default_rng((seed, epoch))
        order = rng.permutation(len(items))
        items = [items[i] for i in order]
    for start in range(0, len(items), batch_size):
        yield items[start : start + batch_size]


# -- assembled samples -------------------------------------------------------------


@dataclass
class Sample:
    """One fully prepared example: features, keyword ids, encoded report."""

    sample_id: str
    image_path: Path
    features: np.ndarray
    keyword_labels: tuple[str, ...]
    keywords: KeywordSet
    report_tokens: tuple[str, ...]
    report_ids: tuple[int, ...]


@dataclass
class PreparedData:
    """Vocabularies plus the three splits of assembled samples."""

    vocab: Vocabulary
    kw_vocab: Vocabulary
    kw_word_vocab: Vocabulary
    image_config: ImageConfig
    max_len: int
    splits: dict[str, list[Sample]] = field(default_factory=dict)

    @property
    def train(self) -> list[Sample]:
        return self.splits["train"]

    @property
    def val(self) -> list[Sample]:
        return self.splits["val"]

    @property
    def test(self) -> list[Sample]:
        return self.splits["test"]


def _assemble(record: RawRecord, vocab, kw_vocab, cfg, max_len) -> Sample:
    tokens = tuple(tokenize(record.description))
    return Sample(
        sample_id=record.sample_id,
        image_path=record.image_path,
        features=load_image_features(record.image_path, cfg),
        keyword_labels=tuple(record.keyword_labels),
        keywords=KeywordSet.from_labels(record.keyword_labels, kw_vocab),
        report_tokens=tokens,
        report_ids=tuple(encode_report(list(tokens), vocab, max_len)),
    )


def prepare_dataset(
    manifest_path,
    image_config: ImageConfig | None = None,
    max_len: int = 60,
    fractions=(0.7, 0.15, 0.15),
    seed: int = 0,
    min_count: int = 1,
) -> PreparedData:
    """Read a manifest and build vocabularies and split samples.

    Both vocabularies come from the training split only, so val/test tokens
    unseen in training map to <unk> exactly as they would at deployment.
    """
    cfg = image_config or ImageConfig()
    records = read_manifest(manifest_path)
    raw_splits = make_splits(records, fractions=fractions, seed=seed)
    train_records = raw_splits["train"]
    vocab = build_vocab(
        (tokenize(r.description) for r in train_records), min_count=min_count
    )
    kw_vocab = build_vocab((r.keyword_labels for r in train_records), min_count=1)
    kw_word_vocab = build_vocab(
        (
            [w for label in r.keyword_labels for w in tokenize(label)]
            for r in train_records
        ),
        min_count=1,
    )
    splits = {
        name: [_assemble(r, vocab, kw_vocab, cfg, max_len) for r in recs]
        for name, recs in raw_splits.items()
    }
    return PreparedData(
        vocab=vocab,
        kw_vocab=kw_vocab,
        kw_word_vocab=kw_word_vocab,
        image_config=cfg,
        max_len=max_len,
        splits=splits,
    )
