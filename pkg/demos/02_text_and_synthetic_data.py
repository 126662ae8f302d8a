"""
From raw text to a training-ready dataset
=========================================

Tokenizes reports, builds a vocabulary, then generates a small synthetic
retinal dataset (images, keywords, reports) and loads it back through the
manifest reader.
"""

import tempfile
from pathlib import Path

from retinagen.data import ImageConfig, prepare_dataset, read_manifest
from retinagen.synth import SynthConfig, generate_dataset
from retinagen.text import KeywordSet, Vocabulary, build_vocab, encode_report, tokenize

# Tokenization lowercases and splits punctuation off words.
tokens = tokenize("Mild macular Edema, no hemorrhage.")
print("tokens:", tokens)

# The vocabulary reserves <pad>/<bos>/<eos>/<unk> as ids 0..3; real words are
# ordered by frequency, ties broken alphabetically.
corpus = [tokenize(t) for t in (
    "mild macular edema .",
    "no hemorrhage seen .",
    "edema persists .",
)]
vocab = build_vocab(corpus)
print("vocab size:", len(vocab), "| 'edema' ->", vocab.encode_token("edema"))

ids = encode_report(corpus[0], vocab, max_len=8)
print("encoded report:", ids)
print("decoded back  :", [vocab.decode_id(i) for i in ids])

# Keyword sets are order-free: permuting the labels gives the same object.
kw_vocab = Vocabulary(["macular edema", "hemorrhage"])
a = KeywordSet.from_labels(["hemorrhage", "macular edema"], kw_vocab)
b = KeywordSet.from_labels(["macular edema", "hemorrhage"], kw_vocab)
print("keyword sets equal:", a == b)

# Generate a synthetic dataset: deterministic given the seed.
out = Path(tempfile.mkdtemp()) / "demo_data"
manifest = generate_dataset(
    out, SynthConfig(n_samples=12, seed=7, image=ImageConfig(32, 8, 3))
)
print("manifest at:", manifest)

records = read_manifest(manifest)
first = records[0]
print("loaded", len(records), "records; first:")
print("  image   :", first.image_path)
print("  keywords:", first.keyword_labels)
print("  report  :", first.description[:72], "...")

# prepare_dataset does the full job: vocab build, feature extraction, splits.
prepared = prepare_dataset(manifest, fractions=(0.5, 0.25, 0.25), max_len=64)
print("split sizes:", len(prepared.train), len(prepared.val), len(prepared.test))
print("report vocab:", len(prepared.vocab), "| keyword vocab:", len(prepared.kw_vocab))
sample = prepared.train[0]
print("feature grid:", sample.features.shape, "(regions x region dim)")
