"""
Seeing where the model looked
=============================

Decodes a report while recording attention, then exports the trace as a
token-by-token heatmap grid (BMP) plus a browsable HTML index.
"""

import tempfile
from pathlib import Path

import numpy as np

from retinagen.data import ImageConfig, features_to_raster, load_image_features
from retinagen.explain import (
    export_trace_report,
    load_trace,
    render_trace_grid,
    save_trace,
    top_keyword_weights,
    trace_from_decode,
    write_bmp,
)
from retinagen.generator import GeneratorSpec, ReportGenerator
from retinagen.synth import SynthConfig, generate_dataset
from retinagen.text import KeywordSet, Vocabulary, build_vocab, tokenize

image = ImageConfig(size=32, patch=8, channels=3)
root = Path(tempfile.mkdtemp())
manifest = generate_dataset(root / "data",
                            SynthConfig(n_samples=4, seed=9, image=image))

labels = ["retinal hemorrhage", "drusen", "macular edema", "followup advised"]
corpus = [tokenize("the retina shows hemorrhage ."),
          tokenize("drusen deposits are visible .")]
model = ReportGenerator(
    GeneratorSpec(hidden=32, n_heads=2, kw_layers=1, dec_layers=1, ffn_dim=32,
                  decoder="masked", fusion="transfuser", max_len=10),
    build_vocab(corpus), Vocabulary(labels),
    build_vocab([tokenize(lab) for lab in labels]), image, seed=2,
)

image_path = root / "data" / "images" / "synth_00000.png"
features = load_image_features(image_path, image)
kw = KeywordSet.from_labels(["macular edema", "drusen"], model.kw_vocab)

result = model.greedy_decode(features, kw.ids)
trace = trace_from_decode("synth_00000", result, model.vocab,
                          kw.labels(model.kw_vocab), image_path=str(image_path))
print("generated:", trace.report_text)
print("trace shape:", trace.attention.shape, "(tokens x (regions + keywords))")

# Which keywords did each decoding step lean on?
for step in range(min(3, len(trace.tokens))):
    ranked = top_keyword_weights(trace, step, k=2)
    pretty = ", ".join(f"{lab}={w:.2f}" for lab, w in ranked)
    print(f"  step {step} ({trace.tokens[step]!r}): {pretty}")

# Traces serialize to JSON and round trip losslessly.
trace_path = root / "sample.trace"
save_trace(trace_path, trace)
reloaded = load_trace(trace_path)
print("round trip ok:", np.array_equal(reloaded.attention, trace.attention))

# Render the per-token heatmap grid over the original pixels and export the
# HTML report that embeds it.
pixels = features_to_raster(features, image)
grid = render_trace_grid(trace, pixels)
write_bmp(root / "grid.bmp", grid)
print("heatmap grid:", grid.shape, "->", root / "grid.bmp")

index = export_trace_report([trace], root / "report", {"synth_00000": pixels})
print("html report :", index)
