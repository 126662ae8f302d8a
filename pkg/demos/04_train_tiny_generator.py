"""
Training a report generator end to end
======================================

Generates a small synthetic dataset, trains a compact generator for a few
epochs, and decodes reports from the held-out split with expert keywords,
with no keywords, and through a trained keyword predictor.
"""

import tempfile
from pathlib import Path

from retinagen.data import ImageConfig
from retinagen.synth import SynthConfig, generate_dataset
from retinagen.text import KeywordSet
from retinagen.training import (
    TrainConfig,
    load_checkpoint,
    prepare_for_config,
    train_model,
)

root = Path(tempfile.mkdtemp())
manifest = generate_dataset(
    root / "data", SynthConfig(n_samples=80, seed=13, image=ImageConfig(32, 8, 3))
)

common = dict(image_size=32, image_patch=8, image_channels=3,
              val_fraction=0.15, test_fraction=0.15, max_len=64, seed=1)

gen_cfg = TrainConfig(model="generator", epochs=10, lr=2e-3, batch_size=8,
                      hidden=48, n_heads=4, kw_layers=1, dec_layers=1,
                      ffn_dim=96, **common)
prepared = prepare_for_config(manifest, gen_cfg)

print("training generator ...")
run = train_model(prepared, gen_cfg, root / "gen",
                  log=lambda s: print("  " + s))
print("best validation bleu avg:", round(run.best_score, 4))

print("training keyword predictor ...")
pred_cfg = TrainConfig(model="predictor", epochs=12, lr=3e-3, batch_size=8,
                       hidden=32, fallback_k=1, **common)
pred_run = train_model(prepared, pred_cfg, root / "pred")

generator, _ = load_checkpoint(run.checkpoint_path)
predictor, _ = load_checkpoint(pred_run.checkpoint_path)

sample = prepared.test[0]
print("\nreference       :", " ".join(sample.report_tokens))

expert = generator.greedy_decode(sample.features, sample.keywords.ids)
print("expert keywords :", expert.text(generator.vocab))

labels = predictor.predict(sample.features).labels(predictor.kw_vocab)
pred_ids = KeywordSet.from_labels(labels, generator.kw_vocab).ids
predicted = generator.greedy_decode(sample.features, pred_ids)
print("predicted kws   :", predicted.text(generator.vocab))

bare = generator.greedy_decode(sample.features, ())
print("no keywords     :", bare.text(generator.vocab))

beam = generator.beam_decode(sample.features, sample.keywords.ids, beam_width=4)
print("beam width 4    :", beam.text(generator.vocab))
