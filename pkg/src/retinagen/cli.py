"""Command-line interface.

Subcommands cover the whole workflow: synthesize a dataset, train either
model, predict keywords, generate reports, score them, render attention
traces, and inspect a checkpoint.  Exit codes: 0 on success, 1 for bad
input (arguments, config files, data files, checkpoints), 2 when a run
fails at runtime (non-finite loss, violated invariants).
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile

from .data import ImageConfig, features_to_raster, load_image_features, read_manifest
from .errors import CheckpointError, ConfigError, DataError, RetinaGenError
from .explain import export_trace_report, trace_from_decode
from .generator import ReportGenerator
from .keywords import KeywordPredictor
from .metrics import (
    evaluate_run,
    format_table_row,
    write_metric_report,
    write_prediction_file,
)
from .synth import SynthConfig, generate_dataset
from .text import KeywordSet, tokenize
from .training import (
    load_checkpoint,
    prepare_for_config,
    read_train_config,
    train_model,
)

__all__ = ["main", "build_parser"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="retinagen",
        description="keyword-driven retinal report generation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a synthetic fundus dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, default=200, help="number of samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--long-reports", action="store_true",
                   help="compose multi-sentence reports with a closing plan")
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--patch", type=int, default=16)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train a generator or keyword predictor")
    p.add_argument("--manifest", required=True, help="dataset manifest (jsonl)")
    p.add_argument("--config", required=True, help="key=value training config")
    p.add_argument("--out", required=True, help="run directory for checkpoints")
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict-keywords", help="predict keyword labels for a manifest")
    p.add_argument("--checkpoint", required=True, help="predictor checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output tsv (id, '; '-joined labels)")
    p.set_defaults(func=cmd_predict_keywords)

    p = sub.add_parser("generate", help="decode reports for every manifest record")
    p.add_argument("--checkpoint", required=True, help="generator checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output tsv (id, report text)")
    p.add_argument("--beam", type=int, default=1, help="beam width; 1 means greedy")
    p.add_argument("--keywords", choices=("expert", "predictor", "none"),
                   default="expert", help="keyword source at decode time")
    p.add_argument("--predictor-checkpoint", help="required with --keywords predictor")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score a prediction file with all caption metrics")
    p.add_argument("--predictions", required=True, help="tsv of (id, generated text)")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--references", help="tsv of (id, reference text)")
    group.add_argument("--reference-manifest", help="manifest whose descriptions are references")
    p.add_argument("--out", help="also write the scores to this report file")
    p.add_argument("--label", default="run", help="row label in the printed table")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("visualize", help="export attention traces as BMP grids + HTML")
    p.add_argument("--checkpoint", required=True, help="generator checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, default=4, help="number of samples to trace")
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--keywords", choices=("expert", "none"), default="expert")
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("inspect-checkpoint", help="print checkpoint contents")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tensors", action="store_true", help="also list every tensor shape")
    p.set_defaults(func=cmd_inspect)

    return parser


def cmd_synth_data(args) -> int:
    cfg = SynthConfig(
        n_samples=args.n,
        seed=args.seed,
        long_reports=args.long_reports,
        image=ImageConfig(size=args.image_size, patch=args.patch, channels=3),
    )
    manifest = generate_dataset(args.out, cfg)
    print(manifest)
    return 0


def cmd_train(args) -> int:
    config = read_train_config(args.config)
    prepared = prepare_for_config(args.manifest, config)
    log = None if args.quiet else print
    result = train_model(prepared, config, args.out, log=log)
    print(f"best epoch {result.best_epoch} score {result.best_score:.4f}")
    print(result.checkpoint_path)
    return 0


def _load_generator(path) -> ReportGenerator:
    model, _ = load_checkpoint(path)
    if not isinstance(model, ReportGenerator):
        raise CheckpointError(f"{path}: not a generator checkpoint")
    return model


def _load_predictor(path) -> KeywordPredictor:
    model, _ = load_checkpoint(path)
    if not isinstance(model, KeywordPredictor):
        raise CheckpointError(f"{path}: not a predictor checkpoint")
    return model


def cmd_predict_keywords(args) -> int:
    model = _load_predictor(args.checkpoint)
    records = read_manifest(args.manifest)
    rows = []
    for rec in records:
        features = load_image_features(rec.image_path, model.image_config)
        predicted = model.predict(features)
        rows.append((rec.sample_id, "; ".join(predicted.labels(model.kw_vocab))))
    write_prediction_file(args.out, rows)
    print(f"{len(rows)} predictions -> {args.out}")
    return 0


def _decode_keywords(args, model: ReportGenerator, rec, features) -> tuple[int, ...]:
    if args.keywords == "expert":
        return KeywordSet.from_labels(rec.keyword_labels, model.kw_vocab).ids
    if args.keywords == "none":
        return ()
    predictor = getattr(args, "_predictor", None)
    if predictor is None:
        if not args.predictor_checkpoint:
            raise ConfigError("--keywords predictor needs --predictor-checkpoint")
        predictor = _load_predictor(args.predictor_checkpoint)
        args._predictor = predictor
    labels = predictor.predict(features).labels(predictor.kw_vocab)
    return KeywordSet.from_labels(labels, model.kw_vocab).ids


def cmd_generate(args) -> int:
    if args.beam < 1:
        raise ConfigError(f"--beam must be >= 1, got {args.beam}")
    model = _load_generator(args.checkpoint)
    records = read_manifest(args.manifest)
    rows = []
    for rec in records:
        features = load_image_features(rec.image_path, model.image_config)
        kw_ids = _decode_keywords(args, model, rec, features)
        if args.beam == 1:
            result = model.greedy_decode(features, kw_ids)
        else:
            result = model.beam_decode(features, kw_ids, beam_width=args.beam)
        rows.append((rec.sample_id, result.text(model.vocab)))
    write_prediction_file(args.out, rows)
    print(f"{len(rows)} reports -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    if args.reference_manifest:
        records = read_manifest(args.reference_manifest)
        references = [(r.sample_id, " ".join(tokenize(r.description))) for r in records]
        fd, ref_path = tempfile.mkstemp(suffix=".tsv")
        os.close(fd)
        try:
            write_prediction_file(ref_path, references)
            report = evaluate_run(args.predictions, ref_path)
        finally:
            os.unlink(ref_path)
    else:
        report = evaluate_run(args.predictions, args.references)
    print(format_table_row(report, label=args.label))
    if args.out:
        write_metric_report(args.out, report, label=args.label)
    return 0


def cmd_visualize(args) -> int:
    if args.n < 1:
        raise ConfigError(f"--n must be >= 1, got {args.n}")
    model = _load_generator(args.checkpoint)
    records = read_manifest(args.manifest)[: args.n]
    traces, images = [], {}
    for rec in records:
        features = load_image_features(rec.image_path, model.image_config)
        if args.keywords == "expert":
            kw_set = KeywordSet.from_labels(rec.keyword_labels, model.kw_vocab)
        else:
            kw_set = KeywordSet()
        if args.beam == 1:
            result = model.greedy_decode(features, kw_set.ids)
        else:
            result = model.beam_decode(features, kw_set.ids, beam_width=args.beam)
        traces.append(
            trace_from_decode(
                rec.sample_id, result, model.vocab,
                kw_set.labels(model.kw_vocab), rec.image_path,
            )
        )
        images[rec.sample_id] = features_to_raster(features, model.image_config)
    index = export_trace_report(traces, args.out, images)
    print(index)
    return 0


def cmd_inspect(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    total = sum(p.data.size for p in model.params.values())
    print(f"kind: {meta['kind']}")
    for key, value in meta["spec"].items():
        print(f"spec.{key}: {value}")
    for key, value in meta["image_config"].items():
        print(f"image.{key}: {value}")
    if meta["kind"] == "generator":
        print(f"vocab: {len(model.vocab)} tokens")
        print(f"keyword vocab: {len(model.kw_vocab)} labels")
        print(f"keyword word vocab: {len(model.kw_word_vocab)} tokens")
    else:
        print(f"keyword vocab: {len(model.kw_vocab)} labels")
    print(f"parameters: {total} floats in {len(model.params)} tensors")
    train_meta = meta.get("train") or {}
    if "epoch" in train_meta:
        print(f"saved at epoch: {train_meta['epoch']}")
    if "val_score" in train_meta:
        print(f"selection score: {train_meta['val_score']}")
    if args.tensors:
        for name, p in model.params.items():
            print(f"  {name}  {tuple(p.data.shape)}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except (ConfigError, DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RetinaGenError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
