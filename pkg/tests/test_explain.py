"""Attention-trace files, BMP encoding, and the HTML report bundle."""

import numpy as np
import pytest
from PIL import Image

from retinagen.data import ImageConfig
from retinagen.errors import IntegrityError
from retinagen.explain import (
    AttentionTrace,
    draw_text,
    export_trace_report,
    load_trace,
    render_trace_grid,
    save_trace,
    top_keyword_weights,
    trace_from_decode,
    write_bmp,
)
from retinagen.explain import _bilinear_upsample
from retinagen.generator import GeneratorSpec, ReportGenerator
from retinagen.text import Vocabulary, build_vocab, tokenize


def make_trace(steps=3, img_rows=4, kw_rows=2, seed=0):
    rng = np.random.default_rng(seed)
    raw = rng.random((steps, img_rows + kw_rows))
    att = raw / raw.sum(axis=-1, keepdims=True)
    return AttentionTrace(
        sample_id="case_01",
        tokens=tuple(f"tok{i}" for i in range(steps)),
        attention=att,
        num_image_rows=img_rows,
        num_keyword_rows=kw_rows,
        keyword_labels=("macular edema", "drusen"),
        report_text=" ".join(f"tok{i}" for i in range(steps)),
        image_path="images/case_01.png",
    )


class TestTraceValidation:
    def test_valid_trace_passes(self):
        make_trace().validate()

    def test_row_sum_violation_rejected(self):
        trace = make_trace()
        trace.attention[1, 0] += 1e-3
        with pytest.raises(IntegrityError, match="row 1"):
            trace.validate()

    def test_token_count_mismatch_rejected(self):
        trace = make_trace()
        trace = AttentionTrace(**{**trace.__dict__, "tokens": ("just_one",)})
        with pytest.raises(IntegrityError, match="tokens"):
            trace.validate()

    def test_width_mismatch_rejected(self):
        trace = make_trace()
        trace = AttentionTrace(**{**trace.__dict__, "num_keyword_rows": 5})
        with pytest.raises(IntegrityError, match="width"):
            trace.validate()

    def test_parts_split_at_image_boundary(self):
        trace = make_trace(img_rows=4, kw_rows=2)
        assert trace.image_part().shape == (3, 4)
        assert trace.keyword_part().shape == (3, 2)
        joined = np.concatenate([trace.image_part(), trace.keyword_part()], axis=1)
        assert np.array_equal(joined, trace.attention)


class TestTraceFiles:
    def test_round_trip_is_exact(self, tmp_path):
        trace = make_trace(steps=5, seed=3)
        path = tmp_path / "case_01.trace"
        save_trace(path, trace)
        back = load_trace(path)
        assert back.tokens == trace.tokens
        assert np.array_equal(back.attention, trace.attention)
        assert back.keyword_labels == trace.keyword_labels
        assert back.report_text == trace.report_text
        assert back.image_path == trace.image_path

    def test_save_refuses_invalid_trace(self, tmp_path):
        trace = make_trace()
        trace.attention[0] *= 2.0
        with pytest.raises(IntegrityError):
            save_trace(tmp_path / "bad.trace", trace)

    def test_load_rejects_wrong_version(self, tmp_path):
        path = tmp_path / "old.trace"
        path.write_text('{"trace_version": 99}')
        with pytest.raises(IntegrityError, match="version"):
            load_trace(path)


class TestTopKeywords:
    def test_orders_by_weight(self):
        att = np.array([[0.1, 0.1, 0.2, 0.1, 0.5]])
        trace = AttentionTrace(
            sample_id="x",
            tokens=("a",),
            attention=att,
            num_image_rows=2,
            num_keyword_rows=3,
            keyword_labels=("p", "q", "r"),
            report_text="a",
        )
        tops = top_keyword_weights(trace, 0, k=2)
        assert tops == [("r", 0.5), ("p", 0.2)]

    def test_pads_missing_labels(self):
        att = np.ones((1, 4)) / 4.0
        trace = AttentionTrace(
            sample_id="x",
            tokens=("a",),
            attention=att,
            num_image_rows=2,
            num_keyword_rows=2,
            keyword_labels=(),
            report_text="a",
        )
        tops = top_keyword_weights(trace, 0, k=2)
        assert [lab for lab, _ in tops] == ["<none>", "<none>"]


class TestBmp:
    def test_round_trips_through_pillow(self, tmp_path):
        rng = np.random.default_rng(0)
        pixels = rng.integers(0, 256, size=(9, 5, 3), dtype=np.uint8)  # width forces row padding
        path = tmp_path / "img.bmp"
        write_bmp(path, pixels)
        back = np.asarray(Image.open(path).convert("RGB"))
        assert np.array_equal(back, pixels)

    def test_output_bytes_deterministic(self, tmp_path):
        pixels = np.random.default_rng(1).integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
        a, b = tmp_path / "a.bmp", tmp_path / "b.bmp"
        write_bmp(a, pixels)
        write_bmp(b, pixels)
        assert a.read_bytes() == b.read_bytes()

    def test_rejects_wrong_dtype(self, tmp_path):
        with pytest.raises(IntegrityError):
            write_bmp(tmp_path / "x.bmp", np.zeros((4, 4, 3)))

    def test_header_fields(self, tmp_path):
        path = tmp_path / "h.bmp"
        write_bmp(path, np.zeros((2, 3, 3), dtype=np.uint8))
        raw = path.read_bytes()
        assert raw[:2] == b"BM"
        # 3px * 3 bytes = 9, padded to 12 per row, 2 rows -> 24 + 54 header
        assert len(raw) == 54 + 24

    def test_draw_text_changes_pixels(self):
        canvas = np.zeros((10, 60, 3), dtype=np.uint8)
        draw_text(canvas, 1, 1, "edema")
        assert canvas.sum() > 0


class TestUpsample:
    def test_constant_grid_stays_constant(self):
        up = _bilinear_upsample(np.full((4, 4), 0.25), 32)
        assert np.allclose(up, 0.25)

    def test_gradient_is_monotone_across_rows(self):
        grid = np.array([[0.0, 0.0], [1.0, 1.0]])
        up = _bilinear_upsample(grid, 16)
        col = up[:, 0]
        assert np.all(np.diff(col) >= 0)
        assert col[0] < 0.1 and col[-1] > 0.9

    def test_output_shape(self):
        assert _bilinear_upsample(np.eye(3), 24).shape == (24, 24)


IMG_CFG = ImageConfig(size=16, patch=8, channels=1)


def tiny_model():
    corpus = [tokenize("the macula shows focal edema .")]
    vocab = build_vocab(corpus)
    kw_vocab = Vocabulary(["macular edema", "drusen"])
    kw_words = build_vocab([tokenize(lab) for lab in ["macular edema", "drusen"]])
    spec = GeneratorSpec(
        hidden=16, n_heads=2, kw_layers=1, dec_layers=1, ffn_dim=16,
        keyword_encoder="contextual", fusion="transfuser", decoder="masked", max_len=8,
    )
    return ReportGenerator(spec, vocab, kw_vocab, kw_words, IMG_CFG, seed=0)


class TestRendering:
    def test_trace_from_decode_validates(self):
        model = tiny_model()
        feats = np.random.default_rng(0).random((IMG_CFG.regions, IMG_CFG.region_dim))
        result = model.greedy_decode(feats, (4,))
        trace = trace_from_decode("s1", result, model.vocab, ("macular edema",), "img.png")
        assert len(trace.tokens) == len(result.token_ids)
        assert trace.num_image_rows == IMG_CFG.regions

    def test_grid_shape_and_determinism(self):
        trace = make_trace(steps=7, img_rows=4, kw_rows=2)
        image = np.random.default_rng(2).integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
        a = render_trace_grid(trace, image)
        b = render_trace_grid(trace, image)
        assert np.array_equal(a, b)
        # 7 tokens at 6 columns -> 2 rows of cells
        assert a.shape == (2 * (16 + 11), 6 * 16, 3)
        assert a.dtype == np.uint8

    def test_non_square_patch_count_rejected(self):
        trace = make_trace(img_rows=3, kw_rows=1)
        image = np.zeros((16, 16, 3), dtype=np.uint8)
        with pytest.raises(IntegrityError, match="square"):
            render_trace_grid(trace, image)

    def test_attention_shifts_overlay(self):
        # all weight on patch 0 vs patch 3 must recolor different corners
        base = np.full((16, 16, 3), 120, dtype=np.uint8)
        att = np.zeros((1, 5))
        att[0, 0], att[0, 4] = 0.9, 0.1
        kwargs = dict(
            sample_id="x", tokens=("a",), num_image_rows=4, num_keyword_rows=1,
            keyword_labels=("k",), report_text="a",
        )
        top_left = render_trace_grid(AttentionTrace(attention=att, **kwargs), base)
        att2 = np.zeros((1, 5))
        att2[0, 3], att2[0, 4] = 0.9, 0.1
        bottom_right = render_trace_grid(AttentionTrace(attention=att2, **kwargs), base)
        red = lambda img, y, x: int(img[y, x, 0]) - int(img[y, x, 2])
        assert red(top_left, 2, 2) > red(top_left, 13, 13)
        assert red(bottom_right, 13, 13) > red(bottom_right, 2, 2)


class TestExportBundle:
    def test_writes_all_files(self, tmp_path):
        traces = [make_trace(steps=4, seed=i) for i in range(2)]
        traces[1] = AttentionTrace(**{**traces[1].__dict__, "sample_id": "case_02"})
        images = {
            t.sample_id: np.random.default_rng(9).integers(0, 256, (16, 16, 3), dtype=np.uint8)
            for t in traces
        }
        index = export_trace_report(traces, tmp_path / "out", images)
        assert index.exists()
        html_text = index.read_text()
        assert "data:image/bmp;base64," in html_text
        assert "case_01" in html_text and "case_02" in html_text
        for t in traces:
            back = load_trace(tmp_path / "out" / f"{t.sample_id}.trace")
            assert np.array_equal(back.attention, t.attention)
            bmp = tmp_path / "out" / f"{t.sample_id}.grid.bmp"
            Image.open(bmp).verify()

    def test_end_to_end_from_model(self, tmp_path):
        model = tiny_model()
        rng = np.random.default_rng(4)
        feats = rng.random((IMG_CFG.regions, IMG_CFG.region_dim))
        result = model.greedy_decode(feats, (4, 5))
        trace = trace_from_decode("sample_a", result, model.vocab,
                                  ("macular edema", "drusen"))
        image = rng.integers(0, 256, (IMG_CFG.size, IMG_CFG.size, 3), dtype=np.uint8)
        index = export_trace_report([trace], tmp_path, {"sample_a": image})
        assert "per-step keyword attention" in index.read_text()
