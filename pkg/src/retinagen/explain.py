"""Attention-trace export: JSON traces, BMP heatmap grids, an HTML index.

Everything written here is self-contained and dependency-free to open: BMP
is hand-encoded (24-bit, bottom-up), text labels use a built-in 5x7 bitmap
font, and index.html inlines every image as a base64 data URI, so the whole
report can be copied around as loose files.

A trace stores one attention row per generated token over the fused memory
(image patches first, then keywords).  Rows must sum to 1; validate() turns
a violated invariant into IntegrityError rather than a silent bad picture.
"""

from __future__ import annotations

import base64
import html
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IntegrityError
from .text import Vocabulary

__all__ = [
    "AttentionTrace",
    "trace_from_decode",
    "save_trace",
    "load_trace",
    "top_keyword_weights",
    "write_bmp",
    "render_trace_grid",
    "export_trace_report",
]

ROW_SUM_TOL = 1e-6
TRACE_VERSION = 1


@dataclass
class AttentionTrace:
    sample_id: str
    tokens: tuple[str, ...]
    attention: np.ndarray          # [len(tokens), num_image_rows + num_keyword_rows]
    num_image_rows: int
    num_keyword_rows: int
    keyword_labels: tuple[str, ...]
    report_text: str
    image_path: str | None = None

    def validate(self) -> None:
        steps, width = self.attention.shape
        if steps != len(self.tokens):
            raise IntegrityError(
                f"trace {self.sample_id}: {len(self.tokens)} tokens but "
                f"{steps} attention rows"
            )
        if width != self.num_image_rows + self.num_keyword_rows:
            raise IntegrityError(
                f"trace {self.sample_id}: attention width {width} != "
                f"{self.num_image_rows} image + {self.num_keyword_rows} keyword rows"
            )
        sums = self.attention.sum(axis=-1)
        bad = np.abs(sums - 1.0) > ROW_SUM_TOL
        if np.any(bad):
            step = int(np.argmax(bad))
            raise IntegrityError(
                f"trace {self.sample_id}: attention row {step} sums to "
                f"{sums[step]!r}, expected 1 within {ROW_SUM_TOL}"
            )

    def image_part(self) -> np.ndarray:
        return self.attention[:, : self.num_image_rows]

    def keyword_part(self) -> np.ndarray:
        return self.attention[:, self.num_image_rows :]


def trace_from_decode(
    sample_id: str,
    result,
    vocab: Vocabulary,
    keyword_labels,
    image_path=None,
) -> AttentionTrace:
    """Build a validated trace from a DecodeResult."""
    trace = AttentionTrace(
        sample_id=sample_id,
        tokens=tuple(vocab.decode_id(i) for i in result.token_ids),
        attention=np.asarray(result.attention, dtype=np.float64),
        num_image_rows=result.num_image_rows,
        num_keyword_rows=result.num_keyword_rows,
        keyword_labels=tuple(keyword_labels),
        report_text=result.text(vocab),
        image_path=str(image_path) if image_path else None,
    )
    trace.validate()
    return trace


def top_keyword_weights(trace: AttentionTrace, step: int, k: int = 3):
    """(label, weight) pairs for the most-attended keyword rows at one step."""
    weights = trace.keyword_part()[step]
    labels = list(trace.keyword_labels)
    while len(labels) < len(weights):
        labels.append("<none>")
    order = sorted(range(len(weights)), key=lambda i: (-weights[i], i))
    return [(labels[i], float(weights[i])) for i in order[:k]]


# -- JSON trace files ---------------------------------------------------------------
#
# Floats are serialized with repr-shortest formatting (json default), which
# round-trips float64 bit-exactly.


def save_trace(path, trace: AttentionTrace) -> None:
    trace.validate()
    doc = {
        "trace_version": TRACE_VERSION,
        "sample_id": trace.sample_id,
        "tokens": list(trace.tokens),
        "attention": [list(map(float, row)) for row in trace.attention],
        "num_image_rows": trace.num_image_rows,
        "num_keyword_rows": trace.num_keyword_rows,
        "keyword_labels": list(trace.keyword_labels),
        "report_text": trace.report_text,
        "image_path": trace.image_path,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_trace(path) -> AttentionTrace:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("trace_version") != TRACE_VERSION:
        raise IntegrityError(f"{path}: unsupported trace version {doc.get('trace_version')}")
    trace = AttentionTrace(
        sample_id=doc["sample_id"],
        tokens=tuple(doc["tokens"]),
        attention=np.array(doc["attention"], dtype=np.float64),
        num_image_rows=int(doc["num_image_rows"]),
        num_keyword_rows=int(doc["num_keyword_rows"]),
        keyword_labels=tuple(doc["keyword_labels"]),
        report_text=doc["report_text"],
        image_path=doc.get("image_path"),
    )
    trace.validate()
    return trace


# -- BMP encoding ------------------------------------------------------------------


def write_bmp(path, pixels: np.ndarray) -> None:
    """Encode [height, width, 3] uint8 RGB as a 24-bit uncompressed BMP."""
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise IntegrityError(f"write_bmp wants uint8 [h, w, 3], got {pixels.dtype} {pixels.shape}")
    height, width = pixels.shape[:2]
    row_size = (width * 3 + 3) & ~3
    image_size = row_size * height
    header = struct.pack(
        "<2sIHHIIiiHHIIiiII",
        b"BM", 54 + image_size, 0, 0, 54,
        40, width, height, 1, 24, 0, image_size, 2835, 2835, 0, 0,
    )
    rows = np.zeros((height, row_size), dtype=np.uint8)
    rows[:, : width * 3] = pixels[::-1, :, ::-1].reshape(height, width * 3)  # bottom-up BGR
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rows.tobytes())


# -- 5x7 bitmap font ----------------------------------------------------------------

_FONT = {
    "A": ("01110", "10001", "10001", "11111", "10001", "10001", "10001"),
    "B": ("11110", "10001", "10001", "11110", "10001", "10001", "11110"),
    "C": ("01110", "10001", "10000", "10000", "10000", "10001", "01110"),
    "D": ("11110", "10001", "10001", "10001", "10001", "10001", "11110"),
    "E": ("11111", "10000", "10000", "11110", "10000", "10000", "11111"),
    "F": ("11111", "10000", "10000", "11110", "10000", "10000", "10000"),
    "G": ("01110", "10001", "10000", "10111", "10001", "10001", "01111"),
    "H": ("10001", "10001", "10001", "11111", "10001", "10001", "10001"),
    "I": ("01110", "00100", "00100", "00100", "00100", "00100", "01110"),
    "J": ("00111", "00010", "00010", "00010", "00010", "10010", "01100"),
    "K": ("10001", "10010", "10100", "11000", "10100", "10010", "10001"),
    "L": ("10000", "10000", "10000", "10000", "10000", "10000", "11111"),
    "M": ("10001", "11011", "10101", "10101", "10001", "10001", "10001"),
    "N": ("10001", "11001", "10101", "10011", "10001", "10001", "10001"),
    "O": ("01110", "10001", "10001", "10001", "10001", "10001", "01110"),
    "P": ("11110", "10001", "10001", "11110", "10000", "10000", "10000"),
    "Q": ("01110", "10001", "10001", "10001", "10101", "10010", "01101"),
    "R": ("11110", "10001", "10001", "11110", "10100", "10010", "10001"),
    "S": ("01111", "10000", "10000", "01110", "00001", "00001", "11110"),
    "T": ("11111", "00100", "00100", "00100", "00100", "00100", "00100"),
    "U": ("10001", "10001", "10001", "10001", "10001", "10001", "01110"),
    "V": ("10001", "10001", "10001", "10001", "10001", "01010", "00100"),
    "W": ("10001", "10001", "10001", "10101", "10101", "11011", "10001"),
    "X": ("10001", "10001", "01010", "00100", "01010", "10001", "10001"),
    "Y": ("10001", "10001", "01010", "00100", "00100", "00100", "00100"),
    "Z": ("11111", "00001", "00010", "00100", "01000", "10000", "11111"),
    "0": ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    "1": ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    "2": ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    "3": ("11110", "00001", "00001", "01110", "00001", "00001", "11110"),
    "4": ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    "5": ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    "6": ("01110", "10000", "10000", "11110", "10001", "10001", "01110"),
    "7": ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    "8": ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    "9": ("01110", "10001", "10001", "01111", "00001", "00001", "01110"),
    ".": ("00000", "00000", "00000", "00000", "00000", "01100", "01100"),
    ",": ("00000", "00000", "00000", "00000", "01100", "00100", "01000"),
    ";": ("00000", "01100", "01100", "00000", "01100", "00100", "01000"),
    ":": ("00000", "01100", "01100", "00000", "01100", "01100", "00000"),
    "-": ("00000", "00000", "00000", "01110", "00000", "00000", "00000"),
    "_": ("00000", "00000", "00000", "00000", "00000", "00000", "11111"),
    "/": ("00001", "00010", "00010", "00100", "01000", "01000", "10000"),
    "<": ("00010", "00100", "01000", "10000", "01000", "00100", "00010"),
    ">": ("01000", "00100", "00010", "00001", "00010", "00100", "01000"),
    "(": ("00010", "00100", "01000", "01000", "01000", "00100", "00010"),
    ")": ("01000", "00100", "00010", "00010", "00010", "00100", "01000"),
    "%": ("11001", "11010", "00010", "00100", "01000", "01011", "10011"),
    "=": ("00000", "00000", "11111", "00000", "11111", "00000", "00000"),
    "?": ("01110", "10001", "00001", "00010", "00100", "00000", "00100"),
    " ": ("00000", "00000", "00000", "00000", "00000", "00000", "00000"),
}
_GLYPH_W, _GLYPH_H = 5, 7


def draw_text(canvas: np.ndarray, x: int, y: int, text: str, color=(255, 255, 255)) -> None:
    """Stamp 5x7 glyphs onto an RGB canvas; unknown characters become '?'."""
    for ch in text.upper():
        glyph = _FONT.get(ch, _FONT["?"])
        if x + _GLYPH_W > canvas.shape[1]:
            break
        for gy, row in enumerate(glyph):
            for gx, bit in enumerate(row):
                if bit == "1" and 0 <= y + gy < canvas.shape[0]:
                    canvas[y + gy, x + gx] = color
        x += _GLYPH_W + 1


# -- heatmap rendering ---------------------------------------------------------------


def _bilinear_upsample(grid: np.ndarray, size: int) -> np.ndarray:
    g = grid.shape[0]
    coords = (np.arange(size) + 0.5) * g / size - 0.5
    lo = np.clip(np.floor(coords).astype(int), 0, g - 1)
    hi = np.clip(lo + 1, 0, g - 1)
    frac = np.clip(coords - lo, 0.0, 1.0)
    rows = grid[lo, :] * (1.0 - frac)[:, None] + grid[hi, :] * frac[:, None]
    return rows[:, lo] * (1.0 - frac)[None, :] + rows[:, hi] * frac[None, :]


_CAPTION_H = 11
_GRID_COLS = 6


def render_trace_grid(trace: AttentionTrace, image_pixels: np.ndarray) -> np.ndarray:
    """One cell per generated token: red attention overlay plus the token text.

    ``image_pixels`` is the decoded uint8 [size, size, 3] input raster; patch
    attention is bilinearly upsampled to the raster size and alpha-blended.
    """
    trace.validate()
    size = image_pixels.shape[0]
    grid_side = int(round(np.sqrt(trace.num_image_rows)))
    if grid_side * grid_side != trace.num_image_rows:
        raise IntegrityError(
            f"trace {trace.sample_id}: {trace.num_image_rows} image rows is not square"
        )
    n = len(trace.tokens)
    cols = min(_GRID_COLS, max(1, n))
    rows = (n + cols - 1) // cols
    cell_h = size + _CAPTION_H
    canvas = np.zeros((rows * cell_h, cols * size, 3), dtype=np.uint8)
    canvas[:] = 24
    for step in range(n):
        weights = trace.image_part()[step].reshape(grid_side, grid_side)
        peak = weights.max()
        alpha = _bilinear_upsample(weights / peak if peak > 0 else weights, size)
        overlay = image_pixels.astype(np.float64)
        overlay[:, :, 0] = overlay[:, :, 0] * (1 - 0.65 * alpha) + 255.0 * 0.65 * alpha
        overlay[:, :, 1] = overlay[:, :, 1] * (1 - 0.65 * alpha)
        overlay[:, :, 2] = overlay[:, :, 2] * (1 - 0.65 * alpha)
        r, c = divmod(step, cols)
        y0, x0 = r * cell_h, c * size
        canvas[y0 : y0 + size, x0 : x0 + size] = overlay.round().clip(0, 255).astype(np.uint8)
        draw_text(canvas, x0 + 1, y0 + size + 2, trace.tokens[step][: size // 6])
    return canvas


# -- report assembly ----------------------------------------------------------------


def _index_entry(trace: AttentionTrace, bmp_bytes: bytes) -> str:
    data_uri = "data:image/bmp;base64," + base64.b64encode(bmp_bytes).decode("ascii")
    keywords = ", ".join(trace.keyword_labels) if trace.keyword_labels else "(none)"
    step_rows = []
    for step in range(len(trace.tokens)):
        tops = top_keyword_weights(trace, step, k=3)
        cell = ", ".join(f"{html.escape(lab)} {w:.3f}" for lab, w in tops)
        step_rows.append(
            f"<tr><td>{step}</td><td>{html.escape(trace.tokens[step])}</td>"
            f"<td>{cell}</td></tr>"
        )
    return f"""
<section>
  <h2>{html.escape(trace.sample_id)}</h2>
  <p><b>keywords:</b> {html.escape(keywords)}</p>
  <p><b>generated:</b> {html.escape(trace.report_text)}</p>
  <img alt="attention grid for {html.escape(trace.sample_id)}" src="{data_uri}">
  <details><summary>per-step keyword attention</summary>
  <table border="1"><tr><th>step</th><th>token</th><th>top keyword rows</th></tr>
  {''.join(step_rows)}
  </table></details>
  <p><a href="{html.escape(trace.sample_id)}.trace">raw trace (JSON)</a></p>
</section>
"""


def export_trace_report(traces, out_dir, images: dict[str, np.ndarray]) -> Path:
    """Write per-sample .trace and .grid.bmp files plus a single index.html.

    ``images`` maps sample_id to its decoded uint8 raster.  Returns the index
    path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sections = []
    for trace in traces:
        trace.validate()
        save_trace(out_dir / f"{trace.sample_id}.trace", trace)
        grid = render_trace_grid(trace, images[trace.sample_id])
        bmp_path = out_dir / f"{trace.sample_id}.grid.bmp"
        write_bmp(bmp_path, grid)
        sections.append(_index_entry(trace, bmp_path.read_bytes()))
    index = out_dir / "index.html"
    with open(index, "w", encoding="utf-8") as fh:
        fh.write(
            "<!doctype html>\n<html><head><meta charset='utf-8'>"
            "<title>attention traces</title>"
            "<style>body{font-family:monospace;background:#111;color:#ddd}"
            "img{image-rendering:pixelated;max-width:100%}"
            "section{margin-bottom:2em}</style></head><body>\n"
            "<h1>attention traces</h1>\n"
        )
        fh.write("\n".join(sections))
        fh.write("\n</body></html>\n")
    return index
