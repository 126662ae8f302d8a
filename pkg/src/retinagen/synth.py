"""Synthetic retinal datasets with controllable report structure.

Every sample is a small drawn "fundus" raster plus a templated clinical
description.  Two kinds of keyword drive the text:

* visual keywords leave a fixed, distinctive marker on the image, so they are
  recoverable from pixels alone;
* latent keywords change the text only (referral notes, history), so nothing
  in the image reveals them.

That split is what makes conditioning experiments meaningful: a generator
given expert keywords can state the latent findings, one given predicted
keywords recovers only the visual ones, and one given no keywords must lean
on the image alone.

With ``long_reports`` each description gains a tone paragraph and a closing
plan sentence whose wording depends on the keywords chosen at the very start,
giving a long-range dependency across the whole report.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .data import ImageConfig, write_manifest

__all__ = [
    "SynthConfig",
    "VISUAL_KEYWORDS",
    "LATENT_KEYWORDS",
    "RETINA_COLORS",
    "generate_dataset",
    "render_fundus",
    "compose_report",
]

VISUAL_KEYWORDS = (
    "cotton wool spots",
    "drusen deposits",
    "hard exudates",
    "macular edema",
    "retinal hemorrhage",
)

LATENT_KEYWORDS = (
    "family history",
    "followup advised",
    "genetic screening",
)

RETINA_COLORS = {
    "amber": (196, 120, 40),
    "crimson": (170, 40, 36),
    "tawny": (150, 96, 36),
    "pale": (214, 170, 120),
}

# marker geometry: (center x, center y, half size, rgb)
_MARKERS = {
    "cotton wool spots": (16, 48, 5, (232, 232, 224)),
    "drusen deposits": (16, 16, 5, (240, 220, 60)),
    "hard exudates": (48, 16, 5, (250, 250, 250)),
    "macular edema": (32, 32, 6, (70, 190, 190)),
    "retinal hemorrhage": (48, 48, 6, (90, 8, 8)),
}

_CLAUSES = {
    "cotton wool spots": "cotton wool spots appear in the inferior quadrant .",
    "drusen deposits": "multiple drusen deposits are scattered across the posterior pole .",
    "hard exudates": "hard exudates form a ring near the superior arcade .",
    "macular edema": "macular edema thickens the central retina .",
    "retinal hemorrhage": "a retinal hemorrhage obscures the temporal margin .",
    "family history": "family history of ocular disease is documented .",
    "followup advised": "close followup is advised within three months .",
    "genetic screening": "genetic screening is recommended for this patient .",
}

_TONE_PARAGRAPHS = {
    "amber": (
        "the amber background shows an even glow from the nerve fiber layer "
        "and the vessels follow a smooth course toward the periphery without "
        "focal narrowing or beading ."
    ),
    "crimson": (
        "the crimson background carries a deep saturated hue across the "
        "posterior pole and the arterioles remain regular in caliber from "
        "the disc to the far periphery ."
    ),
    "tawny": (
        "the tawny background gives a muted reflex over the macula and the "
        "venules branch in an orderly pattern with no crossing changes along "
        "their entire visible course ."
    ),
    "pale": (
        "the pale background suggests a lightly pigmented epithelium and the "
        "capillary bed keeps a uniform texture from the arcades outward with "
        "no areas of dropout ."
    ),
}

_CLOSING = "no other significant findings are noted ."


@dataclass(frozen=True)
class SynthConfig:
    n_samples: int = 200
    seed: int = 0
    long_reports: bool = False
    max_keywords: int = 4
    visual_rate: float = 0.35
    latent_rate: float = 0.4
    image: ImageConfig = ImageConfig()


def _fill_circle(pixels: np.ndarray, cx: int, cy: int, radius: int, rgb) -> None:
    size = pixels.shape[0]
    yy, xx = np.ogrid[:size, :size]
    mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius * radius
    pixels[mask] = rgb


def render_fundus(color: str, visual_keywords, cfg: ImageConfig) -> np.ndarray:
    """Draw one deterministic uint8 raster for (color, visual keyword set)."""
    size = cfg.size
    scale = size / 64.0
    pixels = np.zeros((size, size, 3), dtype=np.float64)
    pixels[:] = (18, 10, 8)
    _fill_circle(pixels, size // 2, size // 2, int(30 * scale), RETINA_COLORS[color])
    # optic disc and two vessel strokes, shared by every sample
    _fill_circle(pixels, int(20 * scale), int(36 * scale), int(4 * scale), (235, 210, 160))
    for t in np.linspace(0.0, 1.0, size * 2):
        x = int((20 + t * 38) * scale)
        y1 = int((36 - t * 22) * scale)
        y2 = int((36 + t * 18) * scale)
        for y in (y1, y2):
            if 0 <= x < size and 0 <= y < size:
                pixels[y, x] = (96, 26, 22)
    for label in sorted(visual_keywords):
        cx, cy, half, rgb = _MARKERS[label]
        cx, cy, half = int(cx * scale), int(cy * scale), max(1, int(half * scale))
        _fill_circle(pixels, cx, cy, half, rgb)
    if cfg.channels == 1:
        gray = pixels @ np.array([0.299, 0.587, 0.114])
        pixels = np.repeat(gray[:, :, None], 3, axis=2)
    return pixels.round().clip(0, 255).astype(np.uint8)


def plan_urgency(keywords) -> str:
    if "followup advised" in keywords:
        return "urgent"
    if "retinal hemorrhage" in keywords:
        return "early"
    return "routine"


def compose_report(color: str, keywords, long_reports: bool) -> str:
    """Deterministic description for (color, keyword set)."""
    article = "an" if color[0] in "aeiou" else "a"
    parts = [f"the fundus photograph demonstrates {article} {color} retina ."]
    if long_reports:
        parts.append(_TONE_PARAGRAPHS[color])
    parts.extend(_CLAUSES[label] for label in sorted(keywords))
    parts.append(_CLOSING)
    if long_reports:
        parts.append(f"the plan is {plan_urgency(keywords)} review .")
    return " ".join(parts)


def _sample_keywords(rng, cfg: SynthConfig) -> list[str]:
    chosen = [k for k in VISUAL_KEYWORDS if rng.random() < cfg.visual_rate]
    chosen += [k for k in LATENT_KEYWORDS if rng.random() < cfg.latent_rate]
    if len(chosen) > cfg.max_keywords:
        keep = rng.choice(len(chosen), size=cfg.max_keywords, replace=False)
        chosen = [chosen[i] for i in sorted(keep)]
    return sorted(chosen)


def generate_dataset(out_dir, cfg: SynthConfig) -> Path:
    """Write images/ and manifest.jsonl under ``out_dir``; returns the manifest path.

    Per-sample draws are keyed by (seed, index) so any prefix of the dataset
    is stable under a larger n_samples.
    """
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    records = []
    color_names = sorted(RETINA_COLORS)
    for index in range(cfg.n_samples):
        rng = np.random.default_rng((cfg.seed, index))
        color = color_names[int(rng.integers(len(color_names)))]
        keywords = _sample_keywords(rng, cfg)
        visual = [k for k in keywords if k in VISUAL_KEYWORDS]
        pixels = render_fundus(color, visual, cfg.image)
        name = f"synth_{index:05d}.png"
        Image.fromarray(pixels).save(images_dir / name)
        records.append(
            {
                "id": f"synth_{index:05d}",
                "image": f"images/{name}",
                "keywords": "; ".join(keywords),
                "description": compose_report(color, keywords, cfg.long_reports),
            }
        )
    manifest_path = out_dir / "manifest.jsonl"
    write_manifest(manifest_path, records)
    with open(out_dir / "synth_config.json", "w", encoding="utf-8") as fh:
        json.dump(
            {
                "n_samples": cfg.n_samples,
                "seed": cfg.seed,
                "long_reports": cfg.long_reports,
                "max_keywords": cfg.max_keywords,
                "visual_rate": cfg.visual_rate,
                "latent_rate": cfg.latent_rate,
                "image": cfg.image.to_dict(),
            },
            fh,
            indent=2,
        )
    return manifest_path
