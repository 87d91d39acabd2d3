"""Scanpath overlays: numbered fixation circles joined by saccade lines.

Predictions are drawn in blue, ground truth in brown, and the last
fixation of each path gets a thick black rim. The image is upscaled by an
integer factor first so circles and digits stay legible on small scenes.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .data import ImageSample, Scanpath

PREDICTION_COLOR = (40, 90, 230)
GROUND_TRUTH_COLOR = (150, 90, 40)
FINAL_RIM_COLOR = (0, 0, 0)
TEXT_COLOR = (255, 255, 255)


@dataclass(frozen=True)
class Marker:
    index: int  # 1-based position in the scanpath
    center: tuple[int, int]  # (x, y) in output pixels
    color: tuple[int, int, int]
    final: bool


def marker_centers(scanpath: Scanpath, width: int, height: int, scale: int = 4) -> list[tuple[int, int]]:
    """Output-pixel centres of each fixation: the middle of its source pixel after upscaling."""
    out = []
    for f in scanpath.fixations:
        px, py = f.pixel(width, height)
        out.append((px * scale + scale // 2, py * scale + scale // 2))
    return out


def _draw_path(draw: ImageDraw.ImageDraw, scanpath: Scanpath, color, width: int, height: int,
               scale: int, radius: int, font) -> list[Marker]:
    centers = marker_centers(scanpath, width, height, scale)
    if len(centers) > 1:
        draw.line(centers, fill=color, width=max(1, scale // 2))
    markers = []
    for i, (x, y) in enumerate(centers):
        final = i == len(centers) - 1
        rim = FINAL_RIM_COLOR if final else color
        draw.ellipse([x - radius, y - radius, x + radius, y + radius], fill=color, outline=rim,
                     width=max(2, radius // 3) if final else 1)
        draw.text((x, y), str(i + 1), fill=TEXT_COLOR, font=font, anchor="mm")
        markers.append(Marker(i + 1, (x, y), color, final))
    return markers


def render_scanpaths(image, prediction: Scanpath, ground_truth: Scanpath | None = None,
                     scale: int = 4, radius: int | None = None) -> tuple[Image.Image, list[Marker]]:
    """Overlay ``prediction`` (and optionally ``ground_truth``) on ``image``.

    Returns the RGB overlay and the markers drawn, ground truth first.
    """
    pixels = image.pixels if isinstance(image, ImageSample) else np.asarray(image)
    _, height, width = pixels.shape
    rgb = np.round(np.clip(pixels, 0, 1).transpose(1, 2, 0) * 255).astype(np.uint8)
    canvas = Image.fromarray(rgb, "RGB").resize((width * scale, height * scale), Image.NEAREST)
    radius = radius or max(5, 3 * scale)
    draw = ImageDraw.Draw(canvas)
    font = ImageFont.load_default()
    markers = []
    if ground_truth is not None:
        markers += _draw_path(draw, ground_truth, GROUND_TRUTH_COLOR, width, height, scale, radius, font)
    markers += _draw_path(draw, prediction, PREDICTION_COLOR, width, height, scale, radius, font)
    return canvas, markers


def save_overlay(canvas: Image.Image, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    canvas.save(path, format="PNG", optimize=False)
