"""Procedural style oracle and example scene generator.

A deterministic thickness/displacement rule stands in for an artist, so
recovery is measurable: the pipeline trains on the synthesized drawing and
its predictions are compared against the rule's output on held-out curves
generated from the same distribution.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .curves import (CurveSet, StrokeSet, nearest_pixel_indices, path_frames,
                     polyline_length, rasterize_curve_channel, resample_uniform)
from .rasterizer import Viewport, render
from .training import box_blur


@dataclass
class SynthStyle:
    """Analytic per-point stroke rules.

    Thickness: t(s, k) = t0 + t1*sin(2*pi*freq*s) + t2*k, clamped at 0,
    with s the normalized arc length and k the value of a chosen feature
    channel under the point. Displacement: amp*sin(2*pi*disp_freq*s) along
    the unit normal of the path frame.
    """
    t0: float = 2.0
    t1: float = 1.0
    freq: float = 1.0
    t2: float = 0.0
    feature_channel: int = 0
    amp: float = 1.0
    disp_freq: float = 1.0

    def validate(self):
        if self.t0 < 0:
            raise ValueError("t0 must be nonnegative")
        if self.freq < 0 or self.disp_freq < 0:
            raise ValueError("frequencies must be nonnegative")
        if self.feature_channel < 0:
            raise ValueError("feature_channel must be nonnegative")
        return self


def apply_style(style, cs, features=None):
    """Evaluate the rules on every path point; returns the ground truth.

    Displacement rides on the stored frame normal. For integer disp_freq
    the result is invariant to the digitization direction: reversing a path
    flips the normal and maps s to 1-s, which flips the sine as well.
    """
    style.validate()
    cs.validate()
    if style.t2 != 0.0 and features is None:
        raise ValueError("t2 != 0 needs a feature stack for the k channel")
    disp, thick = [], []
    for pts in cs.paths:
        _e, n, s = path_frames(pts)
        t = style.t0 + style.t1 * np.sin(2.0 * np.pi * style.freq * s)
        if style.t2 != 0.0:
            if style.feature_channel >= features.shape[0]:
                raise ValueError(f"feature_channel {style.feature_channel} "
                                 f"out of range for {features.shape[0]} channels")
            iy, ix = nearest_pixel_indices(pts, features.shape[1], features.shape[2])
            t = t + style.t2 * features[style.feature_channel, iy, ix]
        d = style.amp * np.sin(2.0 * np.pi * style.disp_freq * s)[:, None] * n
        thick.append(np.maximum(t, 0.0).astype(np.float32))
        disp.append(d.astype(np.float32))
    return StrokeSet(base=cs, displacement=disp, thickness=thick).validate()


def ink_drawing(gray, ink=(0.1, 0.1, 0.1)):
    """Compose an RGB drawing from a grayscale render (paper=1, ink=0).

    ink is a flat RGB color or the string "gradient" for a horizontal
    color ramp, exercising the texture stage with a position-dependent ink.
    """
    h, w = gray.shape
    alpha = 1.0 - np.asarray(gray, np.float32)
    if isinstance(ink, str):
        if ink != "gradient":
            raise ValueError(f"unknown ink mode {ink!r}")
        ramp = np.broadcast_to(
            (np.arange(w, dtype=np.float32) / max(w - 1, 1))[None, :], (h, w))
        color = np.stack([0.05 + 0.25 * ramp,
                          np.full((h, w), 0.1, np.float32),
                          0.3 - 0.25 * ramp], axis=0)
    else:
        color = np.asarray(ink, np.float32).reshape(3, 1, 1)
        color = np.broadcast_to(color, (3, h, w))
    return (1.0 - alpha[None] * (1.0 - color)).astype(np.float32)


def synth_drawing(style, cs, features=None, ink=(0.1, 0.1, 0.1), aa_width=1.0):
    """Ground-truth strokes plus the rendered drawing and grayscale mask."""
    strokes = apply_style(style, cs, features)
    vp = Viewport(0.0, 0.0, cs.width, cs.height)
    gray, _ = render(strokes, vp, aa_width=aa_width)
    return strokes, ink_drawing(gray, ink), gray


# ------------------------------------------------------------------ scenes

def _random_arc(rng, size, margin):
    r = size * rng.uniform(0.15, 0.45)
    span = rng.uniform(0.9, 2.4) * (1.0 if rng.random() < 0.5 else -1.0)
    th0 = rng.uniform(0.0, 2.0 * np.pi)
    ang = th0 + span * np.linspace(0.0, 1.0, 48)
    pts = np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)
    lo = pts.min(axis=0)
    extent = pts.max(axis=0) - lo
    avail = size - 2.0 * margin
    scale = min(1.0, avail / max(float(extent.max()), 1e-6))
    pts = (pts - lo) * scale
    extent = extent * scale
    pts[:, 0] += margin + rng.uniform(0.0, max(avail - extent[0], 0.0))
    pts[:, 1] += margin + rng.uniform(0.0, max(avail - extent[1], 0.0))
    return pts


def _smooth_field(rng, size, cells=8, radius=None):
    coarse = rng.random((cells, cells), np.float32)
    reps = int(np.ceil(size / cells))
    field = np.kron(coarse, np.ones((reps, reps), np.float32))[:size, :size]
    if radius is None:
        radius = max(size // 16, 1)
    return box_blur(box_blur(field, radius), radius).astype(np.float32)


def make_example_curves(size=128, n_paths=8, seed=0, spacing=2.0, margin=8.0):
    """Random arcs fitted inside the canvas, resampled at uniform spacing."""
    rng = np.random.default_rng([seed, 77])
    paths = []
    while len(paths) < n_paths:
        pts = resample_uniform(_random_arc(rng, size, margin), spacing)
        if polyline_length(pts) < size * 0.15 or pts.shape[0] < 8:
            continue
        paths.append(pts.astype(np.float32))
    return CurveSet(size, size, paths).validate()


def make_feature_stack(cs, seed=0):
    """Nine synthetic view channels; smooth stand-ins plus the curve raster.

    Channels 0 and 1 are the y and x position ramps, so canvas position is
    available to the networks as a cue.
    """
    size = cs.width
    if cs.height != size:
        raise ValueError("synthetic scenes are square")
    rng = np.random.default_rng([seed, 101])
    yy, xx = (np.mgrid[0:size, 0:size].astype(np.float32) + 0.5) / size
    rad = np.hypot(xx - 0.5, yy - 0.5) * 2.0
    stack = np.stack([
        yy,
        xx,
        np.clip(rad, 0.0, 1.0),
        0.5 + 0.5 * np.sin(2 * np.pi * xx) * np.sin(2 * np.pi * yy),
        _smooth_field(rng, size),
        _smooth_field(rng, size),
        np.clip(1.0 - rad, 0.0, 1.0),
        _smooth_field(rng, size),
        rasterize_curve_channel(cs),
    ]).astype(np.float32)
    return stack


def make_example_scene(size=128, n_paths=8, seed=0, spacing=2.0, margin=8.0):
    cs = make_example_curves(size, n_paths, seed, spacing, margin)
    return cs, make_feature_stack(cs, seed=seed)
