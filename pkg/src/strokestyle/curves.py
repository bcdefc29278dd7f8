"""Vector curve machinery: resampling, local frames, per-point features.

Coordinates are image-space pixels with the origin at the top-left corner and
y growing downward. A curve set carries its canvas size; a stroke set adds
per-point displacement and thickness on top of the base curves.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CURVE_FEATURE_COLUMNS = 5   # tangent (2), normal (2), normalized arc length
DEEP_FEATURE_COLUMNS = 40
FEATURE_COLUMNS = DEEP_FEATURE_COLUMNS + CURVE_FEATURE_COLUMNS


@dataclass
class CurveSet:
    width: int
    height: int
    paths: list = field(default_factory=list)  # each (M,2) float32, M >= 2

    def validate(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("canvas dimensions must be positive")
        for i, p in enumerate(self.paths):
            if p.ndim != 2 or p.shape[1] != 2 or p.shape[0] < 2:
                raise ValueError(f"path {i} must be (M,2) with M >= 2, got {p.shape}")
            if np.any(np.all(np.diff(p, axis=0) == 0, axis=1)):
                raise ValueError(f"path {i} has coincident consecutive points")
        return self


@dataclass
class StrokeSet:
    """Base curves plus per-point displacement (M,2) and thickness (M,)."""
    base: CurveSet
    displacement: list
    thickness: list

    def validate(self):
        self.base.validate()
        if len(self.displacement) != len(self.base.paths) or len(self.thickness) != len(self.base.paths):
            raise ValueError("displacement/thickness lists must match path count")
        for i, p in enumerate(self.base.paths):
            if self.displacement[i].shape != p.shape:
                raise ValueError(f"displacement {i} shape {self.displacement[i].shape} != {p.shape}")
            if self.thickness[i].shape != (p.shape[0],):
                raise ValueError(f"thickness {i} shape mismatch")
            if np.any(self.thickness[i] < 0):
                raise ValueError(f"thickness {i} has negative entries")
        return self

    def displaced_paths(self):
        return [(p + d).astype(np.float32) for p, d in zip(self.base.paths, self.displacement)]


def identity_strokes(cs, thickness=1.0):
    """StrokeSet with zero displacement and constant thickness."""
    disp = [np.zeros_like(p) for p in cs.paths]
    thick = [np.full(p.shape[0], thickness, np.float32) for p in cs.paths]
    return StrokeSet(base=cs, displacement=disp, thickness=thick)


def apply_displacement(strokes):
    """Bake displacements into a plain curve set on the same canvas."""
    return CurveSet(strokes.base.width, strokes.base.height, strokes.displaced_paths())


# ------------------------------------------------------------- resampling

def polyline_length(points):
    d = np.diff(np.asarray(points, np.float64), axis=0)
    return float(np.sqrt((d * d).sum(axis=1)).sum())


def resample_uniform(points, spacing):
    """Resample a polyline at uniform arc-length steps, keeping both endpoints.

    All steps equal ``spacing`` except possibly the final one. Output has at
    least 2 points.
    """
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    pts = np.asarray(points, np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
        raise ValueError(f"polyline must be (M,2) with M >= 2, got {pts.shape}")
    seg = np.diff(pts, axis=0)
    seglen = np.sqrt((seg * seg).sum(axis=1))
    cum = np.concatenate([[0.0], np.cumsum(seglen)])
    total = cum[-1]
    if total < 1e-12:
        raise ValueError("cannot resample a zero-length polyline")
    ts = np.arange(0.0, total, spacing)
    if total - ts[-1] < max(1e-9, 1e-6 * spacing):
        ts[-1] = total
    else:
        ts = np.append(ts, total)
    x = np.interp(ts, cum, pts[:, 0])
    y = np.interp(ts, cum, pts[:, 1])
    return np.stack([x, y], axis=1).astype(np.float32)


def resample_curves(cs, spacing):
    return CurveSet(cs.width, cs.height,
                    [resample_uniform(p, spacing) for p in cs.paths]).validate()


# ----------------------------------------------------------- local frames

def path_frames(points):
    """Unit tangent, unit normal and normalized arc length per point.

    Tangents use central differences (one-sided at the ends); the normal is
    the tangent rotated a quarter turn so a left-to-right horizontal stroke
    gets n = (0,-1) in top-left image coordinates.
    """
    pts = np.asarray(points, np.float64)
    m = pts.shape[0]
    if m < 2:
        raise ValueError("need at least 2 points for frames")
    tan = np.empty_like(pts)
    tan[0] = pts[1] - pts[0]
    tan[-1] = pts[-1] - pts[-2]
    if m > 2:
        tan[1:-1] = pts[2:] - pts[:-2]
    norms = np.sqrt((tan * tan).sum(axis=1))
    if np.any(norms < 1e-12):
        raise ValueError("coincident neighbor points leave the tangent undefined")
    e = tan / norms[:, None]
    n = np.stack([e[:, 1], -e[:, 0]], axis=1)
    seg = np.diff(pts, axis=0)
    seglen = np.sqrt((seg * seg).sum(axis=1))
    cum = np.concatenate([[0.0], np.cumsum(seglen)])
    total = cum[-1]
    if total < 1e-12:
        raise ValueError("zero-length path has no arc length parameter")
    s = cum / total
    return e, n, s


# -------------------------------------------------------------- features

def nearest_pixel_indices(points, height, width):
    """floor() the coordinates, clamped to the canvas border."""
    pts = np.asarray(points, np.float64)
    ix = np.clip(np.floor(pts[:, 0]).astype(np.int64), 0, width - 1)
    iy = np.clip(np.floor(pts[:, 1]).astype(np.int64), 0, height - 1)
    return iy, ix


def build_path_features(points, feature_map):
    """Per-point feature rows (M,45) for both curve orientations.

    Columns: 40 deep features sampled at the nearest pixel, tangent (2),
    normal (2), normalized arc length. The second matrix negates only the
    tangent/normal columns.
    """
    fmap = np.asarray(feature_map)
    if fmap.ndim != 3 or fmap.shape[0] != DEEP_FEATURE_COLUMNS:
        raise ValueError(f"feature map must be ({DEEP_FEATURE_COLUMNS},H,W), got {fmap.shape}")
    e, n, s = path_frames(points)
    iy, ix = nearest_pixel_indices(points, fmap.shape[1], fmap.shape[2])
    deep = fmap[:, iy, ix].T.astype(np.float32)
    fwd = np.concatenate([deep, e.astype(np.float32), n.astype(np.float32),
                          s[:, None].astype(np.float32)], axis=1)
    rev = fwd.copy()
    rev[:, DEEP_FEATURE_COLUMNS:DEEP_FEATURE_COLUMNS + 4] *= -1
    return fwd, rev


# ------------------------------------------------------ cropping for training

def clip_ranges(points, x0, y0, size, margin):
    """Maximal runs of >= 2 consecutive points inside the margin-expanded window."""
    pts = np.asarray(points)
    inside = ((pts[:, 0] >= x0 - margin) & (pts[:, 0] < x0 + size + margin)
              & (pts[:, 1] >= y0 - margin) & (pts[:, 1] < y0 + size + margin))
    ranges = []
    start = None
    for i, flag in enumerate(inside):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            if i - start >= 2:
                ranges.append((start, i))
            start = None
    if start is not None and len(inside) - start >= 2:
        ranges.append((start, len(inside)))
    return ranges


# ------------------------------------------------------------ curve raster

def rasterize_curve_channel(cs, aa_width=1.0):
    """Raster of the plain curves at nominal 1 px thickness, ink=1 on 0."""
    from . import rasterizer  # local import; rasterizer depends on this module

    strokes = identity_strokes(cs, thickness=1.0)
    vp = rasterizer.Viewport(0.0, 0.0, cs.width, cs.height)
    image, _ = rasterizer.render(strokes, vp, aa_width=aa_width)
    return (1.0 - image).astype(np.float32)
