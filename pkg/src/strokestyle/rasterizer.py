"""Differentiable distance-field renderer for variable-thickness polylines.

Per pixel center p, find the globally closest point over all stroke segments;
with t_p the thickness interpolated at that closest point, coverage is
``alpha = clamp(0.5 + (t_p/2 - dist)/aa_width, 0, 1)`` and the pixel value is
``1 - alpha`` (white background). Gradients flow through the argmin segment
only (envelope theorem): interior-ramp pixels push their winning segment's
endpoints and endpoint thicknesses.

Geometry math runs in float64 internally; images are float32. A uniform grid
accelerates the closest-point scan and is bit-identical to the brute-force
scan: per pixel both iterate candidate segments in ascending (path, segment)
order with strict-less updates, and any segment that can win with positive
coverage at a pixel lies inside that pixel's cell candidate list (cells
collect every segment whose bbox inflated by max_thickness/2 + aa overlaps).
A non-candidate winner would have distance > max_thickness/2 + aa and render
exactly 1.0 either way.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from .curves import CurveSet, StrokeSet

GRID_CELL = 16


@dataclass(frozen=True)
class Viewport:
    """Axis-aligned pixel window; pixel (i,j) has center (x0+j+0.5, y0+i+0.5)."""
    x0: float
    y0: float
    width: int
    height: int

    def validate(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("viewport must have positive size")
        return self


def closest_point(p, a, b):
    """(u, dist) of the closest point a+u*(b-a) to p, u clamped to [0,1]."""
    p = np.asarray(p, np.float64)
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    e = b - a
    l2 = float(e @ e)
    if l2 < 1e-18:
        u = 0.0
    else:
        u = float(np.clip(((p - a) @ e) / l2, 0.0, 1.0))
    q = a + u * e
    return u, float(np.hypot(*(p - q)))


class _SegmentTable:
    """Flat per-segment arrays in viewport-local float64 coordinates."""

    __slots__ = ("ax", "ay", "bx", "by", "ex", "ey", "inv_l2", "ta", "tb",
                 "ia", "ib", "path_of", "point_offsets", "n_points",
                 "max_thickness", "path_points")

    def __init__(self, strokes, viewport):
        pts_local = []
        offsets = [0]
        for path, disp in zip(strokes.base.paths, strokes.displacement):
            moved = (path + disp).astype(np.float32).astype(np.float64)
            moved[:, 0] -= viewport.x0
            moved[:, 1] -= viewport.y0
            pts_local.append(moved)
            offsets.append(offsets[-1] + moved.shape[0])
        self.path_points = pts_local
        self.point_offsets = np.asarray(offsets, np.int64)
        self.n_points = offsets[-1]

        ax, ay, bx, by, ta, tb, ia, ib, pid = [], [], [], [], [], [], [], [], []
        for k, (moved, thick) in enumerate(zip(pts_local, strokes.thickness)):
            m = moved.shape[0]
            base = self.point_offsets[k]
            ax.append(moved[:-1, 0]); ay.append(moved[:-1, 1])
            bx.append(moved[1:, 0]); by.append(moved[1:, 1])
            t64 = thick.astype(np.float64)
            ta.append(t64[:-1]); tb.append(t64[1:])
            ia.append(np.arange(base, base + m - 1))
            ib.append(np.arange(base + 1, base + m))
            pid.append(np.full(m - 1, k, np.int32))
        self.ax = np.concatenate(ax); self.ay = np.concatenate(ay)
        self.bx = np.concatenate(bx); self.by = np.concatenate(by)
        self.ex = self.bx - self.ax
        self.ey = self.by - self.ay
        l2 = self.ex * self.ex + self.ey * self.ey
        self.inv_l2 = 1.0 / np.maximum(l2, 1e-18)  # degenerate segments act as points
        self.ta = np.concatenate(ta); self.tb = np.concatenate(tb)
        self.ia = np.concatenate(ia); self.ib = np.concatenate(ib)
        self.path_of = np.concatenate(pid)
        self.max_thickness = float(max((t.max() for t in strokes.thickness), default=0.0))

    @property
    def n_segments(self):
        return self.ax.shape[0]


class SegmentGrid:
    """Uniform cells listing every segment whose inflated bbox touches them."""

    def __init__(self, table, viewport, aa_width, cell=GRID_CELL):
        self.cell = cell
        self.ny = (viewport.height + cell - 1) // cell
        self.nx = (viewport.width + cell - 1) // cell
        r = table.max_thickness * 0.5 + aa_width
        x_lo = np.minimum(table.ax, table.bx) - r
        x_hi = np.maximum(table.ax, table.bx) + r
        y_lo = np.minimum(table.ay, table.by) - r
        y_hi = np.maximum(table.ay, table.by) + r
        cx0 = np.clip(np.floor(x_lo / cell).astype(np.int64), 0, self.nx - 1)
        cx1 = np.clip(np.floor(x_hi / cell).astype(np.int64), 0, self.nx - 1)
        cy0 = np.clip(np.floor(y_lo / cell).astype(np.int64), 0, self.ny - 1)
        cy1 = np.clip(np.floor(y_hi / cell).astype(np.int64), 0, self.ny - 1)
        outside = (x_hi < 0) | (x_lo >= viewport.width) | (y_hi < 0) | (y_lo >= viewport.height)
        cells = [[] for _ in range(self.ny * self.nx)]
        for s in range(table.n_segments):  # ascending order keeps candidate lists sorted
            if outside[s]:
                continue
            for cy in range(cy0[s], cy1[s] + 1):
                row = cy * self.nx
                for cx in range(cx0[s], cx1[s] + 1):
                    cells[row + cx].append(s)
        self.cells = [np.asarray(c, np.int64) for c in cells]


@dataclass
class RenderRecord:
    """Everything backward needs: per-pixel winner, u, squared distance, alpha."""
    alpha: np.ndarray
    best_seg: np.ndarray
    best_u: np.ndarray
    best_d2: np.ndarray
    table: _SegmentTable
    viewport: Viewport
    aa_width: float


def _scan_block(table, cand, px, py, bd2, bu, bseg):
    """Update best-distance state for one pixel block over candidate segments."""
    for s in cand:
        dx = px[None, :] - table.ax[s]
        dy = py[:, None] - table.ay[s]
        u = (dx * table.ex[s] + dy * table.ey[s]) * table.inv_l2[s]
        np.clip(u, 0.0, 1.0, out=u)
        rx = dx - u * table.ex[s]
        ry = dy - u * table.ey[s]
        d2 = rx * rx + ry * ry
        better = d2 < bd2
        bd2[better] = d2[better]
        bu[better] = u[better]
        bseg[better] = s


def build_grid(strokes, viewport, aa_width=1.0):
    table = _SegmentTable(strokes.validate(), viewport.validate())
    return SegmentGrid(table, viewport, aa_width)


def render(strokes, viewport, aa_width=1.0, method="grid"):
    """Render to (height, width) float32; returns (image, RenderRecord)."""
    if aa_width <= 0:
        raise ValueError("aa_width must be positive")
    if method not in ("grid", "brute"):
        raise ValueError(f"unknown render method {method!r}")
    strokes.validate()
    viewport.validate()
    if not strokes.base.paths:
        raise ValueError("cannot render an empty stroke set")
    table = _SegmentTable(strokes, viewport)
    h, w = viewport.height, viewport.width
    px = np.arange(w, dtype=np.float64) + 0.5
    py = np.arange(h, dtype=np.float64) + 0.5
    bd2 = np.full((h, w), np.inf)
    bu = np.zeros((h, w))
    bseg = np.full((h, w), -1, np.int64)

    if method == "brute":
        _scan_block(table, range(table.n_segments), px, py, bd2, bu, bseg)
    else:
        grid = SegmentGrid(table, viewport, aa_width)
        for cy in range(grid.ny):
            y0, y1 = cy * grid.cell, min((cy + 1) * grid.cell, h)
            for cx in range(grid.nx):
                cand = grid.cells[cy * grid.nx + cx]
                if cand.size == 0:
                    continue
                x0, x1 = cx * grid.cell, min((cx + 1) * grid.cell, w)
                _scan_block(table, cand, px[x0:x1], py[y0:y1],
                            bd2[y0:y1, x0:x1], bu[y0:y1, x0:x1], bseg[y0:y1, x0:x1])

    has = bseg >= 0
    alpha = np.zeros((h, w))
    if np.any(has):
        s = bseg[has]
        tp = (1.0 - bu[has]) * table.ta[s] + bu[has] * table.tb[s]
        d = np.sqrt(bd2[has])
        alpha[has] = np.clip(0.5 + (tp * 0.5 - d) / aa_width, 0.0, 1.0)
    image = (1.0 - alpha).astype(np.float32)
    record = RenderRecord(alpha=alpha, best_seg=bseg, best_u=bu, best_d2=bd2,
                          table=table, viewport=viewport, aa_width=aa_width)
    return image, record


def render_backward(record, grad_image):
    """Per-point (displacement, thickness) gradients from an image gradient.

    Only pixels with alpha strictly inside (0,1) contribute; the clamp is flat
    elsewhere. Returns (disp_grads, thick_grads) lists matching the stroke
    paths, float32.
    """
    t = record.table
    g = np.asarray(grad_image, np.float64)
    if g.shape != record.alpha.shape:
        raise ValueError(f"grad shape {g.shape} != image shape {record.alpha.shape}")
    live = (record.alpha > 0.0) & (record.alpha < 1.0)
    gp = np.zeros((t.n_points, 2))
    gt = np.zeros(t.n_points)
    if np.any(live):
        ys, xs = np.nonzero(live)
        s = record.best_seg[ys, xs]
        u = record.best_u[ys, xs]
        d = np.sqrt(record.best_d2[ys, xs])
        g_alpha = -g[ys, xs]                      # value = 1 - alpha
        aa = record.aa_width
        g_tp = g_alpha * (0.5 / aa)
        np.add.at(gt, t.ia[s], (1.0 - u) * g_tp)
        np.add.at(gt, t.ib[s], u * g_tp)
        g_d = -g_alpha / aa
        qx = t.ax[s] + u * t.ex[s]
        qy = t.ay[s] + u * t.ey[s]
        pxc = xs + 0.5
        pyc = ys + 0.5
        fac = np.where(d > 1e-12, g_d / np.maximum(d, 1e-300), 0.0)
        rx = (qx - pxc) * fac
        ry = (qy - pyc) * fac
        ga = np.stack([(1.0 - u) * rx, (1.0 - u) * ry], axis=1)
        gb = np.stack([u * rx, u * ry], axis=1)
        # the interpolated thickness also moves with u when u is interior:
        # d(alpha)/du = (tb-ta)/(2aa), du/da = ((u-1)e + (q-p))/|e|^2,
        # du/db = ((p-q) - u e)/|e|^2; clamped u is locally constant
        interior = (u > 0.0) & (u < 1.0)
        if np.any(interior):
            coef = (g_tp * (t.tb[s] - t.ta[s]) * t.inv_l2[s]) * interior
            dqpx = qx - pxc
            dqpy = qy - pyc
            ga[:, 0] += coef * ((u - 1.0) * t.ex[s] + dqpx)
            ga[:, 1] += coef * ((u - 1.0) * t.ey[s] + dqpy)
            gb[:, 0] += coef * (-u * t.ex[s] - dqpx)
            gb[:, 1] += coef * (-u * t.ey[s] - dqpy)
        np.add.at(gp, t.ia[s], ga)
        np.add.at(gp, t.ib[s], gb)
    disp_grads, thick_grads = [], []
    for k in range(len(t.path_points)):
        lo, hi = t.point_offsets[k], t.point_offsets[k + 1]
        disp_grads.append(gp[lo:hi].astype(np.float32))
        thick_grads.append(gt[lo:hi].astype(np.float32))
    return disp_grads, thick_grads


def render_op(tape, base, disp_tensors, thick_tensors, viewport, aa_width=1.0,
              method="grid"):
    """Tape op wrapping render(): image tensor from displacement/thickness tensors."""
    strokes = StrokeSet(base=base,
                        displacement=[d.data for d in disp_tensors],
                        thickness=[t.data for t in thick_tensors])
    image, record = render(strokes, viewport, aa_width=aa_width, method=method)

    needs = [nd._needs_grad(x) for x in disp_tensors + thick_tensors]

    def bwd(g):
        dgrads, tgrads = render_backward(record, g)
        for dt, dg in zip(disp_tensors, dgrads):
            if nd._needs_grad(dt):
                dt._add_grad(dg)
        for tt, tg in zip(thick_tensors, tgrads):
            if nd._needs_grad(tt):
                tt._add_grad(tg)

    return nd._emit(tape, image, bwd if any(needs) else None, "render")
