"""File formats: feature stacks, curves, PNM images, checkpoints, SVG export.

Binary formats are little-endian and versioned; readers reject unknown
versions and report truncation with the failing byte offset. Checkpoints
round-trip parameters and optimizer state bit-exactly.
"""
from __future__ import annotations

import json
import struct
import xml.etree.ElementTree as ET

import numpy as np

from . import ndtensor as nd
from .curves import CurveSet, StrokeSet, path_frames
from .rasterizer import Viewport, render

FEATURE_MAGIC = b"NSFS"
CHECKPOINT_MAGIC = b"NSCK"
FORMAT_VERSION = 1
MAX_DIM = 1 << 16

DEFAULT_CHANNELS = (
    "depth",
    "radial_curvature",
    "radial_curvature_derivative",
    "max_principal_curvature",
    "min_principal_curvature",
    "view_dependent_curvature",
    "n_dot_v",
    "shading",
    "curve_raster",
)


def _read_exact(f, n, what):
    data = f.read(n)
    if len(data) != n:
        raise ValueError(f"truncated file reading {what}: expected {n} bytes "
                         f"at offset {f.tell() - len(data)}, got {len(data)}")
    return data


# ------------------------------------------------------------ feature stacks

def write_feature_stack(path, stack, channels=None):
    stack = np.ascontiguousarray(stack, np.float32)
    if stack.ndim != 3:
        raise ValueError(f"feature stack must be (C,H,W), got {stack.shape}")
    c, h, w = stack.shape
    if not all(0 < d <= MAX_DIM for d in (c, h, w)):
        raise ValueError(f"feature stack dims out of range: {stack.shape}")
    if channels is None:
        channels = (list(DEFAULT_CHANNELS) if c == len(DEFAULT_CHANNELS)
                    else [f"channel_{i}" for i in range(c)])
    if len(channels) != c:
        raise ValueError(f"need {c} channel names, got {len(channels)}")
    footer = json.dumps({"channels": list(channels)}).encode()
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<H3I", FORMAT_VERSION, c, h, w))
        f.write(stack.astype("<f4").tobytes())
        f.write(struct.pack("<I", len(footer)))
        f.write(footer)


def read_feature_stack(path):
    """Returns (stack (C,H,W) float32, channel name list)."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != FEATURE_MAGIC:
            raise ValueError(f"bad feature stack magic {magic!r}")
        version, c, h, w = struct.unpack("<H3I", _read_exact(f, 14, "header"))
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported feature stack version {version}")
        if not all(0 < d <= MAX_DIM for d in (c, h, w)):
            raise ValueError(f"feature stack dims out of range: {(c, h, w)}")
        payload = _read_exact(f, 4 * c * h * w, "payload")
        (flen,) = struct.unpack("<I", _read_exact(f, 4, "footer length"))
        footer = json.loads(_read_exact(f, flen, "footer"))
    stack = np.frombuffer(payload, "<f4").reshape(c, h, w).astype(np.float32)
    return stack, list(footer.get("channels", []))


# ------------------------------------------------------------------ curves

def write_curves(path, cs):
    cs.validate()
    doc = {"width": int(cs.width), "height": int(cs.height),
           "paths": [{"points": [[float(x), float(y)] for x, y in p]}
                     for p in cs.paths]}
    with open(path, "w") as f:
        json.dump(doc, f)


def read_curves(path):
    with open(path) as f:
        doc = json.load(f)
    try:
        w, h = int(doc["width"]), int(doc["height"])
        paths = [np.array(p["points"], np.float32) for p in doc["paths"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed curve file {path}: {exc}") from exc
    cs = CurveSet(w, h, paths).validate()
    for i, p in enumerate(paths):
        if (p[:, 0].min() < 0 or p[:, 0].max() > w
                or p[:, 1].min() < 0 or p[:, 1].max() > h):
            raise ValueError(f"path {i} has points outside the {w}x{h} canvas")
    return cs


# ------------------------------------------------------------------- images

def write_image(path, img):
    """P5 for (H,W)/(1,H,W), P6 for (3,H,W); [0,1] clipped to 8-bit."""
    img = np.asarray(img, np.float32)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    if q.ndim == 2:
        header = f"P5\n{q.shape[1]} {q.shape[0]}\n255\n"
        payload = q.tobytes()
    elif q.ndim == 3 and q.shape[0] == 3:
        header = f"P6\n{q.shape[2]} {q.shape[1]}\n255\n"
        payload = np.transpose(q, (1, 2, 0)).tobytes()
    else:
        raise ValueError(f"image must be (H,W), (1,H,W) or (3,H,W), got {img.shape}")
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(payload)


def _pnm_tokens(f, count):
    """Whitespace-separated header tokens, honoring # comments."""
    tokens = []
    while len(tokens) < count:
        ch = f.read(1)
        if not ch:
            raise ValueError("truncated image header")
        if ch.isspace():
            continue
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = f.read(1)
            continue
        tok = ch
        while True:
            ch = f.read(1)
            if not ch or ch.isspace():
                break
            tok += ch
        tokens.append(tok)
    return tokens


def read_image(path):
    """Returns (H,W) for P5 or (3,H,W) for P6, values in [0,1]."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 2, "magic")
        if magic not in (b"P5", b"P6"):
            raise ValueError(f"unsupported image magic {magic!r}")
        w, h, maxval = (int(t) for t in _pnm_tokens(f, 3))
        if maxval != 255:
            raise ValueError(f"unsupported maxval {maxval} (need 255)")
        n = w * h * (3 if magic == b"P6" else 1)
        payload = _read_exact(f, n, "pixel data")
    arr = np.frombuffer(payload, np.uint8).astype(np.float32) / 255.0
    if magic == b"P5":
        return arr.reshape(h, w)
    return np.ascontiguousarray(np.transpose(arr.reshape(h, w, 3), (2, 0, 1)))


# -------------------------------------------------------------- checkpoints

def save_checkpoint(path, store, prefixes=None, config=None, iteration=0):
    """Parameter table + optimizer state + config echo, bit-exact.

    prefixes selects parameter groups (e.g. ("surface/", "path/") after the
    geometry stage); None saves everything present.
    """
    names = [n for n in store.params
             if prefixes is None or any(n.startswith(p) for p in prefixes)]
    entries, blobs = [], []
    for n in names:
        data = np.ascontiguousarray(store[n].data, "<f4")
        entry = {"name": n, "shape": list(data.shape), "opt": None}
        blobs.append(data.tobytes())
        st = store.opt.get(n)
        if st is not None:
            entry["opt"] = {"lr": st.lr, "beta1": st.beta1, "beta2": st.beta2,
                            "eps": st.eps, "step_count": st.step_count}
            blobs.append(np.ascontiguousarray(st.m, "<f4").tobytes())
            blobs.append(np.ascontiguousarray(st.v, "<f4").tobytes())
        entries.append(entry)
    header = json.dumps({"iteration": int(iteration),
                         "config": config or {},
                         "params": entries}).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<HI", FORMAT_VERSION, len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_checkpoint(path, store):
    """Load saved parameters (and optimizer state) into store.

    Unknown names are added; existing names must match shapes. Returns
    (config dict, iteration).
    """
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        version, hlen = struct.unpack("<HI", _read_exact(f, 6, "header length"))
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(_read_exact(f, hlen, "header"))
        for entry in header["params"]:
            name, shape = entry["name"], tuple(entry["shape"])
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            data = np.frombuffer(_read_exact(f, 4 * count, name), "<f4")
            data = data.reshape(shape).astype(np.float32)
            if name in store.params:
                if store[name].data.shape != shape:
                    raise ValueError(f"shape mismatch for {name}: checkpoint "
                                     f"{shape} vs store {store[name].data.shape}")
                store[name].data = data.copy()
            else:
                store.add(name, data)
            opt = entry.get("opt")
            if opt is not None:
                m = np.frombuffer(_read_exact(f, 4 * count, f"{name} opt m"),
                                  "<f4").reshape(shape).astype(np.float32)
                v = np.frombuffer(_read_exact(f, 4 * count, f"{name} opt v"),
                                  "<f4").reshape(shape).astype(np.float32)
                store.opt[name] = nd.AdamState(
                    m=m, v=v, step_count=int(opt["step_count"]), lr=opt["lr"],
                    beta1=opt["beta1"], beta2=opt["beta2"], eps=opt["eps"])
    return header.get("config", {}), int(header.get("iteration", 0))


# --------------------------------------------------------------- SVG export

def _fmt(x):
    return repr(float(x))


def _stroke_data_attr(pts, disp, thick):
    rows = [" ".join((_fmt(p[0]), _fmt(p[1]), _fmt(d[0]), _fmt(d[1]), _fmt(t)))
            for p, d, t in zip(pts, disp, thick)]
    return ";".join(rows)


def _outline_points(q, thick):
    """Closed offset-polygon vertices: centerline pushed +-t/2 along normals."""
    e, n, _s = path_frames(q)
    half = (np.asarray(thick, np.float64) * 0.5)[:, None]
    left = q + n * half
    right = q - n * half
    return np.concatenate([left, right[::-1]], axis=0)


def export_svg(path, strokes):
    """Filled outline polygon per stroke plus a lossless data attribute.

    Strokes whose outline degenerates (all-zero thickness, or displaced
    points that coincide) omit the polygon but keep the embedded data.
    """
    strokes.validate()
    w, h = strokes.base.width, strokes.base.height
    root = ET.Element("svg", xmlns="http://www.w3.org/2000/svg",
                      width=str(w), height=str(h), viewBox=f"0 0 {w} {h}")
    displaced = strokes.displaced_paths()
    for pts, disp, thick, q in zip(strokes.base.paths, strokes.displacement,
                                   strokes.thickness, displaced):
        g = ET.SubElement(root, "g")
        g.set("data-points", _stroke_data_attr(pts, disp, thick))
        if float(np.max(thick)) <= 0.0:
            continue
        try:
            outline = _outline_points(np.asarray(q, np.float64), thick)
        except ValueError:
            continue
        poly = ET.SubElement(g, "polygon", fill="black")
        poly.set("points", " ".join(f"{x},{y}" for x, y in
                                    np.round(outline, 3).tolist()))
    ET.ElementTree(root).write(path, xml_declaration=True, encoding="UTF-8")


def import_svg_strokes(path):
    """Rebuild the exact StrokeSet from the data attributes of an export."""
    root = ET.parse(path).getroot()
    try:
        w = int(float(root.get("width")))
        h = int(float(root.get("height")))
    except (TypeError, ValueError) as exc:
        raise ValueError(f"missing svg canvas size in {path}") from exc
    paths, disps, thicks = [], [], []
    for el in root.iter():
        raw = el.get("data-points")
        if raw is None:
            continue
        rows = [[np.float32(tok) for tok in row.split()]
                for row in raw.split(";") if row]
        if any(len(r) != 5 for r in rows) or len(rows) < 2:
            raise ValueError(f"malformed data-points attribute in {path}")
        arr = np.array(rows, np.float32)
        paths.append(arr[:, 0:2].copy())
        disps.append(arr[:, 2:4].copy())
        thicks.append(arr[:, 4].copy())
    return StrokeSet(base=CurveSet(w, h, paths), displacement=disps,
                     thickness=thicks).validate()


# ---------------------------------------------------------- stroke textures

def _displaced_geometry(q):
    q = np.asarray(q, np.float64)
    seg = np.diff(q, axis=0)
    seglen = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(seglen)])
    return q, cum, float(cum[-1])


def bake_stroke_textures(strokes, image):
    """Per-stroke RGBA texture maps in (arc length u, signed offset v) space.

    Each map is (4, ceil(max t), ceil(arc length)); texel (i,j) samples the
    drawing at centerline(u=j+0.5) + v*normal with v = i+0.5 - height/2, with
    alpha 1 inside the stroke (|v| <= t(u)/2) and 0 outside.
    """
    strokes.validate()
    image = np.asarray(image, np.float32)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"drawing must be (3,H,W), got {image.shape}")
    hh, ww = image.shape[1:]
    out = []
    for q, thick in zip(strokes.displaced_paths(), strokes.thickness):
        q, cum, total = _displaced_geometry(q)
        vh = max(1, int(np.ceil(float(np.max(thick)))))
        uw = max(1, int(np.ceil(total)))
        tex = np.zeros((4, vh, uw), np.float32)
        if total < 1e-9:
            out.append(tex)
            continue
        try:
            _e, n, _s = path_frames(q)
        except ValueError:
            out.append(tex)
            continue
        a = np.minimum(np.arange(uw, dtype=np.float64) + 0.5, total)
        cx = np.interp(a, cum, q[:, 0])
        cy = np.interp(a, cum, q[:, 1])
        nx = np.interp(a, cum, n[:, 0])
        ny = np.interp(a, cum, n[:, 1])
        norm = np.hypot(nx, ny)
        good = norm > 1e-9
        nx = np.where(good, nx / np.maximum(norm, 1e-9), 0.0)
        ny = np.where(good, ny / np.maximum(norm, 1e-9), 0.0)
        ta = np.interp(a, cum, np.asarray(thick, np.float64))
        v = (np.arange(vh, dtype=np.float64) + 0.5 - vh / 2.0)[:, None]
        px = np.clip(np.floor(cx[None] + nx[None] * v), 0, ww - 1).astype(np.int64)
        py = np.clip(np.floor(cy[None] + ny[None] * v), 0, hh - 1).astype(np.int64)
        tex[:3] = image[:, py, px]
        tex[3] = (np.abs(v) <= ta[None] * 0.5) & good[None]
        out.append(tex)
    return out


def apply_stroke_textures(strokes, textures, aa_width=1.0, background=1.0):
    """Paint baked textures back onto the canvas along the strokes.

    Pixels inside a stroke (coverage >= 0.5) look up their (u,v) coordinates
    against the owning stroke's texture map; transparent texels and uncovered
    pixels keep the background.
    """
    strokes.validate()
    if len(textures) != len(strokes.base.paths):
        raise ValueError("texture count does not match stroke count")
    w, h = strokes.base.width, strokes.base.height
    _img, record = render(strokes, Viewport(0.0, 0.0, w, h), aa_width=aa_width)
    t = record.table
    # arc-length offset of every segment start, per stroke
    seg_path = t.path_of
    seglen = np.hypot(t.ex, t.ey)
    arc0 = np.zeros(len(seg_path))
    for p in range(len(strokes.base.paths)):
        sel = np.flatnonzero(seg_path == p)
        if sel.size:
            arc0[sel[1:]] = np.cumsum(seglen[sel])[:-1]
    canvas = np.full((3, h, w), np.float32(background))
    iy, ix = np.nonzero(record.alpha >= 0.5)
    if iy.size == 0:
        return canvas
    seg = record.best_seg[iy, ix]
    u = record.best_u[iy, ix]
    pxc = ix + 0.5
    pyc = iy + 0.5
    projx = t.ax[seg] + u * t.ex[seg]
    projy = t.ay[seg] + u * t.ey[seg]
    ln = np.maximum(seglen[seg], 1e-12)
    nxu = t.ey[seg] / ln
    nyu = -t.ex[seg] / ln
    v = (pxc - projx) * nxu + (pyc - projy) * nyu
    arc = arc0[seg] + u * seglen[seg]
    for p, tex in enumerate(textures):
        sel = seg_path[seg] == p
        if not np.any(sel):
            continue
        vh, uw = tex.shape[1:]
        col = np.clip(np.floor(arc[sel]), 0, uw - 1).astype(np.int64)
        row = np.clip(np.floor(v[sel] + vh / 2.0), 0, vh - 1).astype(np.int64)
        texel = tex[:, row, col]
        opaque = texel[3] > 0.5
        yy = iy[sel][opaque]
        xx = ix[sel][opaque]
        canvas[:, yy, xx] = texel[:3, opaque]
    return canvas
