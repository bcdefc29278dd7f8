"""The three stylization networks plus the patch discriminator.

surface_forward  : 9-channel view maps -> 40-channel deep feature map (f).
path_forward     : per-point 45-column features -> thickness + local-frame
                   displacement coefficients, averaged over both curve
                   orientations (h); frame_displacement maps the coefficients
                   to world vectors against the stored tangent/normal.
texture_forward  : view maps + rendered stroke mask -> RGB drawing (g).
disc_forward     : 70x70-receptive-field patch discriminator on RGB crops.

All parameters live in a ParamStore keyed "group/layer/kind". Convolution
weights are N(0, 0.02), norm scales 1, everything else 0; the surface head
and the path output layer start at zero so the initial stylization is the
identity (zero displacement, base thickness).
"""
from __future__ import annotations

import numpy as np

from . import ndtensor as nd
from .curves import (FEATURE_COLUMNS, StrokeSet, build_path_features,
                     path_frames, resample_curves)
from .rasterizer import Viewport, render

SURFACE_CHANNELS = 40
VIEW_CHANNELS = 9


class ParamStore:
    """Ordered name -> Tensor mapping with per-parameter Adam state."""

    def __init__(self):
        self.params = {}
        self.opt = {}

    def add(self, name, array, requires_grad=True):
        if name in self.params:
            raise ValueError(f"duplicate parameter {name}")
        self.params[name] = nd.Tensor(np.asarray(array, np.float32),
                                      requires_grad=requires_grad)
        return self.params[name]

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self, prefix=""):
        return [n for n in self.params if n.startswith(prefix)]

    def group(self, prefix):
        return [(n, self.params[n]) for n in self.names(prefix)]

    def census(self):
        return [(n, tuple(t.data.shape)) for n, t in self.params.items()]

    def count(self, prefix=""):
        return sum(t.data.size for n, t in self.params.items() if n.startswith(prefix))

    def zero_grads(self, prefix=""):
        for n in self.names(prefix):
            self.params[n].zero_grad()

    def ensure_adam(self, prefix="", lr=2e-4, beta1=0.5, beta2=0.999, eps=1e-8):
        for n in self.names(prefix):
            if n not in self.opt:
                self.opt[n] = nd.make_adam_state(self.params[n], lr=lr, beta1=beta1,
                                                 beta2=beta2, eps=eps)


def _conv_block(store, rng, name, ci, co, k, norm=True, zero=False):
    if zero:
        w = np.zeros((co, ci, k, k), np.float32)
    else:
        w = (rng.standard_normal((co, ci, k, k)) * 0.02).astype(np.float32)
    store.add(f"{name}/weight", w)
    store.add(f"{name}/bias", np.zeros(co, np.float32))
    if norm:
        store.add(f"{name}/norm_gamma", np.ones(co, np.float32))
        store.add(f"{name}/norm_beta", np.zeros(co, np.float32))


def _convT_block(store, rng, name, ci, co):
    w = (rng.standard_normal((ci, co, 3, 3)) * 0.02).astype(np.float32)
    store.add(f"{name}/weight", w)
    store.add(f"{name}/bias", np.zeros(co, np.float32))
    store.add(f"{name}/norm_gamma", np.ones(co, np.float32))
    store.add(f"{name}/norm_beta", np.zeros(co, np.float32))


def _conv1d_block(store, rng, name, ci, co, zero=False):
    if zero:
        w = np.zeros((co, ci, 3), np.float32)
    else:
        w = (rng.standard_normal((co, ci, 3)) * 0.02).astype(np.float32)
    store.add(f"{name}/weight", w)
    store.add(f"{name}/bias", np.zeros(co, np.float32))


def init_params(seed):
    """Fresh ParamStore for all four groups, deterministic under the seed."""
    rng = np.random.default_rng([int(seed), 0])
    store = ParamStore()

    _conv_block(store, rng, "surface/stem7x7", VIEW_CHANNELS, 10, 7)
    _conv_block(store, rng, "surface/down1", 10, 20, 3)
    _conv_block(store, rng, "surface/down2", 20, 40, 3)
    for i in range(1, 5):
        _conv_block(store, rng, f"surface/res{i}/conv1", 40, 40, 3)
        _conv_block(store, rng, f"surface/res{i}/conv2", 40, 40, 3)
    _convT_block(store, rng, "surface/up1", 40, 40)
    _convT_block(store, rng, "surface/up2", 40, 40)
    _conv_block(store, rng, "surface/head1x1", 40, 40, 1, zero=True)

    _conv1d_block(store, rng, "path/pc1", FEATURE_COLUMNS, 40)
    _conv1d_block(store, rng, "path/pc2", 40, 40)
    _conv1d_block(store, rng, "path/pc3", 40, 3, zero=True)

    _conv_block(store, rng, "texture/stem7x7", VIEW_CHANNELS, 64, 7)
    _conv_block(store, rng, "texture/down1", 64, 128, 3)
    _conv_block(store, rng, "texture/down2", 128, 256, 3)
    for i in range(1, 7):
        _conv_block(store, rng, f"texture/res{i}/conv1", 256, 256, 3)
        _conv_block(store, rng, f"texture/res{i}/conv2", 256, 256, 3)
    _convT_block(store, rng, "texture/up1", 256, 128)
    _convT_block(store, rng, "texture/up2", 128, 64)
    _conv_block(store, rng, "texture/rgb7x7", 64, 3, 7, norm=False)

    _conv_block(store, rng, "disc/d1", 3, 64, 4, norm=False)
    _conv_block(store, rng, "disc/d2", 64, 128, 4)
    _conv_block(store, rng, "disc/d3", 128, 256, 4)
    _conv_block(store, rng, "disc/d4", 256, 512, 4)
    _conv_block(store, rng, "disc/d5", 512, 1, 4, norm=False)
    return store


# ------------------------------------------------------------ layer helpers

def _cin_relu(tape, store, name, x, stride=1):
    y = nd.conv2d(tape, x, store[f"{name}/weight"], store[f"{name}/bias"], stride=stride)
    y = nd.instance_norm(tape, y, store[f"{name}/norm_gamma"], store[f"{name}/norm_beta"])
    return nd.relu(tape, y)


def _cinT_relu(tape, store, name, x):
    y = nd.conv2d_transpose(tape, x, store[f"{name}/weight"], store[f"{name}/bias"])
    y = nd.instance_norm(tape, y, store[f"{name}/norm_gamma"], store[f"{name}/norm_beta"])
    return nd.relu(tape, y)


def _residual_block(tape, store, name, x):
    y = _cin_relu(tape, store, f"{name}/conv1", x)
    y = nd.conv2d(tape, y, store[f"{name}/conv2/weight"], store[f"{name}/conv2/bias"])
    y = nd.instance_norm(tape, y, store[f"{name}/conv2/norm_gamma"],
                         store[f"{name}/conv2/norm_beta"])
    return nd.relu(tape, nd.add(tape, y, x))


def _check_view_input(x, what):
    if x.data.ndim != 3 or x.data.shape[0] != VIEW_CHANNELS:
        raise ValueError(f"{what} expects ({VIEW_CHANNELS},H,W), got {x.data.shape}")
    h, w = x.data.shape[1:]
    if h % 4 or w % 4:
        raise ValueError(f"{what} needs H,W divisible by 4, got {h}x{w}")


# --------------------------------------------------------------- surface f

def surface_forward(tape, store, vmaps, trace=None):
    """9-channel view maps -> 40-channel per-pixel deep features."""
    _check_view_input(vmaps, "surface_forward")
    x = _cin_relu(tape, store, "surface/stem7x7", vmaps)
    if trace is not None:
        trace.append(("stem7x7", x.shape))
    x = _cin_relu(tape, store, "surface/down1", x, stride=2)
    if trace is not None:
        trace.append(("down1", x.shape))
    x = _cin_relu(tape, store, "surface/down2", x, stride=2)
    if trace is not None:
        trace.append(("down2", x.shape))
    for i in range(1, 5):
        x = _residual_block(tape, store, f"surface/res{i}", x)
        if trace is not None:
            trace.append((f"res{i}", x.shape))
    x = _cinT_relu(tape, store, "surface/up1", x)
    if trace is not None:
        trace.append(("up1", x.shape))
    x = _cinT_relu(tape, store, "surface/up2", x)
    if trace is not None:
        trace.append(("up2", x.shape))
    x = _cin_relu(tape, store, "surface/head1x1", x)
    if trace is not None:
        trace.append(("head1x1", x.shape))
    return x


def surface_plan(h, w):
    """Layer output shapes by pure arithmetic (no forward pass)."""
    rows = [("stem7x7", (10, h, w)),
            ("down1", (20, (h + 1) // 2, (w + 1) // 2)),
            ("down2", (40, (h + 3) // 4, (w + 3) // 4))]
    qh, qw = rows[-1][1][1:]
    rows += [(f"res{i}", (40, qh, qw)) for i in range(1, 5)]
    rows += [("up1", (40, 2 * qh, 2 * qw)),
             ("up2", (40, 4 * qh, 4 * qw)),
             ("head1x1", (40, 4 * qh, 4 * qw))]
    return rows


# ------------------------------------------------------------------ path h

def path_feature_tensors(tape, fmap, points, e, n, s):
    """Differentiable 45xM feature tensors for both orientations.

    fmap is the (40,H,W) deep-feature tensor; gradients flow back into it
    through the nearest-pixel gather. Curve columns are constants.
    """
    from .curves import nearest_pixel_indices

    iy, ix = nearest_pixel_indices(points, fmap.data.shape[1], fmap.data.shape[2])
    deep = nd.gather_pixels(tape, fmap, iy, ix)      # (40, M)
    cols = np.stack([e[:, 0], e[:, 1], n[:, 0], n[:, 1], s]).astype(np.float32)
    fwd = nd.concat_rows(tape, [deep, nd.Tensor(cols)])
    rev = nd.concat_rows(tape, [deep, nd.Tensor(-cols[:4]), nd.Tensor(cols[4:])])
    return fwd, rev


def _path_trunk(tape, store, feats):
    x = nd.relu(tape, nd.conv1d(tape, feats, store["path/pc1/weight"], store["path/pc1/bias"]))
    x = nd.relu(tape, nd.conv1d(tape, x, store["path/pc2/weight"], store["path/pc2/bias"]))
    return nd.conv1d(tape, x, store["path/pc3/weight"], store["path/pc3/bias"])


def path_forward(tape, store, feats_fwd, feats_rev, base_thickness=1.0):
    """(thickness (M,), frame coefficients (M,2)) averaged over both
    orientations.

    Channel 0 goes through relu after adding the base thickness offset;
    channels 1-2 are raw coefficients on the stored unit tangent and normal.
    The orientation average makes the outputs even in the frame columns, so
    a world-space head could never express a displacement tied to the normal
    direction; coefficients resolved against the stored frame keep that
    invariance while leaving normal-aligned rules representable.
    """
    for f in (feats_fwd, feats_rev):
        if f.data.ndim != 2 or f.data.shape[0] != FEATURE_COLUMNS:
            raise ValueError(f"path features must be ({FEATURE_COLUMNS},M), got {f.data.shape}")
    out = nd.affine(tape, nd.add(tape, _path_trunk(tape, store, feats_fwd),
                                 _path_trunk(tape, store, feats_rev)), 0.5, 0.0)
    thick = nd.relu(tape, nd.affine(tape, nd.slice_rows(tape, out, 0, 1),
                                    1.0, base_thickness))
    thick = nd.reshape(tape, thick, (out.data.shape[1],))
    disp = nd.transpose2d(tape, nd.slice_rows(tape, out, 1, 3))
    return thick, disp


def frame_displacement(tape, coeffs, e, n):
    """World displacement (M,2) from local-frame coefficients (M,2)."""
    ct = nd.transpose2d(tape, coeffs)
    a = nd.slice_rows(tape, ct, 0, 1)
    b = nd.slice_rows(tape, ct, 1, 2)
    et = nd.Tensor(np.ascontiguousarray(e.T, dtype=np.float32))
    nt = nd.Tensor(np.ascontiguousarray(n.T, dtype=np.float32))
    world = nd.add(tape, nd.mul(tape, nd.concat_rows(tape, [a, a]), et),
                   nd.mul(tape, nd.concat_rows(tape, [b, b]), nt))
    return nd.transpose2d(tape, world)


# --------------------------------------------------------------- texture g

def texture_forward(tape, store, umaps, trace=None):
    """View maps with the rendered stroke mask as channel 8 -> RGB in (0,1)."""
    _check_view_input(umaps, "texture_forward")
    x = _cin_relu(tape, store, "texture/stem7x7", umaps)
    if trace is not None:
        trace.append(("stem7x7", x.shape))
    x = _cin_relu(tape, store, "texture/down1", x, stride=2)
    if trace is not None:
        trace.append(("down1", x.shape))
    x = _cin_relu(tape, store, "texture/down2", x, stride=2)
    if trace is not None:
        trace.append(("down2", x.shape))
    for i in range(1, 7):
        x = _residual_block(tape, store, f"texture/res{i}", x)
        if trace is not None:
            trace.append((f"res{i}", x.shape))
    x = _cinT_relu(tape, store, "texture/up1", x)
    if trace is not None:
        trace.append(("up1", x.shape))
    x = _cinT_relu(tape, store, "texture/up2", x)
    if trace is not None:
        trace.append(("up2", x.shape))
    x = nd.sigmoid(tape, nd.conv2d(tape, x, store["texture/rgb7x7/weight"],
                                   store["texture/rgb7x7/bias"]))
    if trace is not None:
        trace.append(("rgb7x7", x.shape))
    return x


def texture_plan(h, w):
    rows = [("stem7x7", (64, h, w)),
            ("down1", (128, (h + 1) // 2, (w + 1) // 2)),
            ("down2", (256, (h + 3) // 4, (w + 3) // 4))]
    qh, qw = rows[-1][1][1:]
    rows += [(f"res{i}", (256, qh, qw)) for i in range(1, 7)]
    rows += [("up1", (128, 2 * qh, 2 * qw)),
             ("up2", (64, 4 * qh, 4 * qw)),
             ("rgb7x7", (3, 4 * qh, 4 * qw))]
    return rows


# ----------------------------------------------------------- discriminator

def disc_forward(tape, store, rgb, trace=None):
    """PatchGAN score map; input (3,c,c) with c >= 64, 4x4 convs."""
    if rgb.data.ndim != 3 or rgb.data.shape[0] != 3:
        raise ValueError(f"disc_forward expects (3,H,W), got {rgb.data.shape}")
    if min(rgb.data.shape[1:]) < 64:
        raise ValueError("disc_forward needs crops of at least 64x64")
    x = nd.leaky_relu(tape, nd.conv2d(tape, rgb, store["disc/d1/weight"],
                                      store["disc/d1/bias"], stride=2))
    if trace is not None:
        trace.append(("d1", x.shape))
    for name, stride in (("d2", 2), ("d3", 2), ("d4", 1)):
        x = nd.conv2d(tape, x, store[f"disc/{name}/weight"],
                      store[f"disc/{name}/bias"], stride=stride)
        x = nd.instance_norm(tape, x, store[f"disc/{name}/norm_gamma"],
                             store[f"disc/{name}/norm_beta"])
        x = nd.leaky_relu(tape, x)
        if trace is not None:
            trace.append((name, x.shape))
    x = nd.conv2d(tape, x, store["disc/d5/weight"], store["disc/d5/bias"])
    if trace is not None:
        trace.append(("d5", x.shape))
    return x


# ------------------------------------------------------------ orchestration

def predict_strokes(store, curves, fmap_data, base_thickness=1.0):
    """Thickness/displacement for every path from a numpy feature map."""
    disp, thick = [], []
    for pts in curves.paths:
        fwd, rev = build_path_features(pts, fmap_data)
        t, c = path_forward(None, store,
                            nd.Tensor(np.ascontiguousarray(fwd.T)),
                            nd.Tensor(np.ascontiguousarray(rev.T)),
                            base_thickness=base_thickness)
        e, n, _s = path_frames(pts)
        thick.append(t.data)
        disp.append((c.data[:, :1] * e + c.data[:, 1:] * n).astype(np.float32))
    return StrokeSet(base=curves, displacement=disp, thickness=thick).validate()


def infer(curves, vmaps, store, base_thickness=1.0, aa_width=1.0, spacing=2.0,
          resample=True):
    """Full pipeline: curves + 9-channel view maps -> (strokes, mask, RGB).

    Returns the predicted StrokeSet, the rendered stroke mask (H,W) and the
    textured drawing (3,H,W), all numpy float32.
    """
    vmaps = np.asarray(vmaps, np.float32)
    if vmaps.ndim != 3 or vmaps.shape[0] != VIEW_CHANNELS:
        raise ValueError(f"view maps must be ({VIEW_CHANNELS},H,W), got {vmaps.shape}")
    h, w = vmaps.shape[1:]
    if curves.width != w or curves.height != h:
        raise ValueError("curve canvas does not match the view maps")
    rs = resample_curves(curves, spacing) if resample else curves
    fmap = surface_forward(None, store, nd.Tensor(vmaps))
    strokes = predict_strokes(store, rs, fmap.data, base_thickness=base_thickness)
    mask, _ = render(strokes, Viewport(0.0, 0.0, w, h), aa_width=aa_width)
    umaps = np.concatenate([vmaps[:8], mask[None]], axis=0)
    rgb = texture_forward(None, store, nd.Tensor(umaps))
    return strokes, mask, rgb.data
