"""Single-example training: patch sampling, the four losses, both stages.

Stage 1 (train_geometry) fits the surface and path modules so the rendered
stroke mask matches the reference mask under an L1 loss plus a smoothness
penalty on neighboring displacements. Stage 2 (train_texture) freezes the
geometry, renders the stroke mask once, and fits the texture module with an
L1 reconstruction loss and an LSGAN patch discriminator.

Batches are realized as gradient accumulation over sequentially sampled
crops (fully convolutional nets cannot stack mixed crop sizes), with the
backward seed scaled by 1/batch so accumulated gradients are batch means.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import models, ndtensor as nd
from .curves import CurveSet, clip_ranges, path_frames, resample_curves
from .rasterizer import Viewport, render, render_op

DEFAULT_SCALES = (64, 128, 192, 256)
MAX_PATCH_DRAWS = 1000


@dataclass
class LossWeights:
    """Scale factors for the four loss terms."""
    mask: float = 1.0
    shape: float = 0.02
    texture: float = 1.0
    adversarial: float = 1.0

    def validate(self):
        for name in ("mask", "shape", "texture", "adversarial"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")
        return self


@dataclass
class TrainConfig:
    lr: float = 2e-4
    batch: int = 16
    iterations: int = 2000
    seed: int = 0
    min_ink: float = 0.01
    aa_width: float = 1.0
    spacing: float = 2.0
    scales: tuple = DEFAULT_SCALES
    margin: float = 8.0
    base_thickness: float = 1.0
    beta1: float = 0.5
    beta2: float = 0.999
    checkpoint_every: int = 0

    def validate(self):
        if self.lr <= 0 or self.batch < 1 or self.iterations < 0:
            raise ValueError("lr must be positive, batch >= 1, iterations >= 0")
        if self.min_ink <= 0 or self.aa_width <= 0 or self.spacing <= 0:
            raise ValueError("min_ink, aa_width and spacing must be positive")
        if not self.scales or any(int(c) < 4 or int(c) % 4 for c in self.scales):
            raise ValueError("crop scales must be positive multiples of 4")
        if self.margin < 0 or self.base_thickness < 0:
            raise ValueError("margin and base_thickness must be >= 0")
        return self


def iteration_rng(seed, iteration):
    """Independent per-iteration stream; stream 0 is reserved for init."""
    return np.random.default_rng([int(seed), 1 + int(iteration)])


# ----------------------------------------------------------------- soft mask

def _luminance(img):
    img = np.asarray(img, np.float32)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[0] == 1:
        return img[0]
    if img.ndim == 3 and img.shape[0] == 3:
        w = np.array([0.299, 0.587, 0.114], np.float32)
        return np.tensordot(w, img, axes=1)
    raise ValueError(f"expected (H,W), (1,H,W) or (3,H,W) image, got {img.shape}")


def box_blur(img, radius):
    """Normalized box filter with replicate edge padding."""
    r = int(radius)
    if r <= 0:
        return np.asarray(img, np.float32).copy()
    p = np.pad(np.asarray(img, np.float64), r, mode="edge")
    k = 2 * r + 1
    out = np.zeros(img.shape, np.float64)
    for di in range(k):
        for dj in range(k):
            out += p[di:di + img.shape[0], dj:dj + img.shape[1]]
    return (out / (k * k)).astype(np.float32)


def extract_soft_mask(artist, ink_threshold=0.5, blur_radius=1):
    """Binary ink mask (ink 0, background 1) softened by a small box blur."""
    lum = _luminance(artist)
    if lum.min() < -1e-6 or lum.max() > 1 + 1e-6:
        raise ValueError("drawing values must lie in [0,1]")
    hard = np.where(lum < ink_threshold, np.float32(0), np.float32(1))
    return box_blur(hard, blur_radius)


# ------------------------------------------------------------ patch sampling

def ink_fraction(mask_crop):
    return float(np.mean(1.0 - mask_crop))


def sample_patch_origin(rng, mask, scales, min_ink, max_draws=MAX_PATCH_DRAWS):
    """Rejection-sample (x0, y0, size): draw scale, then x, then y, keep
    crops whose mean ink meets the threshold."""
    h, w = mask.shape
    scales = [int(c) for c in scales if int(c) <= min(h, w)]
    if not scales:
        raise ValueError("no crop scale fits inside the image")
    for _ in range(max_draws):
        c = scales[int(rng.integers(len(scales)))]
        x0 = int(rng.integers(0, w - c + 1))
        y0 = int(rng.integers(0, h - c + 1))
        if ink_fraction(mask[y0:y0 + c, x0:x0 + c]) >= min_ink:
            return x0, y0, c
    raise ValueError(f"no crop with ink fraction >= {min_ink} after {max_draws} draws")


@dataclass
class TrainPatch:
    """One training crop: window, image slices, clipped curve runs.

    runs holds (path_index, start, stop, local_points) for every maximal run
    of curve points inside the margin-expanded window, in crop coordinates.
    """
    x0: int
    y0: int
    size: int
    vmaps: np.ndarray
    mask: np.ndarray
    drawing: np.ndarray = None
    runs: list = field(default_factory=list)


def build_patch(x0, y0, size, mask, vmaps=None, drawing=None, curves=None,
                margin=8.0):
    c = size
    patch = TrainPatch(
        x0=x0, y0=y0, size=c,
        vmaps=None if vmaps is None else vmaps[:, y0:y0 + c, x0:x0 + c],
        mask=mask[y0:y0 + c, x0:x0 + c],
        drawing=None if drawing is None else drawing[:, y0:y0 + c, x0:x0 + c])
    if curves is not None:
        shift = np.array([x0, y0], np.float32)
        for pi, pts in enumerate(curves.paths):
            for a, b in clip_ranges(pts, x0, y0, c, margin):
                patch.runs.append((pi, a, b, pts[a:b] - shift))
    return patch


def sample_patch(rng, mask, cfg, vmaps=None, drawing=None, curves=None):
    x0, y0, c = sample_patch_origin(rng, mask, cfg.scales, cfg.min_ink)
    return build_patch(x0, y0, c, mask, vmaps=vmaps, drawing=drawing,
                       curves=curves, margin=cfg.margin)


# ----------------------------------------------------------------- losses

def loss_mask(tape, rendered, target):
    return nd.l1_mean(tape, rendered, target)


def loss_texture(tape, rgb, target):
    return nd.l1_mean(tape, rgb, target)


def adversarial_gen_loss(tape, fake_scores):
    return nd.mean_all(tape, nd.square(tape, nd.affine(tape, fake_scores, 1.0, -1.0)))


def disc_loss(tape, real_scores, fake_scores):
    lr_ = nd.mean_all(tape, nd.square(tape, nd.affine(tape, real_scores, 1.0, -1.0)))
    lf = nd.mean_all(tape, nd.square(tape, fake_scores))
    return nd.affine(tape, nd.add(tape, lr_, lf), 0.5, 0.0)


def shape_reg_op(tape, per_path):
    """Smoothness penalty on in-crop displacements.

    per_path: one entry per cropped path, each a list of (disp_tensor, i0, i1)
    where i0/i1 index consecutive in-crop point pairs of that tensor. Paths
    with no pairs are excluded; value is the per-path mean of ||d_j - d_k||^2
    averaged over the remaining paths.
    """
    path_sums, path_counts, kept = [], [], []
    for runs in per_path:
        ssum, cnt = 0.0, 0
        for t, i0, i1 in runs:
            if len(i0):
                diff = t.data[i0].astype(np.float64) - t.data[i1].astype(np.float64)
                ssum += float(np.sum(diff * diff))
                cnt += len(i0)
        if cnt:
            kept.append(runs)
            path_sums.append(ssum)
            path_counts.append(cnt)
    n_paths = len(kept)
    if not n_paths:
        return nd.Tensor(np.float32(0.0))
    value = np.float32(sum(s / c for s, c in zip(path_sums, path_counts)) / n_paths)

    def bwd(g):
        for runs, cnt in zip(kept, path_counts):
            scale = 2.0 * float(g) / (n_paths * cnt)
            for t, i0, i1 in runs:
                if not len(i0):
                    continue
                diff = (t.data[i0] - t.data[i1]) * np.float32(scale)
                full = np.zeros_like(t.data)
                np.add.at(full, i0, diff)
                np.add.at(full, i1, -diff)
                t._add_grad(full)

    return nd._emit(tape, value, bwd, "shape_reg")


def loss_shape_reg(tape, disp_tensors, in_crop_masks, path_indices):
    """Group per-run displacement tensors by original path and build the
    consecutive-pair index lists from the in-crop masks."""
    by_path = {}
    for t, keep, pi in zip(disp_tensors, in_crop_masks, path_indices):
        pair = np.flatnonzero(keep[:-1] & keep[1:])
        by_path.setdefault(pi, []).append((t, pair, pair + 1))
    return shape_reg_op(tape, list(by_path.values()))


# ------------------------------------------------------------ geometry stage

def prepare_curves(curves, spacing):
    """Resample once and precompute per-path frames for the whole stage."""
    rs = resample_curves(curves, spacing)
    return rs, [path_frames(p) for p in rs.paths]


def _geometry_patch_loss(tape, store, cfg, weights, patch, rcurves, frames):
    c = patch.size
    fmap = models.surface_forward(tape, store, nd.Tensor(patch.vmaps))
    locals_, disp_list, thick_list = [], [], []
    in_crop, path_idx = [], []
    for pi, a, b, local in patch.runs:
        e, n, s = frames[pi]
        fa, ra = models.path_feature_tensors(tape, fmap, local, e[a:b], n[a:b], s[a:b])
        t, coef = models.path_forward(tape, store, fa, ra, cfg.base_thickness)
        if not (np.isfinite(t.data).all() and np.isfinite(coef.data).all()):
            raise nd.NumericalError(
                f"non-finite stroke prediction on path {pi} (crop {patch.x0},{patch.y0})")
        d = models.frame_displacement(tape, coef, e[a:b], n[a:b])
        locals_.append(local)
        thick_list.append(t)
        disp_list.append(d)
        in_crop.append((local[:, 0] >= 0) & (local[:, 0] < c)
                       & (local[:, 1] >= 0) & (local[:, 1] < c))
        path_idx.append(pi)
    if not locals_:
        blank = nd.Tensor(np.ones((c, c), np.float32))
        lb = nd.l1_mean(tape, blank, nd.Tensor(patch.mask))
        return lb, nd.Tensor(np.float32(0.0)), lb
    img = render_op(tape, CurveSet(c, c, locals_), disp_list, thick_list,
                    Viewport(0.0, 0.0, c, c), aa_width=cfg.aa_width)
    lb = loss_mask(tape, img, nd.Tensor(patch.mask))
    ls = loss_shape_reg(tape, disp_list, in_crop, path_idx)
    total = nd.add(tape, nd.affine(tape, lb, weights.mask, 0.0),
                   nd.affine(tape, ls, weights.shape, 0.0))
    return lb, ls, total


def _run_checkpoint(on_checkpoint, cfg, it, store):
    if on_checkpoint is not None and cfg.checkpoint_every > 0 \
            and (it + 1) % cfg.checkpoint_every == 0:
        on_checkpoint(it + 1, store)


def train_geometry(store, cfg, weights, vmaps, mask, curves,
                   on_checkpoint=None, start_iteration=0):
    """Fit surface + path modules to the reference stroke mask.

    Returns the loss history, one dict per iteration. Deterministic under
    (seed, start_iteration): iteration k always consumes stream [seed, 1+k].
    """
    cfg.validate()
    weights.validate()
    vmaps = np.asarray(vmaps, np.float32)
    mask = np.asarray(mask, np.float32)
    if vmaps.ndim != 3 or vmaps.shape[0] != models.VIEW_CHANNELS:
        raise ValueError(f"view maps must be ({models.VIEW_CHANNELS},H,W)")
    if mask.shape != vmaps.shape[1:]:
        raise ValueError("mask shape does not match view maps")
    rcurves, frames = prepare_curves(curves, cfg.spacing)
    names = store.names("surface/") + store.names("path/")
    store.ensure_adam("surface/", lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    store.ensure_adam("path/", lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)

    history = []
    for it in range(start_iteration, start_iteration + cfg.iterations):
        rng = iteration_rng(cfg.seed, it)
        store.zero_grads("surface/")
        store.zero_grads("path/")
        sum_lb = sum_ls = sum_total = 0.0
        for _ in range(cfg.batch):
            patch = sample_patch(rng, mask, cfg, vmaps=vmaps, curves=rcurves)
            tape = nd.Tape()
            lb, ls, total = _geometry_patch_loss(tape, store, cfg, weights,
                                                 patch, rcurves, frames)
            if not np.isfinite(total.data):
                raise nd.NumericalError(
                    f"non-finite geometry loss at iteration {it} "
                    f"(mask {lb.data!r}, shape {ls.data!r})")
            tape.backward(total, seed=1.0 / cfg.batch)
            sum_lb += float(lb.data)
            sum_ls += float(ls.data)
            sum_total += float(total.data)
        for name in names:
            nd.adam_step(store[name], store.opt[name])
        history.append({"iteration": it,
                        "loss": sum_total / cfg.batch,
                        "loss_mask": sum_lb / cfg.batch,
                        "loss_shape": sum_ls / cfg.batch})
        _run_checkpoint(on_checkpoint, cfg, it, store)
    return history


# ------------------------------------------------------------- texture stage

def render_full_mask(store, cfg, vmaps, curves):
    """Render the predicted strokes over the whole canvas (frozen geometry)."""
    h, w = vmaps.shape[1:]
    rs = resample_curves(CurveSet(w, h, list(curves.paths)), cfg.spacing)
    fmap = models.surface_forward(None, store, nd.Tensor(vmaps))
    strokes = models.predict_strokes(store, rs, fmap.data,
                                     base_thickness=cfg.base_thickness)
    img, _ = render(strokes, Viewport(0.0, 0.0, w, h), aa_width=cfg.aa_width)
    return img


def train_texture(store, cfg, weights, vmaps, drawing, mask, curves=None,
                  ib_full=None, on_checkpoint=None, start_iteration=0):
    """Fit the texture module (and discriminator) to the reference drawing.

    ib_full optionally supplies the rendered stroke mask; otherwise it is
    rendered once from the frozen geometry modules. mask drives the
    stroke-containing patch rejection rule for both fake and real crops.
    """
    cfg.validate()
    weights.validate()
    vmaps = np.asarray(vmaps, np.float32)
    drawing = np.asarray(drawing, np.float32)
    mask = np.asarray(mask, np.float32)
    if drawing.ndim != 3 or drawing.shape[0] != 3:
        raise ValueError(f"drawing must be (3,H,W), got {drawing.shape}")
    if drawing.shape[1:] != vmaps.shape[1:] or mask.shape != vmaps.shape[1:]:
        raise ValueError("drawing/mask shape does not match view maps")
    if ib_full is None:
        if curves is None:
            raise ValueError("need curves to render the stroke mask")
        ib_full = render_full_mask(store, cfg, vmaps, curves)
    ib_full = np.asarray(ib_full, np.float32)
    if ib_full.shape != mask.shape:
        raise ValueError("rendered stroke mask shape mismatch")
    umaps = np.concatenate([vmaps[:8], ib_full[None]], axis=0)

    use_disc = weights.adversarial > 0
    store.ensure_adam("texture/", lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    if use_disc:
        store.ensure_adam("disc/", lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)

    history = []
    for it in range(start_iteration, start_iteration + cfg.iterations):
        rng = iteration_rng(cfg.seed, it)
        fake_patches = [sample_patch(rng, mask, cfg, vmaps=umaps, drawing=drawing)
                        for _ in range(cfg.batch)]
        sum_lt = sum_la = sum_ld = 0.0

        if use_disc:
            # discriminator step: detached fakes vs independent real crops
            real_patches = [sample_patch(rng, mask, cfg, drawing=drawing)
                            for _ in range(cfg.batch)]
            store.zero_grads("disc/")
            for fp, rp in zip(fake_patches, real_patches):
                fake = models.texture_forward(None, store, nd.Tensor(fp.vmaps))
                tape = nd.Tape()
                sr = models.disc_forward(tape, store, nd.Tensor(rp.drawing))
                sf = models.disc_forward(tape, store, nd.Tensor(fake.data))
                ld = disc_loss(tape, sr, sf)
                if not np.isfinite(ld.data):
                    raise nd.NumericalError(
                        f"non-finite discriminator loss at iteration {it}")
                tape.backward(ld, seed=1.0 / cfg.batch)
                sum_ld += float(ld.data)
            for name in store.names("disc/"):
                nd.adam_step(store[name], store.opt[name])

        # generator step against the updated discriminator
        store.zero_grads("texture/")
        if use_disc:
            store.zero_grads("disc/")
        for fp in fake_patches:
            tape = nd.Tape()
            fake = models.texture_forward(tape, store, nd.Tensor(fp.vmaps))
            lt = loss_texture(tape, fake, nd.Tensor(fp.drawing))
            total = nd.affine(tape, lt, weights.texture, 0.0)
            la_val = 0.0
            if use_disc:
                la = adversarial_gen_loss(tape, models.disc_forward(tape, store, fake))
                la_val = float(la.data)
                total = nd.add(tape, total, nd.affine(tape, la, weights.adversarial, 0.0))
            if not np.isfinite(total.data):
                raise nd.NumericalError(
                    f"non-finite texture loss at iteration {it} "
                    f"(texture {lt.data!r}, adversarial {la_val!r})")
            tape.backward(total, seed=1.0 / cfg.batch)
            sum_lt += float(lt.data)
            sum_la += la_val
        for name in store.names("texture/"):
            nd.adam_step(store[name], store.opt[name])

        history.append({"iteration": it,
                        "loss": (weights.texture * sum_lt
                                 + weights.adversarial * sum_la) / cfg.batch,
                        "loss_texture": sum_lt / cfg.batch,
                        "loss_adv": sum_la / cfg.batch,
                        "loss_disc": sum_ld / cfg.batch})
        _run_checkpoint(on_checkpoint, cfg, it, store)
    return history
