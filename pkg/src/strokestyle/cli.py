"""Command line driver for the stroke stylization workflow.

Commands compose into the full pipeline: prepare-mask, synth-style,
train-geometry, train-texture, infer, export-svg, plus gradcheck and eval
utilities. Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

import numpy as np

from . import io as sio
from . import models
from . import ndtensor as nd
from . import synth
from . import training
from .curves import CurveSet, StrokeSet, resample_curves
from .rasterizer import Viewport, render, render_backward

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ------------------------------------------------------------ configuration

_WEIGHT_KEYS = {"mask_weight": "mask", "shape_weight": "shape",
                "texture_weight": "texture", "adversarial_weight": "adversarial"}
_EXTRA_KEYS = {"ink", "ink_threshold", "blur_radius"}


def _known_keys():
    keys = {f.name for f in dataclasses.fields(training.TrainConfig)}
    keys |= {f.name for f in dataclasses.fields(synth.SynthStyle)}
    keys |= set(_WEIGHT_KEYS) | _EXTRA_KEYS
    return keys


def parse_config_file(path):
    """key=value lines; # starts a comment; values stay strings here."""
    out = {}
    known = _known_keys()
    with open(path) as f:
        for ln, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected key=value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise ValueError(f"{path}:{ln}: unknown config key {key!r}")
            out[key] = value
    return out


def _load_config(args):
    path = getattr(args, "config", None)
    return parse_config_file(path) if path else {}


def train_config_from(cfg, args=None):
    base = training.TrainConfig()
    kwargs = {}
    for field in dataclasses.fields(training.TrainConfig):
        if field.name not in cfg:
            continue
        raw, cur = cfg[field.name], getattr(base, field.name)
        if isinstance(cur, tuple):
            kwargs[field.name] = tuple(int(tok) for tok in
                                       raw.replace(",", " ").split())
        elif isinstance(cur, int):
            kwargs[field.name] = int(raw)
        else:
            kwargs[field.name] = float(raw)
    if args is not None:
        if getattr(args, "seed", None) is not None:
            kwargs["seed"] = args.seed
        if getattr(args, "iters", None) is not None:
            kwargs["iterations"] = args.iters
        if getattr(args, "size", None) is not None:
            kwargs["scales"] = (args.size,)
    return training.TrainConfig(**kwargs).validate()


def loss_weights_from(cfg):
    kwargs = {_WEIGHT_KEYS[k]: float(cfg[k]) for k in _WEIGHT_KEYS if k in cfg}
    return training.LossWeights(**kwargs).validate()


def style_from(cfg):
    kwargs = {}
    for field in dataclasses.fields(synth.SynthStyle):
        if field.name in cfg:
            cast = int if field.name == "feature_channel" else float
            kwargs[field.name] = cast(cfg[field.name])
    return synth.SynthStyle(**kwargs).validate()


def ink_from(cfg):
    raw = cfg.get("ink", "0.1,0.1,0.1").strip()
    if raw == "gradient":
        return "gradient"
    parts = [float(tok) for tok in raw.replace(",", " ").split()]
    if len(parts) != 3:
        raise ValueError(f"ink must be r,g,b or 'gradient', got {raw!r}")
    return tuple(parts)


# ------------------------------------------------------------------ helpers

def _out_dir(args):
    path = getattr(args, "out_dir", None) or "."
    os.makedirs(path, exist_ok=True)
    return path


def _load_scene(args, channels=models.VIEW_CHANNELS):
    curves = sio.read_curves(args.curves)
    vmaps, _names = sio.read_feature_stack(args.features)
    if vmaps.shape[0] != channels:
        raise ValueError(f"feature stack has {vmaps.shape[0]} channels, "
                         f"need {channels}")
    if vmaps.shape[1:] != (curves.height, curves.width):
        raise ValueError(f"feature stack {vmaps.shape[1:]} does not match "
                         f"the {curves.height}x{curves.width} curve canvas")
    return curves, vmaps


def _write_history(path, history, fields):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(fields)
        for row in history:
            writer.writerow([row["iteration"] if k == "iteration"
                             else repr(float(row[k])) for k in fields])


def _checkpoint_config(cfg, weights):
    return {"train": dataclasses.asdict(cfg),
            "weights": dataclasses.asdict(weights)}


def _periodic_saver(out_dir, stem, store, prefixes, cfg, weights):
    def save(iteration, st):
        name = os.path.join(out_dir, f"{stem}_{iteration:06d}.nsck")
        sio.save_checkpoint(name, st, prefixes=prefixes,
                            config=_checkpoint_config(cfg, weights),
                            iteration=iteration)
    return save


# ----------------------------------------------------------------- commands

def cmd_prepare_mask(args):
    cfg = _load_config(args)
    drawing = sio.read_image(args.drawing)
    mask = training.extract_soft_mask(
        drawing,
        ink_threshold=float(cfg.get("ink_threshold", 0.5)),
        blur_radius=int(cfg.get("blur_radius", 1)))
    sio.write_image(args.out, mask)
    print(f"wrote {args.out} (ink fraction "
          f"{training.ink_fraction(mask):.4f})")
    return EXIT_OK


def cmd_synth_style(args):
    cfg = _load_config(args)
    curves, vmaps = _load_scene(args)
    style = style_from(cfg)
    strokes, drawing, gray = synth.synth_drawing(style, curves, vmaps,
                                                 ink=ink_from(cfg))
    out = _out_dir(args)
    sio.write_image(os.path.join(out, "drawing.ppm"), drawing)
    sio.write_image(os.path.join(out, "render.pgm"), gray)
    sio.export_svg(os.path.join(out, "strokes.svg"), strokes)
    print(f"wrote drawing.ppm, render.pgm, strokes.svg to {out}")
    return EXIT_OK


def cmd_train_geometry(args):
    cfg = _load_config(args)
    tc = train_config_from(cfg, args)
    weights = loss_weights_from(cfg)
    curves, vmaps = _load_scene(args)
    mask = sio.read_image(args.mask)
    if mask.ndim != 2:
        raise ValueError("mask must be a grayscale image")
    out = _out_dir(args)
    store = models.init_params(tc.seed)
    prefixes = ("surface/", "path/")
    on_ck = None
    if tc.checkpoint_every > 0:
        on_ck = _periodic_saver(out, "geometry", store, prefixes, tc, weights)
    history = training.train_geometry(store, tc, weights, vmaps, mask, curves,
                                      on_checkpoint=on_ck)
    final = os.path.join(out, "geometry.nsck")
    sio.save_checkpoint(final, store, prefixes=prefixes,
                        config=_checkpoint_config(tc, weights),
                        iteration=tc.iterations)
    _write_history(os.path.join(out, "loss_geometry.csv"), history,
                   ["iteration", "loss", "loss_mask", "loss_shape"])
    tail = f" (final loss {history[-1]['loss']:.6f})" if history else ""
    print(f"wrote {final} after {tc.iterations} iterations{tail}")
    return EXIT_OK


def cmd_train_texture(args):
    cfg = _load_config(args)
    tc = train_config_from(cfg, args)
    weights = loss_weights_from(cfg)
    curves, vmaps = _load_scene(args)
    drawing = sio.read_image(args.drawing)
    if drawing.ndim != 3:
        raise ValueError("drawing must be an RGB image")
    mask = sio.read_image(args.mask)
    if mask.ndim != 2:
        raise ValueError("mask must be a grayscale image")
    out = _out_dir(args)
    store = models.init_params(tc.seed)
    sio.load_checkpoint(args.checkpoint, store)
    on_ck = None
    if tc.checkpoint_every > 0:
        on_ck = _periodic_saver(out, "texture", store, None, tc, weights)
    history = training.train_texture(store, tc, weights, vmaps, drawing, mask,
                                     curves=curves, on_checkpoint=on_ck)
    final = os.path.join(out, "texture.nsck")
    sio.save_checkpoint(final, store,
                        config=_checkpoint_config(tc, weights),
                        iteration=tc.iterations)
    _write_history(os.path.join(out, "loss_texture.csv"), history,
                   ["iteration", "loss", "loss_texture", "loss_adv",
                    "loss_disc"])
    tail = f" (final loss {history[-1]['loss']:.6f})" if history else ""
    print(f"wrote {final} after {tc.iterations} iterations{tail}")
    return EXIT_OK


def cmd_infer(args):
    cfg = _load_config(args)
    tc = train_config_from(cfg, args)
    curves, vmaps = _load_scene(args)
    store = models.init_params(tc.seed)
    sio.load_checkpoint(args.checkpoint, store)
    strokes, mask, rgb = models.infer(curves, vmaps, store,
                                      base_thickness=tc.base_thickness,
                                      aa_width=tc.aa_width,
                                      spacing=tc.spacing)
    out = _out_dir(args)
    sio.write_image(os.path.join(out, "out_mask.pgm"), mask)
    sio.write_image(os.path.join(out, "out_rgb.ppm"), rgb)
    sio.export_svg(os.path.join(out, "strokes.svg"), strokes)
    print(f"wrote out_mask.pgm, out_rgb.ppm, strokes.svg to {out}")
    return EXIT_OK


def cmd_export_svg(args):
    cfg = _load_config(args)
    tc = train_config_from(cfg, args)
    curves, vmaps = _load_scene(args)
    store = models.init_params(tc.seed)
    sio.load_checkpoint(args.checkpoint, store)
    rs = resample_curves(curves, tc.spacing)
    fmap = models.surface_forward(None, store, nd.Tensor(vmaps))
    strokes = models.predict_strokes(store, rs, fmap.data,
                                     base_thickness=tc.base_thickness)
    sio.export_svg(args.out, strokes)
    print(f"wrote {args.out} ({len(strokes.base.paths)} strokes)")
    return EXIT_OK


def cmd_eval(args):
    cfg = _load_config(args)
    a = sio.read_image(args.image_a)
    b = sio.read_image(args.image_b)
    if a.shape != b.shape:
        raise ValueError(f"image dims differ: {a.shape} vs {b.shape}")
    metrics = eval_metrics(a, b, ink_threshold=float(cfg.get("ink_threshold",
                                                             0.5)))
    print("mean_l1,rmse,ink_l1")
    print(",".join(f"{metrics[k]:.9f}" for k in ("mean_l1", "rmse", "ink_l1")))
    return EXIT_OK


def eval_metrics(a, b, ink_threshold=0.5):
    """mean L1, RMSE and L1 restricted to the reference's ink pixels.

    b is the reference: its luminance marks ink. With no ink pixels the ink
    term is 0 by convention.
    """
    a64 = np.asarray(a, np.float64)
    b64 = np.asarray(b, np.float64)
    diff = np.abs(a64 - b64)
    lum = (b64 if b64.ndim == 2 else
           0.299 * b64[0] + 0.587 * b64[1] + 0.114 * b64[2])
    ink = lum < ink_threshold
    if a64.ndim == 3:
        ink_diff = diff[:, ink]
    else:
        ink_diff = diff[ink]
    return {"mean_l1": float(diff.mean()),
            "rmse": float(np.sqrt((diff * diff).mean())),
            "ink_l1": float(ink_diff.mean()) if ink_diff.size else 0.0}


# ---------------------------------------------------------------- gradcheck

GRADCHECK_THRESHOLD = 1e-2


def _gc_tensor(rng):
    x = nd.Tensor(rng.standard_normal((4, 5)).astype(np.float32),
                  requires_grad=True)
    y = nd.Tensor(rng.standard_normal((4, 5)).astype(np.float32),
                  requires_grad=True)
    ref = nd.Tensor(rng.standard_normal((4, 5)).astype(np.float32))

    def build(inputs):
        xx, yy = inputs
        tape = nd.Tape()
        z = nd.add(tape, nd.relu(tape, xx), nd.mul(tape, xx, yy))
        z = nd.sigmoid(tape, nd.affine(tape, z, 1.3, -0.2))
        return tape, nd.l1_mean(tape, z, ref)

    return nd.finite_diff_check(build, [x, y], rng=rng)


def _gc_norm(rng):
    x = nd.Tensor(rng.standard_normal((3, 6, 6)).astype(np.float32),
                  requires_grad=True)
    gamma = nd.Tensor(rng.uniform(0.5, 1.5, 3).astype(np.float32),
                      requires_grad=True)
    beta = nd.Tensor(rng.standard_normal(3).astype(np.float32) * 0.1,
                     requires_grad=True)
    probe = nd.Tensor(rng.standard_normal((3, 6, 6)).astype(np.float32))

    def build(inputs):
        xx, g, be = inputs
        tape = nd.Tape()
        z = nd.instance_norm(tape, xx, g, be)
        return tape, nd.mean_all(tape, nd.mul(tape, z, probe))

    return nd.finite_diff_check(build, [x, gamma, beta], rng=rng)


def _gc_conv2d(rng):
    x = nd.Tensor(rng.standard_normal((2, 8, 8)).astype(np.float32),
                  requires_grad=True)
    w = nd.Tensor((rng.standard_normal((3, 2, 3, 3)) * 0.3).astype(np.float32),
                  requires_grad=True)
    b = nd.Tensor(rng.standard_normal(3).astype(np.float32) * 0.1,
                  requires_grad=True)
    probe = nd.Tensor(rng.standard_normal((3, 4, 4)).astype(np.float32))

    def build(inputs):
        xx, ww, bb = inputs
        tape = nd.Tape()
        z = nd.conv2d(tape, xx, ww, bb, stride=2)
        return tape, nd.mean_all(tape, nd.mul(tape, z, probe))

    return nd.finite_diff_check(build, [x, w, b], rng=rng)


def _gc_conv2d_transpose(rng):
    x = nd.Tensor(rng.standard_normal((2, 5, 5)).astype(np.float32),
                  requires_grad=True)
    w = nd.Tensor((rng.standard_normal((2, 3, 3, 3)) * 0.2).astype(np.float32),
                  requires_grad=True)
    b = nd.Tensor(rng.standard_normal(3).astype(np.float32) * 0.1,
                  requires_grad=True)
    probe = nd.Tensor(rng.standard_normal((3, 10, 10)).astype(np.float32))

    def build(inputs):
        xx, ww, bb = inputs
        tape = nd.Tape()
        z = nd.conv2d_transpose(tape, xx, ww, bb)
        return tape, nd.mean_all(tape, nd.mul(tape, z, probe))

    return nd.finite_diff_check(build, [x, w, b], rng=rng)


def _gc_conv1d(rng):
    x = nd.Tensor(rng.standard_normal((6, 12)).astype(np.float32),
                  requires_grad=True)
    w = nd.Tensor((rng.standard_normal((4, 6, 3)) * 0.3).astype(np.float32),
                  requires_grad=True)
    b = nd.Tensor(rng.standard_normal(4).astype(np.float32) * 0.1,
                  requires_grad=True)
    probe = nd.Tensor(rng.standard_normal((4, 12)).astype(np.float32))

    def build(inputs):
        xx, ww, bb = inputs
        tape = nd.Tape()
        z = nd.conv1d(tape, xx, ww, bb)
        return tape, nd.mean_all(tape, nd.mul(tape, z, probe))

    return nd.finite_diff_check(build, [x, w, b], rng=rng)


def _gc_rasterizer(rng, size=16, h=1e-3):
    """FD over displacement and thickness; argmin-flip configs resampled."""
    for _attempt in range(25):
        base = np.stack([np.linspace(3.0, size - 3.0, 5),
                         size / 2 + 2.0 * np.sin(np.linspace(0.0, 3.0, 5)
                                                 + rng.uniform(0, 6))], axis=1)
        ss = StrokeSet(
            base=CurveSet(size, size, [base.astype(np.float32)]),
            displacement=[rng.uniform(-0.5, 0.5, (5, 2)).astype(np.float32)],
            thickness=[rng.uniform(1.0, 3.0, 5).astype(np.float32)])
        vp = Viewport(0.0, 0.0, size, size)
        wmat = rng.standard_normal((size, size))
        img, rec = render(ss, vp)
        dg, tg = render_backward(rec, wmat)
        worst, flips = 0.0, 0
        for arr, grad in ((ss.displacement[0], dg[0]), (ss.thickness[0], tg[0])):
            flat, gflat = arr.reshape(-1), grad.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = np.float32(orig + h)
                img_p, rec_p = render(ss, vp)
                flat[i] = np.float32(orig - h)
                img_m, rec_m = render(ss, vp)
                flat[i] = orig
                live_p = (rec_p.alpha > 0) & (rec_p.alpha < 1)
                live_m = (rec_m.alpha > 0) & (rec_m.alpha < 1)
                if not np.array_equal(live_p, live_m) or not np.array_equal(
                        rec_p.best_seg[live_p], rec_m.best_seg[live_m]):
                    flips += 1
                    continue
                num = (float((img_p.astype(np.float64) * wmat).sum())
                       - float((img_m.astype(np.float64) * wmat).sum())) / (2 * h)
                worst = max(worst, abs(float(gflat[i]) - num) / max(1.0, abs(num)))
        if flips <= 3:
            return worst
    raise nd.NumericalError("no flip-free rasterizer configuration found")


def cmd_gradcheck(args):
    rng = np.random.default_rng([args.seed if args.seed is not None else 0, 9])
    families = [("tensor", _gc_tensor), ("norm", _gc_norm),
                ("conv2d", _gc_conv2d),
                ("conv2d_transpose", _gc_conv2d_transpose),
                ("conv1d", _gc_conv1d), ("rasterizer", _gc_rasterizer)]
    failed = False
    print("family,max_rel_err,status")
    for name, fn in families:
        worst = fn(rng)
        ok = worst < GRADCHECK_THRESHOLD
        failed = failed or not ok
        print(f"{name},{worst:.3e},{'ok' if ok else 'FAIL'}")
    return EXIT_NUMERIC if failed else EXIT_OK


# ------------------------------------------------------------------- parser

def build_parser():
    parser = _Parser(prog="strokestyle",
                     description="Single-example stroke stylization: learn "
                                 "per-stroke thickness, displacement and "
                                 "texture from one drawing.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def common(p, out_dir=False, seed=False, iters=False, size=False):
        p.add_argument("--config", help="key=value config file")
        if out_dir:
            p.add_argument("--out-dir", default=".",
                           help="output directory (default: .)")
        if seed:
            p.add_argument("--seed", type=int, help="master RNG seed")
        if iters:
            p.add_argument("--iters", type=int,
                           help="override iteration count")
        if size:
            p.add_argument("--size", type=int,
                           help="use a single crop scale of this size")

    p = sub.add_parser("prepare-mask",
                       help="extract a soft ink mask from a drawing")
    common(p)
    p.add_argument("--drawing", required=True, help="input PGM/PPM drawing")
    p.add_argument("--out", required=True, help="output PGM mask")
    p.set_defaults(func=cmd_prepare_mask)

    p = sub.add_parser("synth-style",
                       help="apply a procedural style rule to curves")
    common(p, out_dir=True)
    p.add_argument("--curves", required=True, help="curve JSON file")
    p.add_argument("--features", required=True, help="feature stack file")
    p.set_defaults(func=cmd_synth_style)

    p = sub.add_parser("train-geometry",
                       help="fit the thickness/displacement networks")
    common(p, out_dir=True, seed=True, iters=True, size=True)
    p.add_argument("--curves", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--mask", required=True, help="soft ink mask (PGM)")
    p.set_defaults(func=cmd_train_geometry)

    p = sub.add_parser("train-texture",
                       help="fit the texture network against the drawing")
    common(p, out_dir=True, seed=True, iters=True, size=True)
    p.add_argument("--curves", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--drawing", required=True, help="RGB drawing (PPM)")
    p.add_argument("--mask", required=True, help="soft ink mask (PGM)")
    p.add_argument("--checkpoint", required=True,
                   help="geometry checkpoint to start from")
    p.set_defaults(func=cmd_train_texture)

    p = sub.add_parser("infer", help="run the full pipeline on curves")
    common(p, out_dir=True, seed=True)
    p.add_argument("--curves", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("export-svg",
                       help="predict strokes and write an editable SVG")
    common(p, seed=True)
    p.add_argument("--curves", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output SVG path")
    p.set_defaults(func=cmd_export_svg)

    p = sub.add_parser("gradcheck",
                       help="compare analytic and numeric gradients")
    common(p, seed=True)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("eval", help="compare two images (CSV metrics)")
    common(p)
    p.add_argument("image_a", help="image under test")
    p.add_argument("image_b", help="reference image (defines ink pixels)")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # argparse --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except nd.NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
