"""float32 tensors with reverse-mode autodiff on a recorded tape.

The op set is exactly what the stylization networks need: 2D/1D convolution
(strides 1 and 2, plus a stride-2 transposed conv that doubles H and W),
instance norm, relu / leaky relu / sigmoid, a handful of structural ops, and
Adam with bias correction. Ops take the tape as their first argument; passing
``tape=None`` runs forward-only. One training iteration builds one tape and
calls ``backward`` once; reverse tape order is a valid topological order.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

NAN_CHECKS = False

SUPPORTED_KERNELS = (1, 3, 4, 7)


class NumericalError(RuntimeError):
    """Non-finite value produced where finite math was required."""


@contextlib.contextmanager
def nan_checks(enabled=True):
    global NAN_CHECKS
    prev = NAN_CHECKS
    NAN_CHECKS = enabled
    try:
        yield
    finally:
        NAN_CHECKS = prev


class Tensor:
    """A float32 array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "_produced")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._produced = False  # set on op outputs

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def _add_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float32, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"


class Tape:
    """Records (output, backward closure) pairs in execution order."""

    def __init__(self):
        self._nodes = []

    def __len__(self):
        return len(self._nodes)

    def record(self, out, backward_fn):
        self._nodes.append((out, backward_fn))

    def backward(self, loss, seed=1.0):
        if loss.data.shape != ():
            raise ValueError("backward expects a scalar loss tensor")
        if not np.isfinite(loss.data):
            raise NumericalError("loss is not finite")
        loss._add_grad(np.float32(seed))
        for out, fn in reversed(self._nodes):
            if out.grad is not None:
                fn(out.grad)


def _emit(tape, data, backward_fn, op):
    out = Tensor(data)
    out._produced = True
    if NAN_CHECKS and not np.all(np.isfinite(out.data)):
        raise NumericalError(f"non-finite values in output of {op}")
    if tape is not None and backward_fn is not None:
        tape.record(out, backward_fn)
    return out


def _needs_grad(t):
    return t.requires_grad or t._produced


# ----------------------------------------------------------------- conv 2d

def conv2d_out_hw(hw, k, stride):
    """Output spatial dims for zero padding (k-1)//2."""
    p = (k - 1) // 2
    return tuple((d + 2 * p - k) // stride + 1 for d in hw)


def _check_conv2d(x, w, b, stride):
    if x.data.ndim != 3:
        raise ValueError(f"conv2d input must be (C,H,W), got {x.data.shape}")
    if w.data.ndim != 4:
        raise ValueError(f"conv2d weight must be (Co,Ci,k,k), got {w.data.shape}")
    co, ci, kh, kw = w.data.shape
    if kh != kw:
        raise ValueError(f"conv2d kernel must be square, got {kh}x{kw}")
    if kh not in SUPPORTED_KERNELS:
        raise ValueError(f"conv2d kernel size {kh} not in {SUPPORTED_KERNELS}")
    if ci != x.data.shape[0]:
        raise ValueError(f"conv2d channel mismatch: input {x.data.shape[0]}, weight {ci}")
    if b.data.shape != (co,):
        raise ValueError(f"conv2d bias must be ({co},), got {b.data.shape}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d stride must be 1 or 2, got {stride}")


def _im2col(xp, k, stride, ho, wo):
    """Contiguous (Ci*k*k, Ho*Wo) patch matrix from a padded input.

    One copy of the receptive fields up front keeps every matmul on the
    BLAS fast path and replaces the per-tap output accumulation (k*k full
    passes over the output) with a single GEMM. Transient memory is k*k
    times the input, which caps practical spatial sizes around a few
    hundred pixels per side for the 7x7 stems.
    """
    ci = xp.shape[0]
    cols = np.empty((ci, k, k, ho, wo), np.float32)
    for di in range(k):
        for dj in range(k):
            cols[:, di, dj] = xp[:, di:di + stride * (ho - 1) + 1:stride,
                                 dj:dj + stride * (wo - 1) + 1:stride]
    return cols.reshape(ci * k * k, ho * wo)


def _conv2d_fwd(xp, wf, k, stride, ho, wo):
    # wf is the weight flattened to (Co, Ci*k*k), matching _im2col's layout
    return (wf @ _im2col(xp, k, stride, ho, wo)).reshape(-1, ho, wo)


def _conv2d_grad_w(xp, g2, k, stride, ho, wo):
    cols = _im2col(xp, k, stride, ho, wo)
    return (g2 @ cols.T).reshape(g2.shape[0], xp.shape[0], k, k)


def _conv2d_grad_x(xp_shape, wf, g2, k, stride, ho, wo, pad):
    ci = xp_shape[0]
    g5 = (wf.T @ g2).reshape(ci, k, k, ho, wo)
    gxp = np.zeros(xp_shape, np.float32)
    for di in range(k):
        for dj in range(k):
            gxp[:, di:di + stride * (ho - 1) + 1:stride,
                dj:dj + stride * (wo - 1) + 1:stride] += g5[:, di, dj]
    if pad:
        return gxp[:, pad:xp_shape[1] - pad, pad:xp_shape[2] - pad]
    return gxp


def conv2d(tape, x, w, b, stride=1):
    """Zero-padded convolution; stride 1 preserves H,W for odd kernels."""
    _check_conv2d(x, w, b, stride)
    k = w.data.shape[2]
    p = (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p)))
    ho, wo = conv2d_out_hw(x.data.shape[1:], k, stride)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d output would be empty for input {x.data.shape}")
    wf = w.data.reshape(w.data.shape[0], -1)
    data = _conv2d_fwd(xp, wf, k, stride, ho, wo) + b.data[:, None, None]

    need_x = _needs_grad(x)
    need_w = _needs_grad(w)
    need_b = _needs_grad(b)
    # snapshot: the optimizer updates weights in place, but backward must see
    # the forward-time values
    wsnap = wf.copy() if need_x else None

    def bwd(g):
        g2 = g.reshape(g.shape[0], -1)
        if need_b:
            b._add_grad(g2.sum(axis=1))
        if need_w:
            w._add_grad(_conv2d_grad_w(xp, g2, k, stride, ho, wo))
        if need_x:
            x._add_grad(_conv2d_grad_x(xp.shape, wsnap, g2, k, stride, ho, wo, p))

    return _emit(tape, data, bwd if (need_x or need_w or need_b) else None, "conv2d")


def conv2d_transpose(tape, x, w, b):
    """Stride-2 transposed conv (kernel 3, pad 1, output pad 1): (C,H,W) -> (Co,2H,2W).

    Defined as the adjoint of the stride-2 conv with the same weight, so the
    machinery above is reused verbatim. Weight layout (Ci, Co, k, k).
    """
    if x.data.ndim != 3:
        raise ValueError(f"conv2d_transpose input must be (C,H,W), got {x.data.shape}")
    if w.data.ndim != 4 or w.data.shape[2] != 3 or w.data.shape[3] != 3:
        raise ValueError(f"conv2d_transpose weight must be (Ci,Co,3,3), got {w.data.shape}")
    ci, co, k, _ = w.data.shape
    if ci != x.data.shape[0]:
        raise ValueError(f"conv2d_transpose channel mismatch: input {x.data.shape[0]}, weight {ci}")
    if b.data.shape != (co,):
        raise ValueError(f"conv2d_transpose bias must be ({co},), got {b.data.shape}")
    h, wd = x.data.shape[1:]
    p = 1
    g2 = x.data.reshape(ci, -1)
    ypad_shape = (co, 2 * h + 2 * p, 2 * wd + 2 * p)
    # the matching forward conv maps (Co,2H,2W) -> (Ci,H,W), so its flat
    # weight is w reshaped with Ci as the output axis
    wf = w.data.reshape(ci, -1)
    # scatter x through the adjoint of a (k=3, s=2, p=1) conv, then unpad
    ypad = _conv2d_grad_x(ypad_shape, wf, g2, k, 2, h, wd, 0)
    data = ypad[:, p:p + 2 * h, p:p + 2 * wd] + b.data[:, None, None]

    need_x = _needs_grad(x)
    need_w = _needs_grad(w)
    need_b = _needs_grad(b)
    wsnap = wf.copy() if need_x else None

    def bwd(g):
        gp = np.pad(g, ((0, 0), (p, p), (p, p)))
        if need_b:
            b._add_grad(g.reshape(co, -1).sum(axis=1))
        if need_w:
            w._add_grad(_conv2d_grad_w(gp, g2, k, 2, h, wd))
        if need_x:
            x._add_grad(_conv2d_fwd(gp, wsnap, k, 2, h, wd))

    return _emit(tape, data, bwd if (need_x or need_w or need_b) else None, "conv2d_transpose")


# ----------------------------------------------------------------- conv 1d

def conv1d(tape, x, w, b):
    """Kernel-3, stride-1, zero-padded conv along a point sequence (C, M)."""
    if x.data.ndim != 2:
        raise ValueError(f"conv1d input must be (C,M), got {x.data.shape}")
    if w.data.ndim != 3 or w.data.shape[2] != 3:
        raise ValueError(f"conv1d weight must be (Co,Ci,3), got {w.data.shape}")
    co, ci, k = w.data.shape
    if ci != x.data.shape[0]:
        raise ValueError(f"conv1d channel mismatch: input {x.data.shape[0]}, weight {ci}")
    if b.data.shape != (co,):
        raise ValueError(f"conv1d bias must be ({co},), got {b.data.shape}")
    m = x.data.shape[1]
    xp = np.pad(x.data, ((0, 0), (1, 1)))
    out = np.zeros((co, m), np.float32)
    for dk in range(k):
        out += w.data[:, :, dk] @ xp[:, dk:dk + m]
    data = out + b.data[:, None]

    need_x = _needs_grad(x)
    need_w = _needs_grad(w)
    need_b = _needs_grad(b)

    def bwd(g):
        if need_b:
            b._add_grad(g.sum(axis=1))
        if need_w:
            gw = np.empty((co, ci, k), np.float32)
            for dk in range(k):
                gw[:, :, dk] = g @ xp[:, dk:dk + m].T
            w._add_grad(gw)
        if need_x:
            gxp = np.zeros_like(xp)
            for dk in range(k):
                gxp[:, dk:dk + m] += w.data[:, :, dk].T @ g
            x._add_grad(gxp[:, 1:1 + m])

    return _emit(tape, data, bwd if (need_x or need_w or need_b) else None, "conv1d")


# ------------------------------------------------------------ instance norm

def instance_norm(tape, x, gamma, beta, eps=1e-5):
    """Per-channel normalization over all spatial positions of one instance."""
    if x.data.ndim < 2:
        raise ValueError(f"instance_norm input must be (C, spatial...), got {x.data.shape}")
    c = x.data.shape[0]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError("instance_norm gamma/beta must be (C,)")
    sp_axes = tuple(range(1, x.data.ndim))
    bshape = (c,) + (1,) * (x.data.ndim - 1)
    mean = x.data.mean(axis=sp_axes, keepdims=True)
    xm = x.data - mean
    var = np.mean(xm * xm, axis=sp_axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.float32(eps))
    xhat = xm * inv
    data = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    need_x = _needs_grad(x)
    need_g = _needs_grad(gamma)
    need_b = _needs_grad(beta)

    def bwd(g):
        if need_b:
            beta._add_grad(g.sum(axis=sp_axes))
        if need_g:
            gamma._add_grad((g * xhat).sum(axis=sp_axes))
        if need_x:
            dxhat = g * gamma.data.reshape(bshape)
            m1 = dxhat.mean(axis=sp_axes, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=sp_axes, keepdims=True)
            x._add_grad(inv * (dxhat - m1 - xhat * m2))

    return _emit(tape, data, bwd if (need_x or need_g or need_b) else None, "instance_norm")


# ------------------------------------------------------------- activations

def relu(tape, x):
    # Subgradient 1 at exactly 0: layers that start at an all-zero pre-activation
    # (zero-initialized head behind a normalization) must still receive gradient.
    data = np.maximum(x.data, 0)
    need = _needs_grad(x)

    def bwd(g):
        x._add_grad(g * (x.data >= 0))

    return _emit(tape, data, bwd if need else None, "relu")


def leaky_relu(tape, x, slope=0.2):
    s = np.float32(slope)
    data = np.where(x.data > 0, x.data, s * x.data)
    need = _needs_grad(x)

    def bwd(g):
        x._add_grad(g * np.where(x.data > 0, np.float32(1.0), s))

    return _emit(tape, data, bwd if need else None, "leaky_relu")


def sigmoid(tape, x):
    xd = x.data
    data = np.empty_like(xd)
    pos = xd >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    data[~pos] = ex / (1.0 + ex)
    need = _needs_grad(x)

    def bwd(g):
        x._add_grad(g * data * (1.0 - data))

    return _emit(tape, data, bwd if need else None, "sigmoid")


# ---------------------------------------------------------- structural ops

def add(tape, a, b):
    if a.data.shape != b.data.shape:
        raise ValueError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    na, nb = _needs_grad(a), _needs_grad(b)

    def bwd(g):
        if na:
            a._add_grad(g)
        if nb:
            b._add_grad(g)

    return _emit(tape, a.data + b.data, bwd if (na or nb) else None, "add")


def mul(tape, a, b):
    if a.data.shape != b.data.shape:
        raise ValueError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
    na, nb = _needs_grad(a), _needs_grad(b)

    def bwd(g):
        if na:
            a._add_grad(g * b.data)
        if nb:
            b._add_grad(g * a.data)

    return _emit(tape, a.data * b.data, bwd if (na or nb) else None, "mul")


def affine(tape, x, scale, shift):
    """scale * x + shift with python-float scale/shift."""
    s = np.float32(scale)
    data = s * x.data + np.float32(shift)
    need = _needs_grad(x)

    def bwd(g):
        x._add_grad(g * s)

    return _emit(tape, data, bwd if need else None, "affine")


def square(tape, x):
    need = _needs_grad(x)

    def bwd(g):
        x._add_grad(g * (2.0 * x.data))

    return _emit(tape, x.data * x.data, bwd if need else None, "square")


def concat_rows(tape, parts):
    """Concatenate along axis 0 (channel axis for (C,...) tensors)."""
    if not parts:
        raise ValueError("concat_rows needs at least one tensor")
    data = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.data.shape[0] for p in parts]
    needs = [_needs_grad(p) for p in parts]

    def bwd(g):
        off = 0
        for p, n, need in zip(parts, sizes, needs):
            if need:
                p._add_grad(g[off:off + n])
            off += n

    return _emit(tape, data, bwd if any(needs) else None, "concat_rows")


def slice_rows(tape, x, start, stop):
    data = x.data[start:stop].copy()
    need = _needs_grad(x)

    def bwd(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        x._add_grad(full)

    return _emit(tape, data, bwd if need else None, "slice_rows")


def transpose2d(tape, x):
    if x.data.ndim != 2:
        raise ValueError("transpose2d expects a 2D tensor")
    need = _needs_grad(x)

    def bwd(g):
        x._add_grad(g.T)

    return _emit(tape, np.ascontiguousarray(x.data.T), bwd if need else None, "transpose2d")


def reshape(tape, x, shape):
    data = x.data.reshape(shape).copy()
    need = _needs_grad(x)

    def bwd(g):
        x._add_grad(g.reshape(x.data.shape))

    return _emit(tape, data, bwd if need else None, "reshape")


def mean_all(tape, x):
    data = np.float32(x.data.mean())
    n = x.data.size
    need = _needs_grad(x)

    def bwd(g):
        x._add_grad(np.full_like(x.data, g / n))

    return _emit(tape, data, bwd if need else None, "mean_all")


def l1_mean(tape, a, b):
    """Mean absolute difference; subgradient 0 at exact ties."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"l1_mean shape mismatch: {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    data = np.float32(np.mean(np.abs(diff)))
    n = diff.size
    na, nb = _needs_grad(a), _needs_grad(b)

    def bwd(g):
        s = np.sign(diff) * (g / n)
        if na:
            a._add_grad(s)
        if nb:
            b._add_grad(-s)

    return _emit(tape, data, bwd if (na or nb) else None, "l1_mean")


def gather_pixels(tape, f, iy, ix):
    """Sample f (C,H,W) at integer pixel indices -> (C,M); scatter-add backward."""
    if f.data.ndim != 3:
        raise ValueError("gather_pixels expects (C,H,W)")
    iy = np.asarray(iy, np.int64)
    ix = np.asarray(ix, np.int64)
    if iy.shape != ix.shape or iy.ndim != 1:
        raise ValueError("gather_pixels indices must be matching 1D arrays")
    c, h, w = f.data.shape
    if iy.size and (iy.min() < 0 or iy.max() >= h or ix.min() < 0 or ix.max() >= w):
        raise ValueError("gather_pixels indices out of range")
    data = f.data[:, iy, ix]
    need = _needs_grad(f)

    def bwd(g):
        gf = np.zeros_like(f.data)
        flat = gf.reshape(c, h * w).T  # view; writes land in gf
        np.add.at(flat, iy * w + ix, g.T)
        f._add_grad(gf)

    return _emit(tape, data, bwd if need else None, "gather_pixels")


# ------------------------------------------------------------------- adam

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int
    lr: float
    beta1: float
    beta2: float
    eps: float


def make_adam_state(param, lr=2e-4, beta1=0.5, beta2=0.999, eps=1e-8):
    return AdamState(m=np.zeros_like(param.data), v=np.zeros_like(param.data),
                     step_count=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(param, state):
    """One bias-corrected Adam update in place; grad buffer left untouched.

    Moment buffers are updated without temporaries; the arithmetic and its
    order match the reference recurrence m <- b1*m + (1-b1)*g exactly.
    """
    g = param.grad
    if g is None:
        raise ValueError("adam_step called on a parameter with no gradient")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    m, v = state.m, state.v
    np.multiply(m, np.float32(b1), out=m)
    m += np.float32(1 - b1) * g
    np.multiply(v, np.float32(b2), out=v)
    v += np.float32(1 - b2) * (g * g)
    mhat = m / np.float32(1 - b1 ** t)
    vhat = v / np.float32(1 - b2 ** t)
    np.sqrt(vhat, out=vhat)
    vhat += np.float32(state.eps)
    np.multiply(mhat, np.float32(state.lr), out=mhat)
    mhat /= vhat
    param.data -= mhat
    state.step_count = t


# --------------------------------------------------------------- gradcheck

def finite_diff_check(build, inputs, h=1e-3, probe_limit=None, rng=None):
    """Max relative error between tape gradients and central differences.

    ``build(inputs) -> (tape, loss)`` must rebuild the forward pass from the
    current ``inputs[i].data`` buffers. Relative error uses
    |analytic - numeric| / max(1, |numeric|). Probes every coordinate unless
    ``probe_limit`` caps the per-tensor count (sampled with ``rng``).
    """
    tape, loss = build(inputs)
    if loss.data.shape != ():
        raise ValueError("finite_diff_check needs a scalar loss")
    for inp in inputs:
        inp.zero_grad()
    tape, loss = build(inputs)
    tape.backward(loss)
    grads = []
    for inp in inputs:
        if inp.grad is None:
            grads.append(np.zeros_like(inp.data))
        else:
            grads.append(inp.grad.copy())
        inp.zero_grad()

    worst = 0.0
    for inp, grad in zip(inputs, grads):
        flat = inp.data.reshape(-1)
        gflat = grad.reshape(-1)
        idxs = np.arange(flat.size)
        if probe_limit is not None and flat.size > probe_limit:
            gen = rng if rng is not None else np.random.default_rng(0)
            idxs = gen.choice(flat.size, size=probe_limit, replace=False)
        for i in idxs:
            orig = flat[i]
            hi = np.float32(orig + h)
            lo = np.float32(orig - h)
            flat[i] = hi
            _, lp = build(inputs)
            flat[i] = lo
            _, lm = build(inputs)
            flat[i] = orig
            fp, fm = float(lp.data), float(lm.data)
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericalError("non-finite loss during finite differencing")
            numeric = (fp - fm) / (float(hi) - float(lo))
            rel = abs(float(gflat[i]) - numeric) / max(1.0, abs(numeric))
            worst = max(worst, rel)
    return worst
