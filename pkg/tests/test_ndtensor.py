"""Tensor op tests against direct-loop oracles and finite differences."""
import numpy as np
import pytest

from strokestyle import ndtensor as nd


# ---------------------------------------------------------------- oracles

def conv2d_direct(x, w, b, stride):
    """Direct convolution, float64 loops. Zero padding (k-1)//2."""
    co, ci, k, _ = w.shape
    p = (k - 1) // 2
    h, wd = x.shape[1:]
    xp = np.zeros((ci, h + 2 * p, wd + 2 * p), np.float64)
    xp[:, p:p + h, p:p + wd] = x
    ho = (h + 2 * p - k) // stride + 1
    wo = (wd + 2 * p - k) // stride + 1
    out = np.zeros((co, ho, wo), np.float64)
    for o in range(co):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for c in range(ci):
                    for di in range(k):
                        for dj in range(k):
                            acc += w[o, c, di, dj] * xp[c, stride * i + di, stride * j + dj]
                out[o, i, j] = acc + b[o]
    return out


def conv1d_direct(x, w, b):
    co, ci, k = w.shape
    m = x.shape[1]
    p = (k - 1) // 2
    xp = np.zeros((ci, m + 2 * p), np.float64)
    xp[:, p:p + m] = x
    out = np.zeros((co, m), np.float64)
    for o in range(co):
        for j in range(m):
            acc = 0.0
            for c in range(ci):
                for dk in range(k):
                    acc += w[o, c, dk] * xp[c, j + dk]
            out[o, j] = acc + b[o]
    return out


def conv2d_transpose_direct(x, w, b):
    """Scatter form of the stride-2, pad-1 doubling transposed conv."""
    ci, co, k, _ = w.shape
    h, wd = x.shape[1:]
    p = (k - 1) // 2
    out = np.zeros((co, 2 * h, 2 * wd), np.float64)
    for c in range(ci):
        for o in range(co):
            for i in range(h):
                for j in range(wd):
                    for di in range(k):
                        for dj in range(k):
                            oi = 2 * i + di - p
                            oj = 2 * j + dj - p
                            if 0 <= oi < 2 * h and 0 <= oj < 2 * wd:
                                out[o, oi, oj] += w[c, o, di, dj] * x[c, i, j]
    return out + b[:, None, None]


# ---------------------------------------------------------------- conv ops

def test_conv2d_matches_direct_oracle():
    rng = np.random.default_rng(0)
    shapes = []
    for _ in range(20):
        k = int(rng.choice([1, 3, 4, 7]))
        stride = int(rng.choice([1, 2]))
        ci = int(rng.integers(1, 5))
        co = int(rng.integers(1, 5))
        h = int(rng.integers(max(k, 4), 9))
        wd = int(rng.integers(max(k, 4), 9))
        shapes.append((k, stride, ci, co, h, wd))
    for k, stride, ci, co, h, wd in shapes:
        x = rng.standard_normal((ci, h, wd)).astype(np.float32)
        w = rng.standard_normal((co, ci, k, k)).astype(np.float32)
        b = rng.standard_normal(co).astype(np.float32)
        out = nd.conv2d(None, nd.Tensor(x), nd.Tensor(w), nd.Tensor(b), stride=stride)
        ref = conv2d_direct(x, w, b, stride)
        assert out.data.shape == ref.shape
        assert np.max(np.abs(out.data - ref)) < 1e-5


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 6, 5)).astype(np.float32)
    w = np.zeros((3, 3, 1, 1), np.float32)
    for c in range(3):
        w[c, c, 0, 0] = 1.0
    b = np.zeros(3, np.float32)
    out = nd.conv2d(None, nd.Tensor(x), nd.Tensor(w), nd.Tensor(b))
    assert np.array_equal(out.data, x)


def test_conv2d_shape_arithmetic():
    # stride 1 preserves spatial dims for odd kernels; stride 2 halves (ceil)
    assert nd.conv2d_out_hw((768, 768), 7, 1) == (768, 768)
    assert nd.conv2d_out_hw((768, 768), 3, 2) == (384, 384)
    assert nd.conv2d_out_hw((65, 33), 3, 2) == (33, 17)
    # 4x4 kernels with padding 1: the PatchGAN ladder
    assert nd.conv2d_out_hw((256, 256), 4, 2) == (128, 128)
    assert nd.conv2d_out_hw((32, 32), 4, 1) == (31, 31)


def test_conv2d_rejects_bad_shapes():
    x = nd.Tensor(np.zeros((2, 8, 8), np.float32))
    with pytest.raises(ValueError):
        nd.conv2d(None, x, nd.Tensor(np.zeros((3, 2, 5, 5), np.float32)),
                  nd.Tensor(np.zeros(3, np.float32)))
    with pytest.raises(ValueError):
        nd.conv2d(None, x, nd.Tensor(np.zeros((3, 2, 3, 1), np.float32)),
                  nd.Tensor(np.zeros(3, np.float32)))
    with pytest.raises(ValueError):  # channel mismatch
        nd.conv2d(None, x, nd.Tensor(np.zeros((3, 4, 3, 3), np.float32)),
                  nd.Tensor(np.zeros(3, np.float32)))


def test_conv1d_matches_direct_oracle():
    rng = np.random.default_rng(2)
    for _ in range(10):
        ci = int(rng.integers(1, 6))
        co = int(rng.integers(1, 6))
        m = int(rng.integers(3, 12))
        x = rng.standard_normal((ci, m)).astype(np.float32)
        w = rng.standard_normal((co, ci, 3)).astype(np.float32)
        b = rng.standard_normal(co).astype(np.float32)
        out = nd.conv1d(None, nd.Tensor(x), nd.Tensor(w), nd.Tensor(b))
        ref = conv1d_direct(x, w, b)
        assert np.max(np.abs(out.data - ref)) < 1e-5


def test_conv1d_constant_input_constant_interior():
    # constant columns stay constant except where zero padding leaks in
    rng = np.random.default_rng(3)
    x = np.ones((4, 9), np.float32) * 0.7
    w = rng.standard_normal((5, 4, 3)).astype(np.float32)
    b = rng.standard_normal(5).astype(np.float32)
    out = nd.conv1d(None, nd.Tensor(x), nd.Tensor(w), nd.Tensor(b)).data
    interior = out[:, 1:-1]
    assert np.max(np.abs(interior - interior[:, :1])) < 1e-6


def test_conv2d_transpose_matches_direct_oracle():
    rng = np.random.default_rng(4)
    for _ in range(8):
        ci = int(rng.integers(1, 5))
        co = int(rng.integers(1, 5))
        h = int(rng.integers(2, 7))
        wd = int(rng.integers(2, 7))
        x = rng.standard_normal((ci, h, wd)).astype(np.float32)
        w = rng.standard_normal((ci, co, 3, 3)).astype(np.float32)
        b = rng.standard_normal(co).astype(np.float32)
        out = nd.conv2d_transpose(None, nd.Tensor(x), nd.Tensor(w), nd.Tensor(b))
        ref = conv2d_transpose_direct(x, w, b)
        assert out.data.shape == (co, 2 * h, 2 * wd)
        assert np.max(np.abs(out.data - ref)) < 1e-5


def test_conv2d_transpose_is_adjoint_of_stride2_conv():
    # <convT(x), y> == <x, conv(y)> with shared weights, zero bias
    rng = np.random.default_rng(5)
    ci, co, h, wd = 3, 4, 5, 6
    x = rng.standard_normal((ci, h, wd)).astype(np.float32)
    y = rng.standard_normal((co, 2 * h, 2 * wd)).astype(np.float32)
    w = rng.standard_normal((ci, co, 3, 3)).astype(np.float32)
    zb_co = np.zeros(co, np.float32)
    zb_ci = np.zeros(ci, np.float32)
    up = nd.conv2d_transpose(None, nd.Tensor(x), nd.Tensor(w), nd.Tensor(zb_co)).data
    down = nd.conv2d(None, nd.Tensor(y), nd.Tensor(w), nd.Tensor(zb_ci), stride=2).data
    lhs = float(np.sum(up.astype(np.float64) * y))
    rhs = float(np.sum(x.astype(np.float64) * down))
    assert abs(lhs - rhs) < 1e-3 * max(1.0, abs(rhs))


# ------------------------------------------------------- norm / activations

def test_instance_norm_statistics():
    rng = np.random.default_rng(6)
    x = (rng.standard_normal((5, 12, 11)) * 3 + 2).astype(np.float32)
    gamma = np.ones(5, np.float32)
    beta = np.zeros(5, np.float32)
    out = nd.instance_norm(None, nd.Tensor(x), nd.Tensor(gamma), nd.Tensor(beta)).data
    for c in range(5):
        assert abs(out[c].mean()) < 1e-5
        assert abs(out[c].var() - 1.0) < 1e-3


def test_instance_norm_affine_params_apply():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 6, 6)).astype(np.float32)
    gamma = np.array([2.0, 0.5], np.float32)
    beta = np.array([-1.0, 3.0], np.float32)
    base = nd.instance_norm(None, nd.Tensor(x), nd.Tensor(np.ones(2, np.float32)),
                            nd.Tensor(np.zeros(2, np.float32))).data
    out = nd.instance_norm(None, nd.Tensor(x), nd.Tensor(gamma), nd.Tensor(beta)).data
    ref = gamma[:, None, None] * base + beta[:, None, None]
    assert np.max(np.abs(out - ref)) < 1e-5


def test_activation_values():
    x = np.array([-2.0, -0.5, 0.0, 0.5, 2.0], np.float32)
    t = nd.Tensor(x)
    assert np.array_equal(nd.relu(None, t).data, np.maximum(x, 0))
    lk = nd.leaky_relu(None, t).data
    assert np.allclose(lk, np.where(x > 0, x, 0.2 * x), atol=1e-7)
    sg = nd.sigmoid(None, t).data
    assert np.allclose(sg, 1.0 / (1.0 + np.exp(-x.astype(np.float64))), atol=1e-6)
    assert np.all(sg > 0) and np.all(sg < 1)


# ---------------------------------------------------------------- autodiff

def _weighted_sum(tape, t, wmat):
    prod = nd.mul(tape, t, nd.Tensor(wmat))
    return nd.affine(tape, nd.mean_all(tape, prod), float(prod.data.size), 0.0)


def test_finite_diff_linear_function():
    # three-parameter linear model, exact analytic gradient = a
    a = np.array([0.3, -0.2, 0.15], np.float32)
    x = nd.Tensor(np.array([0.1, 0.25, -0.3], np.float32), requires_grad=True)

    def build(inputs):
        tape = nd.Tape()
        return tape, _weighted_sum(tape, inputs[0], a)

    worst = nd.finite_diff_check(build, [x])
    assert worst < 1e-4


def test_finite_diff_conv_in_relu_stack():
    rng = np.random.default_rng(9)
    for attempt in range(5):
        r = np.random.default_rng(100 + attempt)
        x = nd.Tensor(r.standard_normal((2, 6, 6)).astype(np.float32), requires_grad=True)
        w = nd.Tensor((r.standard_normal((3, 2, 3, 3)) * 0.5).astype(np.float32), requires_grad=True)
        b = nd.Tensor(r.standard_normal(3).astype(np.float32) * 0.1, requires_grad=True)
        g = nd.Tensor(np.ones(3, np.float32), requires_grad=True)
        be = nd.Tensor(np.zeros(3, np.float32), requires_grad=True)
        wm = r.standard_normal((3, 6, 6)).astype(np.float32)

        def build(inputs):
            xi, wi, bi, gi, bei = inputs
            tape = nd.Tape()
            y = nd.conv2d(tape, xi, wi, bi)
            y = nd.instance_norm(tape, y, gi, bei)
            y = nd.relu(tape, y)
            return tape, _weighted_sum(tape, y, wm)

        # keep pre-activations away from the relu kink
        pre = nd.instance_norm(None, nd.conv2d(None, x, w, b), g, be).data
        if np.min(np.abs(pre)) < 5e-3:
            continue
        worst = nd.finite_diff_check(build, [x, w, b, g, be])
        assert worst < 1e-2
        return
    pytest.fail("could not sample a kink-free configuration")


def test_finite_diff_transposed_conv_and_sigmoid():
    r = np.random.default_rng(11)
    x = nd.Tensor(r.standard_normal((2, 3, 3)).astype(np.float32), requires_grad=True)
    w = nd.Tensor((r.standard_normal((2, 2, 3, 3)) * 0.5).astype(np.float32), requires_grad=True)
    b = nd.Tensor(r.standard_normal(2).astype(np.float32) * 0.1, requires_grad=True)
    wm = r.standard_normal((2, 6, 6)).astype(np.float32)

    def build(inputs):
        xi, wi, bi = inputs
        tape = nd.Tape()
        y = nd.conv2d_transpose(tape, xi, wi, bi)
        y = nd.sigmoid(tape, y)
        return tape, _weighted_sum(tape, y, wm)

    assert nd.finite_diff_check(build, [x, w, b]) < 1e-2


def test_gather_pixels_forward_and_backward():
    rng = np.random.default_rng(12)
    f = rng.standard_normal((4, 5, 6)).astype(np.float32)
    iy = np.array([0, 2, 2, 4], np.int64)
    ix = np.array([1, 3, 3, 5], np.int64)
    ft = nd.Tensor(f, requires_grad=True)
    tape = nd.Tape()
    out = nd.gather_pixels(tape, ft, iy, ix)
    assert out.data.shape == (4, 4)
    for col, (y, x) in enumerate(zip(iy, ix)):
        assert np.array_equal(out.data[:, col], f[:, y, x])
    loss = nd.mean_all(tape, out)
    tape.backward(loss)
    ref = np.zeros_like(f)
    for y, x in zip(iy, ix):
        ref[:, y, x] += 1.0 / out.data.size
    assert np.allclose(ft.grad, ref, atol=1e-7)


def test_tape_accumulates_gradients_from_multiple_consumers():
    x = nd.Tensor(np.array([1.0, 2.0], np.float32), requires_grad=True)
    tape = nd.Tape()
    y = nd.add(tape, x, x)
    loss = nd.mean_all(tape, nd.square(tape, y))
    tape.backward(loss)
    # d/dx mean((2x)^2) = 4x
    assert np.allclose(x.grad, 4 * x.data / 1, atol=1e-5) or np.allclose(x.grad, 4 * x.data, atol=1e-5)


def test_unused_branch_contributes_no_gradient():
    x = nd.Tensor(np.ones(3, np.float32), requires_grad=True)
    z = nd.Tensor(np.ones(3, np.float32), requires_grad=True)
    tape = nd.Tape()
    used = nd.square(tape, x)
    nd.square(tape, z)  # recorded but never feeds the loss
    tape.backward(nd.mean_all(tape, used))
    assert x.grad is not None
    assert z.grad is None


def test_leaf_without_requires_grad_gets_no_grad():
    x = nd.Tensor(np.ones((1, 4, 4), np.float32))
    w = nd.Tensor(np.ones((1, 1, 3, 3), np.float32) * 0.1, requires_grad=True)
    b = nd.Tensor(np.zeros(1, np.float32), requires_grad=True)
    tape = nd.Tape()
    y = nd.conv2d(tape, x, w, b)
    tape.backward(nd.mean_all(tape, y))
    assert x.grad is None
    assert w.grad is not None and b.grad is not None


def test_nan_checks_flag_raises():
    x = nd.Tensor(np.array([np.inf, 1.0], np.float32))
    with nd.nan_checks(True):
        with pytest.raises(nd.NumericalError):
            nd.square(None, x)
    nd.square(None, x)  # silent when disabled


# ------------------------------------------------------------------- adam

def test_adam_first_step_magnitude():
    p = nd.Tensor(np.array([0.5, -0.25, 2.0], np.float32), requires_grad=True)
    p.grad = np.array([1.0, -3.0, 0.5], np.float32)
    st = nd.make_adam_state(p, lr=2e-4)
    before = p.data.copy()
    nd.adam_step(p, st)
    delta = p.data.astype(np.float64) - before
    # first step moves each coordinate by ~lr against the gradient sign
    # (tolerance covers float32 ulp of the stored parameter values)
    assert np.all(np.sign(delta) == -np.sign(p.grad))
    assert np.max(np.abs(np.abs(delta) - 2e-4)) < 1e-6
    assert st.step_count == 1


def test_adam_three_step_trace_matches_manual_recurrence():
    # independent float32 recurrence, update form p -= (lr*mhat)/(sqrt(vhat)+eps)
    lr, b1, b2, eps = 2e-4, 0.5, 0.999, 1e-8
    grads = [np.array([0.7, -1.3], np.float32),
             np.array([-0.2, 0.4], np.float32),
             np.array([1.1, 0.9], np.float32)]
    p = nd.Tensor(np.array([0.1, -0.2], np.float32), requires_grad=True)
    st = nd.make_adam_state(p, lr=lr, beta1=b1, beta2=b2, eps=eps)

    ref = np.array([0.1, -0.2], np.float32)
    m = np.zeros(2, np.float32)
    v = np.zeros(2, np.float32)
    for t, g in enumerate(grads, start=1):
        m = np.float32(b1) * m + np.float32(1 - b1) * g
        v = np.float32(b2) * v + np.float32(1 - b2) * (g * g)
        mhat = m / np.float32(1 - b1 ** t)
        vhat = v / np.float32(1 - b2 ** t)
        ref = ref - (np.float32(lr) * mhat) / (np.sqrt(vhat) + np.float32(eps))

    for g in grads:
        p.grad = g.copy()
        nd.adam_step(p, st)
    assert np.max(np.abs(p.data - ref)) < 1e-10


def test_adam_deterministic():
    outs = []
    for _ in range(2):
        p = nd.Tensor(np.array([1.0, 2.0, 3.0], np.float32), requires_grad=True)
        st = nd.make_adam_state(p)
        for k in range(5):
            p.grad = np.array([0.1 * (k + 1), -0.2, 0.05], np.float32)
            nd.adam_step(p, st)
        outs.append((p.data.copy(), st.m.copy(), st.v.copy()))
    assert np.array_equal(outs[0][0], outs[1][0])
    assert np.array_equal(outs[0][1], outs[1][1])
    assert np.array_equal(outs[0][2], outs[1][2])


def test_adam_leaves_grad_buffer_untouched():
    p = nd.Tensor(np.array([1.0], np.float32), requires_grad=True)
    p.grad = np.array([0.5], np.float32)
    st = nd.make_adam_state(p)
    nd.adam_step(p, st)
    assert np.array_equal(p.grad, np.array([0.5], np.float32))


# -------------------------------------------------------------- small ops

def test_structural_ops_roundtrip():
    rng = np.random.default_rng(13)
    a = rng.standard_normal((3, 5)).astype(np.float32)
    bm = rng.standard_normal((2, 5)).astype(np.float32)
    ta, tb = nd.Tensor(a, requires_grad=True), nd.Tensor(bm, requires_grad=True)
    tape = nd.Tape()
    cat = nd.concat_rows(tape, [ta, tb])
    assert cat.data.shape == (5, 5)
    part = nd.slice_rows(tape, cat, 3, 5)
    assert np.array_equal(part.data, bm)
    tr = nd.transpose2d(tape, part)
    assert tr.data.shape == (5, 2)
    tape.backward(nd.mean_all(tape, tr))
    assert ta.grad is not None and np.all(ta.grad == 0)
    assert tb.grad is not None and np.allclose(tb.grad, 1.0 / tr.data.size)


def test_l1_mean_value_and_gradient():
    a = nd.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]], np.float32), requires_grad=True)
    b = np.array([[1.5, 2.0], [2.0, 5.0]], np.float32)
    tape = nd.Tape()
    loss = nd.l1_mean(tape, a, nd.Tensor(b))
    assert abs(loss.item() - np.mean(np.abs(a.data - b))) < 1e-7
    tape.backward(loss)
    ref = np.sign(a.data - b) / a.data.size
    assert np.allclose(a.grad, ref, atol=1e-7)
