import numpy as np
import pytest
from hypothesis import given, strategies as st

from vapaad.gradcheck import finite_diff_check
from vapaad.model import _glorot
from vapaad.layers import (GATES, AttentionParams, BatchNormParams, ConvLSTMParams, ConvLSTMState,
                           attention_weights, batchnorm, conv3d_head, convlstm_sequence, convlstm_step,
                           random_rotation, rotate_sequences, self_attention)
from vapaad.tensor import ShapeError, Tensor, default_dtype


def lstm_params(rng, c_in, f, k, scale=0.5, zero=False):
    def mk(shape):
        return Tensor(np.zeros(shape) if zero else rng.standard_normal(shape) * scale, requires_grad=True)
    return ConvLSTMParams({g: mk((f, c_in, k, k)) for g in GATES},
                          {g: mk((f, f, k, k)) for g in GATES},
                          {g: mk((f,)) for g in GATES})


def attn_params(rng, c, stop=False):
    return AttentionParams(*(Tensor(rng.standard_normal((c, c, 1, 1)), requires_grad=True) for _ in range(3)),
                           stop_qk_gradient=stop)


def np_conv_same(x, w):
    """Direct 'same' cross-correlation on (C, H, W)."""
    c_in, h, wd = x.shape
    f, _, k, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    out = np.zeros((f, h, wd))
    for a in range(k):
        for b in range(k):
            out += np.einsum("fc,chw->fhw", w[:, :, a, b], xp[:, a:a + h, b:b + wd])
    return out


def sig(z):
    return 1 / (1 + np.exp(-z))


# -- ConvLSTM ---------------------------------------------------------------


def test_convlstm_zero_params_zero_state(f64, rng):
    p = lstm_params(rng, 2, 3, 3, zero=True)
    st_ = convlstm_step(Tensor(rng.standard_normal((2, 5, 5))), ConvLSTMState.zeros((3, 5, 5)), p)
    np.testing.assert_array_equal(st_.h.data, 0.0)
    np.testing.assert_array_equal(st_.c.data, 0.0)


def test_convlstm_zero_params_halves_cell(f64, rng):
    p = lstm_params(rng, 2, 3, 3, zero=True)
    c = rng.standard_normal((3, 5, 5))
    st_ = convlstm_step(Tensor(rng.standard_normal((2, 5, 5))),
                        ConvLSTMState(Tensor(np.zeros((3, 5, 5))), Tensor(c)), p)
    np.testing.assert_allclose(st_.c.data, 0.5 * c, rtol=1e-15)


def test_convlstm_shapes_and_bounded_hidden(f64, rng):
    p = lstm_params(rng, 2, 4, 3, scale=3.0)
    st_ = ConvLSTMState(Tensor(rng.uniform(-1, 1, (4, 6, 6))), Tensor(rng.standard_normal((4, 6, 6)) * 5))
    out = convlstm_step(Tensor(rng.standard_normal((2, 6, 6)) * 5), st_, p)
    assert out.h.shape == out.c.shape == (4, 6, 6)
    assert np.all(np.abs(out.h.data) < 1)


def test_convlstm_spatial_mismatch(f64, rng):
    p = lstm_params(rng, 2, 3, 3)
    with pytest.raises(ShapeError):
        convlstm_step(Tensor(np.zeros((2, 5, 5))), ConvLSTMState.zeros((3, 4, 4)), p)


def test_convlstm_step_matches_gate_equations(f64, rng):
    p = lstm_params(rng, 2, 3, 3)
    x = rng.standard_normal((2, 5, 5))
    h = rng.uniform(-1, 1, (3, 5, 5))
    c = rng.standard_normal((3, 5, 5))
    z = {g: np_conv_same(x, p.wx[g].data) + np_conv_same(h, p.wh[g].data) + p.b[g].data[:, None, None]
         for g in GATES}
    c2 = sig(z["f"]) * c + sig(z["i"]) * np.tanh(z["c"])
    h2 = sig(z["o"]) * np.tanh(c2)
    out = convlstm_step(Tensor(x), ConvLSTMState(Tensor(h), Tensor(c)), p)
    np.testing.assert_allclose(out.c.data, c2, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(out.h.data, h2, rtol=1e-12, atol=1e-12)


def test_convlstm_sequence_unrolled(f64, rng):
    p = lstm_params(rng, 1, 2, 3)
    xs = rng.standard_normal((3, 1, 4, 4))
    seq = convlstm_sequence(Tensor(xs), p).data
    st_ = ConvLSTMState.zeros((2, 4, 4))
    for t in range(3):
        st_ = convlstm_step(Tensor(xs[t]), st_, p)
        np.testing.assert_allclose(seq[t], st_.h.data, rtol=1e-13, atol=1e-14)
    one = convlstm_sequence(Tensor(xs[:1]), p).data
    np.testing.assert_allclose(one[0], convlstm_step(Tensor(xs[0]), ConvLSTMState.zeros((2, 4, 4)), p).h.data,
                               atol=1e-15)


def test_convlstm_sequence_zero_params_and_empty(f64, rng):
    p = lstm_params(rng, 1, 2, 3, zero=True)
    assert np.all(convlstm_sequence(Tensor(rng.standard_normal((4, 1, 3, 3))), p).data == 0)
    with pytest.raises(ShapeError):
        convlstm_sequence(Tensor(np.zeros((0, 1, 3, 3))), p)


def test_convlstm_batched_equals_per_sequence(f64, rng):
    p = lstm_params(rng, 1, 2, 3)
    xs = rng.standard_normal((2, 3, 1, 4, 4))
    both = convlstm_sequence(Tensor(xs), p).data
    for b in range(2):
        np.testing.assert_allclose(both[b], convlstm_sequence(Tensor(xs[b]), p).data, atol=1e-14)


# -- attention ----------------------------------------------------------------


def test_attention_uniform_weights_add_mean(f64, rng):
    c = 1
    x = rng.standard_normal((c, 2, 2))
    p = AttentionParams(Tensor(np.zeros((c, c, 1, 1))), Tensor(rng.standard_normal((c, c, 1, 1))),
                        Tensor(np.eye(c).reshape(c, c, 1, 1)))
    out = self_attention(Tensor(x), p).data
    np.testing.assert_allclose(out, x + x.mean(axis=(1, 2), keepdims=True), rtol=1e-14)


def test_attention_zero_input(f64, rng):
    out = self_attention(Tensor(np.zeros((3, 4, 4))), attn_params(rng, 3)).data
    np.testing.assert_array_equal(out, 0.0)


def np_attention(x, p):
    c, h, w = x.shape
    xf = x.reshape(c, -1)
    q = p.W_q.data[:, :, 0, 0] @ xf
    k = p.W_k.data[:, :, 0, 0] @ xf
    v = p.W_v.data[:, :, 0, 0] @ xf
    s = q.T @ k / np.sqrt(c)
    a = np.exp(s - s.max(1, keepdims=True))
    a /= a.sum(1, keepdims=True)
    return x + (v @ a.T).reshape(c, h, w), a, s


@given(st.integers(1, 4), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
def test_attention_shape_sweep_and_rows(c, h, w, seed):
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        x = rng.standard_normal((c, h, w))
        p = attn_params(rng, c)
        out = self_attention(Tensor(x), p).data
        assert out.shape == (c, h, w)
        want, a_ref, s = np_attention(x, p)
        np.testing.assert_allclose(out, want, rtol=1e-10, atol=1e-12)
        a = attention_weights(Tensor(x), p)
        np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-6)
        np.testing.assert_allclose(a, a_ref, atol=1e-12)
        # row shift invariance of the softmax
        shifted = s + rng.standard_normal((s.shape[0], 1)) * 10
        b = np.exp(shifted - shifted.max(1, keepdims=True))
        np.testing.assert_allclose(a, b / b.sum(1, keepdims=True), atol=1e-6)


def test_stop_grad_zeroes_query_key(f64, rng):
    p = attn_params(rng, 2, stop=True)
    x = Tensor(rng.standard_normal((2, 2, 4, 4)), requires_grad=True)
    (self_attention(x, p) * self_attention(x, p)).sum().backward()
    assert np.all(p.W_q.grad == 0) and np.all(p.W_k.grad == 0)
    assert np.count_nonzero(p.W_v.grad) == p.W_v.size


def test_stop_grad_input_gradient_skips_score_path(f64, rng):
    x = rng.standard_normal((2, 3, 3))
    p = attn_params(rng, 2, stop=True)
    g = rng.standard_normal(x.shape)
    xt = Tensor(x, requires_grad=True)
    (self_attention(xt, p) * Tensor(g)).sum().backward()
    # with A constant: d/dx [x + Wv x A^T] = g + Wv^T g A
    _, a, _ = np_attention(x, p)
    wv = p.W_v.data[:, :, 0, 0]
    want = g + (wv.T @ g.reshape(2, -1) @ a).reshape(x.shape)
    np.testing.assert_allclose(xt.grad, want, rtol=1e-12, atol=1e-12)


# -- batch norm ---------------------------------------------------------------


def test_batchnorm_two_values(f64):
    p = BatchNormParams.fresh(1)
    out = batchnorm(Tensor(np.array([1.0, 3.0]).reshape(2, 1, 1, 1)), p, axis=1).data.ravel()
    np.testing.assert_allclose(out, [-1 / np.sqrt(1 + 1e-5), 1 / np.sqrt(1 + 1e-5)], rtol=1e-12)
    assert round(out[1], 5) == 0.99999 or abs(out[1] - 0.99999) < 1e-5


def test_batchnorm_constant_gives_beta(f64):
    p = BatchNormParams(Tensor([2.0, 1.0]), Tensor([0.5, -3.0]), np.zeros(2), np.ones(2))
    x = np.ones((3, 2, 2, 2)) * np.array([4.0, -1.0])[None, :, None, None]
    out = batchnorm(Tensor(x), p, axis=1).data
    np.testing.assert_allclose(out[:, 0], 0.5)
    np.testing.assert_allclose(out[:, 1], -3.0)


def test_batchnorm_affine_and_moments(f64, rng):
    x = rng.standard_normal((2, 3, 3, 4, 4)) * 5 + 2
    plain = batchnorm(Tensor(x), BatchNormParams.fresh(3), axis=2).data
    m = plain.transpose(2, 0, 1, 3, 4).reshape(3, -1)
    np.testing.assert_allclose(m.mean(1), 0, atol=1e-5)
    np.testing.assert_allclose(m.var(1), 1, atol=1e-3)
    p = BatchNormParams.fresh(3)
    p.gamma.data[:] = 2.0
    p.beta.data[:] = 1.0
    np.testing.assert_allclose(batchnorm(Tensor(x), p, axis=2).data, 2 * plain + 1, rtol=1e-12)


def test_batchnorm_running_stats_and_infer(f64, rng):
    x = rng.standard_normal((4, 2, 3, 3)) * 2 + 1
    p = BatchNormParams.fresh(2, momentum=0.9)
    batchnorm(Tensor(x), p, axis=1)
    mean = x.transpose(1, 0, 2, 3).reshape(2, -1).mean(1)
    var = x.transpose(1, 0, 2, 3).reshape(2, -1).var(1)
    np.testing.assert_allclose(p.running_mean, 0.1 * mean, rtol=1e-12)
    np.testing.assert_allclose(p.running_var, 0.9 + 0.1 * var, rtol=1e-12)
    assert np.all(p.running_var >= 0)
    out = batchnorm(Tensor(x), p, mode="infer", axis=1).data
    want = (x - p.running_mean[None, :, None, None]) / np.sqrt(p.running_var[None, :, None, None] + 1e-5)
    np.testing.assert_allclose(out, want, rtol=1e-12)


def test_batchnorm_infer_without_stats_errors(f64):
    p = BatchNormParams(Tensor([1.0]), Tensor([0.0]))
    with pytest.raises(RuntimeError):
        batchnorm(Tensor(np.ones((2, 1, 2, 2))), p, mode="infer", axis=1)


def test_batchnorm_needs_more_than_one_element(f64):
    with pytest.raises(ValueError):
        batchnorm(Tensor(np.ones((1, 1, 1, 1))), BatchNormParams.fresh(1), axis=1)


# -- conv3d head --------------------------------------------------------------


def test_head_zero_is_half(f64, rng):
    out = conv3d_head(Tensor(rng.standard_normal((3, 2, 4, 4))), Tensor(np.zeros((1, 2, 3, 3, 3))),
                      Tensor(np.zeros(1)))
    assert out.shape == (3, 1, 4, 4)
    np.testing.assert_array_equal(out.data, 0.5)


def test_head_matches_five_loop_oracle(f64, rng):
    t, c, h, w = 3, 2, 4, 5
    x = rng.standard_normal((t, c, h, w))
    k = rng.standard_normal((1, c, 3, 3, 3))
    b = rng.standard_normal(1)
    xp = np.pad(x, ((1, 1), (0, 0), (1, 1), (1, 1)))
    want = np.zeros((t, 1, h, w))
    for ti in range(t):
        for i in range(h):
            for j in range(w):
                acc = b[0]
                for ci in range(c):
                    for a in range(3):
                        for bb in range(3):
                            for e in range(3):
                                acc += k[0, ci, a, bb, e] * xp[ti + a, ci, i + bb, j + e]
                want[ti, 0, i, j] = sig(acc)
    got = conv3d_head(Tensor(x), Tensor(k), Tensor(b)).data
    np.testing.assert_allclose(got, want, rtol=1e-12)
    big = conv3d_head(Tensor(x * 1e3), Tensor(k), Tensor(b)).data
    assert np.all((big > 0) & (big < 1))


def test_head_float32_strictly_inside_unit_interval(rng):
    x = Tensor(rng.standard_normal((2, 2, 4, 4)).astype(np.float32) * 30)
    out = conv3d_head(x, Tensor(rng.standard_normal((1, 2, 3, 3, 3)).astype(np.float32)),
                      Tensor(np.zeros(1, np.float32))).data
    assert np.all((out > 0) & (out < 1))


# -- rotation -----------------------------------------------------------------


def inverse_map_rotate(img, deg):
    """Independent resampler: pull each output pixel from the inverse-rotated source."""
    h, w = img.shape
    th = np.deg2rad(deg)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    out = np.zeros_like(img)
    for y in range(h):
        for x in range(w):
            # counter-clockwise on screen (y down) means source = R(+th) applied to dest
            sx = cx + np.cos(th) * (x - cx) - np.sin(th) * (y - cy)
            sy = cy + np.sin(th) * (x - cx) + np.cos(th) * (y - cy)
            x0, y0 = int(np.floor(sx)), int(np.floor(sy))
            val = 0.0
            for yy, wy in ((y0, 1 - (sy - y0)), (y0 + 1, sy - y0)):
                for xx, wx in ((x0, 1 - (sx - x0)), (x0 + 1, sx - x0)):
                    if 0 <= yy < h and 0 <= xx < w:
                        val += wy * wx * img[yy, xx]
            out[y, x] = val
    return out


def test_rotation_zero_angle_identity(f64, rng):
    x = rng.standard_normal((2, 3, 1, 5, 5))
    np.testing.assert_allclose(rotate_sequences(Tensor(x), [0.0, 0.0]).data, x, atol=1e-15)


@pytest.mark.parametrize("deg", [7.0, 33.0, -120.0])
def test_rotation_center_fixed_and_oracle(f64, rng, deg):
    img = rng.standard_normal((5, 5))
    out = rotate_sequences(Tensor(img[None, None]), [deg]).data[0, 0]
    assert abs(out[2, 2] - img[2, 2]) < 1e-12
    np.testing.assert_allclose(out, inverse_map_rotate(img, deg), atol=1e-12)


def test_rotation_90_on_4x4_pattern(f64):
    img = np.arange(16.0).reshape(4, 4)
    out = rotate_sequences(Tensor(img[None, None]), [90.0]).data[0, 0]
    np.testing.assert_allclose(out, inverse_map_rotate(img, 90.0), atol=1e-12)


def test_random_rotation_same_angle_within_sequence(f64, rng):
    frame = rng.standard_normal((6, 6))
    seq = np.stack([frame] * 4)[:, None]
    out = random_rotation(Tensor(seq), 15.0, np.random.default_rng(5), "train").data
    for t in range(1, 4):
        np.testing.assert_array_equal(out[t], out[0])
    assert not np.allclose(out[0], seq[0])


def test_random_rotation_infer_is_identity_and_draws_nothing(f64, rng):
    g = np.random.default_rng(1)
    before = g.bit_generator.state
    x = Tensor(rng.standard_normal((2, 1, 4, 4)))
    assert random_rotation(x, 15.0, g, "infer") is x
    assert g.bit_generator.state == before


def test_random_rotation_angle_range(f64):
    # one draw per sequence from U(-max, max): reproduce with the same seed
    x = Tensor(np.random.default_rng(0).standard_normal((3, 2, 1, 5, 5)))
    out = random_rotation(x, 10.0, np.random.default_rng(9), "train").data
    deg = np.random.default_rng(9).uniform(-10, 10, 3)
    np.testing.assert_array_equal(out, rotate_sequences(x, deg).data)


# -- gradient checks ----------------------------------------------------------


def _layer_cases(rng):
    """Each layer in its working regime: Glorot weights, pixel-range frames,
    normalized features into attention, hidden state in (-1, 1)."""
    def glorot(shape):
        return Tensor(_glorot(rng, shape), requires_grad=True)

    def small(shape):
        return Tensor(rng.standard_normal(shape) * 0.1, requires_grad=True)

    frames = Tensor(rng.uniform(0, 1, (2, 2, 2, 5, 5)), requires_grad=True)
    x4 = Tensor(rng.uniform(0, 1, (2, 2, 5, 5)), requires_grad=True)
    feats = Tensor(rng.standard_normal((2, 2, 2, 5, 5)), requires_grad=True)
    lp = ConvLSTMParams({g: glorot((2, 2, 3, 3)) for g in GATES}, {g: glorot((2, 2, 3, 3)) for g in GATES},
                        {g: small((2,)) for g in GATES})
    ap = AttentionParams(*(glorot((2, 2, 1, 1)) for _ in range(3)))
    bn = BatchNormParams(Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True), small((2,)))
    bn_inf = BatchNormParams(Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True), small((2,)),
                             rng.standard_normal(2), rng.uniform(0.5, 2, 2))
    hk, hb = glorot((1, 2, 3, 3, 3)), small((1,))
    wts = Tensor(rng.standard_normal(frames.shape))
    lstm_all = [t for _, t in lp.named()]
    h0 = Tensor(rng.uniform(-1, 1, (2, 2, 5, 5)), requires_grad=True)
    c0 = Tensor(rng.standard_normal((2, 2, 5, 5)), requires_grad=True)
    return {
        "convlstm_step": (lambda: (convlstm_step(x4, ConvLSTMState(h0, c0), lp).h * wts[0]).sum(),
                          [x4, h0, c0] + lstm_all),
        "convlstm_sequence": (lambda: (convlstm_sequence(frames, lp) * wts).sum(), [frames] + lstm_all),
        "self_attention": (lambda: (self_attention(feats, ap) * wts).sum(), [feats, ap.W_q, ap.W_k, ap.W_v]),
        "batchnorm_train": (lambda: (batchnorm(feats, bn, axis=2) * wts).sum(), [feats, bn.gamma, bn.beta]),
        "batchnorm_infer": (lambda: (batchnorm(feats, bn_inf, mode="infer", axis=2) * wts).sum(),
                            [feats, bn_inf.gamma, bn_inf.beta]),
        "conv3d_head": (lambda: (conv3d_head(feats, hk, hb) * wts[:, :, :1]).sum(), [feats, hk, hb]),
        "rotation": (lambda: (rotate_sequences(frames, [20.0, -35.0]) * wts).sum(), [frames]),
    }


LAYERS = list(_layer_cases(np.random.default_rng(0)))


@pytest.mark.parametrize("name", LAYERS)
def test_layer_gradcheck(name):
    # the stated protocol: central differences, h=1e-3, max relative error 1e-4
    with default_dtype(np.float64):
        f, params = _layer_cases(np.random.default_rng(0))[name]
        rep = finite_diff_check(f, params, h=1e-3, tol=1e-4)
    assert rep.passed, f"{name}: {rep}"


@pytest.mark.parametrize("name", LAYERS)
def test_layer_gradcheck_many_draws_fine_step(name):
    # h=1e-4 shrinks truncation error 100x, so any miss here is a real gradient error
    with default_dtype(np.float64):
        for seed in range(1, 9):
            f, params = _layer_cases(np.random.default_rng(seed))[name]
            rep = finite_diff_check(f, params, h=1e-4, tol=1e-4)
            assert rep.passed, f"{name} seed {seed}: {rep}"
