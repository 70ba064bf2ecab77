"""Hot numeric kernels with two interchangeable backends.

Every kernel exists twice: a numba ``@njit`` loop nest and a pure-numpy
version.  The numba path is used when numba imports and the environment
variable ``VAPAAD_DISABLE_NUMBA`` is unset (or ``0``); otherwise the numpy
path runs.  ``set_backend`` switches at runtime, which the benchmark and
the backend-agreement tests rely on.

Layout conventions (all arrays C-contiguous):

* convolutions work on 5-d ``(N, C, D, H, W)`` arrays; 2-d convolutions pass
  ``D == 1``.  ``xp`` is the already zero-padded input.
* attention works on ``(M, C, P)`` query/key/value arrays with ``P``
  flattened spatial positions.  Only per-row statistics ``(M, P)`` are kept
  between forward and backward; the numba kernels never form the ``(P, P)``
  weight matrix and the numpy path forms it a few frames at a time.
* rotation works on ``(M, H, W)`` frame stacks with one angle per frame.

The direct convolution sums each output element over ``(c, kd, kh, kw)`` in
row-major order on both backends, so the two forward paths agree bit for bit.
"""

from __future__ import annotations

import math
import os
from itertools import product

import numpy as np

try:
    import numba
    import numba.extending
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None

HAVE_NUMBA = numba is not None
ENV_FLAG = "VAPAAD_DISABLE_NUMBA"


def _env_disabled() -> bool:
    return os.environ.get(ENV_FLAG, "").strip().lower() not in ("", "0", "false", "no")


# --------------------------------------------------------------------------
# numpy backend
# --------------------------------------------------------------------------


def _np_conv_forward(xp, w, stride, out):
    sd, sh, sw = stride
    _, _, do, ho, wo = out.shape
    _, c_in, kd, kh, kw = w.shape
    for c, a, b, e in product(range(c_in), range(kd), range(kh), range(kw)):
        xs = xp[:, c, a:a + sd * (do - 1) + 1:sd, b:b + sh * (ho - 1) + 1:sh,
                e:e + sw * (wo - 1) + 1:sw]
        out += w[:, c, a, b, e][None, :, None, None, None] * xs[:, None]
    return out


def _np_im2col(xp, ksize, stride, out_spatial):
    kd, kh, kw = ksize
    sd, sh, sw = stride
    do, ho, wo = out_spatial
    n, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))
    win = win[:, :, :sd * (do - 1) + 1:sd, :sh * (ho - 1) + 1:sh, :sw * (wo - 1) + 1:sw]
    # (N, C, Do, Ho, Wo, kd, kh, kw) -> (N, C, kd, kh, kw, Do, Ho, Wo)
    cols = np.ascontiguousarray(win.transpose(0, 1, 5, 6, 7, 2, 3, 4))
    return cols.reshape(n, c * kd * kh * kw, do * ho * wo)


def _np_col2im(cols, xp_shape, ksize, stride, out_spatial):
    kd, kh, kw = ksize
    sd, sh, sw = stride
    do, ho, wo = out_spatial
    n, c = xp_shape[:2]
    gxp = np.zeros(xp_shape, dtype=cols.dtype)
    c6 = cols.reshape(n, c, kd, kh, kw, do, ho, wo)
    for a, b, e in product(range(kd), range(kh), range(kw)):
        gxp[:, :, a:a + sd * (do - 1) + 1:sd, b:b + sh * (ho - 1) + 1:sh,
            e:e + sw * (wo - 1) + 1:sw] += c6[:, :, a, b, e]
    return gxp


# frames per chunk so the transient (chunk, P, P) buffers stay near 64 MB
def _np_frame_chunk(p):
    return max(1, (1 << 24) // (p * p))


def _np_scores(q, k, scale):
    return np.matmul((q * q.dtype.type(scale)).transpose(0, 2, 1), k)


def _np_attention_forward(q, k, v, scale, out, mrow, lrow):
    m_b, _, p = q.shape
    step = _np_frame_chunk(p)
    for lo in range(0, m_b, step):
        sl = slice(lo, lo + step)
        s = _np_scores(q[sl], k[sl], scale)
        mx = s.max(axis=-1)
        s -= mx[:, :, None]
        np.exp(s, out=s)
        inv = 1.0 / s.sum(axis=-1)
        np.matmul(v[sl], s.transpose(0, 2, 1), out=out[sl])
        out[sl] *= inv[:, None, :]
        mrow[sl] = mx
        lrow[sl] = inv
    return out


def _np_attention_backward(q, k, v, out, g, scale, mrow, lrow, stop_qk, dq, dk, dv):
    m_b, _, p = q.shape
    step = _np_frame_chunk(p)
    for lo in range(0, m_b, step):
        sl = slice(lo, lo + step)
        a = _np_scores(q[sl], k[sl], scale)
        a -= mrow[sl][:, :, None]
        np.exp(a, out=a)
        a *= lrow[sl][:, :, None]
        gs = g[sl]
        np.matmul(gs, a, out=dv[sl])
        if stop_qk:
            continue
        r = np.einsum("mci,mci->mi", gs, out[sl])
        ds = np.matmul(gs.transpose(0, 2, 1), v[sl])
        ds -= r[:, :, None]
        ds *= a
        np.matmul(k[sl], ds.transpose(0, 2, 1), out=dq[sl])
        dq[sl] *= q.dtype.type(scale)
        np.matmul(q[sl] * q.dtype.type(scale), ds, out=dk[sl])


def _np_source_coords(h, w, cos_t, sin_t):
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64) - cy,
                         np.arange(w, dtype=np.float64) - cx, indexing="ij")
    sx = cx + cos_t * xx - sin_t * yy
    sy = cy + sin_t * xx + cos_t * yy
    return sy, sx


def _np_bilinear_taps(sy, sx, h, w):
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy = sy - y0
    fx = sx - x0
    taps = []
    for dy, dx, wt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                       (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yi = y0 + dy
        xi = x0 + dx
        ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        taps.append((np.where(ok, yi, 0), np.where(ok, xi, 0), np.where(ok, wt, 0.0)))
    return taps


def _np_rotate(frames, angles):
    m, h, w = frames.shape
    out = np.zeros_like(frames)
    for i in range(m):
        sy, sx = _np_source_coords(h, w, np.cos(angles[i]), np.sin(angles[i]))
        acc = np.zeros((h, w), dtype=np.float64)
        for yi, xi, wt in _np_bilinear_taps(sy, sx, h, w):
            acc += wt * frames[i, yi, xi]
        out[i] = acc
    return out


def _np_rotate_adjoint(grad, angles):
    m, h, w = grad.shape
    out = np.zeros_like(grad)
    for i in range(m):
        sy, sx = _np_source_coords(h, w, np.cos(angles[i]), np.sin(angles[i]))
        acc = np.zeros((h, w), dtype=np.float64)
        for yi, xi, wt in _np_bilinear_taps(sy, sx, h, w):
            np.add.at(acc, (yi, xi), wt * grad[i])
        out[i] = acc
    return out


# --------------------------------------------------------------------------
# numba backend
# --------------------------------------------------------------------------

if HAVE_NUMBA:
    _njit = numba.njit(cache=True)
    # reassociation lets LLVM vectorise the row reductions; results stay
    # deterministic for a given build of the kernel.
    _FAST = {"reassoc", "contract", "nsz", "arcp"}

    @_njit
    def _nb_conv_forward_impl(xp, w, sd, sh, sw, out):
        n_b, n_f, do, ho, wo = out.shape
        c_in, kd, kh, kw = w.shape[1], w.shape[2], w.shape[3], w.shape[4]
        for n in range(n_b):
            for f in range(n_f):
                for c in range(c_in):
                    for a in range(kd):
                        for b in range(kh):
                            for e in range(kw):
                                wv = w[f, c, a, b, e]
                                for od in range(do):
                                    for oh in range(ho):
                                        src = xp[n, c, od * sd + a, oh * sh + b]
                                        dst = out[n, f, od, oh]
                                        if sw == 1:
                                            # contiguous slice lets LLVM vectorise
                                            seg = src[e:e + wo]
                                            for ow in range(wo):
                                                dst[ow] += wv * seg[ow]
                                        else:
                                            for ow in range(wo):
                                                dst[ow] += wv * src[ow * sw + e]
        return out

    @_njit
    def _nb_im2col_impl(xp, kd, kh, kw, sd, sh, sw, do, ho, wo, cols):
        n_b, c_in = xp.shape[0], xp.shape[1]
        for n in range(n_b):
            for c in range(c_in):
                for a in range(kd):
                    for b in range(kh):
                        for e in range(kw):
                            row = ((c * kd + a) * kh + b) * kw + e
                            idx = 0
                            for od in range(do):
                                for oh in range(ho):
                                    src = xp[n, c, od * sd + a, oh * sh + b]
                                    for ow in range(wo):
                                        cols[n, row, idx] = src[ow * sw + e]
                                        idx += 1
        return cols

    @_njit
    def _nb_col2im_impl(cols, kd, kh, kw, sd, sh, sw, do, ho, wo, gxp):
        n_b, c_in = gxp.shape[0], gxp.shape[1]
        for n in range(n_b):
            for c in range(c_in):
                for a in range(kd):
                    for b in range(kh):
                        for e in range(kw):
                            row = ((c * kd + a) * kh + b) * kw + e
                            idx = 0
                            for od in range(do):
                                for oh in range(ho):
                                    dst = gxp[n, c, od * sd + a, oh * sh + b]
                                    for ow in range(wo):
                                        dst[ow * sw + e] += cols[n, row, idx]
                                        idx += 1
        return gxp

    @numba.njit(fastmath=_FAST, inline="always")
    def _row_exp_f32(s, shift, ibuf):
        """``s <- exp(s - shift)`` for ``s <= shift``; returns the sum.

        Branch-free so it vectorises: ``exp(x) = 2**n * 2**f`` with
        ``n = round(x / ln 2)``, a degree-7 Taylor polynomial for ``2**f`` on
        ``[-1/2, 1/2]`` and the power of two assembled in the exponent bits.
        Relative error stays within a few float32 ulp.
        """
        p_n = s.shape[0]
        for j in range(p_n):
            x = s[j] - shift
            x = x if x > np.float32(-87.0) else np.float32(-87.0)
            t = x * np.float32(1.4426950408889634)
            n = math.floor(t + np.float32(0.5))
            f = t - n
            p = np.float32(1.525273380405984e-05)
            p = p * f + np.float32(1.5403530393381606e-4)
            p = p * f + np.float32(1.3333558146428443e-3)
            p = p * f + np.float32(9.618129107628477e-3)
            p = p * f + np.float32(5.550410866482158e-2)
            p = p * f + np.float32(0.2402265069591007)
            p = p * f + np.float32(0.6931471805599453)
            p = p * f + np.float32(1.0)
            s[j] = p
            ibuf[j] = (np.int32(n) + np.int32(127)) << np.int32(23)
        pow2 = ibuf.view(np.float32)
        tot = np.float32(0.0)
        for j in range(p_n):
            e = s[j] * pow2[j]
            s[j] = e
            tot += e
        return tot

    @numba.njit(fastmath=_FAST, inline="always")
    def _row_exp_f64(s, shift, ibuf):
        tot = 0.0
        for j in range(s.shape[0]):
            e = math.exp(s[j] - shift)
            s[j] = e
            tot += e
        return tot

    def _row_exp(s, shift, ibuf):
        raise NotImplementedError  # resolved at compile time below

    @numba.extending.overload(_row_exp, jit_options={"fastmath": _FAST})
    def _row_exp_overload(s, shift, ibuf):
        if s.dtype == numba.types.float32:
            return _row_exp_f32.py_func
        return _row_exp_f64.py_func

    # Row-streaming attention that never stores the (P, P) weights.  Query
    # rows are processed in pairs so each pass over a key, value or
    # accumulator row serves two queries.  The backward pass recomputes the
    # scores from the row maxima and reciprocal sums kept by the forward
    # pass.  An odd final row is paired with itself and its duplicate
    # contributions are zeroed.  Everything is module level (no closures)
    # so the on-disk cache is reused across processes.


    @numba.njit(fastmath=_FAST, inline="always")
    def _pair_lin(a, b, rows, out0, out1, zero):
        # out0 = a @ rows, out1 = b @ rows
        c_n = rows.shape[0]
        p_n = out0.shape[0]
        for j in range(p_n):
            out0[j] = zero
            out1[j] = zero
        c = 0
        while c + 2 <= c_n:
            a0 = a[c]
            a1 = a[c + 1]
            b0 = b[c]
            b1 = b[c + 1]
            r0 = rows[c]
            r1 = rows[c + 1]
            for j in range(p_n):
                x0 = r0[j]
                x1 = r1[j]
                out0[j] += a0 * x0 + a1 * x1
                out1[j] += b0 * x0 + b1 * x1
            c += 2
        if c < c_n:
            a0 = a[c]
            b0 = b[c]
            r0 = rows[c]
            for j in range(p_n):
                out0[j] += a0 * r0[j]
                out1[j] += b0 * r0[j]

    @numba.njit(fastmath=_FAST, inline="always")
    def _pair_axpy(w0, w1, a, b, acc):
        # acc[c] += a[c] * w0 + b[c] * w1
        c_n = acc.shape[0]
        p_n = w0.shape[0]
        c = 0
        while c + 2 <= c_n:
            a0 = a[c]
            a1 = a[c + 1]
            b0 = b[c]
            b1 = b[c + 1]
            r0 = acc[c]
            r1 = acc[c + 1]
            for j in range(p_n):
                x = w0[j]
                y = w1[j]
                r0[j] += a0 * x + b0 * y
                r1[j] += a1 * x + b1 * y
            c += 2
        if c < c_n:
            a0 = a[c]
            b0 = b[c]
            r0 = acc[c]
            for j in range(p_n):
                r0[j] += a0 * w0[j] + b0 * w1[j]

    @numba.njit(fastmath=_FAST, inline="always")
    def _pair_dot(w0, w1, rows, o0, o1, zero):
        c_n = rows.shape[0]
        p_n = w0.shape[0]
        for c in range(c_n):
            r = rows[c]
            s0 = zero
            s1 = zero
            for j in range(p_n):
                x = r[j]
                s0 += w0[j] * x
                s1 += w1[j] * x
            o0[c] = s0
            o1[c] = s1

    @numba.njit(fastmath=_FAST, inline="always")
    def _row_max(s, lanes):
        # lane-wise max vectorises where a scalar running max does not
        p_n = s.shape[0]
        nl = lanes.shape[0]
        for t in range(nl):
            lanes[t] = s[0]
        full = p_n - p_n % nl
        for base in range(0, full, nl):
            for t in range(nl):
                x = s[base + t]
                lanes[t] = x if x > lanes[t] else lanes[t]
        mx = lanes[0]
        for t in range(1, nl):
            if lanes[t] > mx:
                mx = lanes[t]
        for j in range(full, p_n):
            if s[j] > mx:
                mx = s[j]
        return mx

    @numba.njit(fastmath=_FAST, cache=True)
    def _nb_attention_forward_impl(q, k, v, scale, zero, one, out, mrow, lrow):
        m_b, c_n, p_n = q.shape
        s0 = np.empty(p_n, dtype=q.dtype)
        s1 = np.empty(p_n, dtype=q.dtype)
        ibuf = np.empty(p_n, dtype=np.int32)
        lanes = np.empty(16, dtype=q.dtype)
        q0 = np.empty(c_n, dtype=q.dtype)
        q1 = np.empty(c_n, dtype=q.dtype)
        o0 = np.empty(c_n, dtype=q.dtype)
        o1 = np.empty(c_n, dtype=q.dtype)
        for m in range(m_b):
            km = k[m]
            vm = v[m]
            for i in range(0, p_n, 2):
                two = i + 1 < p_n
                i1 = i + 1 if two else i
                for c in range(c_n):
                    q0[c] = q[m, c, i] * scale
                    q1[c] = q[m, c, i1] * scale
                _pair_lin(q0, q1, km, s0, s1, zero)
                mx0 = _row_max(s0, lanes)
                mx1 = _row_max(s1, lanes)
                inv0 = one / _row_exp(s0, mx0, ibuf)
                inv1 = one / _row_exp(s1, mx1, ibuf)
                _pair_dot(s0, s1, vm, o0, o1, zero)
                for c in range(c_n):
                    out[m, c, i] = o0[c] * inv0
                mrow[m, i] = mx0
                lrow[m, i] = inv0
                if two:
                    for c in range(c_n):
                        out[m, c, i1] = o1[c] * inv1
                    mrow[m, i1] = mx1
                    lrow[m, i1] = inv1
        return out

    @numba.njit(fastmath=_FAST, cache=True)
    def _nb_attention_backward_impl(q, k, v, out, g, scale, zero, one, mrow, lrow, stop_qk, dq, dk, dv):
        m_b, c_n, p_n = q.shape
        s0 = np.empty(p_n, dtype=q.dtype)
        s1 = np.empty(p_n, dtype=q.dtype)
        d0 = np.empty(p_n, dtype=q.dtype)
        d1 = np.empty(p_n, dtype=q.dtype)
        ibuf = np.empty(p_n, dtype=np.int32)
        g0 = np.empty(c_n, dtype=q.dtype)
        g1 = np.empty(c_n, dtype=q.dtype)
        q0 = np.empty(c_n, dtype=q.dtype)
        q1 = np.empty(c_n, dtype=q.dtype)
        o0 = np.empty(c_n, dtype=q.dtype)
        o1 = np.empty(c_n, dtype=q.dtype)
        for m in range(m_b):
            km = k[m]
            vm = v[m]
            dkm = dk[m]
            dvm = dv[m]
            for i in range(0, p_n, 2):
                two = i + 1 < p_n
                i1 = i + 1 if two else i
                inv0 = lrow[m, i]
                # a zero weight removes the duplicated odd row entirely
                inv1 = lrow[m, i1] if two else zero
                r0 = zero
                r1 = zero
                for c in range(c_n):
                    q0[c] = q[m, c, i] * scale
                    q1[c] = q[m, c, i1] * scale
                    g0[c] = g[m, c, i] * inv0
                    g1[c] = g[m, c, i1] * inv1
                    r0 += g[m, c, i] * out[m, c, i]
                    r1 += g[m, c, i1] * out[m, c, i1]
                _pair_lin(q0, q1, km, s0, s1, zero)
                _row_exp(s0, mrow[m, i], ibuf)
                _row_exp(s1, mrow[m, i1], ibuf)
                # s holds unnormalised weights; 1/l is folded into g
                _pair_axpy(s0, s1, g0, g1, dvm)
                if stop_qk:
                    continue
                _pair_lin(g0, g1, vm, d0, d1, zero)
                rs0 = r0 * inv0
                rs1 = r1 * inv1
                for j in range(p_n):
                    d0[j] = s0[j] * (d0[j] - rs0)
                    d1[j] = s1[j] * (d1[j] - rs1)
                _pair_dot(d0, d1, km, o0, o1, zero)
                for c in range(c_n):
                    dq[m, c, i] = o0[c] * scale
                    if two:
                        dq[m, c, i1] = o1[c] * scale
                    else:
                        q1[c] = zero
                _pair_axpy(d0, d1, q0, q1, dkm)
        return dq



    @_njit
    def _nb_rotate_impl(frames, angles, out, adjoint):
        m_b, h, w = frames.shape
        cy = (h - 1) / 2.0
        cx = (w - 1) / 2.0
        for m in range(m_b):
            ct = np.cos(angles[m])
            st = np.sin(angles[m])
            for y in range(h):
                for x in range(w):
                    dx = x - cx
                    dy = y - cy
                    sx = cx + ct * dx - st * dy
                    sy = cy + st * dx + ct * dy
                    y0 = int(np.floor(sy))
                    x0 = int(np.floor(sx))
                    fy = sy - y0
                    fx = sx - x0
                    acc = 0.0
                    for t in range(4):
                        yi = y0 + t // 2
                        xi = x0 + t % 2
                        wy = fy if t // 2 == 1 else 1.0 - fy
                        wx = fx if t % 2 == 1 else 1.0 - fx
                        if yi < 0 or yi >= h or xi < 0 or xi >= w:
                            continue
                        if adjoint:
                            out[m, yi, xi] += wy * wx * frames[m, y, x]
                        else:
                            acc += wy * wx * frames[m, yi, xi]
                    if not adjoint:
                        out[m, y, x] = acc
        return out


def _nb_conv_forward(xp, w, stride, out):
    return _nb_conv_forward_impl(xp, w, stride[0], stride[1], stride[2], out)


def _nb_im2col(xp, ksize, stride, out_spatial):
    n, c = xp.shape[:2]
    cols = np.empty((n, c * ksize[0] * ksize[1] * ksize[2],
                     out_spatial[0] * out_spatial[1] * out_spatial[2]), dtype=xp.dtype)
    return _nb_im2col_impl(xp, *ksize, *stride, *out_spatial, cols)


def _nb_col2im(cols, xp_shape, ksize, stride, out_spatial):
    gxp = np.zeros(xp_shape, dtype=cols.dtype)
    return _nb_col2im_impl(np.ascontiguousarray(cols), *ksize, *stride, *out_spatial, gxp)


def _nb_attention_forward(q, k, v, scale, out, mrow, lrow):
    t = q.dtype.type
    return _nb_attention_forward_impl(q, k, v, t(scale), t(0), t(1), out, mrow, lrow)


def _nb_attention_backward(q, k, v, out, g, scale, mrow, lrow, stop_qk, dq, dk, dv):
    t = q.dtype.type
    return _nb_attention_backward_impl(q, k, v, out, g, t(scale), t(0), t(1), mrow, lrow, stop_qk,
                                       dq, dk, dv)


def _nb_rotate(frames, angles):
    frames = np.ascontiguousarray(frames)
    return _nb_rotate_impl(frames, np.asarray(angles, dtype=np.float64),
                           np.zeros_like(frames), False)


def _nb_rotate_adjoint(grad, angles):
    grad = np.ascontiguousarray(grad)
    return _nb_rotate_impl(grad, np.asarray(angles, dtype=np.float64),
                           np.zeros_like(grad), True)


_BACKENDS = {
    "numpy": {
        "conv_forward": _np_conv_forward,
        "im2col": _np_im2col,
        "col2im": _np_col2im,
        "attention_forward": _np_attention_forward,
        "attention_backward": _np_attention_backward,
        "rotate": _np_rotate,
        "rotate_adjoint": _np_rotate_adjoint,
    },
}
if HAVE_NUMBA:
    _BACKENDS["numba"] = {
        "conv_forward": _nb_conv_forward,
        "im2col": _nb_im2col,
        "col2im": _nb_col2im,
        "attention_forward": _nb_attention_forward,
        "attention_backward": _nb_attention_backward,
        "rotate": _nb_rotate,
        "rotate_adjoint": _nb_rotate_adjoint,
    }

_active = _BACKENDS["numpy" if (_env_disabled() or not HAVE_NUMBA) else "numba"]


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def get_backend() -> str:
    return next(name for name, table in _BACKENDS.items() if table is _active)


def set_backend(name: str) -> None:
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; available: {available_backends()}")
    _active = _BACKENDS[name]


# --------------------------------------------------------------------------
# dispatching entry points
# --------------------------------------------------------------------------


def conv_forward(xp: np.ndarray, w: np.ndarray, stride, out_spatial) -> np.ndarray:
    """Direct correlation of padded ``xp`` (N,C,D,H,W) with ``w`` (F,C,kd,kh,kw)."""
    out = np.zeros((xp.shape[0], w.shape[0], *out_spatial), dtype=xp.dtype)
    return _active["conv_forward"](np.ascontiguousarray(xp), np.ascontiguousarray(w),
                                   tuple(stride), out)


def im2col(xp, ksize, stride, out_spatial):
    return _active["im2col"](np.ascontiguousarray(xp), tuple(ksize), tuple(stride),
                             tuple(out_spatial))


def col2im(cols, xp_shape, ksize, stride, out_spatial):
    return _active["col2im"](cols, tuple(xp_shape), tuple(ksize), tuple(stride),
                             tuple(out_spatial))


def attention_forward(q, k, v, scale):
    """Row-softmax attention of ``(M, C, P)`` queries over keys and values.

    ``out[m, :, i] = sum_j a[m, i, j] v[m, :, j]`` with
    ``a[m, i] = softmax_j(scale * q[m, :, i] . k[m, :, j])``.

    Returns ``(out, stats)``; ``stats`` holds the row maxima of the scaled
    scores and the reciprocal row sums, each ``(M, P)``, which is all the
    backward pass needs to rebuild the weights.
    """
    q, k, v = (np.ascontiguousarray(a) for a in (q, k, v))
    m, _, p = q.shape
    out = np.empty_like(v)
    mrow = np.empty((m, p), dtype=q.dtype)
    lrow = np.empty((m, p), dtype=q.dtype)
    _active["attention_forward"](q, k, v, scale, out, mrow, lrow)
    return out, (mrow, lrow)


def attention_backward(q, k, v, out, stats, g, scale, stop_qk=False):
    """Gradients ``(dq, dk, dv)``; ``dq``/``dk`` are None when ``stop_qk``."""
    q, k, v, g = (np.ascontiguousarray(a) for a in (q, k, v, g))
    mrow, lrow = stats
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    _active["attention_backward"](q, k, v, out, g, scale, mrow, lrow, bool(stop_qk), dq, dk, dv)
    if stop_qk:
        return None, None, dv
    return dq, dk, dv


def attention_weights(q, k, scale) -> np.ndarray:
    """Dense ``(M, P, P)`` softmax weights, for inspection and tests."""
    s = _np_scores(np.asarray(q), np.asarray(k), scale)
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    return s


def rotate(frames: np.ndarray, angles) -> np.ndarray:
    """Bilinear rotation about the frame centre with zero fill, one angle (rad) per frame."""
    return _active["rotate"](frames, np.asarray(angles, dtype=np.float64))


def rotate_adjoint(grad: np.ndarray, angles) -> np.ndarray:
    return _active["rotate_adjoint"](grad, np.asarray(angles, dtype=np.float64))
