"""Recurrent, normalization, attention and augmentation layers.

All layers accept an optional leading batch axis.  Sequence layers work on
``(T, C, H, W)`` or ``(B, T, C, H, W)``; per-frame layers treat every
leading axis as independent frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import _kernels
from .tensor import (Function, ShapeError, Tensor, _batched_outer, concat, conv2d, conv3d,
                     Sigmoid, sigmoid, stack)

GATES = ("i", "f", "c", "o")


# --------------------------------------------------------------------------
# ConvLSTM
# --------------------------------------------------------------------------


@dataclass
class ConvLSTMParams:
    """Kernels and biases of one ConvLSTM layer.

    ``wx[g]`` is ``(filters, C_in, k, k)``, ``wh[g]`` is
    ``(filters, filters, k, k)`` and ``b[g]`` is ``(filters,)`` for each gate
    ``g`` in ``i f c o``.
    """

    wx: dict
    wh: dict
    b: dict

    def __post_init__(self):
        if set(self.wx) != set(GATES) or set(self.wh) != set(GATES) or set(self.b) != set(GATES):
            raise ValueError(f"ConvLSTMParams needs gates {GATES}")
        ks = {self.wx[g].shape[2:] for g in GATES} | {self.wh[g].shape[2:] for g in GATES}
        if len(ks) != 1:
            raise ShapeError(f"gate kernels disagree on spatial size: {sorted(ks)}")
        (kh, kw), = ks
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"ConvLSTM kernels must be odd for 'same' padding, got {(kh, kw)}")
        f = self.filters
        for g in GATES:
            if self.wh[g].shape[:2] != (f, f) or self.wx[g].shape[0] != f or self.b[g].shape != (f,):
                raise ShapeError(f"gate {g!r} shapes inconsistent with {f} filters")

    @property
    def filters(self) -> int:
        return self.wx["i"].shape[0]

    @property
    def in_channels(self) -> int:
        return self.wx["i"].shape[1]

    @property
    def kernel_size(self) -> tuple:
        return self.wx["i"].shape[2:]

    def named(self) -> Iterator[tuple]:
        for g in GATES:
            yield f"W_x{g}", self.wx[g]
        for g in GATES:
            yield f"W_h{g}", self.wh[g]
        for g in GATES:
            yield f"b_{g}", self.b[g]

    def stacked(self) -> tuple:
        """Gate-stacked ``(W_x, W_h, b)`` with gates along the output axis in ``i f c o`` order."""
        wx = concat([self.wx[g] for g in GATES], axis=0)
        wh = concat([self.wh[g] for g in GATES], axis=0)
        b = concat([self.b[g] for g in GATES], axis=0)
        return wx, wh, b


@dataclass
class ConvLSTMState:
    h: Tensor
    c: Tensor

    def __post_init__(self):
        if self.h.shape != self.c.shape:
            raise ShapeError(f"hidden {self.h.shape} and cell {self.c.shape} shapes differ")

    @classmethod
    def zeros(cls, shape, dtype=None) -> "ConvLSTMState":
        z = Tensor(np.zeros(shape), dtype=dtype)
        return cls(z, Tensor._wrap(z.data.copy()))


class _LstmGates(Function):
    """Gate nonlinearities and the cell update, fused.

    Takes pre-activations ``z`` (.., 4F, H, W) and the previous cell ``c``
    and returns ``[h', c']`` stacked on a new leading axis.
    """

    def forward(self, z, c):
        f = z.shape[-3] // 4
        zi, zf, zg, zo = (z[..., k * f:(k + 1) * f, :, :] for k in range(4))
        sig = lambda a: 1.0 / (1.0 + np.exp(-a))  # noqa: E731
        i, fg, o = sig(zi), sig(zf), sig(zo)
        g = np.tanh(zg)
        c_new = fg * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        self.saved = (i, fg, g, o, c, tc)
        return np.stack([h_new, c_new]).astype(z.dtype, copy=False)

    def backward(self, grad):
        i, fg, g, o, c, tc = self.saved
        gh, gc = grad[0], grad[1]
        dc = gc + gh * o * (1 - tc * tc)
        do = gh * tc * o * (1 - o)
        di = dc * g * i * (1 - i)
        df = dc * c * fg * (1 - fg)
        dg = dc * i * (1 - g * g)
        dz = np.concatenate([di, df, dg, do], axis=-3)
        return dz, dc * fg


def _lstm_update(zx: Tensor, state: ConvLSTMState, wh: Tensor, skip_recurrent: bool) -> ConvLSTMState:
    z = zx if skip_recurrent else zx + conv2d(state.h, wh, padding="same")
    both = _LstmGates.apply(z, state.c)
    return ConvLSTMState(both[0], both[1])


def _check_spatial(x: Tensor, state: ConvLSTMState) -> None:
    if x.shape[-2:] != state.h.shape[-2:]:
        raise ShapeError(f"input spatial dims {x.shape[-2:]} do not match state {state.h.shape[-2:]}")


def convlstm_step(x: Tensor, state: ConvLSTMState, params: ConvLSTMParams) -> ConvLSTMState:
    """One ConvLSTM time step (no peepholes, ``same`` padding).

    Args:
        x: ``(C_in, H, W)`` or ``(B, C_in, H, W)``.
        state: previous ``(h, c)`` shaped ``(.., filters, H, W)``.
    """
    _check_spatial(x, state)
    wx, wh, b = params.stacked()
    zx = conv2d(x, wx, b, padding="same")
    return _lstm_update(zx, state, wh, skip_recurrent=False)


def convlstm_sequence(xs: Tensor, params: ConvLSTMParams,
                      initial: Optional[ConvLSTMState] = None) -> Tensor:
    """Run a ConvLSTM over time and return the hidden state at every step.

    Args:
        xs: ``(T, C_in, H, W)`` or ``(B, T, C_in, H, W)``.
        initial: starting state; zeros when omitted.

    Returns:
        ``(T, filters, H, W)`` or ``(B, T, filters, H, W)``.
    """
    batched = xs.ndim == 5
    if xs.ndim not in (4, 5):
        raise ShapeError(f"convlstm_sequence expects (T,C,H,W) or (B,T,C,H,W), got {xs.shape}")
    t_axis = 1 if batched else 0
    steps = xs.shape[t_axis]
    if steps == 0:
        raise ShapeError("convlstm_sequence needs at least one time step")
    if xs.shape[t_axis + 1] != params.in_channels:
        raise ShapeError(f"input has {xs.shape[t_axis + 1]} channels, layer expects {params.in_channels}")
    f = params.filters
    h, w = xs.shape[-2:]
    lead = xs.shape[:1] if batched else ()
    zero_start = initial is None
    state = initial if initial is not None else ConvLSTMState.zeros(lead + (f, h, w), dtype=xs.dtype)
    _check_spatial(xs, state)

    wx, wh, b = params.stacked()
    # input contributions for every step in one convolution
    if batched:
        bsz = xs.shape[0]
        flat = xs.reshape(bsz * steps, xs.shape[2], h, w)
        zx_all = conv2d(flat, wx, b, padding="same").reshape(bsz, steps, 4 * f, h, w)
    else:
        zx_all = conv2d(xs, wx, b, padding="same")

    outs = []
    for t in range(steps):
        zx = zx_all[:, t] if batched else zx_all[t]
        state = _lstm_update(zx, state, wh, skip_recurrent=(t == 0 and zero_start))
        outs.append(state.h)
    return stack(outs, axis=t_axis)


# --------------------------------------------------------------------------
# self-attention
# --------------------------------------------------------------------------


@dataclass
class AttentionParams:
    """1x1 projection kernels ``(C, C, 1, 1)`` for queries, keys and values."""

    W_q: Tensor
    W_k: Tensor
    W_v: Tensor
    stop_qk_gradient: bool = False

    def __post_init__(self):
        c = self.W_q.shape[0]
        for name in ("W_q", "W_k", "W_v"):
            if getattr(self, name).shape != (c, c, 1, 1):
                raise ShapeError(f"{name} must be ({c},{c},1,1), got {getattr(self, name).shape}")

    @property
    def channels(self) -> int:
        return self.W_q.shape[0]

    def named(self) -> Iterator[tuple]:
        yield "W_q", self.W_q
        yield "W_k", self.W_k
        yield "W_v", self.W_v


class _SpatialAttention(Function):
    """Residual scaled dot-product attention across the positions of each frame."""

    def forward(self, x, wq, wk, wv, stop_qk=False):
        m, c = x.shape[:2]
        xf = np.ascontiguousarray(x.reshape(m, c, -1))
        wq2, wk2, wv2 = wq[:, :, 0, 0], wk[:, :, 0, 0], wv[:, :, 0, 0]
        q = np.matmul(wq2, xf)
        k = np.matmul(wk2, xf)
        v = np.matmul(wv2, xf)
        scale = 1.0 / math.sqrt(c)
        out, stats = _kernels.attention_forward(q, k, v, scale)
        self.saved = (xf, wq2, wk2, wv2, q, k, v, out, stats, scale, x.shape)
        self.stop_qk = stop_qk
        return (xf + out).reshape(x.shape)

    def backward(self, grad):
        xf, wq2, wk2, wv2, q, k, v, out, stats, scale, shape = self.saved
        m, c = shape[:2]
        g = np.ascontiguousarray(grad.reshape(m, c, -1))
        dq, dk, dv = _kernels.attention_backward(q, k, v, out, stats, g, scale, self.stop_qk)

        def wgrad(d):
            return _batched_outer(d, xf)[:, :, None, None]

        dx = g + np.matmul(wv2.T, dv)
        gwv = wgrad(dv) if self.needs_grad[3] else None
        gwq = gwk = None
        if not self.stop_qk:
            dx += np.matmul(wq2.T, dq)
            dx += np.matmul(wk2.T, dk)
            gwq = wgrad(dq) if self.needs_grad[1] else None
            gwk = wgrad(dk) if self.needs_grad[2] else None
        return dx.reshape(shape), gwq, gwk, gwv


def _frames(x: Tensor) -> tuple:
    if x.ndim < 3:
        raise ShapeError(f"expected (..., C, H, W), got {x.shape}")
    lead = x.shape[:-3]
    m = int(np.prod(lead)) if lead else 1
    return lead, x.reshape((m,) + x.shape[-3:])


def self_attention(x: Tensor, params: AttentionParams) -> Tensor:
    """Residual spatial self-attention ``x + attend(x)``, one frame at a time.

    Positions of each ``(C, H, W)`` frame are flattened to ``N = H*W``
    vectors; the weights are a row softmax of ``q_i . k_j / sqrt(C)``.  With
    ``params.stop_qk_gradient`` the weights are constant under
    differentiation, so neither the projections ``W_q``, ``W_k`` nor the
    input (through the score path) receive gradient from them.
    """
    lead, xf = _frames(x)
    if xf.shape[1] != params.channels:
        raise ShapeError(f"attention expects {params.channels} channels, got {xf.shape[1]}")
    out = _SpatialAttention.apply(xf, params.W_q, params.W_k, params.W_v,
                                  stop_qk=params.stop_qk_gradient)
    return out.reshape(x.shape)


def attention_weights(x, params: AttentionParams) -> np.ndarray:
    """Attention matrices ``(..., N, N)`` for inspection; not taped."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    lead = data.shape[:-3]
    c = data.shape[-3]
    xf = data.reshape((-1, c, data.shape[-2] * data.shape[-1]))
    q = np.matmul(params.W_q.data[:, :, 0, 0], xf)
    k = np.matmul(params.W_k.data[:, :, 0, 0], xf)
    a = _kernels.attention_weights(q, k, 1.0 / math.sqrt(c))
    return a.reshape(lead + a.shape[-2:])


# --------------------------------------------------------------------------
# batch normalization
# --------------------------------------------------------------------------


@dataclass
class BatchNormParams:
    """Per-channel affine parameters and running statistics.

    ``running_mean``/``running_var`` start at 0 and 1; they may be set to
    None to mark them uninitialized, in which case inference mode is refused
    until a training-mode call has filled them.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None
    momentum: float = 0.9
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.gamma.shape != self.beta.shape or self.gamma.ndim != 1:
            raise ShapeError(f"gamma {self.gamma.shape} and beta {self.beta.shape} must be equal 1-d")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"momentum must lie in (0,1), got {self.momentum}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")

    @classmethod
    def fresh(cls, channels: int, **kw) -> "BatchNormParams":
        return cls(Tensor(np.ones(channels), requires_grad=True),
                   Tensor(np.zeros(channels), requires_grad=True),
                   np.zeros(channels), np.ones(channels), **kw)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def named(self) -> Iterator[tuple]:
        yield "gamma", self.gamma
        yield "beta", self.beta

    def buffers(self) -> Iterator[tuple]:
        yield "running_mean", self.running_mean
        yield "running_var", self.running_var


class _BatchNormTrain(Function):
    def forward(self, x, gamma, beta, axis, eps):
        axes = tuple(i for i in range(x.ndim) if i != axis)
        shape = [1] * x.ndim
        shape[axis] = x.shape[axis]
        mean = x.mean(axis=axes, keepdims=True)
        xc = x - mean
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv_std
        g2 = gamma.reshape(shape)
        self.saved = (xhat, inv_std, g2, axes, x.size // x.shape[axis])
        return (xhat * g2 + beta.reshape(shape)).astype(x.dtype, copy=False)

    def backward(self, g):
        xhat, inv_std, gamma, axes, count = self.saved
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        dxhat = g * gamma
        dx = inv_std / count * (count * dxhat - dxhat.sum(axis=axes, keepdims=True)
                                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        return dx.astype(g.dtype, copy=False), ggamma, gbeta


def batchnorm(x: Tensor, params: BatchNormParams, mode: str = "train", axis: int = -3) -> Tensor:
    """Per-channel batch normalization.

    Statistics are taken over every axis except ``axis`` (the channel axis,
    by default third from last, so ``(B, T, C, H, W)`` normalizes over batch,
    time and space jointly).  In training mode the running statistics are
    updated as ``running = momentum * running + (1 - momentum) * batch``
    with the biased batch variance.
    """
    axis = axis % x.ndim
    c = x.shape[axis]
    if c != params.channels:
        raise ShapeError(f"batchnorm has {params.channels} channels, input has {c} on axis {axis}")
    if mode == "train":
        if x.size // c < 2:
            raise ShapeError("training-mode batchnorm needs more than one element per channel")
        fn_out = _BatchNormTrain.apply(x, params.gamma, params.beta, axis=axis, eps=params.epsilon)
        mean, var = _last_stats(x, axis)
        mom = params.momentum
        if params.running_mean is None or params.running_var is None:
            params.running_mean = mean
            params.running_var = var
        else:
            params.running_mean = mom * params.running_mean + (1 - mom) * mean
            params.running_var = mom * params.running_var + (1 - mom) * var
        return fn_out
    if mode != "infer":
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if params.running_mean is None or params.running_var is None:
        raise RuntimeError("batchnorm inference before running statistics were initialized")
    shape = [1] * x.ndim
    shape[axis] = c
    inv_std = Tensor._wrap((1.0 / np.sqrt(params.running_var + params.epsilon)).astype(x.dtype))
    mean = Tensor._wrap(params.running_mean.astype(x.dtype))
    scale = params.gamma * inv_std
    shift = params.beta - scale * mean
    return x * scale.reshape(shape) + shift.reshape(shape)


def _last_stats(x: Tensor, axis: int) -> tuple:
    axes = tuple(i for i in range(x.ndim) if i != axis)
    d = x.data.astype(np.float64)
    mean = d.mean(axis=axes)
    shape = [1] * x.ndim
    shape[axis] = -1
    var = ((d - mean.reshape(shape)) ** 2).mean(axis=axes)
    return mean, var


# --------------------------------------------------------------------------
# Conv3D head
# --------------------------------------------------------------------------


class _OpenSigmoid(Sigmoid):
    """Sigmoid kept strictly inside (0, 1) in the working precision.

    In float32 ``1/(1+exp(-z))`` rounds to exactly 1.0 once z exceeds ~17;
    the result is pinned to the neighbouring representable values instead.
    """

    def forward(self, a):
        fi = np.finfo(a.dtype)
        out = super().forward(a)
        np.clip(out, fi.tiny, 1 - fi.epsneg, out=out)
        return out


def conv3d_head(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Sigmoid ``3x3x3`` convolution over (time, height, width) down to one channel.

    Args:
        x: ``(T, C, H, W)`` or ``(B, T, C, H, W)``.
        kernel: ``(1, C, kT, kH, kW)``.
        bias: ``(1,)``.

    Returns:
        ``(T, 1, H, W)`` or ``(B, T, 1, H, W)`` with values in (0, 1).
    """
    batched = x.ndim == 5
    if x.ndim not in (4, 5):
        raise ShapeError(f"conv3d_head expects (T,C,H,W) or (B,T,C,H,W), got {x.shape}")
    if kernel.shape[0] != 1:
        raise ShapeError(f"head kernel must have one output channel, got {kernel.shape}")
    x5 = x if batched else x.reshape((1,) + x.shape)
    b, t = x5.shape[:2]
    h, w = x5.shape[-2:]
    y = conv3d(x5.transpose(0, 2, 1, 3, 4), kernel, bias, padding="same")
    # one output channel: (B,1,T,H,W) -> (B,T,1,H,W) is a pure reshape
    y = _OpenSigmoid.apply(y.reshape(b, t, 1, h, w))
    return y if batched else y.reshape(t, 1, h, w)


# --------------------------------------------------------------------------
# rotation augmentation
# --------------------------------------------------------------------------


class _Rotate(Function):
    def forward(self, x, angles):
        h, w = x.shape[-2:]
        per = int(np.prod(x.shape[1:-2]))
        self.rad = np.repeat(angles, per)
        self.shape = x.shape
        frames = np.ascontiguousarray(x.reshape(-1, h, w))
        return _kernels.rotate(frames, self.rad).reshape(x.shape)

    def backward(self, g):
        h, w = g.shape[-2:]
        frames = np.ascontiguousarray(g.reshape(-1, h, w))
        return _kernels.rotate_adjoint(frames, self.rad).reshape(self.shape)


def rotate_sequences(seq: Tensor, degrees) -> Tensor:
    """Rotate every frame of sequence ``b`` counter-clockwise by ``degrees[b]``.

    ``seq`` is ``(B, ..., H, W)``; bilinear sampling about the frame centre,
    zero outside.  Differentiable (the backward pass is the adjoint
    resampling), which interior augmentation relies on.
    """
    if seq.shape[-1] != seq.shape[-2]:
        raise ShapeError(f"rotation needs square frames, got {seq.shape[-2:]}")
    rad = np.deg2rad(np.asarray(degrees, dtype=np.float64).reshape(-1))
    if rad.shape[0] != seq.shape[0]:
        raise ShapeError(f"{rad.shape[0]} angles for {seq.shape[0]} sequences")
    return _Rotate.apply(seq, angles=rad)


def random_rotation(seq: Tensor, max_deg: float, rng: np.random.Generator,
                    mode: str = "train") -> Tensor:
    """Training-time augmentation: one random angle per sequence.

    ``seq`` is ``(T, 1, H, W)`` (one sequence) or ``(B, T, 1, H, W)``.  The
    angle is uniform in ``[-max_deg, max_deg]`` and shared by all frames of a
    sequence.  Inference mode returns ``seq`` unchanged and draws nothing
    from ``rng``.
    """
    if mode == "infer":
        return seq
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    batched = seq.ndim == 5
    s = seq if batched else seq.reshape((1,) + seq.shape)
    deg = rng.uniform(-max_deg, max_deg, size=s.shape[0])
    out = rotate_sequences(s, deg)
    return out if batched else out.reshape(seq.shape)
