"""The next-frame generator and the sequence instructor (discriminator)."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Iterator, Optional

import numpy as np

from .layers import (GATES, AttentionParams, BatchNormParams, ConvLSTMParams, batchnorm,
                     conv3d_head, convlstm_sequence, random_rotation, self_attention)
from .tensor import ShapeError, Tensor, conv3d, leaky_relu, no_grad, sigmoid


def _pair(k) -> tuple:
    if isinstance(k, int):
        return (k, k)
    k = tuple(int(v) for v in k)
    if len(k) != 2:
        raise ValueError(f"kernel size must be an int or a pair, got {k}")
    return k


@dataclass
class VapaadConfig:
    """Architecture of the generator.

    ``blocks`` repeats of ConvLSTM -> batch norm -> self-attention, then a
    3-d convolution head.  ``attention=False`` drops the attention layers
    (used for the ablation); ``stop_grad`` freezes the attention score path
    in every block.
    """

    frame_size: tuple = (64, 64)
    blocks: int = 3
    filters: list = field(default_factory=lambda: [64, 64, 64])
    kernels: list = field(default_factory=lambda: [[5, 5], [3, 3], [1, 1]])
    max_rotation_deg: float = 15.0
    stop_grad: bool = False
    interior_augmentation: bool = False
    attention: bool = True
    channels: int = 1
    head_kernel: tuple = (3, 3, 3)

    def __post_init__(self):
        self.frame_size = tuple(int(v) for v in self.frame_size)
        self.filters = [int(f) for f in self.filters]
        self.kernels = [list(_pair(k)) for k in self.kernels]
        self.head_kernel = tuple(int(v) for v in self.head_kernel)
        self.validate()

    def validate(self) -> None:
        if len(self.frame_size) != 2 or self.frame_size[0] != self.frame_size[1]:
            raise ValueError(f"frames must be square, got {self.frame_size}")
        if self.frame_size[0] < 1:
            raise ValueError("frame size must be positive")
        if not (self.blocks == len(self.filters) == len(self.kernels)):
            raise ValueError(f"blocks={self.blocks} but {len(self.filters)} filter counts "
                             f"and {len(self.kernels)} kernel sizes")
        if self.blocks < 1:
            raise ValueError("need at least one block")
        if any(f < 1 for f in self.filters):
            raise ValueError(f"filters must be >= 1, got {self.filters}")
        if any(k % 2 == 0 for ks in self.kernels for k in ks):
            raise ValueError(f"kernel sizes must be odd, got {self.kernels}")
        if self.max_rotation_deg < 0:
            raise ValueError("max_rotation_deg must be >= 0")

    @classmethod
    def desk(cls, **overrides) -> "VapaadConfig":
        """Small preset: 32x32 frames, 8 filters per block."""
        base = dict(frame_size=(32, 32), filters=[8, 8, 8])
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frame_size"] = list(self.frame_size)
        d["head_kernel"] = list(self.head_kernel)
        return d


def _glorot(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_in = shape[1] * receptive
    fan_out = shape[0] * receptive
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _param(arr: np.ndarray, name: str) -> Tensor:
    return Tensor(arr, requires_grad=True, name=name)


@dataclass
class Block:
    lstm: ConvLSTMParams
    bn: BatchNormParams
    attn: Optional[AttentionParams]


class VapaadModel:
    """Generator parameters plus the batch-norm running statistics."""

    def __init__(self, config: VapaadConfig, blocks: list, head_kernel: Tensor, head_bias: Tensor):
        self.config = config
        self.blocks = blocks
        self.head_kernel = head_kernel
        self.head_bias = head_bias

    def named_parameters(self) -> Iterator[tuple]:
        for bi, blk in enumerate(self.blocks):
            for n, t in blk.lstm.named():
                yield f"block{bi}.lstm.{n}", t
            for n, t in blk.bn.named():
                yield f"block{bi}.bn.{n}", t
            if blk.attn is not None:
                for n, t in blk.attn.named():
                    yield f"block{bi}.attn.{n}", t
        yield "head.kernel", self.head_kernel
        yield "head.bias", self.head_bias

    def parameters(self) -> list:
        return [t for _, t in self.named_parameters()]

    def named_buffers(self) -> Iterator[tuple]:
        for bi, blk in enumerate(self.blocks):
            yield f"block{bi}.bn.running_mean", blk.bn.running_mean
            yield f"block{bi}.bn.running_var", blk.bn.running_var

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        prefix, _, attr = name.rpartition(".")
        bi = int(prefix.split(".")[0][len("block"):])
        setattr(self.blocks[bi].bn, attr, np.array(value, dtype=np.float64))

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None


def parameter_count(config: VapaadConfig) -> int:
    """Closed-form parameter count for ``config``."""
    total = 0
    c_in = config.channels
    for f, (kh, kw) in zip(config.filters, config.kernels):
        total += 4 * (f * c_in * kh * kw + f * f * kh * kw + f)
        total += 2 * f
        if config.attention:
            total += 3 * f * f
        c_in = f
    return total + c_in * int(np.prod(config.head_kernel)) + 1


def build(config: VapaadConfig, rng: np.random.Generator) -> VapaadModel:
    """Glorot-uniform kernels, zero biases, unit batch-norm scale."""
    config.validate()
    blocks = []
    c_in = config.channels
    for bi, (f, (kh, kw)) in enumerate(zip(config.filters, config.kernels)):
        pre = f"block{bi}.lstm."
        wx = {g: _param(_glorot(rng, (f, c_in, kh, kw)), pre + f"W_x{g}") for g in GATES}
        wh = {g: _param(_glorot(rng, (f, f, kh, kw)), pre + f"W_h{g}") for g in GATES}
        b = {g: _param(np.zeros(f), pre + f"b_{g}") for g in GATES}
        bn = BatchNormParams.fresh(f)
        bn.gamma.name, bn.beta.name = f"block{bi}.bn.gamma", f"block{bi}.bn.beta"
        attn = None
        if config.attention:
            pre = f"block{bi}.attn."
            attn = AttentionParams(*(_param(_glorot(rng, (f, f, 1, 1)), pre + n)
                                     for n in ("W_q", "W_k", "W_v")),
                                   stop_qk_gradient=config.stop_grad)
        blocks.append(Block(ConvLSTMParams(wx, wh, b), bn, attn))
        c_in = f
    hk = _param(_glorot(rng, (1, c_in) + config.head_kernel), "head.kernel")
    hb = _param(np.zeros(1), "head.bias")
    return VapaadModel(config, blocks, hk, hb)


def _check_frames(model: VapaadModel, x: Tensor) -> None:
    cfg = model.config
    want = (cfg.channels,) + cfg.frame_size
    if x.ndim != 5 or x.shape[2:] != want:
        raise ShapeError(f"expected input (B, T, {', '.join(map(str, want))}), got {x.shape}")


def forward(model: VapaadModel, x: Tensor, mode: str = "infer",
            rng: Optional[np.random.Generator] = None) -> Tensor:
    """Predict the next frame at every time step.

    Args:
        x: ``(B, T, 1, H, W)`` (a single ``(T, 1, H, W)`` sequence is also
            accepted and returned without the batch axis).
        mode: ``"train"`` rotates the input (and, if configured, block
            outputs) and normalizes with batch statistics; ``"infer"`` is
            deterministic and uses running statistics.
        rng: required in training mode when rotation is enabled.

    Returns:
        Tensor of the same shape as ``x`` with values in (0, 1).
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    single = x.ndim == 4
    if single:
        x = x.reshape((1,) + x.shape)
    _check_frames(model, x)
    cfg = model.config
    augment = mode == "train" and cfg.max_rotation_deg > 0
    if augment and rng is None:
        raise ValueError("training-mode forward with rotation needs an rng")

    h = random_rotation(x, cfg.max_rotation_deg, rng, mode) if augment else x
    for blk in model.blocks:
        h = convlstm_sequence(h, blk.lstm)
        h = batchnorm(h, blk.bn, mode=mode, axis=2)
        if blk.attn is not None:
            h = self_attention(h, blk.attn)
        if augment and cfg.interior_augmentation:
            h = random_rotation(h, cfg.max_rotation_deg, rng, mode)
    y = conv3d_head(h, model.head_kernel, model.head_bias)
    return y.reshape(y.shape[1:]) if single else y


def rollout(model: VapaadModel, seed_frames: Tensor, horizon: int) -> Tensor:
    """Closed-loop generation of ``horizon`` frames after ``seed_frames``.

    Each step runs :func:`forward` in inference mode on the context and
    appends the last predicted frame to it.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    if seed_frames.ndim != 4 or seed_frames.shape[0] < 1:
        raise ShapeError(f"seed frames must be (T0>=1, 1, H, W), got {seed_frames.shape}")
    frames = list(seed_frames.data)
    generated = []
    with no_grad():
        for _ in range(horizon):
            ctx = Tensor._wrap(np.stack(frames)[None])
            nxt = forward(model, ctx, mode="infer").data[0, -1]
            generated.append(nxt)
            frames.append(nxt)
    return Tensor._wrap(np.stack(generated))


# --------------------------------------------------------------------------
# instructor
# --------------------------------------------------------------------------


INSTRUCTOR_FILTERS = (8, 16, 32)


class InstructorModel:
    """Strided 3-d convolutions, global average pooling and a sigmoid unit."""

    def __init__(self, convs: list, dense_w: Tensor, dense_b: Tensor, slope: float = 0.2):
        self.convs = convs
        self.dense_w = dense_w
        self.dense_b = dense_b
        self.slope = slope

    def named_parameters(self) -> Iterator[tuple]:
        for i, (w, b) in enumerate(self.convs):
            yield f"conv{i}.kernel", w
            yield f"conv{i}.bias", b
        yield "dense.weight", self.dense_w
        yield "dense.bias", self.dense_b

    def parameters(self) -> list:
        return [t for _, t in self.named_parameters()]

    def named_buffers(self) -> Iterator[tuple]:
        return iter(())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None


def build_instructor(rng: np.random.Generator, channels: int = 1,
                     filters=INSTRUCTOR_FILTERS) -> InstructorModel:
    convs = []
    c_in = channels
    for i, f in enumerate(filters):
        convs.append((_param(_glorot(rng, (f, c_in, 3, 3, 3)), f"conv{i}.kernel"),
                      _param(np.zeros(f), f"conv{i}.bias")))
        c_in = f
    w = _param(_glorot(rng, (c_in, 1)), "dense.weight")
    b = _param(np.zeros(1), "dense.bias")
    return InstructorModel(convs, w, b)


def instructor_score(inst: InstructorModel, seq: Tensor) -> Tensor:
    """Probability that each sequence in ``seq`` (B, T, 1, H, W) is real, shape (B,)."""
    if seq.ndim != 5:
        raise ShapeError(f"instructor expects (B, T, C, H, W), got {seq.shape}")
    h = seq.transpose(0, 2, 1, 3, 4)
    for w, b in inst.convs:
        h = leaky_relu(conv3d(h, w, b, padding=1, stride=(1, 2, 2)), inst.slope)
    pooled = h.mean(axis=(2, 3, 4))
    logits = pooled @ inst.dense_w + inst.dense_b
    return sigmoid(logits.reshape(seq.shape[0]))


__all__ = ["VapaadConfig", "VapaadModel", "InstructorModel", "Block", "build", "build_instructor",
           "forward", "rollout", "instructor_score", "parameter_count"]
