"""SGD and Adam parameter updates."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor


class MissingGradientError(RuntimeError):
    """A parameter reached the optimizer without a gradient."""


def _collect(params: Sequence[Tensor], grads: Optional[Sequence[np.ndarray]]) -> list:
    params = list(params)
    if grads is None:
        grads = [p.grad for p in params]
    grads = list(grads)
    if len(grads) != len(params):
        raise MissingGradientError(f"{len(params)} parameters but {len(grads)} gradients")
    for i, (p, g) in enumerate(zip(params, grads)):
        label = p.name or f"parameter {i}"
        if g is None:
            raise MissingGradientError(f"{label} has no gradient (was backward run?)")
        if np.shape(g) != p.shape:
            raise MissingGradientError(f"{label}: gradient shape {np.shape(g)} != {p.shape}")
        # reject the whole step before touching anything
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"{label} has a non-finite gradient; step rejected")
    return grads


@dataclass
class SgdConfig:
    eta: float = 1e-2

    def __post_init__(self):
        if not (np.isfinite(self.eta) and self.eta >= 0):
            raise ValueError(f"learning rate must be finite and non-negative, got {self.eta}")


def sgd_step(params: Sequence[Tensor], grads: Optional[Sequence[np.ndarray]], cfg: SgdConfig) -> None:
    """``theta <- theta - eta * g`` for every parameter, in place."""
    grads = _collect(params, grads)
    for p, g in zip(params, grads):
        p.data -= (cfg.eta * np.asarray(g, dtype=np.float64)).astype(p.dtype)


@dataclass
class AdamState:
    """Step size, decay rates and per-parameter moments.

    Moments are kept in float64 whatever the parameter dtype, so the
    bias-corrected first moment of a constant gradient reproduces it to
    rounding.
    """

    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError(f"betas must lie in [0,1), got {self.beta1}, {self.beta2}")
        if not self.alpha >= 0 or not self.epsilon > 0:
            raise ValueError("alpha must be >= 0 and epsilon > 0")

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> "AdamState":
        st = cls(**hyper)
        st.m = [np.zeros(p.shape) for p in params]
        st.v = [np.zeros(p.shape) for p in params]
        return st

    def bias_corrected(self) -> tuple:
        """``(m_hat, v_hat)`` for the current ``t`` (t >= 1)."""
        if self.t < 1:
            raise ValueError("no step taken yet")
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        return [m / c1 for m in self.m], [v / c2 for v in self.v]


def adam_step(params: Sequence[Tensor], grads: Optional[Sequence[np.ndarray]], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    params = list(params)
    grads = _collect(params, grads)
    if not state.m:
        state.m = [np.zeros(p.shape) for p in params]
        state.v = [np.zeros(p.shape) for p in params]
    if len(state.m) != len(params):
        raise ValueError(f"optimizer state tracks {len(state.m)} parameters, got {len(params)}")
    for p, m in zip(params, state.m):
        if m.shape != p.shape:
            raise ValueError(f"moment shape {m.shape} does not match parameter {p.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=np.float64)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        step = state.alpha * m_hat / (np.sqrt(v_hat) + state.epsilon)
        if p.dtype == np.float64:
            p.data -= step
        else:
            p.data[...] = (p.data.astype(np.float64) - step).astype(p.dtype)


class Optimizer:
    """Binds a parameter list to SGD or Adam."""

    def __init__(self, params: Sequence[Tensor], kind: str = "adam", lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = list(params)
        self.kind = kind
        if kind == "adam":
            self.state = AdamState.for_params(self.params, alpha=lr, beta1=beta1, beta2=beta2,
                                              epsilon=epsilon)
        elif kind == "sgd":
            self.state = SgdConfig(eta=lr)
        else:
            raise ValueError(f"unknown optimizer {kind!r}; choose 'adam' or 'sgd'")

    def step(self, grads: Optional[Sequence[np.ndarray]] = None) -> None:
        if self.kind == "adam":
            adam_step(self.params, grads, self.state)
        else:
            sgd_step(self.params, grads, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    # checkpoint support
    def state_arrays(self) -> dict:
        if self.kind != "adam":
            return {}
        out = {}
        for i, (m, v) in enumerate(zip(self.state.m, self.state.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out

    def state_meta(self) -> dict:
        if self.kind == "adam":
            s = self.state
            return {"kind": "adam", "t": s.t, "alpha": s.alpha, "beta1": s.beta1,
                    "beta2": s.beta2, "epsilon": s.epsilon}
        return {"kind": "sgd", "eta": self.state.eta}

    def load_state(self, meta: dict, arrays: dict) -> None:
        if meta.get("kind") != self.kind:
            raise ValueError(f"checkpoint optimizer {meta.get('kind')!r} != {self.kind!r}")
        if self.kind == "sgd":
            return
        self.state.t = int(meta["t"])
        n = len(self.params)
        try:
            self.state.m = [np.array(arrays[f"m.{i}"], dtype=np.float64) for i in range(n)]
            self.state.v = [np.array(arrays[f"v.{i}"], dtype=np.float64) for i in range(n)]
        except KeyError as exc:
            raise ValueError(f"optimizer state is missing {exc.args[0]}") from None
