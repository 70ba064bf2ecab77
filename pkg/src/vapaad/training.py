"""Objectives, metrics and the training loop.

Two objectives are available for the generator: per-pixel binary
cross-entropy against the shifted target sequence, and the adversarial
objective in which an instructor network scores whole sequences as real or
generated.  They can be combined with a weight on the adversarial term.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .model import InstructorModel, VapaadModel, forward, instructor_score
from .optim import Optimizer
from .tensor import NonFiniteError, ShapeError, Tensor, clip, log, no_grad

EPS = 1e-7


class ContractError(ValueError):
    """Scores handed to a loss lie outside [0, 1]."""


class NonFiniteLossError(NonFiniteError):
    def __init__(self, term: str, value: float):
        super().__init__(f"loss term {term!r} is not finite ({value}); step aborted")
        self.term = term


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def _checked_scores(s: Tensor, what: str) -> Tensor:
    d = s.data
    if d.size and (d.min() < 0.0 or d.max() > 1.0):
        raise ContractError(f"{what} scores must lie in [0, 1]; got range [{d.min()}, {d.max()}]")
    return clip(s, EPS, 1.0 - EPS)


def _as_scores(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64), dtype=np.float64)


def minimax_loss(real_scores, fake_scores) -> Tensor:
    """``mean log I(x) + mean log(1 - I(V(x)))``, scores clamped to ``[eps, 1-eps]``.

    >>> round(minimax_loss([0.5], [0.5]).item(), 6)
    -1.386294
    """
    real = _checked_scores(_as_scores(real_scores), "real")
    fake = _checked_scores(_as_scores(fake_scores), "fake")
    return log(real).mean() + log(1.0 - fake).mean()


def instructor_objective(inst: InstructorModel, real_batch: Tensor, fake_batch: Tensor) -> Tensor:
    """Negated minimax value; minimizing it trains the instructor.

    ``fake_batch`` is detached, so the generator receives no gradient from
    this loss.
    """
    if real_batch.shape[0] != fake_batch.shape[0]:
        raise ShapeError(f"real batch has {real_batch.shape[0]} sequences, fake has {fake_batch.shape[0]}")
    real = instructor_score(inst, real_batch)
    fake = instructor_score(inst, fake_batch.detach())
    return -minimax_loss(real, fake)


def frozen(inst: InstructorModel) -> InstructorModel:
    """A view of ``inst`` whose parameters are constants (share data, no grad)."""
    convs = [(w.detach(), b.detach()) for w, b in inst.convs]
    return InstructorModel(convs, inst.dense_w.detach(), inst.dense_b.detach(), inst.slope)


def generator_adversarial_term(inst: InstructorModel, generated: Tensor) -> Tensor:
    """``mean log(1 - I(V(x)))`` with the instructor held fixed."""
    fake = _checked_scores(instructor_score(frozen(inst), generated), "fake")
    return log(1.0 - fake).mean()


def vapaad_objective(inst: InstructorModel, model: VapaadModel, input_batch: Tensor,
                     mode: str = "train", rng: Optional[np.random.Generator] = None) -> Tensor:
    """Generator side of the adversarial objective (minimized).

    Decreasing it means the instructor rates generated sequences as more
    real.  Instructor parameters are constants here.
    """
    return generator_adversarial_term(inst, forward(model, input_batch, mode, rng))


def reconstruction_loss(pred: Tensor, target) -> Tensor:
    """Mean per-pixel binary cross-entropy with ``eps``-clamped predictions."""
    y = target if isinstance(target, Tensor) else Tensor._wrap(np.asarray(target, dtype=pred.dtype))
    if pred.shape != y.shape:
        raise ShapeError(f"prediction {pred.shape} and target {y.shape} differ")
    p = clip(pred, EPS, 1.0 - EPS)
    ll = y * log(p) + (1.0 - y) * log(1.0 - p)
    return -ll.mean()


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


@dataclass
class Metrics:
    bce: float
    mse: float
    accuracy: float
    losses: dict = field(default_factory=dict)

    def record(self) -> dict:
        rec = dict(self.losses)
        rec.update(bce=self.bce, mse=self.mse, accuracy=self.accuracy)
        return rec


def _pixel_sums(pred: np.ndarray, target: np.ndarray) -> tuple:
    p = np.clip(pred.astype(np.float64), EPS, 1.0 - EPS)
    y = target.astype(np.float64)
    bce = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).sum()
    mse = ((pred.astype(np.float64) - y) ** 2).sum()
    # ties go to 0: 0.5 is not above the threshold
    acc = np.count_nonzero((pred > 0.5) == (target > 0.5))
    return float(bce), float(mse), int(acc), pred.size


def pixel_metrics(pred, target, losses: Optional[dict] = None) -> Metrics:
    pred = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    bce, mse, acc, n = _pixel_sums(pred, target)
    return Metrics(bce / n, mse / n, acc / n, dict(losses or {}))


def evaluate(model: VapaadModel, x: np.ndarray, y: np.ndarray, batch_size: int = 4) -> Metrics:
    """Inference-mode metrics pooled over every pixel of every pair."""
    if len(x) == 0:
        raise ValueError("cannot evaluate an empty split")
    tot_bce = tot_mse = 0.0
    tot_acc = tot_n = 0
    with no_grad():
        for lo in range(0, len(x), batch_size):
            xb = Tensor(x[lo:lo + batch_size])
            pred = forward(model, xb, mode="infer").data
            bce, mse, acc, n = _pixel_sums(pred, y[lo:lo + batch_size])
            tot_bce += bce
            tot_mse += mse
            tot_acc += acc
            tot_n += n
    return Metrics(tot_bce / tot_n, tot_mse / tot_n, tot_acc / tot_n)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


LOSS_MODES = ("reconstruction", "adversarial", "adversarial+reconstruction")


@dataclass
class LossMode:
    kind: str = "reconstruction"
    lam: float = 0.01

    def __post_init__(self):
        if self.kind not in LOSS_MODES:
            raise ValueError(f"loss mode must be one of {LOSS_MODES}, got {self.kind!r}")
        if not self.lam >= 0:
            raise ValueError(f"adversarial weight must be >= 0, got {self.lam}")

    @property
    def adversarial(self) -> bool:
        return self.kind != "reconstruction"

    @property
    def reconstruction(self) -> bool:
        return self.kind != "adversarial"


@dataclass
class TrainConfig:
    batch_size: int = 4
    steps: int = 200
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    loss_mode: str = "reconstruction"
    adv_weight: float = 0.01
    seed: int = 0
    log_every: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")
        LossMode(self.loss_mode, self.adv_weight)

    @property
    def mode(self) -> LossMode:
        return LossMode(self.loss_mode, self.adv_weight)


def _finite(term: str, t: Tensor) -> float:
    v = float(t.item())
    if not math.isfinite(v):
        raise NonFiniteLossError(term, v)
    return v


def train_step(model: VapaadModel, inst: Optional[InstructorModel], x: np.ndarray, y: np.ndarray,
               mode: LossMode, gen_opt: Optimizer, inst_opt: Optional[Optimizer],
               rng: np.random.Generator) -> Metrics:
    """One update on the batch ``(x, y)``.

    In the adversarial modes both objectives are evaluated on the same
    forward pass, each is backpropagated into its own model's gradients,
    and then both optimizers step.
    """
    xb = Tensor(x)
    yb = Tensor(y)
    pred = forward(model, xb, mode="train", rng=rng)
    losses = {}
    gen_loss = None
    if mode.reconstruction:
        rec = reconstruction_loss(pred, yb)
        losses["reconstruction"] = _finite("reconstruction", rec)
        gen_loss = rec
    inst_loss = None
    if mode.adversarial:
        if inst is None or inst_opt is None:
            raise ValueError("adversarial training needs an instructor and its optimizer")
        inst_loss = instructor_objective(inst, yb, pred)
        losses["instructor"] = _finite("instructor", inst_loss)
        adv = generator_adversarial_term(inst, pred)
        losses["generator_adv"] = _finite("generator_adv", adv)
        gen_loss = adv if gen_loss is None else gen_loss + adv * mode.lam
    losses["loss"] = _finite("loss", gen_loss)

    model.zero_grad()
    gen_loss.backward()
    if inst_loss is not None:
        inst.zero_grad()
        inst_loss.backward()
    # gradients for both models exist before either changes
    gen_opt.step()
    if inst_loss is not None:
        inst_opt.step()
    return pixel_metrics(pred, y, losses)


def batch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Sequence order for one pass over ``n`` training sequences."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    """Indices of the batch used at 0-based ``step``; batches never straddle epochs."""
    per_epoch = max(1, n // batch_size) if n >= batch_size else 1
    epoch, k = divmod(step, per_epoch)
    order = batch_order(seed, epoch, n)
    return np.sort(order[k * batch_size:(k + 1) * batch_size])


class Trainer:
    """Owns a model, its optimizer(s), the augmentation RNG and the step count."""

    def __init__(self, model: VapaadModel, cfg: TrainConfig, train_x: np.ndarray, train_y: np.ndarray,
                 inst: Optional[InstructorModel] = None):
        self.model = model
        self.cfg = cfg
        self.mode = cfg.mode
        self.train_x = train_x
        self.train_y = train_y
        self.inst = inst
        opt_kw = dict(kind=cfg.optimizer, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                      epsilon=cfg.epsilon)
        self.gen_opt = Optimizer(model.parameters(), **opt_kw)
        self.inst_opt = Optimizer(inst.parameters(), **opt_kw) if inst is not None else None
        if self.mode.adversarial and inst is None:
            raise ValueError(f"loss mode {self.mode.kind!r} needs an instructor")
        self.rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x0A06]))
        self.step = 0

    def next_batch(self) -> tuple:
        idx = batch_indices(self.cfg.seed, self.step, len(self.train_x), self.cfg.batch_size)
        return self.train_x[idx], self.train_y[idx]

    def train_step(self) -> Metrics:
        x, y = self.next_batch()
        m = train_step(self.model, self.inst, x, y, self.mode, self.gen_opt, self.inst_opt, self.rng)
        self.step += 1
        return m

    def run(self, steps: Optional[int] = None, on_record: Optional[Callable[[dict], None]] = None,
            record_wall_time: bool = False,
            on_step: Optional[Callable[["Trainer"], None]] = None) -> list:
        """Train until ``steps`` total steps (default ``cfg.steps``) have run.

        Returns the emitted records.  A record is emitted every
        ``cfg.log_every`` steps and after the final step; ``wall_ms`` is
        included only on request because it breaks byte-identical logs.
        """
        total = self.cfg.steps if steps is None else steps
        records = []
        while self.step < total:
            t0 = time.perf_counter()
            m = self.train_step()
            if self.step % self.cfg.log_every == 0 or self.step == total:
                rec = {"step": self.step}
                if record_wall_time:
                    rec["wall_ms"] = round((time.perf_counter() - t0) * 1000.0, 3)
                rec.update(m.record())
                records.append(rec)
                if on_record is not None:
                    on_record(rec)
            if on_step is not None:
                on_step(self)
        return records

    def rng_state(self) -> dict:
        return self.rng.bit_generator.state

    def set_rng_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state


def format_record(rec: dict) -> str:
    """One log line; key order is insertion order and floats use ``repr``."""
    return json.dumps(rec, separators=(",", ":"))


__all__ = ["EPS", "ContractError", "NonFiniteLossError", "minimax_loss", "instructor_objective",
           "vapaad_objective", "generator_adversarial_term", "reconstruction_loss", "Metrics",
           "pixel_metrics", "evaluate", "LossMode", "TrainConfig", "train_step", "Trainer",
           "batch_indices", "format_record", "frozen"]
