import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vapaad.data import synthetic_moving_mnist, make_shifted_pairs, downscale_dataset
from vapaad.gradcheck import finite_diff_check
from vapaad.model import VapaadConfig, build, build_instructor, forward, instructor_score
from vapaad.optim import Optimizer
from vapaad.tensor import NonFiniteError, ShapeError, Tensor, default_dtype
from vapaad.training import (EPS, ContractError, LossMode, TrainConfig, Trainer, batch_indices,
                             evaluate, generator_adversarial_term, instructor_objective, minimax_loss,
                             pixel_metrics, reconstruction_loss, train_step, vapaad_objective)


def tiny_cfg(**kw):
    base = dict(frame_size=(8, 8), blocks=1, filters=[2], kernels=[3], max_rotation_deg=0.0)
    base.update(kw)
    return VapaadConfig(**base)


def zero_instructor():
    inst = build_instructor(np.random.default_rng(0), filters=(2, 2, 2))
    for t in inst.parameters():
        t.data[...] = 0
    return inst


# -- minimax and the two sides ------------------------------------------------


def test_minimax_examples():
    assert abs(minimax_loss([0.5], [0.5]).item() - (-1.386294)) < 1e-6
    assert abs(minimax_loss([0.9], [0.1]).item() - 2 * math.log(0.9)) < 1e-12
    assert abs(minimax_loss([0.9], [0.1]).item() - (-0.210721)) < 1e-6
    v = minimax_loss([0.5], [1 - 1e-12]).item()
    assert math.isfinite(v) and v < -10


@given(st.lists(st.floats(0, 1), min_size=1, max_size=6), st.lists(st.floats(0, 1), min_size=1, max_size=6))
def test_minimax_never_positive(real, fake):
    assert minimax_loss(real, fake).item() <= 0


@pytest.mark.parametrize("real,fake", [([1.5], [0.5]), ([0.5], [-0.1]), ([np.nan], [0.5])])
def test_minimax_rejects_non_scores(real, fake):
    with pytest.raises((ContractError, NonFiniteError)):
        minimax_loss(real, fake)


def test_instructor_objective_zero_parameters(rng):
    inst = zero_instructor()
    real = Tensor(rng.uniform(0, 1, (2, 3, 1, 8, 8)))
    fake = Tensor(rng.uniform(0, 1, (2, 3, 1, 8, 8)))
    assert abs(instructor_objective(inst, real, fake).item() - 1.386294) < 1e-6
    with pytest.raises(ShapeError):
        instructor_objective(inst, real, Tensor(rng.uniform(0, 1, (3, 3, 1, 8, 8))))


def test_perfect_instructor_objective_near_zero():
    # scores pushed to the clamp boundary: -(log(1-eps) + log(1-eps))
    assert abs(minimax_loss([1.0], [0.0]).item()) < 3 * EPS


def test_generator_term_examples(rng):
    inst = zero_instructor()
    gen = Tensor(rng.uniform(0, 1, (2, 3, 1, 8, 8)))
    assert abs(generator_adversarial_term(inst, gen).item() - math.log(0.5)) < 1e-6
    assert abs(minimax_loss([0.5], [1.0]).item() - (math.log(0.5) + math.log(EPS))) < 1e-6


def test_decomposition_identity(rng):
    with default_dtype(np.float64):
        inst = build_instructor(np.random.default_rng(1), filters=(2, 2, 2))
        model = build(tiny_cfg(), np.random.default_rng(2))
        x = Tensor(rng.uniform(0, 1, (2, 3, 1, 8, 8)))
        real = Tensor(rng.uniform(0, 1, (2, 3, 1, 8, 8)))
        gen = forward(model, x, mode="infer")
        r = instructor_score(inst, real)
        f = instructor_score(inst, gen)
        whole = minimax_loss(r, f).item()
        assert abs(whole - (-instructor_objective(inst, real, gen).item())) < 1e-9
        split = float(np.log(r.data).mean()) + vapaad_objective(inst, model, x, mode="infer").item()
        assert abs(whole - split) < 1e-9


def test_gradient_isolation(rng):
    inst = build_instructor(np.random.default_rng(1), filters=(2, 2, 2))
    model = build(tiny_cfg(), np.random.default_rng(2))
    x = Tensor(rng.uniform(0, 1, (2, 3, 1, 8, 8)).astype(np.float32))
    pred = forward(model, x, mode="train")
    instructor_objective(inst, x, pred).backward()
    assert all(p.grad is None or not np.any(p.grad) for p in model.parameters())
    assert any(p.grad is not None and np.any(p.grad) for p in inst.parameters())
    model.zero_grad()
    inst.zero_grad()
    generator_adversarial_term(inst, forward(model, x, mode="train")).backward()
    assert all(p.grad is None or not np.any(p.grad) for p in inst.parameters())
    assert any(p.grad is not None and np.any(p.grad) for p in model.parameters())


def test_instructor_objective_gradcheck():
    with default_dtype(np.float64):
        rng = np.random.default_rng(3)
        inst = build_instructor(rng, filters=(2, 2, 2))
        real = Tensor(rng.uniform(0, 1, (2, 3, 1, 6, 6)))
        fake = Tensor(rng.uniform(0, 1, (2, 3, 1, 6, 6)))
        # leaky-ReLU kinks: a 1e-3 step can straddle one, so use a fine step
        rep = finite_diff_check(lambda: instructor_objective(inst, real, fake), inst.parameters(),
                                h=1e-5, tol=1e-4)
    assert rep.passed, rep


def test_generator_term_gradcheck():
    with default_dtype(np.float64):
        rng = np.random.default_rng(4)
        inst = build_instructor(rng, filters=(2, 2, 2))
        model = build(tiny_cfg(frame_size=(6, 6)), rng)
        x = Tensor(rng.uniform(0, 1, (2, 3, 1, 6, 6)))
        rep = finite_diff_check(lambda: vapaad_objective(inst, model, x, mode="train"),
                                model.parameters(), h=1e-5, tol=1e-4)
    assert rep.passed, rep


# -- reconstruction -----------------------------------------------------------


def scalar_bce(p, y):
    total = 0.0
    for pi, yi in zip(np.ravel(p).tolist(), np.ravel(y).tolist()):
        pi = min(max(pi, EPS), 1 - EPS)
        total += -(yi * math.log(pi) + (1 - yi) * math.log(1 - pi))
    return total / np.size(p)


def test_reconstruction_examples():
    half = Tensor(np.full((2, 2), 0.5), dtype=np.float64)
    assert abs(reconstruction_loss(half, np.full((2, 2), 0.5)).item() - math.log(2)) < 1e-12
    y = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert reconstruction_loss(Tensor(y, dtype=np.float64), y).item() < 1e-6
    p = np.array([[0.2, 0.7], [0.99, 0.01]])
    assert abs(reconstruction_loss(Tensor(p, dtype=np.float64), y).item() - scalar_bce(p, y)) < 1e-12
    with pytest.raises(ShapeError):
        reconstruction_loss(half, np.zeros((2, 3)))


@given(st.integers(0, 2**31))
def test_reconstruction_matches_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0, 1, (2, 3, 3))
    y = rng.uniform(0, 1, (2, 3, 3))
    v = reconstruction_loss(Tensor(p, dtype=np.float64), y).item()
    assert v >= 0
    assert abs(v - scalar_bce(p, y)) < 1e-6


# -- metrics --------------------------------------------------------------------


def test_metrics_identity_and_ties(rng):
    y = (rng.uniform(0, 1, (3, 4, 4)) > 0.7).astype(np.float32)
    m = pixel_metrics(y, y)
    assert m.accuracy == 1.0 and m.mse == 0.0
    half = pixel_metrics(np.full_like(y, 0.5), y)
    assert half.accuracy == pytest.approx(float((y == 0).mean()))


def test_evaluate_empty_split():
    model = build(tiny_cfg(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        evaluate(model, np.zeros((0, 3, 1, 8, 8), np.float32), np.zeros((0, 3, 1, 8, 8), np.float32))


def test_evaluate_pools_over_batches(rng):
    model = build(tiny_cfg(), np.random.default_rng(0))
    x = rng.uniform(0, 1, (5, 3, 1, 8, 8)).astype(np.float32)
    y = rng.uniform(0, 1, x.shape).astype(np.float32)
    a = evaluate(model, x, y, batch_size=2)
    b = evaluate(model, x, y, batch_size=5)
    assert a.bce == pytest.approx(b.bce, rel=1e-12)
    assert a.accuracy == b.accuracy
    assert evaluate(model, x, y, batch_size=2).record() == a.record()


def test_blank_predictor_accuracy_is_background_fraction():
    raw = synthetic_moving_mnist(12, seed=3)
    ds = downscale_dataset(make_shifted_pairs(raw, 12), 2)
    bg = float((ds.y <= 0.5).mean())
    m = pixel_metrics(np.full_like(ds.y, 0.5), ds.y)
    assert m.accuracy == pytest.approx(bg, abs=1e-12)


# -- train_step ---------------------------------------------------------------


def _batch(rng, b=2):
    x = rng.uniform(0, 1, (b, 3, 1, 8, 8)).astype(np.float32)
    return x, np.roll(x, -1, axis=1)


@pytest.mark.parametrize("kind", ["reconstruction", "adversarial", "adversarial+reconstruction"])
@pytest.mark.parametrize("opt", ["sgd", "adam"])
def test_zero_learning_rate_leaves_parameters(rng, kind, opt):
    model = build(tiny_cfg(), np.random.default_rng(0))
    inst = build_instructor(np.random.default_rng(1), filters=(2, 2, 2))
    before = [p.data.tobytes() for p in model.parameters() + inst.parameters()]
    x, y = _batch(rng)
    m = train_step(model, inst, x, y, LossMode(kind), Optimizer(model.parameters(), opt, lr=0.0),
                   Optimizer(inst.parameters(), opt, lr=0.0), np.random.default_rng(0))
    assert [p.data.tobytes() for p in model.parameters() + inst.parameters()] == before
    assert "loss" in m.losses
    if kind != "reconstruction":
        assert {"instructor", "generator_adv"} <= set(m.losses)


def test_reconstruction_mode_does_not_touch_instructor(rng):
    model = build(tiny_cfg(), np.random.default_rng(0))
    inst = build_instructor(np.random.default_rng(1), filters=(2, 2, 2))
    inst_before = [p.data.tobytes() for p in inst.parameters()]
    gen_before = [p.data.tobytes() for p in model.parameters()]
    x, y = _batch(rng)
    train_step(model, inst, x, y, LossMode(), Optimizer(model.parameters(), lr=1e-2),
               Optimizer(inst.parameters(), lr=1e-2), np.random.default_rng(0))
    assert [p.data.tobytes() for p in inst.parameters()] == inst_before
    assert [p.data.tobytes() for p in model.parameters()] != gen_before


def test_adversarial_mode_updates_both(rng):
    model = build(tiny_cfg(), np.random.default_rng(0))
    inst = build_instructor(np.random.default_rng(1), filters=(2, 2, 2))
    snap = lambda ps: [p.data.tobytes() for p in ps]
    gb, ib = snap(model.parameters()), snap(inst.parameters())
    x, y = _batch(rng)
    train_step(model, inst, x, y, LossMode("adversarial"), Optimizer(model.parameters(), lr=1e-2),
               Optimizer(inst.parameters(), lr=1e-2), np.random.default_rng(0))
    assert snap(model.parameters()) != gb and snap(inst.parameters()) != ib


def test_generator_step_raises_instructor_score(rng):
    # the generator descends mean log(1 - I(V(x))), so a small step fools the instructor more
    with default_dtype(np.float64):
        model = build(tiny_cfg(), np.random.default_rng(0))
        inst = build_instructor(np.random.default_rng(1), filters=(2, 2, 2))
        x = Tensor(rng.uniform(0, 1, (2, 3, 1, 8, 8)))
        score = lambda: instructor_score(inst, forward(model, x, mode="train")).data.mean()
        before = score()
        model.zero_grad()
        generator_adversarial_term(inst, forward(model, x, mode="train")).backward()
        Optimizer(model.parameters(), "sgd", lr=1e-2).step()
        assert score() > before


def test_duplicated_sample_matches_single(rng):
    with default_dtype(np.float64):
        x, y = _batch(rng, 1)
        results = []
        for xs, ys in ((x, y), (np.concatenate([x, x]), np.concatenate([y, y]))):
            model = build(tiny_cfg(), np.random.default_rng(0))
            train_step(model, None, xs.astype(np.float64), ys.astype(np.float64), LossMode(),
                       Optimizer(model.parameters(), "sgd", lr=0.1), None, np.random.default_rng(0))
            results.append([p.data.copy() for p in model.parameters()])
    for a, b in zip(*results):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-13)


def test_non_finite_loss_aborts_step(rng):
    model = build(tiny_cfg(), np.random.default_rng(0))
    before = [p.data.tobytes() for p in model.parameters()]
    x, y = _batch(rng)
    y[0, 0, 0, 0, 0] = np.nan
    with pytest.raises(NonFiniteError):
        train_step(model, None, x, y, LossMode(), Optimizer(model.parameters(), lr=1e-2), None,
                   np.random.default_rng(0))
    assert [p.data.tobytes() for p in model.parameters()] == before


def test_adversarial_without_instructor(rng):
    model = build(tiny_cfg(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        Trainer(model, TrainConfig(loss_mode="adversarial"), *_batch(rng))


# -- trainer ------------------------------------------------------------------


def test_batch_indices_partition_epochs():
    n, bs = 10, 3
    per_epoch = n // bs
    for epoch in range(3):
        seen = np.concatenate([batch_indices(5, epoch * per_epoch + k, n, bs) for k in range(per_epoch)])
        assert len(set(seen.tolist())) == len(seen) == per_epoch * bs
    assert batch_indices(5, 7, n, bs).tolist() == batch_indices(5, 7, n, bs).tolist()
    assert len(batch_indices(0, 0, 2, 4)) == 2


def _trainer(rng_seed=0, **kw):
    rng = np.random.default_rng(9)
    x = rng.uniform(0, 1, (6, 3, 1, 8, 8)).astype(np.float32)
    cfg = TrainConfig(batch_size=2, steps=4, seed=rng_seed, **kw)
    model = build(tiny_cfg(max_rotation_deg=15.0), np.random.default_rng(rng_seed))
    inst = build_instructor(np.random.default_rng(1), filters=(2, 2, 2)) if cfg.mode.adversarial else None
    return Trainer(model, cfg, x, np.roll(x, -1, axis=1), inst)


@pytest.mark.parametrize("mode", ["reconstruction", "adversarial+reconstruction"])
def test_trainer_runs_reproduce(mode):
    a = _trainer(loss_mode=mode).run()
    b = _trainer(loss_mode=mode).run()
    assert a == b
    assert [r["step"] for r in a] == [1, 2, 3, 4]
    assert "wall_ms" not in a[0]


def test_trainer_log_every_and_wall_time():
    recs = _trainer(log_every=3).run(record_wall_time=True)
    assert [r["step"] for r in recs] == [3, 4]
    assert all(r["wall_ms"] >= 0 for r in recs)


def test_trainer_split_run_equals_whole():
    whole = _trainer().run()
    t = _trainer()
    first = t.run(steps=2)
    state = t.rng_state()
    t.set_rng_state(state)
    assert first + t.run() == whole
