"""Time the numba kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N] [--quick]

Each row is the best of ``--repeat`` runs after one warm-up call (which also
absorbs numba compilation).  Shapes follow the desk preset: batch 4,
19 frames, 8 filters, 32x32.
"""

import argparse
import time

import numpy as np

from vapaad import _kernels
from vapaad.config import load_run_config
from vapaad.model import build
from vapaad.training import Trainer


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(b, t, f, side, rng):
    m, p = b * t, side * side
    q, k, v = (rng.standard_normal((m, f, p)).astype(np.float32) for _ in range(3))
    g = rng.standard_normal((m, f, p)).astype(np.float32)
    scale = 1.0 / np.sqrt(f)
    xp = rng.standard_normal((m, 2 * f, 1, side + 2, side + 2)).astype(np.float32)
    w = rng.standard_normal((4 * f, 2 * f, 1, 3, 3)).astype(np.float32)
    sp = (1, side, side)
    frames = rng.random((m, side, side)).astype(np.float32)
    angles = rng.uniform(-np.pi, np.pi, m)

    def att_bwd():
        out, stats = _kernels.attention_forward(q, k, v, scale)
        _kernels.attention_backward(q, k, v, out, stats, g, scale)

    return {
        "conv_forward (gates)": lambda: _kernels.conv_forward(xp, w, (1, 1, 1), sp),
        "im2col + col2im": lambda: _kernels.col2im(_kernels.im2col(xp, (1, 3, 3), (1, 1, 1), sp),
                                                   xp.shape, (1, 3, 3), (1, 1, 1), sp),
        "attention forward": lambda: _kernels.attention_forward(q, k, v, scale),
        "attention fwd+bwd": att_bwd,
        "rotate + adjoint": lambda: _kernels.rotate_adjoint(_kernels.rotate(frames, angles), angles),
    }


def step_case(steps):
    cfg = load_run_config(None, desk_scale=True)
    rng = np.random.default_rng(0)
    n = 8
    x = rng.random((n, 19, 1, 32, 32)).astype(np.float32)
    y = rng.random((n, 19, 1, 32, 32)).astype(np.float32)
    trainer = Trainer(build(cfg.model, np.random.default_rng(0)), cfg.train, x, y)
    return lambda: [trainer.train_step() for _ in range(steps)]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true", help="batch 1 and skip the training step")
    args = ap.parse_args()

    backends = _kernels.available_backends()
    if "numba" not in backends:
        print("numba is not installed; only the numpy backend is available")
    b = 1 if args.quick else 4
    rows = {}
    for name in backends:
        _kernels.set_backend(name)
        cases = kernel_cases(b, 19, 8, 32, np.random.default_rng(0))
        if not args.quick:
            cases["training step"] = step_case(1)
        for label, fn in cases.items():
            rows.setdefault(label, {})[name] = best_of(fn, args.repeat if label != "training step" else 2)

    print(f"{'kernel':<22}" + "".join(f"{n:>12}" for n in backends)
          + ("     speedup" if len(backends) > 1 else ""))
    for label, times in rows.items():
        line = f"{label:<22}" + "".join(f"{times[n] * 1e3:>10.1f}ms" for n in backends)
        if len(backends) > 1:
            line += f"{times['numpy'] / times['numba']:>11.2f}x"
        print(line)


if __name__ == "__main__":
    main()
