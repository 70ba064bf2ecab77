"""Backend agreement: the numba and numpy kernels compute the same things."""

import os
import subprocess
import sys

import numpy as np
import pytest

from vapaad import _kernels as K

needs_numba = pytest.mark.skipif("numba" not in K.available_backends(), reason="numba not installed")


@pytest.fixture
def backend():
    prev = K.get_backend()
    yield K.set_backend
    K.set_backend(prev)


def dense_attention(q, k, v, g, scale):
    """Reference with the full (P, P) weight matrix in float64."""
    q, k, v, g = (a.astype(np.float64) for a in (q, k, v, g))
    s = np.matmul(q.transpose(0, 2, 1), k) * scale
    a = np.exp(s - s.max(-1, keepdims=True))
    a /= a.sum(-1, keepdims=True)
    out = np.matmul(v, a.transpose(0, 2, 1))
    dv = np.matmul(g, a)
    da = np.matmul(g.transpose(0, 2, 1), v)
    ds = a * (da - (da * a).sum(-1, keepdims=True)) * scale
    return out, np.matmul(k, ds.transpose(0, 2, 1)), np.matmul(q, ds), dv


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 2e-6)])
@pytest.mark.parametrize("shape", [(3, 4, 20), (2, 3, 7), (1, 1, 1), (2, 8, 33)])
@pytest.mark.parametrize("name", K.available_backends())
def test_attention_matches_dense_reference(backend, name, shape, dtype, tol):
    backend(name)
    rng = np.random.default_rng(0)
    q, k, v, g = (rng.standard_normal(shape).astype(dtype) for _ in range(4))
    scale = 1 / np.sqrt(shape[1])
    want = dense_attention(q, k, v, g, scale)
    out, stats = K.attention_forward(q, k, v, scale)
    got = (out,) + K.attention_backward(q, k, v, out, stats, g, scale)
    for w, x in zip(want, got):
        assert np.abs(w - x).max() <= tol * max(np.abs(w).max(), 1.0)
    dq, dk, dv = K.attention_backward(q, k, v, out, stats, g, scale, stop_qk=True)
    assert dq is None and dk is None
    np.testing.assert_allclose(dv, got[3], rtol=tol, atol=tol)


@needs_numba
def test_conv_forward_bitwise_equal_across_backends(backend):
    rng = np.random.default_rng(1)
    for dtype in (np.float32, np.float64):
        xp = rng.standard_normal((2, 3, 4, 9, 9)).astype(dtype)
        w = rng.standard_normal((4, 3, 3, 3, 3)).astype(dtype)
        outs = []
        for name in ("numpy", "numba"):
            backend(name)
            outs.append(K.conv_forward(xp, w, (1, 2, 2), (2, 4, 4)))
        np.testing.assert_array_equal(*outs)


@needs_numba
def test_im2col_col2im_and_rotation_agree(backend):
    rng = np.random.default_rng(2)
    xp = rng.standard_normal((2, 2, 1, 7, 7))
    frames = rng.standard_normal((3, 8, 8))
    ang = rng.uniform(-1, 1, 3)
    res = {}
    for name in ("numpy", "numba"):
        backend(name)
        cols = K.im2col(xp, (1, 3, 3), (1, 1, 1), (1, 5, 5))
        res[name] = (cols, K.col2im(cols, xp.shape, (1, 3, 3), (1, 1, 1), (1, 5, 5)),
                     K.rotate(frames, ang), K.rotate_adjoint(frames, ang))
    for a, b in zip(res["numpy"], res["numba"]):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("name", K.available_backends())
def test_rotation_adjoint_identity(backend, name):
    backend(name)
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 6, 6))
    y = rng.standard_normal((2, 6, 6))
    ang = np.array([0.3, -1.1])
    lhs = (K.rotate(x, ang) * y).sum()
    rhs = (x * K.rotate_adjoint(y, ang)).sum()
    assert abs(lhs - rhs) < 1e-12


@pytest.mark.parametrize("name", K.available_backends())
def test_rotation_quarter_turn_is_rot90(backend, name):
    backend(name)
    x = np.arange(16.0).reshape(1, 4, 4)
    np.testing.assert_allclose(K.rotate(x, [np.pi / 2]), np.rot90(x, axes=(1, 2)), atol=1e-12)


def test_env_flag_selects_numpy():
    env = dict(os.environ, VAPAAD_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", "from vapaad import _kernels as K; print(K.get_backend())"],
                         capture_output=True, text=True, env=env, check=True)
    assert out.stdout.strip() == "numpy"


def test_unknown_backend():
    with pytest.raises(ValueError):
        K.set_backend("cuda")
