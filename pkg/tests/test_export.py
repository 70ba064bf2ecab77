import numpy as np
import pytest

from vapaad import export as E
from vapaad.data import make_shifted_pairs, synthetic_moving_mnist


def test_quantize_rounding():
    assert E.quantize([0.0, 0.5, 1.0]).tolist() == [0, 128, 255]
    assert E.quantize([1 / 255, 254.5 / 255]).tolist() == [1, 255]
    with pytest.raises(ValueError):
        E.quantize([1.2])
    with pytest.raises(ValueError):
        E.quantize([np.nan])


def test_pgm_header_and_round_trip():
    img = np.arange(64 * 64, dtype=np.uint32).reshape(64, 64).astype(np.uint8)
    b = E.encode_pgm(img)
    assert b.startswith(b"P5 64 64 255\n")
    assert len(b) == len(b"P5 64 64 255\n") + 64 * 64
    assert np.array_equal(E.decode_pgm(b), img)


def test_pgm_rejects():
    with pytest.raises(ValueError):
        E.encode_pgm(np.zeros((2, 2, 2), np.uint8))
    with pytest.raises(ValueError):
        E.decode_pgm(b"P6 1 1 255\n\x00")
    with pytest.raises(ValueError):
        E.decode_pgm(b"P5 2 2 255\n\x00")


def test_export_dataset_frames_round_trip(tmp_path):
    raw = synthetic_moving_mnist(1, seed=0)
    ds = make_shifted_pairs(raw, 1)
    paths = E.export_frames(ds.x[0], tmp_path)
    assert [p.name for p in paths] == [f"frame_{i:03d}.pgm" for i in range(19)]
    for t, p in enumerate(paths):
        assert np.array_equal(E.decode_pgm(p.read_bytes()), raw[t, 0])


def test_export_naming_offset(tmp_path):
    paths = E.export_frames(np.zeros((2, 3, 3)), tmp_path, prefix="pred", start=999)
    assert [p.name for p in paths] == ["pred_0999.pgm", "pred_1000.pgm"]


def test_strip_layout(tmp_path):
    top = np.zeros((3, 1, 4, 4))
    bottom = np.ones((2, 1, 4, 4))
    img = E.decode_pgm(E.export_strip(top, bottom, tmp_path / "s.pgm").read_bytes())
    assert img.shape == (9, 3 * 5 - 1)
    assert img[5:, :4].min() == 255 and img[:4].max() == 0
    with pytest.raises(ValueError):
        E.export_strip(top, np.ones((1, 1, 5, 5)), tmp_path / "t.pgm")


def test_png_optional(tmp_path):
    try:
        import PIL  # noqa: F401
    except ImportError:
        with pytest.raises(RuntimeError, match="Pillow"):
            E.export_frames(np.zeros((1, 2, 2)), tmp_path, fmt="png")
    else:
        p = E.export_frames(np.zeros((1, 2, 2)), tmp_path, fmt="png")[0]
        assert p.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    with pytest.raises(ValueError):
        E.export_frames(np.zeros((1, 2, 2)), tmp_path, fmt="bmp")
