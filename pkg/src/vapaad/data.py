"""Moving MNIST ingestion: NPY container, shifted pairs, splits, fetching.

The dataset ships as a single ``.npy`` file of shape ``(20, N, 64, 64)``
holding uint8 frames, time first.  Only the subset of the NPY format that
file needs is supported: version 1.0, C order, little-endian ``u1``,
``f4`` or ``f8``.
"""

from __future__ import annotations

import ast
import contextlib
import fcntl
import hashlib
import logging
import os
import threading
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from ._fileio import atomic_write as _atomic_write

log = logging.getLogger(__name__)

MAGIC = b"\x93NUMPY"
MOVING_MNIST_URL = "http://www.cs.toronto.edu/~nitish/unsupervised_video/mnist_test_seq.npy"
CACHE_SUBDIR = "moving_mnist"
CACHE_NAME = "mnist_test_seq.npy"

# accepted descr strings and the dtype they map to
_DTYPES = {
    "|u1": np.dtype("u1"),
    "<u1": np.dtype("u1"),
    "<f4": np.dtype("<f4"),
    "<f8": np.dtype("<f8"),
}
_DESCR_OUT = {np.dtype("u1"): "|u1", np.dtype("<f4"): "<f4", np.dtype("<f8"): "<f8"}


class NpyFormatError(ValueError):
    """The bytes are not an NPY file this reader accepts."""


class DatasetUnavailableError(RuntimeError):
    pass


class ChecksumMismatchError(DatasetUnavailableError):
    pass


@dataclass
class NpyArray:
    """A parsed NPY file.

    ``header`` holds the header bytes exactly as read (everything between
    the 10-byte prefix and the data) so writing back reproduces the input
    byte for byte.  Arrays built in memory get a canonical header.
    """

    dtype: np.dtype
    shape: tuple
    data: Union[bytes, memoryview, np.ndarray]
    fortran_order: bool = False
    header: Optional[bytes] = None

    def __post_init__(self):
        if self.fortran_order:
            raise NpyFormatError("fortran_order=True arrays are not supported")
        expect = self.dtype.itemsize * int(np.prod(self.shape, dtype=np.int64))
        got = self.data.nbytes if isinstance(self.data, (memoryview, np.ndarray)) else len(self.data)
        if got != expect:
            raise NpyFormatError(f"buffer holds {got} bytes, shape {self.shape} of {self.dtype} "
                                 f"needs {expect}")

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "NpyArray":
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in _DESCR_OUT:
            raise NpyFormatError(f"unsupported dtype {arr.dtype}; use uint8, float32 or float64")
        arr = np.require(arr, dtype=dt, requirements="C")
        return cls(dt, tuple(arr.shape), arr.reshape(-1).view(np.uint8))

    def array(self) -> np.ndarray:
        """Zero-copy (read-only for bytes input) view of the elements."""
        if isinstance(self.data, np.ndarray) and self.data.dtype == self.dtype:
            return self.data.reshape(self.shape)
        return np.frombuffer(self.data, dtype=self.dtype).reshape(self.shape)


def _header_text(dtype: np.dtype, shape: tuple) -> bytes:
    d = f"{{'descr': '{_DESCR_OUT[dtype]}', 'fortran_order': False, 'shape': {tuple(shape)!r}, }}"
    # numpy leaves room for the leading axis to grow to 21 digits in place
    if shape:
        d += " " * (21 - len(repr(shape[0])))
    total = 10 + len(d) + 1
    return (d + " " * ((-total) % 64) + "\n").encode("latin1")


def _parse_header(prefix: bytes) -> tuple:
    """Validate the first bytes of a file; return ``(header_len, dict, raw_header)``."""
    if len(prefix) < 10:
        raise NpyFormatError(f"truncated: {len(prefix)} bytes is shorter than the NPY prefix")
    if prefix[:6] != MAGIC:
        raise NpyFormatError(f"bad magic {prefix[:6]!r}; expected {MAGIC!r}")
    major, minor = prefix[6], prefix[7]
    if (major, minor) != (1, 0):
        raise NpyFormatError(f"NPY version {major}.{minor} is not supported (only 1.0)")
    hlen = int.from_bytes(prefix[8:10], "little")
    if len(prefix) < 10 + hlen:
        raise NpyFormatError(f"truncated header: need {10 + hlen} bytes, have {len(prefix)}")
    raw = bytes(prefix[10:10 + hlen])
    try:
        meta = ast.literal_eval(raw.decode("latin1").strip())
    except (ValueError, SyntaxError) as exc:
        raise NpyFormatError(f"unreadable header: {exc}") from None
    if not isinstance(meta, dict) or set(meta) != {"descr", "fortran_order", "shape"}:
        raise NpyFormatError(f"header must have exactly descr, fortran_order, shape; got {meta!r}")
    descr = meta["descr"]
    if descr not in _DTYPES:
        raise NpyFormatError(f"unsupported dtype {descr!r}; accepted: {sorted(_DTYPES)}")
    if meta["fortran_order"] is not False:
        if meta["fortran_order"] is True:
            raise NpyFormatError("fortran_order=True arrays are not supported")
        raise NpyFormatError(f"fortran_order must be a bool, got {meta['fortran_order']!r}")
    shape = meta["shape"]
    if not isinstance(shape, tuple) or not all(isinstance(d, int) and d >= 0 for d in shape):
        raise NpyFormatError(f"bad shape {shape!r}")
    return hlen, {"dtype": _DTYPES[descr], "shape": shape}, raw


def parse_npy(buf: Union[bytes, bytearray, memoryview]) -> NpyArray:
    """Parse a complete NPY v1.0 file held in memory."""
    buf = memoryview(buf).cast("B")
    hlen, meta, raw = _parse_header(bytes(buf[:10 + 65535]))
    start = 10 + hlen
    need = meta["dtype"].itemsize * int(np.prod(meta["shape"], dtype=np.int64))
    have = len(buf) - start
    if have < need:
        raise NpyFormatError(f"truncated data: need {need} bytes, have {have}")
    if have > need:
        raise NpyFormatError(f"{have - need} trailing bytes after the array data")
    return NpyArray(meta["dtype"], meta["shape"], bytes(buf[start:]), header=raw)


def write_npy(arr: NpyArray) -> bytes:
    header = arr.header if arr.header is not None else _header_text(arr.dtype, arr.shape)
    data = arr.data.tobytes() if isinstance(arr.data, np.ndarray) else bytes(arr.data)
    return MAGIC + b"\x01\x00" + len(header).to_bytes(2, "little") + header + data


def load_npy(path: Union[str, Path], mmap: bool = True) -> NpyArray:
    """Read an NPY file; with ``mmap`` the data is a read-only memory map."""
    path = Path(path)
    with open(path, "rb") as fh:
        prefix = fh.read(10)
        if len(prefix) == 10 and prefix[:6] == MAGIC:
            prefix += fh.read(int.from_bytes(prefix[8:10], "little"))
        hlen, meta, raw = _parse_header(prefix)
    start = 10 + hlen
    need = meta["dtype"].itemsize * int(np.prod(meta["shape"], dtype=np.int64))
    have = path.stat().st_size - start
    if have != need:
        kind = "truncated data" if have < need else "trailing bytes"
        raise NpyFormatError(f"{kind} in {path}: need {need} bytes, have {have}")
    if mmap and need > 0:
        data = np.memmap(path, dtype=np.uint8, mode="r", offset=start, shape=(need,))
    else:
        with open(path, "rb") as fh:
            fh.seek(start)
            data = fh.read()
    return NpyArray(meta["dtype"], meta["shape"], data, header=raw)


def save_npy(path: Union[str, Path], arr: NpyArray) -> None:
    _atomic_write(Path(path), write_npy(arr))


# --------------------------------------------------------------------------
# shifted pairs and splits
# --------------------------------------------------------------------------


@dataclass
class SequenceDataset:
    """Input/target pairs; ``x[i, t+1]`` is the same frame as ``y[i, t]``.

    Both arrays are float32 of shape ``(N, T, 1, H, W)`` with values in [0, 1].
    """

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if self.x.shape != self.y.shape:
            raise ValueError(f"x {self.x.shape} and y {self.y.shape} differ")
        if self.x.ndim != 5 or self.x.shape[2] != 1:
            raise ValueError(f"expected (N, T, 1, H, W), got {self.x.shape}")

    def __len__(self) -> int:
        return len(self.x)

    @property
    def frame_size(self) -> tuple:
        return tuple(self.x.shape[-2:])

    def subset(self, idx) -> "SequenceDataset":
        return SequenceDataset(self.x[idx], self.y[idx])


def _frames(raw) -> np.ndarray:
    a = raw.array() if isinstance(raw, NpyArray) else np.asarray(raw)
    if a.ndim != 4:
        raise ValueError(f"raw frames must be (frames, sequences, H, W), got shape {a.shape}")
    return a


def make_shifted_pairs(raw, n_sequences: Optional[int] = 1000) -> SequenceDataset:
    """Pair frames ``0..F-2`` with ``1..F-1`` for the first ``n_sequences``.

    uint8 input is scaled by 1/255; float input must already lie in [0, 1].
    x and y are views into one array of all frames.
    """
    a = _frames(raw)
    frames, n_total = a.shape[:2]
    if frames < 2:
        raise ValueError(f"need at least 2 frames per sequence, got {frames}")
    n = n_total if n_sequences is None else int(n_sequences)
    if n > n_total:
        raise ValueError(f"asked for {n} sequences but the data holds {n_total}")
    if n < 1:
        raise ValueError("n_sequences must be >= 1")
    seq = np.ascontiguousarray(a[:, :n].transpose(1, 0, 2, 3))
    if seq.dtype == np.uint8:
        full = seq.astype(np.float32) / np.float32(255.0)
    else:
        full = seq.astype(np.float32)
        if full.size and (full.min() < 0.0 or full.max() > 1.0):
            raise ValueError("float frames must lie in [0, 1]")
    full = full[:, :, None]
    return SequenceDataset(full[:, :-1], full[:, 1:])


def downscale(frames: np.ndarray, factor: int = 2) -> np.ndarray:
    """Average-pool the last two axes by ``factor``."""
    h, w = frames.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"frame size {h}x{w} is not divisible by {factor}")
    shp = frames.shape[:-2] + (h // factor, factor, w // factor, factor)
    return frames.reshape(shp).mean(axis=(-3, -1), dtype=np.float64).astype(frames.dtype)


def downscale_dataset(ds: SequenceDataset, factor: int = 2) -> SequenceDataset:
    # pool the shared frame array once so x and y stay views of it
    full = np.concatenate([ds.x, ds.y[:, -1:]], axis=1)
    small = downscale(full, factor)
    return SequenceDataset(small[:, :-1], small[:, 1:])


def split(ds: SequenceDataset, test_fraction: float = 0.1, seed: int = 0) -> tuple:
    """Seeded random partition into ``(train, val)``."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n = len(ds)
    n_val = int(round(n * test_fraction))
    if n_val == 0 or n_val == n:
        raise ValueError(f"fraction {test_fraction} of {n} sequences leaves an empty side")
    perm = np.random.default_rng(seed).permutation(n)
    val_idx, train_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    return ds.subset(train_idx), ds.subset(val_idx)


def split_indices(n: int, test_fraction: float, seed: int) -> tuple:
    n_val = int(round(n * test_fraction))
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


# --------------------------------------------------------------------------
# synthetic stand-in
# --------------------------------------------------------------------------


def _glyph(rng: np.random.Generator, size: int) -> np.ndarray:
    # a "digit": a few random bright strokes inside a size x size box
    g = np.zeros((size, size), dtype=np.uint8)
    for _ in range(rng.integers(3, 6)):
        horiz = rng.random() < 0.5
        thick = int(rng.integers(2, max(3, size // 6)))
        long_ = int(rng.integers(size // 2, size))
        h, w = (thick, long_) if horiz else (long_, thick)
        r = int(rng.integers(0, size - h + 1))
        c = int(rng.integers(0, size - w + 1))
        g[r:r + h, c:c + w] = rng.integers(180, 256)
    return g


def synthetic_moving_mnist(n_sequences: int = 64, frames: int = 20, size: int = 64,
                           digit: int = 28, n_digits: int = 2, seed: int = 0) -> np.ndarray:
    """Two rectangle glyphs bouncing inside the frame, shape ``(frames, n, size, size)`` uint8."""
    if digit > size:
        raise ValueError("digit box larger than the frame")
    rng = np.random.default_rng(seed)
    out = np.zeros((frames, n_sequences, size, size), dtype=np.uint8)
    lim = size - digit
    for s in range(n_sequences):
        for _ in range(n_digits):
            g = _glyph(rng, digit)
            pos = rng.uniform(0, lim, size=2)
            theta = rng.uniform(0, 2 * np.pi)
            vel = np.array([np.sin(theta), np.cos(theta)]) * rng.uniform(2.0, 4.0)
            for t in range(frames):
                r, c = int(round(pos[0])), int(round(pos[1]))
                np.maximum(out[t, s, r:r + digit, c:c + digit], g,
                           out=out[t, s, r:r + digit, c:c + digit])
                pos += vel
                for k in range(2):
                    if pos[k] < 0:
                        pos[k], vel[k] = -pos[k], -vel[k]
                    elif pos[k] > lim:
                        pos[k], vel[k] = 2 * lim - pos[k], -vel[k]
    return out


# --------------------------------------------------------------------------
# fetching and caching
# --------------------------------------------------------------------------


_locks_guard = threading.Lock()
_locks: dict = {}


@contextlib.contextmanager
def _single_flight(target: Path):
    """Serialize fetches of one file across threads and processes."""
    with _locks_guard:
        lock = _locks.setdefault(str(target), threading.Lock())
    target.parent.mkdir(parents=True, exist_ok=True)
    with lock, open(str(target) + ".lock", "a") as fh:
        fcntl.flock(fh.fileno(), fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(fh.fileno(), fcntl.LOCK_UN)


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 22), b""):
            h.update(chunk)
    return h.hexdigest()


def _read_sidecar(path: Path) -> Optional[tuple]:
    side = Path(str(path) + ".sha256")
    if not side.exists():
        return None
    parts = side.read_text().split()
    if len(parts) < 2:
        return None
    return parts[0], int(parts[1])


def cache_path(cache_dir: Union[str, Path]) -> Path:
    return Path(cache_dir) / CACHE_SUBDIR / CACHE_NAME


def _verify_cached(path: Path, expected_sha256: Optional[str]) -> bool:
    """True if a complete, checksummed copy is cached; raises on corruption."""
    if not path.exists():
        return False
    meta = _read_sidecar(path)
    if meta is None:
        return False
    digest, size = meta
    if path.stat().st_size != size:
        raise ChecksumMismatchError(f"{path}: size {path.stat().st_size} != recorded {size}")
    actual = _sha256_file(path)
    if actual != digest:
        raise ChecksumMismatchError(f"{path}: sha256 {actual} != recorded {digest}")
    if expected_sha256 is not None and actual != expected_sha256:
        raise ChecksumMismatchError(f"{path}: sha256 {actual} != expected {expected_sha256}")
    return True


def _download(url: str, timeout: float) -> bytes:
    with urllib.request.urlopen(url, timeout=timeout) as resp:
        return resp.read()


def fetch_dataset(source: str = "auto", cache_dir: Union[str, Path, None] = None,
                  expected_sha256: Optional[str] = None, synthetic_sequences: int = 64,
                  seed: int = 0, timeout: float = 60.0, downloader=None) -> NpyArray:
    """Return the raw ``(20, N, 64, 64)`` frame array.

    ``source`` is one of:

    * a filesystem path: loaded directly, nothing is cached or downloaded;
    * an ``http(s)://`` URL: downloaded once into
      ``<cache_dir>/moving_mnist/mnist_test_seq.npy`` with a ``.sha256``
      sidecar holding digest and length, then served from the cache;
    * ``"synthetic"``: bouncing-rectangle sequences generated in memory;
    * ``"auto"``: the cached file if present, otherwise synthetic.  Never
      touches the network.
    """
    if source == "synthetic":
        return NpyArray.from_array(synthetic_moving_mnist(synthetic_sequences, seed=seed))
    if cache_dir is None:
        cache_dir = Path(os.environ.get("VAPAAD_CACHE", Path.home() / ".cache" / "vapaad"))
    target = cache_path(cache_dir)
    if source == "auto":
        if _verify_cached(target, expected_sha256):
            return load_npy(target)
        log.info("no cached dataset at %s; using the synthetic generator", target)
        return fetch_dataset("synthetic", synthetic_sequences=synthetic_sequences, seed=seed)
    if source.startswith(("http://", "https://")):
        get = downloader or _download
        with _single_flight(target):
            if _verify_cached(target, expected_sha256):
                return load_npy(target)
            try:
                payload = get(source, timeout)
            except OSError as exc:
                raise DatasetUnavailableError(f"download of {source} failed and the cache is empty: "
                                              f"{exc}") from exc
            digest = hashlib.sha256(payload).hexdigest()
            if expected_sha256 is not None and digest != expected_sha256:
                raise ChecksumMismatchError(f"downloaded sha256 {digest} != expected {expected_sha256}")
            parse_npy(payload)  # refuse to cache garbage
            _atomic_write(target, payload)
            _atomic_write(Path(str(target) + ".sha256"), f"{digest} {len(payload)}\n".encode())
        return load_npy(target)
    path = Path(source)
    if not path.exists():
        raise DatasetUnavailableError(f"no such dataset file: {path}")
    return load_npy(path)


def desk_dataset(raw, n_sequences: int = 16, factor: int = 2) -> SequenceDataset:
    """The small preset: first ``n_sequences`` sequences, average-pooled by ``factor``."""
    return downscale_dataset(make_shifted_pairs(raw, n_sequences), factor)
