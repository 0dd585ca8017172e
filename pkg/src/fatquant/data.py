"""Dataset ingestion: IDX files and calibration-subset selection."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import BadMagic, KTooLarge, NonFiniteInput, Truncated

# IDX type codes -> numpy big-endian dtypes
_IDX_DTYPES = {
    0x08: ">u1",
    0x09: ">i1",
    0x0B: ">i2",
    0x0C: ">i4",
    0x0D: ">f4",
    0x0E: ">f8",
}
_IDX_CODES = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_DTYPES.items()}


@dataclass
class Dataset:
    """Images in [N, C, H, W]; labels optional (calibration data has none)."""

    images: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if not np.all(np.isfinite(self.images)):
            raise NonFiniteInput("dataset images contain non-finite values")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.images.shape[0],):
                raise ValueError("labels length must match image count")

    def __len__(self) -> int:
        return int(self.images.shape[0])


def read_idx(path: str | Path, normalize: bool = True) -> np.ndarray:
    """Decode an IDX file. Unsigned-byte payloads are scaled to [0, 1] reals
    unless ``normalize`` is False (labels)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise Truncated(f"{path}: {len(raw)} bytes is too short for an IDX header")
    if raw[0] != 0 or raw[1] != 0:
        raise BadMagic(f"{path}: first two bytes must be zero")
    code, ndim = raw[2], raw[3]
    if code not in _IDX_DTYPES:
        raise BadMagic(f"{path}: unknown IDX type code 0x{code:02x}")
    if ndim == 0:
        raise BadMagic(f"{path}: zero-dimensional IDX")
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise Truncated(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    dtype = np.dtype(_IDX_DTYPES[code])
    count = int(np.prod(dims))
    expect = header_len + count * dtype.itemsize
    if len(raw) < expect:
        raise Truncated(f"{path}: payload needs {expect} bytes, file has {len(raw)}")
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=header_len)
    arr = arr.reshape(dims)
    if code == 0x08 and normalize:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.int64 if code in (0x08, 0x09, 0x0B, 0x0C) else np.float64)


def write_idx(path: str | Path, arr: np.ndarray) -> None:
    """Encode an array as IDX (big-endian payload)."""
    arr = np.asarray(arr)
    code = _IDX_CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise ValueError(f"dtype {arr.dtype} has no IDX type code")
    with open(path, "wb") as f:
        f.write(bytes([0, 0, code, arr.ndim]))
        f.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        f.write(np.ascontiguousarray(arr, dtype=_IDX_DTYPES[code]).tobytes())


def load_dataset(images_path: str | Path, labels_path: str | Path | None = None) -> Dataset:
    """Load an image IDX (plus optional label IDX) into a Dataset."""
    images = read_idx(images_path)
    if images.ndim == 3:
        images = images[:, None, :, :]
    if images.ndim != 4:
        raise ValueError(f"image file must be 3- or 4-dimensional, got {images.ndim}")
    labels = None
    if labels_path is not None:
        labels = read_idx(labels_path, normalize=False)
        if labels.ndim != 1:
            raise ValueError("label file must be one-dimensional")
    return Dataset(images=np.asarray(images, dtype=np.float64), labels=labels)


def select_calibration(ds: Dataset, k: int, seed: int) -> Dataset:
    """Seeded uniform sample of k images without replacement; labels dropped."""
    n = len(ds)
    if k > n:
        raise KTooLarge(f"requested {k} calibration images from a set of {n}")
    if k < 1:
        raise ValueError("k must be positive")
    rng = np.random.default_rng(seed)
    idx = rng.permutation(n)[:k]
    return Dataset(images=ds.images[idx].copy(), labels=None)


def iter_batches(ds: Dataset, batch_size: int):
    """Sequential batches over the dataset images."""
    for start in range(0, len(ds), batch_size):
        yield ds.images[start : start + batch_size]
