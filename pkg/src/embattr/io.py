"""Dataset ingestion (IDX) and artifact writers (PGM, CSV, manifests)."""

from __future__ import annotations

import csv
import gzip
import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxError(ValueError):
    """Base class for malformed IDX files."""


class BadMagicError(IdxError):
    pass


class TruncatedFileError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


class LabelRangeError(IdxError):
    pass


@dataclass
class IdxDataset:
    images: np.ndarray  # (n, rows, cols) float64 in [0, 1]
    labels: np.ndarray  # (n,) uint8 in 0..9

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "IdxDataset":
        return IdxDataset(self.images[idx], self.labels[idx])


def _read(path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    if not path.exists() and path.with_name(path.name + ".gz").exists():
        return _read(path.with_name(path.name + ".gz"))
    return path.read_bytes()


def parse_idx_images(data: bytes) -> np.ndarray:
    if len(data) < 16:
        raise TruncatedFileError("image file shorter than its 16-byte header")
    magic, n, rows, cols = struct.unpack(">IIII", data[:16])
    if magic != IMAGE_MAGIC:
        raise BadMagicError(f"image file magic {magic} != {IMAGE_MAGIC}")
    need = 16 + n * rows * cols
    if len(data) < need:
        raise TruncatedFileError(f"image file has {len(data)} bytes, header promises {need}")
    px = np.frombuffer(data, dtype=np.uint8, count=n * rows * cols, offset=16)
    return px.reshape(n, rows, cols).astype(np.float64) / 255.0


def parse_idx_labels(data: bytes) -> np.ndarray:
    if len(data) < 8:
        raise TruncatedFileError("label file shorter than its 8-byte header")
    magic, n = struct.unpack(">II", data[:8])
    if magic != LABEL_MAGIC:
        raise BadMagicError(f"label file magic {magic} != {LABEL_MAGIC}")
    if len(data) < 8 + n:
        raise TruncatedFileError(f"label file has {len(data)} bytes, header promises {8 + n}")
    labels = np.frombuffer(data, dtype=np.uint8, count=n, offset=8).copy()
    if labels.size and labels.max() > 9:
        raise LabelRangeError(f"label {int(labels.max())} outside 0..9")
    return labels


def load_idx(images_path, labels_path) -> IdxDataset:
    """Read an IDX image/label pair (optionally gzipped); pixels scaled to [0, 1]."""
    images = parse_idx_images(_read(images_path))
    labels = parse_idx_labels(_read(labels_path))
    if len(images) != len(labels):
        raise CountMismatchError(f"{len(images)} images but {len(labels)} labels")
    return IdxDataset(images, labels)


def load_mnist(directory, split: str = "train") -> IdxDataset:
    img, lab = MNIST_FILES[split]
    d = Path(directory)
    return load_idx(d / img, d / lab)


def find_mnist(directory=None) -> Path | None:
    """Locate a directory holding the MNIST IDX files.

    An explicit ``directory`` is the only candidate; otherwise
    ``$EMBATTR_MNIST``, ``./data/mnist`` and ``../data/mnist`` are tried in
    that order.
    """
    if directory is not None:
        cands = [directory]
    else:
        cands = [os.environ.get("EMBATTR_MNIST"), "data/mnist", "../data/mnist"]
    for c in cands:
        if not c:
            continue
        d = Path(c)
        img = d / MNIST_FILES["train"][0]
        if img.exists() or img.with_name(img.name + ".gz").exists():
            return d
    return None


# -- writers ------------------------------------------------------------------

def to_bytes(m: np.ndarray) -> np.ndarray:
    """[0, 1] floats -> uint8 with round-half-up."""
    m = np.asarray(m, dtype=np.float64)
    if m.size and (np.nanmin(m) < 0 or np.nanmax(m) > 1):
        raise ValueError("map must be normalised to [0, 1] before export")
    return np.floor(m * 255.0 + 0.5).astype(np.uint8)


def write_pgm(m, path) -> None:
    """Binary (P5) 8-bit greyscale image of a normalised 2-D map."""
    arr = to_bytes(np.asarray(m))
    if arr.ndim != 2:
        raise ValueError(f"PGM export needs a 2-D map, got shape {arr.shape}")
    h, w = arr.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + arr.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(rows, path, columns=None) -> None:
    """Write dict rows (or a 2-D array) with a header row; floats at 17 digits."""
    if isinstance(rows, np.ndarray):
        arr = np.atleast_2d(rows)
        columns = columns or [f"c{j}" for j in range(arr.shape[1])]
        rows = [dict(zip(columns, r)) for r in arr]
    rows = list(rows)
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(config: dict, path, artifacts=()) -> None:
    """``key=value`` lines, sorted, followed by ``sha256:<name>=<hash>`` per artifact."""
    if "seed" not in config:
        raise ValueError("manifest requires a seed")
    lines = [f"{k}={_fmt(config[k])}" for k in sorted(config)]
    for a in sorted(artifacts, key=lambda p: Path(p).name):
        lines.append(f"sha256:{Path(a).name}={file_sha256(a)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            out[k] = v
    return out
