"""MNIST (IDX) ingestion, spike encoders and a synthetic event-stream set."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import container

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


@dataclass
class ImageDataset:
    images: np.ndarray  # (n, rows, cols) float64 in [0, 1]
    labels: np.ndarray  # (n,) int64

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise IdxCountMismatchError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return ImageDataset(self.images[idx], self.labels[idx])


@dataclass
class EventDataset:
    samples: np.ndarray  # (n, T, C, H, W) uint8 in {0, 1}
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return EventDataset(self.samples[idx], self.labels[idx])


def data_root() -> Path:
    return Path(os.environ.get("ESLSNN_DATA_DIR", "~/data")).expanduser()


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes, expected_magic: int) -> np.ndarray:
    """Decode an unsigned-byte IDX payload."""
    if len(raw) < 4:
        raise IdxTruncatedError(f"IDX header truncated: expected at least 4 bytes, got {len(raw)}")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxMagicError(f"bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise IdxTruncatedError(f"IDX header truncated: expected {head} bytes, got {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    expected = head + int(np.prod(dims, dtype=np.int64))
    if len(raw) < expected:
        raise IdxTruncatedError(
            f"IDX payload truncated: expected {expected} bytes, got {len(raw)}"
        )
    if len(raw) > expected:
        raise IdxTruncatedError(
            f"IDX payload has trailing data: expected {expected} bytes, got {len(raw)}"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(dims)


def to_idx_bytes(arr: np.ndarray, magic: int) -> bytes:
    arr = np.asarray(arr, dtype=np.uint8)
    return struct.pack(f">I{arr.ndim}I", magic, *arr.shape) + arr.tobytes()


def load_mnist_idx(images_path, labels_path) -> ImageDataset:
    images = parse_idx(_read_bytes(images_path), IMAGES_MAGIC)
    labels = parse_idx(_read_bytes(labels_path), LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    return ImageDataset(images.astype(np.float64) / 255.0, labels.astype(np.int64))


def dataset_to_idx(ds: ImageDataset) -> tuple[bytes, bytes]:
    pixels = np.rint(ds.images * 255.0).astype(np.uint8)
    return to_idx_bytes(pixels, IMAGES_MAGIC), to_idx_bytes(ds.labels, LABELS_MAGIC)


def _find(root: Path, stem: str) -> Path:
    # accept both "-idx3-ubyte" and ".idx3-ubyte" spellings, optionally gzipped
    alt = stem.replace("-idx", ".idx")
    for d in (root, root / "mnist", root / "MNIST" / "raw"):
        for name in (stem, alt):
            for suffix in ("", ".gz"):
                p = d / (name + suffix)
                if p.exists():
                    return p
    raise FileNotFoundError(f"could not find {stem} under {root}")


def load_mnist(split: str = "train", root=None) -> ImageDataset:
    if split not in _MNIST_FILES:
        raise ValueError(f"unknown split {split!r}")
    root = Path(root).expanduser() if root else data_root()
    img, lab = _MNIST_FILES[split]
    return load_mnist_idx(_find(root, img), _find(root, lab))


def encode_temporal(image, threshold: float = 0.5, t_late: float | None = None) -> np.ndarray:
    """Binarise pixels into first-spike times in the z-domain.

    Pixels above ``threshold`` spike at ``t = 0`` (``z = 1``). The rest stay
    silent (``z = inf``), or spike at ``t_late`` when it is given. Works on a
    single image or a batch; the pixel axes are flattened.
    """
    x = np.asarray(image, dtype=np.float64)
    lead = x.shape[:-2] if x.ndim >= 2 else ()
    flat = x.reshape(*lead, -1) if x.ndim >= 2 else x
    off = np.inf if t_late is None else float(np.exp(t_late))
    return np.where(flat > threshold, 1.0, off)


def encode_rate(image, T: int, mode: str = "analog", seed: int = 0) -> np.ndarray:
    """Present an image for ``T`` steps.

    ``analog`` repeats the pixel values (direct coding); ``bernoulli`` draws
    a spike per step with probability equal to the pixel. Output shape is
    ``(T, 1, H, W)`` for one image and ``(T, B, 1, H, W)`` for a batch.
    """
    x = np.asarray(image, dtype=np.float64)
    single = x.ndim == 2
    xb = x[None] if single else x
    xb = xb[:, None]  # channel axis
    if mode == "analog":
        out = np.broadcast_to(xb, (T,) + xb.shape).copy()
    elif mode == "bernoulli":
        rng = np.random.default_rng(seed)
        out = (rng.random((T,) + xb.shape) < xb).astype(np.float64)
    else:
        raise ValueError(f"unknown rate-coding mode {mode!r}")
    return out[:, 0] if single else out


def class_template(c: int, T: int, H: int, W: int) -> np.ndarray:
    """Noise-free event pattern of class ``c``, shape ``(T, 1, H, W)``.

    Classes come in pairs that sweep a bar over the same positions in
    opposite directions, so the time-summed images of a pair coincide.
    Even pairs move a vertical bar horizontally, odd pairs a horizontal bar
    vertically; the speed grows every two pairs.
    """
    direction = 1 if c % 2 == 0 else -1
    horizontal = (c // 2) % 2 == 0
    speed = 1 + c // 4
    size = W if horizontal else H
    span = speed * (T - 1)
    start = max(0, (size - 1 - span) // 2)
    out = np.zeros((T, 1, H, W), dtype=np.uint8)
    for t in range(T):
        step = t if direction > 0 else T - 1 - t
        p = (start + speed * step) % size
        if horizontal:
            out[t, 0, :, p] = 1
        else:
            out[t, 0, p, :] = 1
    return out


def synthetic_events(n_per_class: int, n_classes: int, T: int, H: int, W: int,
                     seed: int = 0, noise: float = 0.02) -> EventDataset:
    """Moving-bar event streams with random bit flips at rate ``noise``."""
    if min(n_per_class, n_classes, T, H, W) < 1:
        raise ValueError("all synthetic dataset dimensions must be positive")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    base = np.stack([class_template(c, T, H, W) for c in range(n_classes)])
    samples = base[labels].copy()
    if noise > 0:
        flips = rng.random(samples.shape) < noise
        samples ^= flips.astype(np.uint8)
    perm = rng.permutation(len(labels))
    return EventDataset(samples[perm], labels[perm].astype(np.int64))


def save_events(path, ds: EventDataset, meta: dict | None = None) -> None:
    header = {"kind": "synthetic-events", "shape": list(ds.samples.shape)}
    header.update(meta or {})
    container.save(path, [
        ("meta", header),
        ("samples", ds.samples.astype(np.uint8)),
        ("labels", ds.labels.astype("<i8")),
    ])


def load_events(path) -> EventDataset:
    sec = container.load(path)
    try:
        samples, labels = sec["samples"], sec["labels"]
    except KeyError as exc:
        raise container.ContainerError(f"missing section {exc}") from exc
    if list(samples.shape) != sec["meta"]["shape"]:
        raise container.ContainerError("sample shape disagrees with header")
    return EventDataset(samples, labels.astype(np.int64))


def train_val_split(n: int, fraction: float, seed: int):
    """Random ``(train_idx, val_idx)`` split with ``round(fraction * n)`` held out."""
    if not 0 < fraction < 1:
        raise ValueError("validation fraction must lie in (0, 1)")
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(fraction * n))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])
