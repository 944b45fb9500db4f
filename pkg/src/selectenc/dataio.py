"""CIFAR binary records and seeded synthetic images."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

RECORD = {"cifar10": 3073, "cifar100": 3074}
CLASSES = {"cifar10": 10, "cifar100": 100}
_SIDE = 32


class CifarFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LabeledImage:
    pixels: np.ndarray  # (H, W, C) in [0, 1]
    label: int
    source: str
    coarse_label: int | None = None

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float64)
        if p.size and (p.min() < 0 or p.max() > 1):
            raise ValueError("pixels must lie in [0, 1]")
        object.__setattr__(self, "pixels", p)

    def __eq__(self, other):
        return (
            isinstance(other, LabeledImage)
            and self.label == other.label
            and self.source == other.source
            and np.array_equal(self.pixels, other.pixels)
        )

    __hash__ = None


def parse_cifar(data: bytes, variant: str = "cifar10") -> list[LabeledImage]:
    """Decode CIFAR-10/100 binary records.

    Pixels are stored as R, G and B 32x32 planes; they come back as (32, 32, 3)
    arrays of byte/255. For CIFAR-100 the fine label is used.
    """
    if variant not in RECORD:
        raise ValueError(f"unknown CIFAR variant {variant!r}")
    size = RECORD[variant]
    n_labels = size - 3072
    if len(data) % size:
        whole = len(data) - len(data) % size
        raise CifarFormatError(
            f"{variant}: {len(data)} bytes is not a multiple of the {size}-byte record; "
            f"trailing partial record starts at offset {whole}"
        )
    buf = np.frombuffer(data, dtype=np.uint8).reshape(-1, size)
    out = []
    for r, rec in enumerate(buf):
        label = int(rec[n_labels - 1])
        if label >= CLASSES[variant]:
            raise CifarFormatError(
                f"{variant}: label {label} at offset {r * size + n_labels - 1} exceeds {CLASSES[variant] - 1}"
            )
        coarse = int(rec[0]) if n_labels == 2 else None
        planes = rec[n_labels:].reshape(3, _SIDE, _SIDE).transpose(1, 2, 0)
        out.append(LabeledImage(planes / 255.0, label, variant, coarse))
    return out


def write_cifar(images, variant: str = "cifar10") -> bytes:
    """Inverse of :func:`parse_cifar` for 32x32x3 images quantized to bytes."""
    chunks = []
    for img in images:
        p = np.asarray(img.pixels)
        if p.shape != (_SIDE, _SIDE, 3):
            raise ValueError(f"CIFAR records hold 32x32x3 images, got {p.shape}")
        head = [img.label] if variant == "cifar10" else [img.coarse_label or 0, img.label]
        body = np.rint(p * 255.0).astype(np.uint8).transpose(2, 0, 1).reshape(-1)
        chunks.append(bytes(head) + body.tobytes())
    return b"".join(chunks)


def load_cifar(path, variant: str = "cifar10") -> list[LabeledImage]:
    with open(path, "rb") as fh:
        return parse_cifar(fh.read(), variant)


def synth_images(count: int, seed: int, classes: int, shape=(32, 32, 3)) -> list[LabeledImage]:
    """Smooth random images: each channel sums three seeded 2-D cosines; the
    image is then min-max scaled to [0, 1]. Labels cycle 0, 1, ..., classes-1."""
    if count < 1:
        raise ValueError("count must be >= 1")
    h, w, c = shape
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    out = []
    for i in range(count):
        img = np.zeros((h, w, c))
        for ch in range(c):
            for _ in range(3):
                fy, fx = rng.uniform(0.5, 3.0, size=2) * rng.choice([-1, 1], size=2)
                phase = rng.uniform(0, 2 * np.pi)
                amp = rng.uniform(0.5, 1.0)
                img[:, :, ch] += amp * np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
        lo, hi = img.min(), img.max()
        img = (img - lo) / (hi - lo) if hi > lo else np.full_like(img, 0.5)
        out.append(LabeledImage(np.clip(img, 0.0, 1.0), i % classes, "synthetic"))
    return out
