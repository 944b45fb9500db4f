"""Encryption masks, the attacker's view of a protected gradient, and a mock
additively homomorphic cipher."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .models import FlatGradient
from .significance import SignificanceScores

EXCLUDE = "exclude"
BOUNDED_NOISE = "bounded_noise"
DEFAULT_XI = 1e-3


@dataclass(frozen=True, eq=False)
class EncryptionMask:
    bits: np.ndarray  # uint8, 1 = encrypted
    ratio: float

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=np.uint8).reshape(-1)
        if np.any(bits > 1):
            raise ValueError("mask bits must be 0 or 1")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def m(self) -> int:
        return self.bits.size

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.bits)

    def __len__(self):
        return self.bits.size

    def __eq__(self, other):
        return isinstance(other, EncryptionMask) and np.array_equal(self.bits, other.bits)

    __hash__ = None


def mask_size(ratio: float, m: int) -> int:
    return min(max(math.ceil(ratio * m - 1e-9), 0), m)


def top_s_mask(scores, ratio: float) -> EncryptionMask:
    """Select the ceil(ratio * m) highest scores; ties go to the lower index."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must be in [0, 1], got {ratio}")
    s = scores.scores if isinstance(scores, SignificanceScores) else np.asarray(scores, dtype=np.float64)
    if np.isnan(s).any():
        raise ValueError("scores contain NaN")
    m = s.size
    order = np.lexsort((np.arange(m), -s))
    bits = np.zeros(m, dtype=np.uint8)
    bits[order[: mask_size(ratio, m)]] = 1
    return EncryptionMask(bits, float(ratio))


def selection_mask(scores) -> EncryptionMask:
    """Mask of every index with a positive score (layer-slice selections)."""
    s = scores.scores if isinstance(scores, SignificanceScores) else np.asarray(scores)
    bits = (s > 0).astype(np.uint8)
    return EncryptionMask(bits, float(bits.mean()) if bits.size else 0.0)


def save_mask(mask: EncryptionMask, path) -> None:
    """8-byte little-endian bit count, then bits packed LSB-first."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", mask.m))
        fh.write(np.packbits(mask.bits, bitorder="little").tobytes())


def load_mask(path) -> EncryptionMask:
    raw = open(path, "rb").read()
    if len(raw) < 8:
        raise ValueError("mask file shorter than its header")
    (m,) = struct.unpack("<Q", raw[:8])
    body = np.frombuffer(raw[8:], dtype=np.uint8)
    if body.size != (m + 7) // 8:
        raise ValueError(f"mask file declares {m} bits but holds {body.size} bytes")
    bits = np.unpackbits(body, bitorder="little", count=m)
    return EncryptionMask(bits, bits.mean() if m else 0.0)


@dataclass(frozen=True, eq=False)
class AttackerView:
    """What an eavesdropper holds: exact plaintext entries and flags for the rest.

    In ``exclude`` mode the encrypted entries are zeroed at construction and
    must not be read; ``known`` marks the usable coordinates. In
    ``bounded_noise`` mode they hold noise in [-xi, xi] and count as known.
    """

    values: np.ndarray
    known: np.ndarray
    mode: str = EXCLUDE
    xi: float = 0.0

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).reshape(-1)
        k = np.asarray(self.known, dtype=bool).reshape(-1)
        v.setflags(write=False)
        k.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "known", k)

    @property
    def m(self) -> int:
        return self.values.size

    @property
    def usable(self) -> np.ndarray:
        """Indices the matching loss may read."""
        if self.mode == BOUNDED_NOISE:
            return np.arange(self.m)
        return np.flatnonzero(self.known)

    @property
    def leaked(self) -> int:
        return int(self.known.sum())


def attacker_view(g0, mask: EncryptionMask, mode: str = EXCLUDE, xi: float = DEFAULT_XI,
                  seed: int = 0) -> AttackerView:
    """(1 - m) * g0 in the clear; the masked part replaced per the threat model."""
    g = g0.values if isinstance(g0, FlatGradient) else np.asarray(g0, dtype=np.float64).reshape(-1)
    if g.size != mask.m:
        raise ValueError(f"gradient length {g.size} != mask length {mask.m}")
    enc = mask.bits.astype(bool)
    values = np.where(enc, 0.0, g)
    if mode == EXCLUDE:
        return AttackerView(values, ~enc, EXCLUDE, 0.0)
    if mode == BOUNDED_NOISE:
        if xi < 0:
            raise ValueError("xi must be non-negative")
        noise = np.random.default_rng(seed).uniform(-xi, xi, size=g.size)
        values[enc] = noise[enc]
        return AttackerView(values, ~enc, BOUNDED_NOISE, float(xi))
    raise ValueError(f"unknown attacker mode {mode!r}")


class KeyMismatch(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MockCiphertext:
    """Stand-in for an additively homomorphic ciphertext.

    The payload is carried in the clear; the key tag only enforces that
    ciphertexts under different keys are never combined or decrypted.
    """

    payload: np.ndarray
    key_id: str


def mock_encrypt(v, key_id: str) -> MockCiphertext:
    p = np.array(v, dtype=np.float64).reshape(-1)
    p.setflags(write=False)
    return MockCiphertext(p, key_id)


def _same_key(a: MockCiphertext, b: MockCiphertext):
    if a.key_id != b.key_id:
        raise KeyMismatch(f"cannot combine ciphertexts under keys {a.key_id!r} and {b.key_id!r}")


def mock_add(a: MockCiphertext, b: MockCiphertext) -> MockCiphertext:
    _same_key(a, b)
    return mock_encrypt(a.payload + b.payload, a.key_id)


def mock_add_plain(c: MockCiphertext, v) -> MockCiphertext:
    """Ciphertext + plaintext vector (supported by additive HE schemes)."""
    return mock_encrypt(c.payload + np.asarray(v, dtype=np.float64), c.key_id)


def mock_scale(c: MockCiphertext, s: float) -> MockCiphertext:
    """Ciphertext times a plaintext scalar."""
    return mock_encrypt(c.payload * float(s), c.key_id)


def mock_decrypt(c: MockCiphertext, key_id: str) -> np.ndarray:
    if c.key_id != key_id:
        raise KeyMismatch(f"ciphertext under key {c.key_id!r} cannot be opened with {key_id!r}")
    return c.payload.copy()
