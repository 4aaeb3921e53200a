"""Shared helpers: deterministic seed derivation, finiteness guards, color transfer."""

from __future__ import annotations

import hashlib

import numpy as np
import torch


class NonFiniteError(RuntimeError):
    """Raised when a pipeline-exposed value contains NaN or Inf."""


def derive_seed(base: int, *labels: str | int) -> int:
    """Stable per-stage seed: hash of the global seed plus a label path.

    Keeps RNG streams independent between stages while staying reproducible
    for a fixed global seed.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(base)).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest(), "little") % (2**63 - 1)


def torch_generator(seed: int) -> torch.Generator:
    g = torch.Generator(device="cpu")
    g.manual_seed(int(seed))
    return g


def assert_finite(t: torch.Tensor, name: str) -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        bad = (~torch.isfinite(t)).nonzero()
        first = bad[0].tolist() if bad.numel() else []
        raise NonFiniteError(f"non-finite values in '{name}' (first at index {first})")
    return t


def assert_finite_array(a: np.ndarray, name: str) -> np.ndarray:
    if not np.isfinite(a).all():
        idx = np.argwhere(~np.isfinite(a))
        first = idx[0].tolist() if len(idx) else []
        raise NonFiniteError(f"non-finite values in '{name}' (first at index {first})")
    return a


def srgb_encode(linear):
    """Linear [0,1] -> sRGB [0,1]. Works on numpy arrays and torch tensors."""
    mod = torch if isinstance(linear, torch.Tensor) else np
    lo = 12.92 * linear
    hi = 1.055 * mod.clip(linear, 1e-8, None) ** (1.0 / 2.4) - 0.055
    return mod.where(linear <= 0.0031308, lo, hi)


def srgb_decode(encoded):
    """sRGB [0,1] -> linear [0,1]."""
    mod = torch if isinstance(encoded, torch.Tensor) else np
    lo = encoded / 12.92
    hi = ((encoded + 0.055) / 1.055) ** 2.4
    return mod.where(encoded <= 0.04045, lo, hi)
