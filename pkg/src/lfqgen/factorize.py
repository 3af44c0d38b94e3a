"""Bit-slice factorization of token indices into sub-tokens."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class FactorizationScheme:
    """Split of a K-bit index into slices of ``bits[m]`` bits.

    With ``low_first`` the first sub-token takes the least significant bits.
    """

    bits: tuple[int, ...] = (3, 5)
    low_first: bool = True

    def __post_init__(self):
        object.__setattr__(self, "bits", tuple(int(b) for b in self.bits))
        if not self.bits or any(b < 1 for b in self.bits):
            raise ValueError(f"every sub-token needs at least one bit, got {self.bits}")

    @property
    def M(self) -> int:
        return len(self.bits)

    @property
    def total_bits(self) -> int:
        return sum(self.bits)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(1 << b for b in self.bits)

    def _shifts(self) -> list[int]:
        order = list(self.bits) if self.low_first else list(reversed(self.bits))
        shifts = np.concatenate([[0], np.cumsum(order)[:-1]]).tolist()
        return shifts if self.low_first else list(reversed(shifts))


def factorize(index, scheme: FactorizationScheme) -> np.ndarray:
    """Indices of any shape -> array with a trailing axis of M sub-tokens."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= (1 << scheme.total_bits)):
        raise ValueError(f"factorize: index outside [0, {1 << scheme.total_bits})")
    parts = [(idx >> s) & ((1 << b) - 1) for b, s in zip(scheme.bits, scheme._shifts())]
    return np.stack(parts, axis=-1)


def defactorize(sub_tokens, scheme: FactorizationScheme) -> np.ndarray:
    sub = np.asarray(sub_tokens, dtype=np.int64)
    if sub.shape[-1] != scheme.M:
        raise ValueError(f"defactorize: expected {scheme.M} sub-tokens, got {sub.shape[-1]}")
    out = np.zeros(sub.shape[:-1], dtype=np.int64)
    for m, (b, s) in enumerate(zip(scheme.bits, scheme._shifts())):
        part = sub[..., m]
        if part.size and (part.min() < 0 or part.max() >= (1 << b)):
            raise ValueError(f"defactorize: sub-token {m + 1} outside [0, {1 << b})")
        out |= part << s
    return out


def embed_subtokens(sub_tokens, tables) -> Tensor:
    """Sum over m of ``tables[m][sub_tokens[..., m]]``."""
    sub = np.asarray(sub_tokens, dtype=np.int64)
    if sub.shape[-1] != len(tables):
        raise ValueError(f"embed_subtokens: {sub.shape[-1]} sub-tokens for {len(tables)} tables")
    total = ad.embedding(tables[0], sub[..., 0])
    for m in range(1, len(tables)):
        total = total + ad.embedding(tables[m], sub[..., m])
    return total
