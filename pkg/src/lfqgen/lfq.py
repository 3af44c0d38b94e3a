"""Lookup-free quantization.

Each latent channel is binarised to -1/+1 independently, so the codebook is
the implicit set {-1, +1}^K and a token index is the bit pattern of the
positive channels (channel k sets bit k).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

MAX_BITS = 30
PROB_FLOOR = 1e-12
EXACT_MAX_BITS = 14


@dataclass(frozen=True)
class LFQConfig:
    bits: int = 8
    temperature: float = 0.1
    entropy_weight: float = 0.1
    commitment_weight: float = 0.25
    entropy_mode: str = "factorized"

    def __post_init__(self):
        if not 1 <= self.bits <= MAX_BITS:
            raise ValueError(f"bits must be in [1, {MAX_BITS}], got {self.bits}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.entropy_weight < 0 or self.commitment_weight < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.entropy_mode not in ("factorized", "exact"):
            raise ValueError(f"entropy_mode must be 'factorized' or 'exact', got {self.entropy_mode!r}")
        if self.entropy_mode == "exact" and self.bits > EXACT_MAX_BITS:
            raise ValueError(f"exact entropy enumerates 2^bits codes; limited to bits <= {EXACT_MAX_BITS}")

    @property
    def codebook_size(self) -> int:
        return 1 << self.bits


def quantize_sign(z) -> np.ndarray:
    """-1 where z <= 0, +1 elsewhere (zero maps to -1)."""
    z = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    return np.where(z > 0, 1.0, -1.0).astype(z.dtype if z.dtype.kind == "f" else np.float64)


def _bit_weights(bits: int) -> np.ndarray:
    return np.left_shift(np.int64(1), np.arange(bits, dtype=np.int64))


def code_to_index(codes, axis: int = -1) -> np.ndarray:
    """Token indices of ±1 code vectors laid out along ``axis``."""
    codes = np.asarray(codes.data if isinstance(codes, Tensor) else codes)
    if not np.all((codes == 1) | (codes == -1)):
        raise ValueError("code_to_index: codes must contain only -1 and +1")
    codes = np.moveaxis(codes, axis, -1)
    bits = codes.shape[-1]
    if bits > MAX_BITS:
        raise ValueError(f"code_to_index: at most {MAX_BITS} bits supported")
    return ((codes > 0).astype(np.int64) * _bit_weights(bits)).sum(axis=-1)


def index_to_code(index, bits: int, axis: int = -1, dtype=np.float64) -> np.ndarray:
    """Inverse of :func:`code_to_index`; the code axis is inserted at ``axis``."""
    idx = np.asarray(index)
    if idx.dtype.kind not in "iu":
        raise TypeError(f"index_to_code: integer indices required, got {idx.dtype}")
    if not 1 <= bits <= MAX_BITS:
        raise ValueError(f"bits must be in [1, {MAX_BITS}], got {bits}")
    idx = idx.astype(np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= (1 << bits)):
        raise ValueError(f"index_to_code: indices must lie in [0, {1 << bits})")
    on = (idx[..., None] >> np.arange(bits, dtype=np.int64)) & 1
    codes = (2 * on - 1).astype(dtype)
    return np.moveaxis(codes, -1, axis)


def straight_through(z: Tensor, offset: np.ndarray | None = None) -> Tensor:
    """Forward: sign quantization.  Backward: identity.

    Passing ``offset`` (a frozen ``sign(z0) - z0``) evaluates the same
    surrogate ``z + offset`` at a perturbed ``z``, which is what a
    finite-difference check of the straight-through path needs.
    """
    if offset is not None:
        return z + Tensor(np.asarray(offset, dtype=z.dtype))
    out = quantize_sign(z)
    return ad._make(out, (z,), lambda g: (g,), "straight_through")


def soft_assignment(z: Tensor, temperature: float) -> Tensor:
    """Per-bit probability of +1, sigmoid(2 z / temperature)."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    return ad.sigmoid(z * (2.0 / temperature))


def _bernoulli_entropy_from_logits(logits: Tensor) -> Tensor:
    # H(sigmoid(l)) = softplus(l) - sigmoid(l) * l
    return ad.softplus(logits) - ad.sigmoid(logits) * logits


def _bernoulli_entropy(p: Tensor) -> Tensor:
    # 1 - 1e-12 rounds to 1 in float32, so the floor follows the dtype
    floor = max(PROB_FLOOR, float(np.finfo(p.dtype).eps))
    p = ad.clip(p, floor, 1.0 - floor)
    q = 1.0 - p
    return -(p * ad.log(p) + q * ad.log(q))


def entropy_terms(z: Tensor, temperature: float, mode: str = "factorized") -> tuple[Tensor, Tensor]:
    """(mean per-sample entropy, entropy of the mean assignment), both in nats.

    ``z`` is [S, K]; the 2^K-way assignment is the product of K Bernoullis.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if z.ndim != 2:
        raise ShapeError("entropy_loss", z.shape)
    if z.shape[0] == 0:
        raise ValueError("entropy_loss: empty batch")
    logits = z * (2.0 / temperature)
    per_sample = ad.sum(_bernoulli_entropy_from_logits(logits), axis=1)
    term1 = ad.mean(per_sample)
    if mode == "exact":
        return term1, exact_mean_entropy(z, temperature)
    if mode != "factorized":
        raise ValueError(f"entropy mode must be 'factorized' or 'exact', got {mode!r}")
    avg_prob = ad.mean(ad.sigmoid(logits), axis=0)
    term2 = ad.sum(_bernoulli_entropy(avg_prob))
    return term1, term2


def exact_mean_entropy(z: Tensor, temperature: float) -> Tensor:
    """Entropy of the batch-mean assignment over all 2^K codes, not per bit.

    Cost is O(S * 2^K), so this is only practical for small K.
    """
    S, K = z.shape
    logits = z * (2.0 / temperature)
    log_on = -ad.softplus(-logits)    # log sigmoid(l)
    log_off = -ad.softplus(logits)    # log sigmoid(-l)
    bits = ((np.arange(1 << K)[:, None] >> np.arange(K)) & 1).astype(z.dtype)
    log_joint = ad.matmul(log_on, Tensor(bits.T)) + ad.matmul(log_off, Tensor(1.0 - bits.T))
    mean_prob = ad.mean(ad.exp(log_joint), axis=0)
    floor = max(PROB_FLOOR, float(np.finfo(z.dtype).tiny))
    mean_prob = ad.clip(mean_prob, floor, 1.0)
    return -ad.sum(mean_prob * ad.log(mean_prob))


def entropy_loss(z: Tensor, temperature: float, mode: str = "factorized") -> Tensor:
    """Mean per-sample entropy minus entropy of the mean assignment.

    ``factorized`` sums per-bit entropies of the mean, which overestimates the
    second term when bits are correlated; ``exact`` enumerates all codes.
    """
    term1, term2 = entropy_terms(z, temperature, mode)
    return term1 - term2


def commitment_loss(z: Tensor, codes) -> Tensor:
    codes = np.asarray(codes.data if isinstance(codes, Tensor) else codes)
    if codes.shape != z.shape:
        raise ShapeError("commitment_loss", z.shape, codes.shape)
    diff = z - Tensor(codes.astype(z.dtype))
    return ad.mean(diff * diff)


class UsageCounter:
    """Mergeable histogram of observed token indices."""

    def __init__(self, bits: int, counts: Counter | None = None):
        self.bits = bits
        self.counts: Counter = Counter() if counts is None else Counter(counts)

    def update(self, indices) -> "UsageCounter":
        flat = np.asarray(indices, dtype=np.int64).reshape(-1)
        if flat.size:
            values, freq = np.unique(flat, return_counts=True)
            self.counts.update(dict(zip(values.tolist(), freq.tolist())))
        return self

    def merge(self, other: "UsageCounter") -> "UsageCounter":
        if other.bits != self.bits:
            raise ValueError(f"cannot merge usage over {self.bits} and {other.bits} bits")
        return UsageCounter(self.bits, self.counts + other.counts)

    @property
    def distinct(self) -> int:
        return len(self.counts)

    @property
    def usage(self) -> float:
        return self.distinct / float(1 << self.bits)


def codebook_usage(grids: Iterable, bits: int) -> float:
    """Fraction of the 2^bits indices observed at least once."""
    counter = UsageCounter(bits)
    if isinstance(grids, np.ndarray):
        counter.update(grids)
    else:
        for g in grids:
            counter.update(g)
    return counter.usage
