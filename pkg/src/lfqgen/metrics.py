"""Reconstruction and distribution metrics."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .lfq import UsageCounter

PSNR_CAP = 99.0


class PSNR(NamedTuple):
    db: float
    exact: bool


def mse(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"mse: shapes differ {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(err: float, peak: float = 2.0) -> PSNR:
    if err <= 0:
        return PSNR(PSNR_CAP, True)
    return PSNR(float(min(PSNR_CAP, 10.0 * np.log10(peak * peak / err))), False)


def psnr(a, b, peak: float = 2.0) -> PSNR:
    """Peak signal-to-noise ratio in dB; the default peak suits [-1, 1] images."""
    return psnr_from_mse(mse(a, b), peak)


# -- Frechet distance between Gaussian fits ----------------------------------------

@dataclass
class FeatureSummary:
    mean: np.ndarray
    cov: np.ndarray
    count: int = 0

    @classmethod
    def from_features(cls, feats) -> "FeatureSummary":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 2:
            raise ValueError("need a [n >= 2, d] feature matrix")
        cov = np.cov(feats, rowvar=False)
        cov = 0.5 * (cov + cov.T)
        return cls(feats.mean(axis=0), np.atleast_2d(cov), feats.shape[0])


def _sqrt_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_gaussian(a: FeatureSummary, b: FeatureSummary) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace of the product root is taken as Tr((S_a^(1/2) S_b S_a^(1/2))^(1/2)),
    which shares its eigenvalues and stays symmetric positive semidefinite.
    """
    if a.mean.shape != b.mean.shape or a.cov.shape != b.cov.shape:
        raise ValueError(f"dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    diff = a.mean - b.mean
    root_a = _sqrt_psd(a.cov)
    middle = root_a @ b.cov @ root_a
    vals = np.clip(np.linalg.eigvalsh(0.5 * (middle + middle.T)), 0.0, None)
    trace_root = float(np.sum(np.sqrt(vals)))
    dist = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * trace_root)
    return max(dist, 0.0)


class RandomProjectionFeatures:
    """Fixed, seeded two-layer random network used as a feature extractor.

    Stands in for a pretrained classifier: the distance formula is exercised,
    perceptual meaning is not claimed.
    """

    def __init__(self, in_dim: int, dim: int = 64, hidden: int = 256, seed: int = 1234):
        rng = np.random.default_rng(seed)
        self.w1 = rng.standard_normal((in_dim, hidden)) / np.sqrt(in_dim)
        self.w2 = rng.standard_normal((hidden, dim)) / np.sqrt(hidden)

    def __call__(self, images) -> np.ndarray:
        flat = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
        return np.tanh(flat @ self.w1) @ self.w2


def frechet_images(real, other, seed: int = 1234, dim: int = 64) -> float:
    real = np.asarray(real)
    net = RandomProjectionFeatures(int(np.prod(real.shape[1:])), dim=dim, seed=seed)
    return frechet_gaussian(FeatureSummary.from_features(net(real)), FeatureSummary.from_features(net(other)))


# -- reports -----------------------------------------------------------------------

def fingerprint(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


@dataclass
class MetricReport:
    metrics: dict[str, float] = field(default_factory=dict)
    sample_count: int = 0
    config_fingerprint: str = ""

    def to_text(self) -> str:
        items = dict(self.metrics)
        items["sample_count"] = self.sample_count
        items["config_fingerprint"] = self.config_fingerprint
        lines = []
        for key in sorted(items):
            value = items[key]
            if isinstance(value, (float, np.floating)):
                value = repr(float(value))
            elif isinstance(value, np.integer):
                value = int(value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


@dataclass
class UsageReport(MetricReport):
    counter: UsageCounter | None = None

    def merge(self, other: "UsageReport") -> "UsageReport":
        merged = self.counter.merge(other.counter)
        return _usage_from_counter(merged, self.sample_count + other.sample_count, self.config_fingerprint)


def _usage_from_counter(counter: UsageCounter, samples: int, fp: str = "") -> UsageReport:
    metrics: dict = {
        "usage": counter.usage,
        "distinct": counter.distinct,
        "codebook_size": 1 << counter.bits,
    }
    # ties broken by index so the listing is deterministic
    top = sorted(counter.counts.items(), key=lambda kv: (-kv[1], kv[0]))[:16]
    for rank, (index, count) in enumerate(top):
        metrics[f"top{rank:02d}"] = f"{index}:{count}"
    return UsageReport(metrics=metrics, sample_count=samples, config_fingerprint=fp, counter=counter)


def usage_report(grids, bits: int, config_fingerprint: str = "") -> UsageReport:
    """Codebook usage fraction, distinct count and the 16 most frequent indices."""
    grids = np.asarray(grids)
    counter = UsageCounter(bits).update(grids)
    return _usage_from_counter(counter, int(grids.shape[0]) if grids.ndim else 0, config_fingerprint)
