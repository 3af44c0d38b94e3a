"""scikit-learn style wrappers around the tokenizer and the generator."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .config import RunConfig
from .factorize import factorize
from .generator import generate, sequence_logprob
from .lfq import codebook_usage
from .metrics import mse
from .train import ARTrainer, TokenizerTrainer
from .validation import check_class_ids, check_images, check_token_grids


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


class LFQTokenizer(TransformerMixin, BaseEstimator):
    """Images [N, 3, S, S] in [-1, 1] to token grids [N, S/p, S/p] and back.

    ``transform`` yields integer index grids; ``inverse_transform`` decodes them.
    """

    def __init__(
        self,
        bits: int = 8,
        channels: tuple[int, ...] = (32, 64, 128),
        res_blocks: int = 1,
        groups: int = 8,
        temperature: float = 0.1,
        entropy_weight: float = 0.1,
        commitment_weight: float = 0.25,
        entropy_mode: str = "factorized",
        lr: float = 1e-4,
        batch_size: int = 16,
        steps: int = 1000,
        warmup_steps: int = 0,
        seed: int = 0,
        dtype: str = "float32",
        eval_batch: int = 64,
    ):
        self.bits = bits
        self.channels = channels
        self.res_blocks = res_blocks
        self.groups = groups
        self.temperature = temperature
        self.entropy_weight = entropy_weight
        self.commitment_weight = commitment_weight
        self.entropy_mode = entropy_mode
        self.lr = lr
        self.batch_size = batch_size
        self.steps = steps
        self.warmup_steps = warmup_steps
        self.seed = seed
        self.dtype = dtype
        self.eval_batch = eval_batch

    def _run_config(self, image_size: int, in_channels: int) -> RunConfig:
        return RunConfig(
            stage="tokenizer", seed=self.seed, dtype=self.dtype, lr=self.lr,
            batch_size=self.batch_size, steps=self.steps, warmup_steps=self.warmup_steps,
            image_size=image_size, in_channels=in_channels, channels=tuple(self.channels),
            res_blocks=self.res_blocks, groups=self.groups, bits=self.bits,
            temperature=self.temperature, entropy_weight=self.entropy_weight,
            commitment_weight=self.commitment_weight, entropy_mode=self.entropy_mode,
        )

    def fit(self, X, y=None, callback=None):
        X = check_images(X)
        self.config_ = self._run_config(X.shape[2], X.shape[1])
        self.trainer_ = TokenizerTrainer(self.config_, X)
        self.history_ = self.trainer_.run(callback=callback)
        self.model_ = self.trainer_.model
        return self

    @classmethod
    def from_model(cls, model, config: RunConfig | None = None) -> "LFQTokenizer":
        """Wrap an already trained tokenizer model."""
        c = model.config
        est = cls(
            bits=c.bits, channels=c.channels, res_blocks=c.res_blocks, groups=c.groups,
            temperature=c.lfq.temperature, entropy_weight=c.lfq.entropy_weight,
            commitment_weight=c.lfq.commitment_weight, entropy_mode=c.lfq.entropy_mode,
            dtype=np.dtype(model.dtype).name,
        )
        est.config_ = config
        est.model_ = model
        est.history_ = []
        return est

    def _checked(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        cfg = self.model_.config
        return check_images(X, size=cfg.image_size, channels=cfg.in_channels)

    def transform(self, X) -> np.ndarray:
        X = self._checked(X)
        with ad.no_grad():
            parts = [self.model_.tokenize(X[s]) for s in _chunks(len(X), self.eval_batch)]
        return np.concatenate(parts)

    def inverse_transform(self, grids) -> np.ndarray:
        check_is_fitted(self, "model_")
        cfg = self.model_.config
        grids = check_token_grids(grids, cfg.bits, cfg.grid_size)
        with ad.no_grad():
            parts = [self.model_.decode(grids[s]).data for s in _chunks(len(grids), self.eval_batch)]
        return np.concatenate(parts).astype(np.float64)

    def reconstruct(self, X) -> np.ndarray:
        return self.inverse_transform(self.transform(X))

    def codebook_usage(self, X) -> float:
        return codebook_usage(self.transform(X), self.model_.config.bits)

    def score(self, X, y=None) -> float:
        """Negative reconstruction MSE, so that larger is better."""
        X = self._checked(X)
        return -mse(X, self.reconstruct(X))


class FactorizedARGenerator(BaseEstimator):
    """Class-conditional generator over token grids with factorized sub-tokens."""

    def __init__(
        self,
        bits: int = 8,
        subtoken_bits: tuple[int, ...] = (3, 5),
        bit_order: str = "low",
        inter_blocks: int = 4,
        intra_blocks: int = 2,
        width: int = 128,
        heads: int = 4,
        ffn_mult: float = 8 / 3,
        dropout: float = 0.1,
        cond_drop: float = 0.1,
        num_classes: int = 10,
        lr: float = 1e-4,
        batch_size: int = 16,
        steps: int = 1000,
        warmup_steps: int = 0,
        weight_decay: float = 5e-2,
        grad_clip: float = 1.0,
        seed: int = 0,
        dtype: str = "float64",
    ):
        self.bits = bits
        self.subtoken_bits = subtoken_bits
        self.bit_order = bit_order
        self.inter_blocks = inter_blocks
        self.intra_blocks = intra_blocks
        self.width = width
        self.heads = heads
        self.ffn_mult = ffn_mult
        self.dropout = dropout
        self.cond_drop = cond_drop
        self.num_classes = num_classes
        self.lr = lr
        self.batch_size = batch_size
        self.steps = steps
        self.warmup_steps = warmup_steps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.seed = seed
        self.dtype = dtype

    def _run_config(self, seq_len: int) -> RunConfig:
        if sum(self.subtoken_bits) != self.bits:
            raise ValueError(f"subtoken_bits {tuple(self.subtoken_bits)} must sum to bits={self.bits}")
        return RunConfig(
            stage="ar", seed=self.seed, dtype=self.dtype, lr=self.lr, batch_size=self.batch_size,
            steps=self.steps, warmup_steps=self.warmup_steps, weight_decay=self.weight_decay,
            grad_clip=self.grad_clip, bits=self.bits, inter_blocks=self.inter_blocks,
            intra_blocks=self.intra_blocks, width=self.width, heads=self.heads,
            subtoken_bits=tuple(self.subtoken_bits), bit_order=self.bit_order,
            num_classes=self.num_classes, seq_len=seq_len, ffn_mult=self.ffn_mult,
            dropout=self.dropout, cond_drop=self.cond_drop,
        )

    def fit(self, X, y, callback=None):
        X = check_token_grids(X, self.bits)
        y = check_class_ids(y, len(X), self.num_classes)
        self.grid_shape_ = X.shape[1:]
        self.config_ = self._run_config(int(np.prod(self.grid_shape_)))
        self.trainer_ = ARTrainer(self.config_, y, X)
        self.history_ = self.trainer_.run(callback=callback)
        self.model_ = self.trainer_.model
        return self

    @classmethod
    def from_model(cls, model, grid_shape: tuple[int, int] | None = None, config: RunConfig | None = None):
        """Wrap an already trained generator; square grids are assumed by default."""
        c = model.config
        est = cls(
            bits=c.scheme.total_bits, subtoken_bits=tuple(c.scheme.bits),
            bit_order="low" if c.scheme.low_first else "high", inter_blocks=c.inter_blocks,
            intra_blocks=c.intra_blocks, width=c.width, heads=c.heads, ffn_mult=c.ffn_mult,
            dropout=c.dropout, cond_drop=c.cond_drop, num_classes=c.num_classes,
            dtype=np.dtype(model.dtype).name,
        )
        if grid_shape is None:
            side = int(round(np.sqrt(c.seq_len)))
            grid_shape = (side, side) if side * side == c.seq_len else (1, c.seq_len)
        est.grid_shape_ = tuple(grid_shape)
        est.config_ = config
        est.model_ = model
        est.history_ = []
        return est

    def sample(self, class_id, n: int = 1, temperature: float = 1.0, top_k: int | None = None,
               guidance_scale: float = 2.0, seed: int | None = 0) -> np.ndarray:
        check_is_fitted(self, "model_")
        ids = check_class_ids(class_id, n, self.num_classes)
        flat = generate(self.model_, ids, n=n, temperature=temperature, top_k=top_k,
                        guidance_scale=guidance_scale, seed=seed)
        return flat.reshape(n, *self.grid_shape_)

    def predict(self, y, guidance_scale: float = 1.0) -> np.ndarray:
        """Greedy (temperature 0) grids, one per class id in ``y``."""
        y = np.atleast_1d(np.asarray(y))
        return self.sample(y, n=len(y), temperature=0.0, guidance_scale=guidance_scale)

    def log_likelihood(self, X, y) -> np.ndarray:
        """Per-grid joint log-probability in nats."""
        check_is_fitted(self, "model_")
        X = check_token_grids(X, self.bits)
        y = check_class_ids(y, len(X), self.num_classes)
        sub = factorize(X.reshape(len(X), -1), self.model_.config.scheme)
        with ad.no_grad():
            return sequence_logprob(self.model_, y, sub).data.astype(np.float64)

    def score(self, X, y) -> float:
        """Mean log-probability per token position."""
        ll = self.log_likelihood(X, y)
        return float(ll.mean() / int(np.prod(np.asarray(X).shape[-2:])))
