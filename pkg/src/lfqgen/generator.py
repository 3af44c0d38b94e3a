"""Class-conditional autoregressive transformer over factorized tokens.

An inter-position stack turns the class token and the summed sub-token
embeddings of earlier positions into one context vector per position.  A
short intra-position stack then predicts the sub-tokens of that position one
after another, each conditioned on the context and the sub-tokens before it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .factorize import FactorizationScheme, defactorize, embed_subtokens
from .nn import Embedding, Init, KVCache, Linear, Module, RMSNorm, TransformerBlock, dropout


@dataclass(frozen=True)
class ARConfig:
    inter_blocks: int = 4
    intra_blocks: int = 2
    width: int = 128
    heads: int = 4
    scheme: FactorizationScheme = field(default_factory=FactorizationScheme)
    num_classes: int = 10
    seq_len: int = 16
    ffn_mult: float = 8 / 3
    dropout: float = 0.1
    cond_drop: float = 0.1

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by {self.heads} heads")
        if (self.width // self.heads) % 2:
            raise ValueError("per-head width must be even for rotary positions")
        if self.seq_len < 1:
            raise ValueError("sequence length must be at least 1")
        if self.inter_blocks < 1 or self.intra_blocks < 1:
            raise ValueError("need at least one inter and one intra block")
        if self.num_classes < 1:
            raise ValueError("need at least one class")
        if not 0.0 <= self.dropout < 1.0 or not 0.0 <= self.cond_drop <= 1.0:
            raise ValueError("dropout rates must lie in [0, 1)")


# B, L and XL generator shapes; sub-vocabularies 2^6 and 2^12, 16x16 tokens at 256px.
LARGE_SHAPES = {
    "B": dict(inter_blocks=24, intra_blocks=2, width=1024, heads=16),
    "L": dict(inter_blocks=36, intra_blocks=3, width=1280, heads=20),
    "XL": dict(inter_blocks=48, intra_blocks=4, width=1536, heads=24),
}


def large_config(name: str, **overrides) -> ARConfig:
    base = dict(LARGE_SHAPES[name], scheme=FactorizationScheme((6, 12)), num_classes=1000, seq_len=256)
    base.update(overrides)
    return ARConfig(**base)


class ARModel(Module):
    def __init__(self, cfg: ARConfig, seed: int = 0, dtype=np.float64, meta: bool = False):
        init = Init(seed, dtype=dtype, meta=meta)
        self.config = cfg
        self.dtype = np.dtype(dtype)
        w = cfg.width
        self.token_tables = [Embedding(n, w, init) for n in cfg.scheme.sizes]
        # last row is the learned null class used for guidance
        self.class_table = Embedding(cfg.num_classes + 1, w, init)
        self.inter = [TransformerBlock(w, cfg.heads, cfg.ffn_mult, init) for _ in range(cfg.inter_blocks)]
        self.inter_norm = RMSNorm(w, init)
        self.intra = [TransformerBlock(w, cfg.heads, cfg.ffn_mult, init) for _ in range(cfg.intra_blocks)]
        self.intra_norm = RMSNorm(w, init)
        self.heads = [Linear(w, n, init, bias=False) for n in cfg.scheme.sizes]

    @property
    def null_class(self) -> int:
        return self.config.num_classes

    @property
    def tables(self) -> list[Tensor]:
        return [t.weight for t in self.token_tables]

    # -- validation ----------------------------------------------------------
    def _check_classes(self, class_ids) -> np.ndarray:
        ids = np.atleast_1d(np.asarray(class_ids, dtype=np.int64))
        if ids.size and (ids.min() < 0 or ids.max() > self.null_class):
            raise ValueError(f"class id outside [0, {self.config.num_classes}]")
        return ids

    def _check_subtokens(self, sub, length: int | None = None) -> np.ndarray:
        sub = np.asarray(sub, dtype=np.int64)
        M = self.config.scheme.M
        if sub.ndim != 3 or sub.shape[2] != M:
            raise ShapeError("sub-token grid", sub.shape, (None, None, M))
        if length is not None and sub.shape[1] != length:
            raise ValueError(f"expected {length} positions, got {sub.shape[1]}")
        for m, n in enumerate(self.config.scheme.sizes):
            col = sub[..., m]
            if col.size and (col.min() < 0 or col.max() >= n):
                raise ValueError(f"sub-token {m + 1} outside [0, {n})")
        return sub

    # -- forward pieces -------------------------------------------------------
    def inter_forward(self, class_ids, sub, rng=None, drop_class=None) -> Tensor:
        """Context vectors [B, T, w]; slot t sees the class and positions < t."""
        cfg = self.config
        ids = self._check_classes(class_ids)
        sub = self._check_subtokens(sub)
        B, T = sub.shape[:2]
        if ids.shape[0] != B:
            raise ShapeError("inter_forward", ids.shape, sub.shape)
        if drop_class is not None:
            ids = np.where(drop_class, self.null_class, ids)
        s = dropout(self.class_table(ids), cfg.dropout, rng)
        x = ad.reshape(s, (B, 1, cfg.width))
        if T > 1:
            prev = dropout(embed_subtokens(sub[:, :-1], self.tables), cfg.dropout, rng)
            x = ad.concatenate([x, prev], axis=1)
        for layer, block in enumerate(self.inter):
            x = block(x, rng=rng, dropout_rate=cfg.dropout)
        return self.inter_norm(x)

    def _intra_inputs(self, context: Tensor, sub_prefix: np.ndarray) -> Tensor:
        # [C_t, emb(x^1), ..., emb(x^{j})] along a new slot axis
        lead = context.shape[:-1]
        w = self.config.width
        slots = [ad.reshape(context, lead + (1, w))]
        for m in range(sub_prefix.shape[-1]):
            e = self.token_tables[m](sub_prefix[..., m])
            slots.append(ad.reshape(e, lead + (1, w)))
        return ad.concatenate(slots, axis=-2) if len(slots) > 1 else slots[0]

    def intra_logits(self, context: Tensor, sub, rng=None) -> list[Tensor]:
        """Teacher-forced logits for every sub-token: list of [B, T, 2^k_m]."""
        cfg = self.config
        M = cfg.scheme.M
        B, T, w = context.shape
        x = self._intra_inputs(context, np.asarray(sub)[..., : M - 1])
        x = ad.reshape(x, (B * T, M, w))
        for block in self.intra:
            x = block(x, rng=rng, dropout_rate=cfg.dropout)
        x = self.intra_norm(x)
        out = []
        for m, head in enumerate(self.heads):
            logits = head(x[:, m, :])
            out.append(ad.reshape(logits, (B, T, cfg.scheme.sizes[m])))
        return out

    def intra_forward(self, context: Tensor, partial, m: int) -> Tensor:
        """Logits for sub-token ``m`` (1-based) given ``context`` [..., w] and x^1..x^{m-1}."""
        M = self.config.scheme.M
        if not 1 <= m <= M:
            raise ValueError(f"sub-token number must lie in [1, {M}], got {m}")
        partial = np.asarray(partial, dtype=np.int64).reshape(context.shape[:-1] + (-1,))[..., : m - 1]
        lead = context.shape[:-1]
        x = self._intra_inputs(context, partial)
        x = ad.reshape(x, (-1, m, self.config.width))
        for block in self.intra:
            x = block(x)
        x = self.intra_norm(x)
        logits = self.heads[m - 1](x[:, m - 1, :])
        return ad.reshape(logits, lead + (self.config.scheme.sizes[m - 1],))


def _gather_logprob(logits: Tensor, targets: np.ndarray) -> Tensor:
    logp = ad.log_softmax(logits)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    return ad.sum(logp * Tensor(onehot), axis=-1)


def sequence_logprob(model: ARModel, class_ids, sub, rng=None, drop_class=None) -> Tensor:
    """Teacher-forced log-likelihood per sequence, shape [B]."""
    sub = model._check_subtokens(sub, model.config.seq_len)
    context = model.inter_forward(class_ids, sub, rng=rng, drop_class=drop_class)
    logits = model.intra_logits(context, sub, rng=rng)
    total = None
    for m, lg in enumerate(logits):
        lp = ad.sum(_gather_logprob(lg, sub[..., m]), axis=1)
        total = lp if total is None else total + lp
    return total


def train_loss(model: ARModel, class_ids, sub, rng: np.random.Generator | None = None) -> Tensor:
    """Mean negative log-likelihood per sub-token.

    With ``rng`` dropout is active and each class is swapped for the null
    class with probability ``cond_drop``; without it the pass is deterministic.
    """
    sub = np.asarray(sub, dtype=np.int64)
    if sub.ndim != 3 or sub.shape[0] == 0:
        raise ValueError("train_loss: empty batch")
    drop = None
    if rng is not None and model.config.cond_drop > 0:
        drop = rng.random(sub.shape[0]) < model.config.cond_drop
    lp = sequence_logprob(model, class_ids, sub, rng=rng, drop_class=drop)
    count = sub.shape[0] * sub.shape[1] * sub.shape[2]
    loss = ad.sum(lp) * (-1.0 / count)
    if ad.nonfinite_seen():
        raise FloatingPointError("AR loss: non-finite value encountered")
    return loss


# -- incremental decoding ----------------------------------------------------------

class _Decoder:
    """Cached single-position stepping through the inter and intra stacks."""

    def __init__(self, model: ARModel, class_ids: np.ndarray):
        self.model = model
        self.cache = KVCache(len(model.inter))
        self.class_ids = class_ids
        self.B = class_ids.shape[0]

    def context(self, prev_sub: np.ndarray | None) -> Tensor:
        m = self.model
        w = m.config.width
        if prev_sub is None:
            x = m.class_table(self.class_ids)
        else:
            x = embed_subtokens(prev_sub, m.tables)
        x = ad.reshape(x, (self.B, 1, w))
        for layer, block in enumerate(m.inter):
            x = block(x, cache=self.cache, layer=layer)
        return ad.reshape(m.inter_norm(x), (self.B, w))

    def subtoken_logits(self, context: Tensor):
        """Generator: yields logits for x^m, then expects the chosen x^m via send()."""
        m = self.model
        w = m.config.width
        cache = KVCache(len(m.intra))
        x = ad.reshape(context, (self.B, 1, w))
        for j in range(m.config.scheme.M):
            h = x
            for layer, block in enumerate(m.intra):
                h = block(h, cache=cache, layer=layer)
            logits = m.heads[j](ad.reshape(m.intra_norm(h), (self.B, w)))
            chosen = yield logits.data
            if j + 1 < m.config.scheme.M:
                x = ad.reshape(m.token_tables[j](np.asarray(chosen)), (self.B, 1, w))


def incremental_logprob(model: ARModel, class_ids, sub) -> np.ndarray:
    """Log-likelihood through the cached decode path (one step per sub-token)."""
    sub = model._check_subtokens(sub, model.config.seq_len)
    ids = model._check_classes(class_ids)
    with ad.no_grad():
        dec = _Decoder(model, ids)
        total = np.zeros(sub.shape[0])
        for t in range(sub.shape[1]):
            ctx = dec.context(None if t == 0 else sub[:, t - 1])
            steps = dec.subtoken_logits(ctx)
            logits = next(steps)
            for j in range(model.config.scheme.M):
                lp = _log_softmax_np(logits)
                total += np.take_along_axis(lp, sub[:, t, j][:, None], axis=1)[:, 0]
                try:
                    logits = steps.send(sub[:, t, j])
                except StopIteration:
                    pass
    return total


def _log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sampling_distribution(logits: np.ndarray, temperature: float, top_k: int | None) -> np.ndarray:
    """Temperature-scaled, top-k truncated probabilities (temperature > 0)."""
    z = logits.astype(np.float64) / temperature
    if top_k is not None and top_k < z.shape[-1]:
        kth = np.sort(z, axis=-1)[..., -top_k][..., None]
        z = np.where(z >= kth, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


def _draw(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[0])[:, None] * cdf[:, -1:]
    idx = (cdf <= u).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


@dataclass
class GenerationTrace:
    sub_tokens: np.ndarray     # [n, T, M]
    indices: np.ndarray        # [n, T]
    logits: list[list[np.ndarray]]  # per position, per sub-token: guided logits [n, V_m]


def generate(
    model: ARModel,
    class_id,
    n: int = 1,
    temperature: float = 1.0,
    top_k: int | None = None,
    guidance_scale: float = 2.0,
    seed: int | None = 0,
    return_trace: bool = False,
):
    """Sample ``n`` token sequences position by position, sub-token by sub-token.

    Guided logits are ``null + guidance_scale * (cond - null)``; a scale of 1
    skips the unconditional pass entirely.  ``temperature == 0`` is greedy.
    """
    cfg = model.config
    if temperature < 0:
        raise ValueError(f"temperature must be nonnegative, got {temperature}")
    if top_k is not None and top_k < 1:
        raise ValueError(f"top_k must be at least 1, got {top_k}")
    if n < 1:
        raise ValueError("n must be at least 1")
    ids = np.broadcast_to(model._check_classes(class_id), (n,)).copy()
    guided = guidance_scale != 1.0
    rng = np.random.default_rng(seed)
    if guided:
        ids = np.concatenate([ids, np.full(n, model.null_class)])
    M, T = cfg.scheme.M, cfg.seq_len
    sub = np.zeros((n, T, M), dtype=np.int64)
    trace: list[list[np.ndarray]] = []
    with ad.no_grad():
        dec = _Decoder(model, ids)
        for t in range(T):
            prev = None
            if t > 0:
                prev = sub[:, t - 1]
                if guided:
                    prev = np.concatenate([prev, prev])
            steps = dec.subtoken_logits(dec.context(prev))
            logits = next(steps)
            row = []
            for j in range(M):
                if guided:
                    cond, null = logits[:n].astype(np.float64), logits[n:].astype(np.float64)
                    lg = null + guidance_scale * (cond - null)
                else:
                    lg = logits.astype(np.float64)
                row.append(lg)
                if temperature == 0:
                    choice = np.argmax(lg, axis=-1)
                else:
                    choice = _draw(sampling_distribution(lg, temperature, top_k), rng)
                sub[:, t, j] = choice
                if j + 1 < M:
                    logits = steps.send(np.concatenate([choice, choice]) if guided else choice)
            trace.append(row)
    indices = defactorize(sub, cfg.scheme)
    if return_trace:
        return GenerationTrace(sub, indices, trace)
    return indices
