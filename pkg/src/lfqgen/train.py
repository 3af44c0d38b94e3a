"""Training loops and checkpoint plumbing for both stages.

All randomness in a step (batch order, dropout, class dropping) is derived
from ``(seed, step)``, so a run resumed from a checkpoint replays exactly the
updates an uninterrupted run would have made.
"""

from __future__ import annotations

import logging
from typing import Callable

import numpy as np

from . import autodiff as ad
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, parse_config
from .factorize import factorize
from .generator import ARModel, train_loss
from .lfq import UsageCounter
from .optim import Adam, clip_grad_norm, global_norm, lr_schedule
from .tokenizer import TokenizerModel, tokenizer_loss

log = logging.getLogger("lfqgen")

_PREFIX = {"tokenizer": "tokenizer/", "ar": "ar/"}


def _batch_indices(step: int, batch_size: int, n: int, seed: int) -> np.ndarray:
    """Indices for ``step`` from seeded per-epoch permutations."""
    flat = step * batch_size + np.arange(batch_size)
    epochs, pos = np.divmod(flat, n)
    out = np.empty(batch_size, dtype=np.int64)
    for e in np.unique(epochs):
        perm = np.random.default_rng([seed, 1, int(e)]).permutation(n)
        sel = epochs == e
        out[sel] = perm[pos[sel]]
    return out


class Trainer:
    stage = ""

    def __init__(self, config: RunConfig, model, n_samples: int):
        if n_samples < 1:
            raise ValueError("training needs at least one sample")
        self.config = config
        self.model = model
        self.n_samples = n_samples
        self.params = model.parameters()
        self.names = [name for name, _ in model.named_parameters()]
        self.optimizer = Adam(
            self.params,
            beta1=config.beta1,
            beta2=config.beta2,
            weight_decay=config.weight_decay,
            decoupled=self.stage == "ar",
        )
        self.step = 0
        self.history: list[dict] = []
        ad.reset_nonfinite()

    def compute_loss(self, idx: np.ndarray, rng: np.random.Generator):
        raise NotImplementedError

    def train_step(self) -> dict:
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, 2, self.step])
        idx = _batch_indices(self.step, min(cfg.batch_size, self.n_samples), self.n_samples, cfg.seed)
        self.model.train()
        self.model.zero_grad()
        loss, info = self.compute_loss(idx, rng)
        loss.backward()
        grads = [p.grad for p in self.params]
        if cfg.grad_clip > 0:
            _, norm = clip_grad_norm(grads, cfg.grad_clip)
        else:
            norm = global_norm(grads)
        if not np.isfinite(norm) or ad.nonfinite_seen():
            raise FloatingPointError(f"non-finite gradient at step {self.step}")
        lr = lr_schedule(self.step + 1, cfg.warmup_steps, cfg.lr, cfg.batch_size)
        self.optimizer.step(lr, grads)
        self.step += 1
        record = {"step": self.step, "loss": loss.item(), "grad_norm": norm, "lr": lr, **info}
        self.history.append(record)
        return record

    def run(self, steps: int | None = None, callback: Callable[[dict], bool | None] | None = None) -> list[dict]:
        """Train until ``steps`` total updates; ``callback`` returning True stops early."""
        target = self.config.steps if steps is None else steps
        every = max(1, self.config.log_every)
        while self.step < target:
            record = self.train_step()
            if record["step"] % every == 0:
                log.info("%s step %d loss %.5f", self.stage, record["step"], record["loss"])
            ckpt_every = self.config.checkpoint_every
            if ckpt_every and self.config.checkpoint and record["step"] % ckpt_every == 0:
                self.save(self.config.checkpoint)
            if callback is not None and callback(record):
                break
        self.model.eval()
        return self.history

    # -- persistence -------------------------------------------------------------
    def state_records(self) -> dict[str, np.ndarray]:
        prefix = _PREFIX[self.stage]
        records = {}
        for name, p, m, v in zip(self.names, self.params, self.optimizer.m, self.optimizer.v):
            records[prefix + name] = p.data
            records["adam/m/" + name] = m
            records["adam/v/" + name] = v
        records["meta/step"] = np.array([self.step], dtype=np.int64)
        records["meta/adam_t"] = np.array([self.optimizer.t], dtype=np.int64)
        return records

    def save(self, path) -> None:
        save_checkpoint(path, self.config.to_text(), self.state_records())

    def load_state(self, records: dict[str, np.ndarray]) -> None:
        prefix = _PREFIX[self.stage]
        try:
            for i, (name, p) in enumerate(zip(self.names, self.params)):
                p.data = np.array(records[prefix + name], dtype=p.dtype)
                p.zero_grad()
                self.optimizer.m[i] = np.array(records["adam/m/" + name], dtype=p.dtype)
                self.optimizer.v[i] = np.array(records["adam/v/" + name], dtype=p.dtype)
            self.step = int(records["meta/step"][0])
            self.optimizer.t = int(records["meta/adam_t"][0])
        except KeyError as exc:
            raise CheckpointError(f"checkpoint lacks record {exc.args[0]!r}") from None


class TokenizerTrainer(Trainer):
    stage = "tokenizer"

    def __init__(self, config: RunConfig, images: np.ndarray, model: TokenizerModel | None = None):
        if model is None:
            model = TokenizerModel(config.tokenizer_config(), seed=config.seed, dtype=config.dtype)
        self.images = np.asarray(images, dtype=model.dtype)
        super().__init__(config, model, len(self.images))

    def compute_loss(self, idx, rng):
        parts = tokenizer_loss(self.model, self.images[idx])
        info = {
            "reconstruction": parts.reconstruction.item(),
            "entropy": parts.entropy.item(),
            "commitment": parts.commitment.item(),
            "batch_usage": UsageCounter(self.model.config.bits).update(parts.indices).usage,
        }
        return parts.total, info


class ARTrainer(Trainer):
    stage = "ar"

    def __init__(self, config: RunConfig, class_ids, grids, model: ARModel | None = None):
        if model is None:
            model = ARModel(config.ar_config(), seed=config.seed, dtype=config.dtype)
        grids = np.asarray(grids, dtype=np.int64)
        self.sub_tokens = factorize(grids.reshape(len(grids), -1), model.config.scheme)
        if self.sub_tokens.shape[1] != model.config.seq_len:
            raise ValueError(
                f"token grids hold {self.sub_tokens.shape[1]} positions, model expects {model.config.seq_len}"
            )
        self.class_ids = np.asarray(class_ids, dtype=np.int64)
        super().__init__(config, model, len(self.sub_tokens))

    def compute_loss(self, idx, rng):
        return train_loss(self.model, self.class_ids[idx], self.sub_tokens[idx], rng=rng), {}


# -- loading trained models --------------------------------------------------------

def _config_from_checkpoint(text: str) -> RunConfig:
    try:
        return parse_config(text)
    except ConfigError as exc:
        raise CheckpointError(f"embedded config is invalid: {exc}") from None


def _strip(records: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in records.items() if k.startswith(prefix)}


def load_tokenizer(path) -> tuple[RunConfig, TokenizerModel]:
    text, records = load_checkpoint(path)
    cfg = _config_from_checkpoint(text)
    model = TokenizerModel(cfg.tokenizer_config(), seed=cfg.seed, dtype=cfg.dtype)
    try:
        model.load_state_dict(_strip(records, "tokenizer/"))
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: not a tokenizer checkpoint ({exc})") from None
    model.eval()
    return cfg, model


def load_generator(path) -> tuple[RunConfig, ARModel]:
    text, records = load_checkpoint(path)
    cfg = _config_from_checkpoint(text)
    model = ARModel(cfg.ar_config(), seed=cfg.seed, dtype=cfg.dtype)
    try:
        model.load_state_dict(_strip(records, "ar/"))
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: not an AR checkpoint ({exc})") from None
    model.eval()
    return cfg, model


def resume(trainer: Trainer, path) -> Trainer:
    _, records = load_checkpoint(path)
    trainer.load_state(records)
    return trainer
