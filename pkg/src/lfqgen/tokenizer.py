"""CNN encoder -> LFQ -> CNN decoder image tokenizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import lfq
from .autodiff import ShapeError, Tensor
from .nn import AdaptiveGroupNorm, Conv2d, GroupNorm, Init, Module, depth_to_space, silu


@dataclass(frozen=True)
class TokenizerConfig:
    image_size: int = 32
    in_channels: int = 3
    channels: tuple[int, ...] = (32, 64, 128)
    res_blocks: int = 1
    groups: int = 8
    lfq: lfq.LFQConfig = field(default_factory=lfq.LFQConfig)

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not self.channels:
            raise ValueError("at least one stage is required")
        if self.image_size % self.downsample:
            raise ValueError(
                f"image size {self.image_size} is not a multiple of the downsample ratio {self.downsample}"
            )
        for c in self.channels:
            if c % self.groups:
                raise ValueError(f"channel count {c} not divisible by {self.groups} groups")

    @property
    def downsample(self) -> int:
        return 2 ** len(self.channels)

    @property
    def bits(self) -> int:
        return self.lfq.bits

    @property
    def grid_size(self) -> int:
        return self.image_size // self.downsample


@dataclass
class QuantizedMap:
    codes: np.ndarray    # [B, K, H', W'] in {-1, +1}
    indices: np.ndarray  # [B, H', W'] in [0, 2^K)


class ResBlock(Module):
    def __init__(self, c_in: int, c_out: int, groups: int, init: Init, cond_dim: int | None = None):
        if cond_dim is None:
            self.norm1 = GroupNorm(c_in, groups, init)
            self.norm2 = GroupNorm(c_out, groups, init)
        else:
            self.norm1 = AdaptiveGroupNorm(c_in, cond_dim, groups, init)
            self.norm2 = AdaptiveGroupNorm(c_out, cond_dim, groups, init)
        self.conv1 = Conv2d(c_in, c_out, 3, init)
        self.conv2 = Conv2d(c_out, c_out, 3, init)
        self.skip = Conv2d(c_in, c_out, 1, init) if c_in != c_out else None
        self.conditioned = cond_dim is not None

    def _norm(self, norm, x, quant):
        return norm(x, quant) if self.conditioned else norm(x)

    def __call__(self, x: Tensor, quant: Tensor | None = None) -> Tensor:
        h = self.conv1(silu(self._norm(self.norm1, x, quant)))
        h = self.conv2(silu(self._norm(self.norm2, h, quant)))
        base = self.skip(x) if self.skip is not None else x
        return base + h


class Encoder(Module):
    def __init__(self, cfg: TokenizerConfig, init: Init):
        c0 = cfg.channels[0]
        self.conv_in = Conv2d(cfg.in_channels, c0, 3, init)
        blocks, downs = [], []
        c_prev = c0
        for c in cfg.channels:
            stage = []
            for _ in range(cfg.res_blocks):
                stage.append(ResBlock(c_prev, c, cfg.groups, init))
                c_prev = c
            blocks.append(stage)
            downs.append(Conv2d(c, c, 3, init, stride=2))
        self.blocks = [b for stage in blocks for b in stage]
        self.downs = downs
        self.res_blocks = cfg.res_blocks
        self.norm_out = GroupNorm(c_prev, cfg.groups, init)
        self.conv_out = Conv2d(c_prev, cfg.bits, 1, init)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv_in(x)
        for s, down in enumerate(self.downs):
            for block in self.blocks[s * self.res_blocks:(s + 1) * self.res_blocks]:
                h = block(h)
            h = down(h)
        return self.conv_out(silu(self.norm_out(h)))


class Decoder(Module):
    def __init__(self, cfg: TokenizerConfig, init: Init):
        chans = list(reversed(cfg.channels))
        K = cfg.bits
        self.conv_in = Conv2d(K, chans[0], 3, init)
        blocks, ups = [], []
        c_prev = chans[0]
        for i, c in enumerate(chans):
            for _ in range(cfg.res_blocks):
                blocks.append(ResBlock(c_prev, c, cfg.groups, init, cond_dim=K))
                c_prev = c
            c_next = chans[i + 1] if i + 1 < len(chans) else c
            ups.append(Conv2d(c, c_next * 4, 3, init))
            c_prev = c_next
        self.blocks = blocks
        self.ups = ups
        self.res_blocks = cfg.res_blocks
        self.norm_out = GroupNorm(c_prev, cfg.groups, init)
        self.conv_out = Conv2d(c_prev, cfg.in_channels, 3, init)

    def __call__(self, quant: Tensor) -> Tensor:
        h = self.conv_in(quant)
        for s, up in enumerate(self.ups):
            for block in self.blocks[s * self.res_blocks:(s + 1) * self.res_blocks]:
                h = block(h, quant)
            h = depth_to_space(up(h), 2)
        return self.conv_out(silu(self.norm_out(h)))


class TokenizerModel(Module):
    """Encoder, lookup-free quantizer and adaptive-norm decoder."""

    def __init__(self, cfg: TokenizerConfig, seed: int = 0, dtype=np.float32, meta: bool = False):
        init = Init(seed, dtype=dtype, meta=meta)
        self.config = cfg
        self.encoder = Encoder(cfg, init)
        self.decoder = Decoder(cfg, init)
        self.dtype = np.dtype(dtype)

    def _check_images(self, images: Tensor) -> Tensor:
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images, dtype=self.dtype))
        cfg = self.config
        expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise ShapeError("encode", images.shape, (None,) + expected)
        return images

    def latents(self, images) -> Tensor:
        return self.encoder(self._check_images(images))

    def encode(self, images) -> tuple[Tensor, QuantizedMap]:
        z = self.latents(images)
        if z.shape[1] != self.config.bits:
            raise ShapeError("encode", z.shape, (self.config.bits,))
        codes = lfq.quantize_sign(z)
        return z, QuantizedMap(codes=codes, indices=lfq.code_to_index(codes, axis=1))

    def decode_codes(self, codes) -> Tensor:
        if not isinstance(codes, Tensor):
            codes = Tensor(np.asarray(codes, dtype=self.dtype))
        return self.decoder(codes)

    def decode(self, indices) -> Tensor:
        idx = np.asarray(indices)
        g = self.config.grid_size
        if idx.ndim != 3 or idx.shape[1:] != (g, g):
            raise ShapeError("decode", idx.shape, (None, g, g))
        codes = lfq.index_to_code(idx, self.config.bits, axis=1, dtype=self.dtype)
        return self.decode_codes(codes)

    def tokenize(self, images) -> np.ndarray:
        with ad.no_grad():
            return self.encode(images)[1].indices

    def reconstruct(self, images) -> np.ndarray:
        with ad.no_grad():
            _, qmap = self.encode(images)
            return self.decode_codes(qmap.codes).data


@dataclass
class LossParts:
    total: Tensor
    reconstruction: Tensor
    entropy: Tensor
    commitment: Tensor
    indices: np.ndarray


def quantization_offset(model: TokenizerModel, images) -> np.ndarray:
    """``sign(z) - z`` at the current parameters, for surrogate gradient checks."""
    with ad.no_grad():
        z = model.latents(images).data
    return lfq.quantize_sign(z) - z


def tokenizer_loss(
    model: TokenizerModel,
    images,
    entropy_weight: float | None = None,
    commitment_weight: float | None = None,
    quant_offset: np.ndarray | None = None,
) -> LossParts:
    """Reconstruction MSE plus weighted entropy and commitment terms."""
    cfg = model.config.lfq
    we = cfg.entropy_weight if entropy_weight is None else entropy_weight
    wc = cfg.commitment_weight if commitment_weight is None else commitment_weight
    images = model._check_images(images)
    z = model.encoder(images)
    quant = lfq.straight_through(z, quant_offset)
    recon = model.decoder(quant)
    diff = recon - images
    rec = ad.mean(diff * diff)

    B, K, Hq, Wq = z.shape
    flat = ad.reshape(ad.transpose(z, (0, 2, 3, 1)), (B * Hq * Wq, K))
    ent = lfq.entropy_loss(flat, cfg.temperature, cfg.entropy_mode)
    # with a frozen offset the surrogate codes sit at +-1 and cannot flip sign
    codes = lfq.quantize_sign(z if quant_offset is None else z.data + quant_offset)
    com = lfq.commitment_loss(z, codes)

    total = rec
    if we:
        total = total + ent * we
    if wc:
        total = total + com * wc
    if ad.nonfinite_seen():
        raise FloatingPointError("tokenizer loss: non-finite value encountered")
    indices = lfq.code_to_index(codes, axis=1)
    return LossParts(total, rec, ent, com, indices)
