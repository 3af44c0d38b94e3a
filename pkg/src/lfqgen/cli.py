"""Command line entry point.

Failures print one line ``error: <category>: <message>`` on stderr and exit
with the category's code; argparse handles usage errors (exit 2).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config
from .data import (
    DataError,
    ImageDataset,
    load_dataset,
    read_image,
    read_manifest,
    read_tokens,
    save_dataset,
    synthetic_textures,
    write_tokens,
)
from .estimators import FactorizedARGenerator, LFQTokenizer
from .metrics import MetricReport, fingerprint, frechet_images, mse, psnr, usage_report
from .train import ARTrainer, TokenizerTrainer, load_generator, load_tokenizer, resume

log = logging.getLogger("lfqgen")

EXIT_CODES = {"io": 3, "config": 4, "data": 5, "checkpoint": 6, "numeric": 7}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _require(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError("io", f"{what} not found: {path}")
    return p


def _load_training_images(cfg: RunConfig) -> ImageDataset:
    """``dataset`` is a manifest path or ``synthetic:N`` for seeded textures."""
    if cfg.dataset.startswith("synthetic:"):
        try:
            n = int(cfg.dataset.split(":", 1)[1])
        except ValueError:
            raise CliError("config", f"bad synthetic dataset spec {cfg.dataset!r}") from None
        images = synthetic_textures(n, size=cfg.image_size, seed=cfg.seed)
        return ImageDataset(images, np.arange(n) % cfg.num_classes)
    if not cfg.dataset:
        raise CliError("config", "config does not name a dataset")
    _require(cfg.dataset, "dataset manifest")
    return load_dataset(cfg.dataset, image_size=cfg.image_size, channels=cfg.in_channels)


def _checkpoint_target(cfg: RunConfig) -> str:
    if not cfg.checkpoint:
        raise CliError("config", "config does not name a checkpoint path")
    return cfg.checkpoint


def _train(trainer, cfg: RunConfig, resume_run: bool) -> None:
    target = _checkpoint_target(cfg)
    if resume_run and Path(target).exists():
        resume(trainer, target)
        log.info("resumed %s at step %d", trainer.stage, trainer.step)
    trainer.run()
    trainer.save(target)
    last = trainer.history[-1]["loss"] if trainer.history else float("nan")
    print(f"{trainer.stage}: {trainer.step} steps, final loss {last:.6f}, checkpoint {target}")


def cmd_train_tokenizer(args) -> None:
    cfg = load_config(str(_require(args.config, "config")))
    if cfg.stage != "tokenizer":
        raise CliError("config", f"stage is {cfg.stage!r}, expected 'tokenizer'")
    data = _load_training_images(cfg)
    _train(TokenizerTrainer(cfg, data.images), cfg, args.resume)


def cmd_train_ar(args) -> None:
    cfg = load_config(str(_require(args.config, "config")))
    if cfg.stage != "ar":
        raise CliError("config", f"stage is {cfg.stage!r}, expected 'ar'")
    _, model = load_tokenizer(_require(args.tokenizer, "tokenizer checkpoint"))
    tok_cfg = model.config
    if sum(cfg.subtoken_bits) != tok_cfg.bits:
        raise CliError("config", f"subtoken_bits sum to {sum(cfg.subtoken_bits)}, tokenizer uses {tok_cfg.bits} bits")
    if cfg.seq_len != tok_cfg.grid_size ** 2:
        raise CliError("config", f"seq_len is {cfg.seq_len}, tokenizer grids hold {tok_cfg.grid_size ** 2} tokens")
    data = _load_training_images(cfg.replace(image_size=tok_cfg.image_size, in_channels=tok_cfg.in_channels))
    if data.labels.size and data.labels.max() >= cfg.num_classes:
        raise CliError("data", f"class id {data.labels.max()} exceeds num_classes={cfg.num_classes}")
    grids = LFQTokenizer.from_model(model).transform(data.images)
    _train(ARTrainer(cfg, data.labels, grids), cfg, args.resume)


def _read_image_dir(directory: Path) -> tuple[np.ndarray, np.ndarray]:
    manifest = directory / "manifest.tsv"
    if manifest.exists():
        records = read_manifest(manifest).records
    else:
        records = [(p.name, 0) for p in sorted(directory.glob("*.lfqi"))]
    if not records:
        raise CliError("data", f"no images in {directory}")
    images = np.stack([read_image(directory / rel) for rel, _ in records])
    return images, np.array([cls for _, cls in records], dtype=np.int64)


def cmd_encode(args) -> None:
    _, model = load_tokenizer(_require(args.tokenizer, "tokenizer checkpoint"))
    directory = _require(args.inp, "input directory")
    images, _ = _read_image_dir(directory)
    grids = LFQTokenizer.from_model(model).transform(images)
    write_tokens(args.out, grids, model.config.bits)
    print(f"encoded {len(grids)} images to {args.out}")


def cmd_decode(args) -> None:
    _, model = load_tokenizer(_require(args.tokenizer, "tokenizer checkpoint"))
    grids, bits = read_tokens(_require(args.inp, "token file"))
    if bits != model.config.bits:
        raise CliError("data", f"token file uses {bits} bits, tokenizer expects {model.config.bits}")
    images = LFQTokenizer.from_model(model).inverse_transform(grids)
    save_dataset(args.out, images, np.zeros(len(images), dtype=np.int64))
    print(f"decoded {len(images)} images to {args.out}")


def cmd_generate(args) -> None:
    _, ar_model = load_generator(_require(args.ar, "AR checkpoint"))
    _, tok_model = load_tokenizer(_require(args.tokenizer, "tokenizer checkpoint"))
    if ar_model.config.scheme.total_bits != tok_model.config.bits:
        raise CliError("checkpoint", "AR and tokenizer checkpoints disagree on bits per token")
    if not 0 <= args.class_id < ar_model.config.num_classes:
        raise CliError("data", f"class id must lie in [0, {ar_model.config.num_classes})")
    side = tok_model.config.grid_size
    gen = FactorizedARGenerator.from_model(ar_model, (side, side))
    grids = gen.sample(args.class_id, n=args.n, temperature=args.temperature, top_k=args.top_k,
                       guidance_scale=args.guidance, seed=args.seed)
    images = LFQTokenizer.from_model(tok_model).inverse_transform(grids)
    save_dataset(args.out, images, np.full(args.n, args.class_id))
    print(f"generated {args.n} images of class {args.class_id} to {args.out}")


def cmd_eval(args) -> None:
    cfg, model = load_tokenizer(_require(args.tokenizer, "tokenizer checkpoint"))
    _require(args.data, "dataset manifest")
    data = load_dataset(args.data, image_size=model.config.image_size, channels=model.config.in_channels)
    if len(data) == 0:
        raise CliError("data", f"manifest {args.data} lists no images")
    tok = LFQTokenizer.from_model(model)
    grids = tok.transform(data.images)
    recon = tok.inverse_transform(grids)
    report = usage_report(grids, model.config.bits, fingerprint(cfg.to_text()))
    err = mse(data.images, recon)
    metrics = dict(report.metrics)
    metrics["mse"] = err
    metrics["psnr_db"] = psnr(data.images, recon).db
    if len(data) >= 2:
        metrics["frechet_random_features"] = frechet_images(data.images, recon)
    sys.stdout.write(MetricReport(metrics, len(data), report.config_fingerprint).to_text())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lfqgen", description="Lookup-free image tokenizer and factorized AR generator.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("train-tokenizer", help="train the image tokenizer")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", action="store_true", help="continue from the configured checkpoint if present")
    p.set_defaults(func=cmd_train_tokenizer)

    p = sub.add_parser("train-ar", help="train the generator on tokenized images")
    p.add_argument("--config", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train_ar)

    p = sub.add_parser("encode", help="images in a directory -> token file")
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="token file -> images in a directory")
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("generate", help="sample class-conditional images")
    p.add_argument("--ar", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--class", dest="class_id", type=int, required=True)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--top-k", type=int, default=None)
    p.add_argument("--guidance", type=float, default=2.0)
    p.add_argument("--out", default="samples")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="reconstruction and codebook usage report")
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth-data", help="write seeded synthetic textures with a manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_data)
    return parser


def cmd_synth_data(args) -> None:
    images = synthetic_textures(args.n, size=args.size, seed=args.seed)
    manifest = save_dataset(args.out, images, np.arange(args.n) % args.classes)
    print(f"wrote {args.n} textures, manifest {manifest}")


def _categorize(exc: BaseException) -> tuple[str, str]:
    if isinstance(exc, CliError):
        return exc.category, str(exc)
    if isinstance(exc, (FileNotFoundError, IsADirectoryError, PermissionError)):
        return "io", f"{exc.strerror}: {exc.filename}"
    if isinstance(exc, OSError):
        return "io", str(exc)
    if isinstance(exc, ConfigError):
        return "config", str(exc)
    if isinstance(exc, CheckpointError):
        return "checkpoint", str(exc)
    if isinstance(exc, DataError):
        return "data", str(exc)
    if isinstance(exc, FloatingPointError):
        return "numeric", str(exc)
    if isinstance(exc, ValueError):
        return "data", str(exc)
    raise exc


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    ad.reset_nonfinite()
    try:
        args.func(args)
    except (CliError, OSError, ValueError, FloatingPointError) as exc:
        category, message = _categorize(exc)
        print(f"error: {category}: {' '.join(message.split())}", file=sys.stderr)
        return EXIT_CODES[category]
    return 0


if __name__ == "__main__":
    sys.exit(main())
