"""Two-step training: (1) adversarial pre-training of the generative memory
on intact images; (2) training the full inpainting model with the memory
frozen. Both steps are reproducible functions of (dataset, config, seed), log
one JSON line per step, and abort on any non-finite loss.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import imaging
from .checkpoint import load_checkpoint, save_checkpoint
from .exceptions import ConfigurationError, InvalidInputError
from .losses import (
    ConvFeatureExtractor,
    LossWeights,
    PatchDiscriminator,
    adversarial_generator_loss,
    discriminator_loss,
    kl_loss,
    perceptual_loss,
    reconstruction_loss,
    total_loss,
)
from .model import GMSRM, GenerativeMemory, ModelConfig


@dataclass(frozen=True)
class TrainConfig:
    """Optimization knobs. Defaults are the desk-scale settings; the reference
    protocol uses batch size 8 and trains for up to 100 epochs."""

    learning_rate: float = 2e-4
    batch_size: int = 4
    max_steps: int = 2000
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    augment: bool = True
    r1_gamma: float = 0.0
    disc_channels: int = 32
    checkpoint_every: int = 500

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise InvalidInputError("learning_rate must be positive")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


class ImageFolderData:
    """Eagerly loaded folder of images with seeded flip/crop augmentation.

    With augmentation on, images are loaded at 1.25x the target side (the
    shorter-side-resize headroom of the reference protocol) and randomly
    cropped per sample; horizontal flip with probability 0.5.
    """

    SUFFIXES = (".png", ".jpg", ".jpeg")

    def __init__(self, root: str | Path, image_side: int, augment: bool = True):
        root = Path(root)
        self.paths = sorted(
            p for p in root.iterdir() if p.suffix.lower() in self.SUFFIXES
        )
        if not self.paths:
            raise InvalidInputError(f"no images found under {root}")
        self.image_side = image_side
        self.augment = augment
        load_side = round(image_side * 1.25) if augment else image_side
        self.images = [imaging.load_image(p, load_side) for p in self.paths]

    def __len__(self) -> int:
        return len(self.paths)

    def sample_batch(self, rng: np.random.Generator, batch_size: int) -> np.ndarray:
        side = self.image_side
        out = np.empty((batch_size, self.images[0].shape[0], side, side),
                       dtype=np.float32)
        idx = rng.integers(0, len(self.images), size=batch_size)
        for b, i in enumerate(idx):
            img = self.images[int(i)]
            if self.augment:
                max_off = img.shape[1] - side
                top = int(rng.integers(0, max_off + 1))
                left = int(rng.integers(0, max_off + 1))
                img = img[:, top:top + side, left:left + side]
                if rng.random() < 0.5:
                    img = img[:, :, ::-1]
            out[b] = img
        return out


def sample_training_mask(rng: np.random.Generator, side: int) -> np.ndarray:
    """Random per-sample corruption: a center mask with ratio in [0.1, 0.5]
    or an irregular mask drawn from one of the protocol buckets."""
    if rng.random() < 0.5:
        ratio = float(rng.uniform(0.1, 0.5))
        return imaging.generate_center_mask(side, side, ratio)
    lo, hi = imaging.IRREGULAR_BUCKETS[int(rng.integers(len(imaging.IRREGULAR_BUCKETS)))]
    spec = imaging.MaskSpec("irregular", lo, hi, int(rng.integers(2**31)))
    return imaging.generate_irregular_mask(side, side, spec)


def build_variant(cfg: ModelConfig, seed: int = 0) -> GMSRM:
    """Assemble the model for one of the four ablation variants with
    reproducible initial weights."""
    return GMSRM(cfg, torch.Generator().manual_seed(seed))


def _assert_finite(losses: dict[str, float], step: int) -> None:
    bad = {k: v for k, v in losses.items() if not math.isfinite(v)}
    if bad:
        raise RuntimeError(f"non-finite loss at step {step}: {bad}")


def _r1_penalty(disc: PatchDiscriminator, real: torch.Tensor) -> torch.Tensor:
    real = real.detach().requires_grad_(True)
    score = disc(real).sum()
    (grad,) = torch.autograd.grad(score, real, create_graph=True)
    return grad.pow(2).sum(dim=(1, 2, 3)).mean()


class _StepLogger:
    def __init__(self, path: Path):
        self.path = path
        self.rows: list[dict] = []
        path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(path, "w")

    def log(self, row: dict) -> None:
        self.rows.append(row)
        self._fh.write(json.dumps(row) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def pretrain_memory(
    data_dir: str | Path,
    out_dir: str | Path,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
) -> Path:
    """Adversarially pre-train the generative memory as a standalone
    generator from random latents, against a spectrally normalized
    discriminator with the nonsaturating GAN loss. Returns the final
    checkpoint path (frozen-eligible memory weights).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = ImageFolderData(data_dir, model_cfg.image_side, train_cfg.augment)
    if len(data) < 2:
        raise InvalidInputError("memory pre-training needs at least 2 images")

    gen = torch.Generator().manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    memory = GenerativeMemory(model_cfg, gen)
    disc = PatchDiscriminator(model_cfg.in_channels, train_cfg.disc_channels, gen)
    opt_g = torch.optim.Adam(memory.parameters(), lr=train_cfg.learning_rate,
                             betas=(train_cfg.beta1, train_cfg.beta2))
    opt_d = torch.optim.Adam(disc.parameters(), lr=train_cfg.learning_rate,
                             betas=(train_cfg.beta1, train_cfg.beta2))
    logger = _StepLogger(out_dir / "pretrain_log.jsonl")

    def write_ckpt(step: int) -> Path:
        path = out_dir / f"ckpt_{step:06d}.pt"
        save_checkpoint(
            path, kind="memory", config=model_cfg.to_dict(),
            state=memory.state_dict(), disc_state=disc.state_dict(),
            optim_state=opt_g.state_dict(), disc_optim_state=opt_d.state_dict(),
            step=step, seed=train_cfg.seed, torch_rng=gen.get_state(),
            numpy_rng=rng.bit_generator.state,
        )
        return path

    last = None
    try:
        for step in range(1, train_cfg.max_steps + 1):
            real = torch.from_numpy(data.sample_batch(rng, train_cfg.batch_size))
            z = torch.randn(train_cfg.batch_size, model_cfg.d_c, generator=gen)
            fake = memory.generate(z, gen)

            loss_d = (F.softplus(-disc(real)).mean()
                      + F.softplus(disc(fake.detach())).mean())
            if train_cfg.r1_gamma > 0:
                loss_d = loss_d + 0.5 * train_cfg.r1_gamma * _r1_penalty(disc, real)
            opt_d.zero_grad()
            loss_d.backward()
            opt_d.step()

            loss_g = F.softplus(-disc(fake)).mean()
            opt_g.zero_grad()
            loss_g.backward()
            opt_g.step()

            row = {"step": step, "l_gen": loss_g.item(), "l_disc": loss_d.item()}
            _assert_finite(row, step)
            logger.log(row)
            if step % train_cfg.checkpoint_every == 0:
                last = write_ckpt(step)
        last = write_ckpt(train_cfg.max_steps)
    finally:
        logger.close()
    return last


def _check_memory_compat(model_cfg: ModelConfig, ckpt_cfg: dict) -> None:
    for key in ("image_side", "n_scales", "base_channels", "d_c", "in_channels"):
        if ckpt_cfg.get(key) != getattr(model_cfg, key):
            raise ConfigurationError(
                f"memory checkpoint is incompatible: {key}="
                f"{ckpt_cfg.get(key)} vs model {getattr(model_cfg, key)}"
            )


def load_memory_into(model: GMSRM, memory_ckpt: str | Path) -> None:
    """Load pre-trained memory weights into a model and freeze them."""
    payload = load_checkpoint(memory_ckpt, expected_kind="memory")
    _check_memory_compat(model.cfg, payload["config"])
    model.memory.load_state_dict(payload["state"])
    model.memory_pretrained = True
    model.freeze_memory()


def train_inpainting(
    data_dir: str | Path,
    memory_ckpt: str | Path | None,
    out_dir: str | Path,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    allow_untrained_memory: bool = False,
    stop_fn=None,
) -> Path:
    """Train the full model with alternating generator/discriminator Adam
    steps on freshly sampled masks. The memory stays frozen; its gradients
    are asserted to be identically absent at every step.

    ``stop_fn(model, step)`` may end training early (checkpointed as usual).
    Returns the final checkpoint path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = ImageFolderData(data_dir, model_cfg.image_side, train_cfg.augment)

    model = build_variant(model_cfg, train_cfg.seed)
    if model_cfg.has_memory:
        if memory_ckpt is not None:
            load_memory_into(model, memory_ckpt)
        elif allow_untrained_memory:
            model.freeze_memory()
        else:
            raise ConfigurationError(
                f"variant {model_cfg.variant!r} needs a pre-trained memory "
                "checkpoint"
            )
    elif memory_ckpt is not None:
        raise ConfigurationError("the base variant takes no memory checkpoint")

    gen = torch.Generator().manual_seed(train_cfg.seed + 1)
    rng = np.random.default_rng(train_cfg.seed + 1)
    disc = PatchDiscriminator(model_cfg.in_channels, train_cfg.disc_channels, gen)
    extractor = ConvFeatureExtractor(model_cfg.in_channels)
    weights = LossWeights()
    opt_g = torch.optim.Adam(model.trainable_parameters(),
                             lr=train_cfg.learning_rate,
                             betas=(train_cfg.beta1, train_cfg.beta2))
    opt_d = torch.optim.Adam(disc.parameters(), lr=train_cfg.learning_rate,
                             betas=(train_cfg.beta1, train_cfg.beta2))
    logger = _StepLogger(out_dir / "train_log.jsonl")

    def write_ckpt(step: int) -> Path:
        path = out_dir / f"ckpt_{step:06d}.pt"
        save_checkpoint(
            path, kind="model", config=model_cfg.to_dict(),
            state=model.state_dict(), disc_state=disc.state_dict(),
            optim_state=opt_g.state_dict(), disc_optim_state=opt_d.state_dict(),
            step=step, seed=train_cfg.seed, torch_rng=gen.get_state(),
            numpy_rng=rng.bit_generator.state,
        )
        return path

    side = model_cfg.image_side
    last = None
    try:
        for step in range(1, train_cfg.max_steps + 1):
            gt_np = data.sample_batch(rng, train_cfg.batch_size)
            masks_np = np.stack(
                [sample_training_mask(rng, side) for _ in range(train_cfg.batch_size)]
            )
            gt = torch.from_numpy(gt_np)
            mask = torch.from_numpy(masks_np)[:, None]
            masked = gt * mask

            out, aux = model(masked, mask, generator=gen)
            rec = reconstruction_loss(out, gt, mask, weights.gamma)
            perc = perceptual_loss(out, gt, extractor)
            adv = adversarial_generator_loss(disc, out)
            if aux["mu"]:
                klv = kl_loss(list(zip(aux["mu"], aux["sigma"])),
                              weights.kl_scale_weights(len(aux["mu"])))
            else:
                klv = torch.zeros(())
            tot = total_loss(rec, perc, adv, klv, weights)

            opt_g.zero_grad()
            tot.backward()
            leaked = [p for p in model.memory_parameters() if p.grad is not None]
            if leaked:
                raise RuntimeError(
                    f"frozen memory received gradients at step {step}"
                )
            opt_g.step()

            loss_d = discriminator_loss(disc, out.detach(), gt)
            opt_d.zero_grad()
            loss_d.backward()
            opt_d.step()

            row = {"step": step, "l_rec": rec.item(), "l_perc": perc.item(),
                   "l_adv": adv.item(), "l_kl": klv.item(),
                   "l_total": tot.item(), "l_disc": loss_d.item()}
            _assert_finite(row, step)
            logger.log(row)

            if step % train_cfg.checkpoint_every == 0:
                last = write_ckpt(step)
            if stop_fn is not None and stop_fn(model, step):
                return write_ckpt(step)
        last = write_ckpt(train_cfg.max_steps)
    finally:
        logger.close()
    return last


def load_model(ckpt_path: str | Path) -> GMSRM:
    """Rebuild a model from a training checkpoint."""
    payload = load_checkpoint(ckpt_path, expected_kind="model")
    cfg = ModelConfig.from_dict(payload["config"])
    model = build_variant(cfg, payload.get("seed", 0))
    model.load_state_dict(payload["state"])
    if cfg.has_memory:
        model.memory_pretrained = True
        model.freeze_memory()
    model.eval()
    return model
