"""U-Net whole-gland segmenter with Dice training and plateau LR schedule."""

from __future__ import annotations

import io
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .augment import AugmentSpec, build_augmented_epoch
from .dataio import SliceSample


@dataclass
class UNetConfig:
    input_size: tuple[int, int] = (256, 256)
    depth: int = 4  # encoder levels before the bottleneck
    base_channels: int = 64
    batch_norm: bool = True

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1:
            raise ValueError("depth and base_channels must be positive")
        div = 2 ** self.depth
        if self.input_size[0] % div or self.input_size[1] % div:
            raise ValueError(
                f"input size {self.input_size} not divisible by 2^depth={div}"
            )


@dataclass
class SegTrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr_init: float = 1e-3
    plateau_patience: int = 10
    plateau_factor: float = 0.1

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.plateau_patience) < 1 or self.lr_init <= 0:
            raise ValueError("training settings must be positive")
        if not (0 < self.plateau_factor < 1):
            raise ValueError("plateau_factor must be in (0,1)")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_dsc: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss,val_dsc,lr"]
        for i in range(len(self.lr)):
            lines.append(
                f"{i + 1},{self.train_loss[i]:.6f},{self.val_loss[i]:.6f},"
                f"{self.val_dsc[i]:.6f},{self.lr[i]:.6e}"
            )
        return "\n".join(lines) + "\n"


class PlateauScheduler:
    """Multiply the LR by `factor` after `patience` epochs without improvement.

    Improvement is a strict decrease of the monitored loss (min-delta 0); the
    wait counter resets after every drop.
    """

    def __init__(self, lr_init: float, patience: int, factor: float):
        self.lr = lr_init
        self.patience = patience
        self.factor = factor
        self.best = float("inf")
        self.wait = 0

    def step(self, loss: float) -> float:
        """Record one epoch's monitored loss; returns the LR for the next epoch."""
        if loss < self.best:
            self.best = loss
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr = self.lr * self.factor
                self.wait = 0
        return self.lr


def _conv_block(in_ch: int, out_ch: int, batch_norm: bool) -> nn.Sequential:
    layers: list[nn.Module] = [nn.Conv2d(in_ch, out_ch, 3, padding=1)]
    if batch_norm:
        layers.append(nn.BatchNorm2d(out_ch))
    layers.append(nn.ReLU(inplace=True))
    layers.append(nn.Conv2d(out_ch, out_ch, 3, padding=1))
    if batch_norm:
        layers.append(nn.BatchNorm2d(out_ch))
    layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


class UNet(nn.Module):
    """Same-padding U-Net: encoder/decoder with skip concatenation, sigmoid output."""

    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        ch = [config.base_channels * 2 ** i for i in range(config.depth + 1)]

        self.encoders = nn.ModuleList()
        in_ch = 1
        for c in ch[:-1]:
            self.encoders.append(_conv_block(in_ch, c, config.batch_norm))
            in_ch = c
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _conv_block(ch[-2], ch[-1], config.batch_norm)

        self.upconvs = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for c in reversed(ch[:-1]):
            self.upconvs.append(nn.ConvTranspose2d(c * 2, c, 2, stride=2))
            self.decoders.append(_conv_block(c * 2, c, config.batch_norm))
        self.head = nn.Conv2d(ch[0], 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.upconvs, self.decoders, reversed(skips)):
            x = up(x)
            x = dec(torch.cat([skip, x], dim=1))
        return torch.sigmoid(self.head(x))


def build_unet(config: UNetConfig, seed: int | None = None) -> UNet:
    if seed is not None:
        torch.manual_seed(seed)
    return UNet(config)


def soft_dice_loss(
    pred: torch.Tensor, target: torch.Tensor, eps: float = 1.0
) -> torch.Tensor:
    """1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps) over all elements."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    inter = (pred * target).sum()
    return 1.0 - (2.0 * inter + eps) / (pred.sum() + target.sum() + eps)


def samples_to_tensors(samples: list[SliceSample]) -> tuple[torch.Tensor, torch.Tensor]:
    images = torch.from_numpy(
        np.stack([s.image for s in samples]).astype(np.float32)
    ).unsqueeze(1)
    masks = torch.from_numpy(
        np.stack([s.mask for s in samples]).astype(np.float32)
    ).unsqueeze(1)
    return images, masks


@torch.no_grad()
def _validate(model: UNet, images: torch.Tensor, masks: torch.Tensor, batch: int) -> tuple[float, float]:
    model.eval()
    losses, dscs = [], []
    for i in range(0, len(images), batch):
        pred = model(images[i : i + batch])
        t = masks[i : i + batch]
        losses.append(float(soft_dice_loss(pred, t)))
        hard = (pred >= 0.5).float()
        inter = (hard * t).sum()
        denom = hard.sum() + t.sum()
        dscs.append(1.0 if denom == 0 else float(2.0 * inter / denom))
    return float(np.mean(losses)), float(np.mean(dscs))


def train_segmenter(
    model: UNet,
    train_samples: list[SliceSample],
    val_samples: list[SliceSample],
    config: SegTrainConfig,
    seed: int,
    augment_spec: AugmentSpec | None = None,
) -> tuple[UNet, TrainHistory]:
    """Train with Adam + soft Dice; keeps the best-validation-loss weights.

    When augment_spec carries enabled transforms, every epoch trains on a
    freshly transformed variant of each sample (on-the-fly augmentation).
    """
    if not train_samples or not val_samples:
        raise ValueError("train and validation splits must be nonempty")

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr_init)
    scheduler = PlateauScheduler(config.lr_init, config.plateau_patience, config.plateau_factor)
    history = TrainHistory()

    val_images, val_masks = samples_to_tensors(val_samples)
    augmenting = augment_spec is not None and augment_spec.enabled

    best_loss = float("inf")
    best_state = {k: v.clone() for k, v in model.state_dict().items()}

    for epoch in range(config.epochs):
        epoch_samples = train_samples
        if augmenting:
            epoch_samples = build_augmented_epoch(
                train_samples, augment_spec, int(rng.integers(0, 2 ** 31))
            )
        images, masks = samples_to_tensors(epoch_samples)

        lr = scheduler.lr
        for group in optimizer.param_groups:
            group["lr"] = lr

        model.train()
        order = rng.permutation(len(images))
        batch_losses = []
        for i in range(0, len(order), config.batch_size):
            idx = order[i : i + config.batch_size]
            optimizer.zero_grad()
            loss = soft_dice_loss(model(images[idx]), masks[idx])
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite training loss at epoch {epoch + 1}: {loss.item()}"
                )
            loss.backward()
            optimizer.step()
            batch_losses.append(loss.item())

        val_loss, val_dsc = _validate(model, val_images, val_masks, config.batch_size)
        if not np.isfinite(val_loss):
            raise RuntimeError(f"non-finite validation loss at epoch {epoch + 1}")

        history.train_loss.append(float(np.mean(batch_losses)))
        history.val_loss.append(val_loss)
        history.val_dsc.append(val_dsc)
        history.lr.append(lr)

        if val_loss < best_loss:
            best_loss = val_loss
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
        scheduler.step(val_loss)

    model.load_state_dict(best_state)
    return model, history


@torch.no_grad()
def predict_mask(model: UNet, image: np.ndarray) -> np.ndarray:
    """Probability map thresholded at 0.5 into a binary mask."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {image.shape}")
    div = 2 ** model.config.depth
    if image.shape[0] % div or image.shape[1] % div:
        raise ValueError(f"image shape {image.shape} not divisible by {div}")
    model.eval()
    x = torch.from_numpy(image.astype(np.float32))[None, None]
    prob = model(x)[0, 0].numpy()
    return (prob >= 0.5).astype(np.uint8)


def save_checkpoint(
    path: Path | str,
    model: UNet,
    train_config: SegTrainConfig | None = None,
    seed: int | None = None,
) -> None:
    torch.save(
        {
            "state_dict": model.state_dict(),
            "unet_config": asdict(model.config),
            "train_config": asdict(train_config) if train_config else None,
            "seed": seed,
        },
        path,
    )


def load_checkpoint(path: Path | str) -> UNet:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    cfg = blob["unet_config"]
    cfg["input_size"] = tuple(cfg["input_size"])
    model = UNet(UNetConfig(**cfg))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model
