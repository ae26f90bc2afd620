"""DCGAN that synthesizes whole-gland masks from 100-d normal latent vectors.

The generator projects the latent vector to a 4x4 feature map and upsamples
with stride-2 transposed convolutions to the working resolution (six stages
at 256, matching a stock DCGAN plus two extra layers); hidden activations are
LeakyReLU, the output is tanh. The discriminator mirrors the generator with
stride-2 convolutions down to 4x4.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from PIL import Image

LATENT_DIM = 100


@dataclass
class MaskGanConfig:
    image_size: int = 256
    latent_dim: int = LATENT_DIM
    epochs: int = 1500
    batch_size: int = 32
    lr: float = 2e-4
    g_lr: float | None = None  # generator LR; defaults to lr
    beta1: float = 0.5
    base_channels: int = 32  # width of the last hidden generator stage
    leaky_slope: float = 0.2
    d_input_noise: float = 0.0  # sigma of noise added to D inputs during training
    target_iters: int | None = None  # optional cap for small-scale runs

    def __post_init__(self):
        stages = math.log2(self.image_size / 4)
        if stages != int(stages) or stages < 1:
            raise ValueError(f"image_size must be 4*2^k, got {self.image_size}")

    @property
    def n_stages(self) -> int:
        return int(math.log2(self.image_size / 4))

    def stage_channels(self) -> list[int]:
        """Feature widths from the 4x4 seed map down to the last hidden stage."""
        return [self.base_channels * 2 ** i for i in reversed(range(self.n_stages))]


@dataclass
class GanHistory:
    d_loss: list[float] = field(default_factory=list)
    g_loss: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.d_loss)


def sample_latent(n: int, seed: int) -> np.ndarray:
    """n standard-normal latent vectors of length 100, deterministic per seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return np.random.default_rng(seed).standard_normal((n, LATENT_DIM)).astype(np.float32)


class MaskGenerator(nn.Module):
    def __init__(self, config: MaskGanConfig):
        super().__init__()
        self.config = config
        ch = config.stage_channels()
        layers: list[nn.Module] = [
            nn.ConvTranspose2d(config.latent_dim, ch[0], 4, 1, 0, bias=False),
            nn.BatchNorm2d(ch[0]),
            nn.LeakyReLU(config.leaky_slope, inplace=True),
        ]
        for cin, cout in zip(ch[:-1], ch[1:]):
            layers += [
                nn.ConvTranspose2d(cin, cout, 4, 2, 1, bias=False),
                nn.BatchNorm2d(cout),
                nn.LeakyReLU(config.leaky_slope, inplace=True),
            ]
        layers += [nn.ConvTranspose2d(ch[-1], 1, 4, 2, 1, bias=False), nn.Tanh()]
        self.net = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim == 2:
            z = z[:, :, None, None]
        return self.net(z)


class MaskDiscriminator(nn.Module):
    def __init__(self, config: MaskGanConfig):
        super().__init__()
        self.config = config
        ch = list(reversed(config.stage_channels()))
        layers: list[nn.Module] = [
            nn.Conv2d(1, ch[0], 4, 2, 1, bias=False),
            nn.LeakyReLU(config.leaky_slope, inplace=True),
        ]
        for cin, cout in zip(ch[:-1], ch[1:]):
            layers += [
                nn.Conv2d(cin, cout, 4, 2, 1, bias=False),
                nn.BatchNorm2d(cout),
                nn.LeakyReLU(config.leaky_slope, inplace=True),
            ]
        layers.append(nn.Conv2d(ch[-1], 1, 4, 1, 0, bias=False))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        size = self.config.image_size
        if x.shape[-2:] != (size, size):
            raise ValueError(f"discriminator is fixed to {size}x{size}, got {tuple(x.shape[-2:])}")
        return self.net(x).view(x.shape[0])


def dcgan_weight_init(module: nn.Module) -> None:
    """Stock DCGAN initialization: N(0, 0.02) convolutions, N(1, 0.02) norms."""
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.normal_(module.weight, 0.0, 0.02)
    elif isinstance(module, nn.BatchNorm2d):
        nn.init.normal_(module.weight, 1.0, 0.02)
        nn.init.zeros_(module.bias)


def build_mask_generator(config: MaskGanConfig, seed: int | None = None) -> MaskGenerator:
    if seed is not None:
        torch.manual_seed(seed)
    G = MaskGenerator(config)
    G.apply(dcgan_weight_init)
    return G


def build_mask_discriminator(config: MaskGanConfig, seed: int | None = None) -> MaskDiscriminator:
    if seed is not None:
        torch.manual_seed(seed)
    D = MaskDiscriminator(config)
    D.apply(dcgan_weight_init)
    return D


def masks_to_tanh_range(masks: np.ndarray) -> torch.Tensor:
    """{0,1} masks to [-1,1] tensors with a channel axis."""
    return torch.from_numpy(masks.astype(np.float32) * 2.0 - 1.0).unsqueeze(1)


def train_mask_gan(
    real_masks: list[np.ndarray],
    config: MaskGanConfig,
    seed: int,
) -> tuple[MaskGenerator, GanHistory]:
    """Alternating non-saturating GAN updates on binary masks.

    One discriminator step (real batch + fake batch) and one generator step
    per iteration; iterations = epochs x floor(n/batch), optionally capped by
    config.target_iters.
    """
    if not real_masks:
        raise ValueError("real mask set is empty")

    torch.manual_seed(seed)
    G = MaskGenerator(config)
    D = MaskDiscriminator(config)
    G.apply(dcgan_weight_init)
    D.apply(dcgan_weight_init)
    g_lr = config.g_lr if config.g_lr is not None else config.lr
    opt_g = torch.optim.Adam(G.parameters(), lr=g_lr, betas=(config.beta1, 0.999))
    opt_d = torch.optim.Adam(D.parameters(), lr=config.lr, betas=(config.beta1, 0.999))
    bce = nn.BCEWithLogitsLoss()

    real = masks_to_tanh_range(np.stack(real_masks))
    batch = min(config.batch_size, len(real_masks))
    steps_per_epoch = len(real_masks) // batch
    total = config.epochs * steps_per_epoch
    if config.target_iters is not None:
        total = min(total, config.target_iters)

    rng = np.random.default_rng(seed)
    history = GanHistory()
    it = 0
    while it < total:
        order = rng.permutation(len(real_masks))
        for s in range(steps_per_epoch):
            if it >= total:
                break
            idx = order[s * batch : (s + 1) * batch]
            z = torch.randn(batch, config.latent_dim, 1, 1)
            fake = G(z)

            # noise on D inputs keeps it from separating binary reals from
            # continuous fakes by value statistics alone
            sigma = config.d_input_noise
            real_batch = real[idx]
            fake_batch = fake.detach()
            if sigma > 0:
                real_batch = real_batch + sigma * torch.randn_like(real_batch)
                fake_batch = fake_batch + sigma * torch.randn_like(fake_batch)

            opt_d.zero_grad()
            d_real = D(real_batch)
            d_fake = D(fake_batch)
            d_loss = bce(d_real, torch.ones_like(d_real)) + bce(d_fake, torch.zeros_like(d_fake))
            d_loss.backward()
            opt_d.step()

            opt_g.zero_grad()
            fake_for_g = fake + sigma * torch.randn_like(fake) if sigma > 0 else fake
            g_score = D(fake_for_g)
            g_loss = bce(g_score, torch.ones_like(g_score))
            g_loss.backward()
            opt_g.step()

            if not (torch.isfinite(d_loss) and torch.isfinite(g_loss)):
                raise RuntimeError(
                    f"non-finite GAN loss at iteration {it}: d={d_loss.item()}, g={g_loss.item()}"
                )
            history.d_loss.append(d_loss.item())
            history.g_loss.append(g_loss.item())
            it += 1

    return G, history


@torch.no_grad()
def generate_masks(
    G: MaskGenerator, n: int, seed: int, binarize_threshold: float = 0.5
) -> np.ndarray:
    """n binary masks: tanh output rescaled to [0,1], thresholded (>=)."""
    G.eval()
    z = torch.from_numpy(sample_latent(n, seed))
    out = []
    for i in range(0, n, 64):
        x = G(z[i : i + 64, :, None, None])
        v = (x[:, 0] + 1.0) / 2.0
        out.append((v >= binarize_threshold).numpy().astype(np.uint8))
    return np.concatenate(out, axis=0)


def export_masks_png(masks: np.ndarray, out_dir: Path | str, run_id: str) -> list[Path]:
    """Write masks as 8-bit PNGs named synthmask_<run>_<idx>.png."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, m in enumerate(masks):
        p = out_dir / f"synthmask_{run_id}_{i:05d}.png"
        Image.fromarray((m * 255).astype(np.uint8), mode="L").save(p)
        paths.append(p)
    return paths


def save_generator(path: Path | str, G: MaskGenerator, seed: int | None = None) -> None:
    torch.save(
        {"state_dict": G.state_dict(), "config": asdict(G.config), "seed": seed}, path
    )


def load_generator(path: Path | str) -> MaskGenerator:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    G = MaskGenerator(MaskGanConfig(**blob["config"]))
    G.load_state_dict(blob["state_dict"])
    G.eval()
    return G
