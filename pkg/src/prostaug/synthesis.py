"""pix2pix mask-to-image translation: train on real pairs, synthesize T2 for
curated generated masks.

The generator is a 256x256 encoder-decoder with skip connections (8 down / 8
up at full scale, scaled by resolution); the discriminator is a conditional
patch classifier over the concatenated (mask, image) pair. Inference carries
no dropout so synthetic pairs are reproducible.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from PIL import Image

from .curation import CurationStore
from .dataio import SliceSample


@dataclass
class Pix2PixConfig:
    image_size: int = 256
    epochs: int = 200
    batch_size: int = 1
    lr: float = 2e-4
    beta1: float = 0.5
    lambda_l1: float = 100.0
    base_channels: int = 64
    norm: str = "instance"  # batch statistics are degenerate at batch size 1
    target_iters: int | None = None

    def __post_init__(self):
        stages = math.log2(self.image_size)
        if stages != int(stages) or stages < 3:
            raise ValueError(f"image_size must be 2^k >= 8, got {self.image_size}")
        if self.lambda_l1 < 0:
            raise ValueError("lambda_l1 must be >= 0")

    @property
    def n_stages(self) -> int:
        return int(math.log2(self.image_size))

    def encoder_channels(self) -> list[int]:
        c = self.base_channels
        plan = [c, c * 2, c * 4] + [c * 8] * (self.n_stages - 3)
        return plan[: self.n_stages]


def _norm_layer(kind: str, channels: int) -> nn.Module:
    if kind == "instance":
        return nn.InstanceNorm2d(channels, affine=True)
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    raise ValueError(f"unknown norm {kind!r}")


class TranslatorGenerator(nn.Module):
    """U-Net shaped encoder-decoder down to a 1x1 bottleneck, tanh output."""

    def __init__(self, config: Pix2PixConfig):
        super().__init__()
        self.config = config
        ch = config.encoder_channels()
        n = len(ch)

        self.downs = nn.ModuleList()
        in_ch = 1
        for i, c in enumerate(ch):
            layers: list[nn.Module] = [nn.Conv2d(in_ch, c, 4, 2, 1, bias=False)]
            # no norm on the outermost stage (stock recipe) or at the 1x1 bottleneck
            if 0 < i < n - 1:
                layers.append(_norm_layer(config.norm, c))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            self.downs.append(nn.Sequential(*layers))
            in_ch = c

        self.ups = nn.ModuleList()
        rev = list(reversed(ch))
        for i in range(n - 1):
            in_c = rev[i] if i == 0 else rev[i] * 2
            out_c = rev[i + 1]
            self.ups.append(
                nn.Sequential(
                    nn.ConvTranspose2d(in_c, out_c, 4, 2, 1, bias=False),
                    _norm_layer(config.norm, out_c),
                    nn.ReLU(inplace=True),
                )
            )
        self.final = nn.Sequential(
            nn.ConvTranspose2d(ch[0] * 2, 1, 4, 2, 1), nn.Tanh()
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for down in self.downs:
            x = down(x)
            skips.append(x)
        x = skips[-1]
        for i, up in enumerate(self.ups):
            x = up(x) if i == 0 else up(torch.cat([x, skips[-1 - i]], dim=1))
        # concat with the outermost skip before the final upsample
        return self.final(torch.cat([x, skips[0]], dim=1))


class PatchDiscriminator(nn.Module):
    """Conditional patch classifier over concatenated (mask, image)."""

    def __init__(self, config: Pix2PixConfig):
        super().__init__()
        c = config.base_channels
        self.net = nn.Sequential(
            nn.Conv2d(2, c, 4, 2, 1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(c, c * 2, 4, 2, 1, bias=False),
            _norm_layer(config.norm, c * 2),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(c * 2, c * 4, 4, 2, 1, bias=False),
            _norm_layer(config.norm, c * 4),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(c * 4, c * 8, 4, 1, 1, bias=False),
            _norm_layer(config.norm, c * 8),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(c * 8, 1, 4, 1, 1),
        )

    def forward(self, mask: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([mask, image], dim=1))


def build_translator(
    config: Pix2PixConfig, seed: int | None = None
) -> tuple[TranslatorGenerator, PatchDiscriminator]:
    if seed is not None:
        torch.manual_seed(seed)
    return TranslatorGenerator(config), PatchDiscriminator(config)


@dataclass
class TranslatorHistory:
    d_loss: list[float] = field(default_factory=list)
    g_adv: list[float] = field(default_factory=list)
    g_l1: list[float] = field(default_factory=list)
    g_total: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.d_loss)


def _pairs_to_tensors(pairs: list[SliceSample]) -> tuple[torch.Tensor, torch.Tensor]:
    masks = torch.from_numpy(
        np.stack([p.mask for p in pairs]).astype(np.float32) * 2.0 - 1.0
    ).unsqueeze(1)
    images = torch.from_numpy(
        np.stack([p.image for p in pairs]).astype(np.float32) * 2.0 - 1.0
    ).unsqueeze(1)
    return masks, images


def train_translator(
    pairs: list[SliceSample],
    config: Pix2PixConfig,
    seed: int,
) -> tuple[TranslatorGenerator, TranslatorHistory]:
    """Alternating updates: patch discriminator, then generator with
    adversarial + lambda * L1 objective."""
    if not pairs:
        raise ValueError("paired training set is empty")

    torch.manual_seed(seed)
    G = TranslatorGenerator(config)
    D = PatchDiscriminator(config)
    opt_g = torch.optim.Adam(G.parameters(), lr=config.lr, betas=(config.beta1, 0.999))
    opt_d = torch.optim.Adam(D.parameters(), lr=config.lr, betas=(config.beta1, 0.999))
    bce = nn.BCEWithLogitsLoss()
    l1 = nn.L1Loss()

    masks, images = _pairs_to_tensors(pairs)
    batch = min(config.batch_size, len(pairs))
    steps_per_epoch = len(pairs) // batch
    total = config.epochs * steps_per_epoch
    if config.target_iters is not None:
        total = min(total, config.target_iters)

    rng = np.random.default_rng(seed)
    history = TranslatorHistory()
    it = 0
    while it < total:
        order = rng.permutation(len(pairs))
        for s in range(steps_per_epoch):
            if it >= total:
                break
            idx = order[s * batch : (s + 1) * batch]
            m, real = masks[idx], images[idx]
            fake = G(m)

            opt_d.zero_grad()
            d_real = D(m, real)
            d_fake = D(m, fake.detach())
            d_loss = bce(d_real, torch.ones_like(d_real)) + bce(d_fake, torch.zeros_like(d_fake))
            d_loss.backward()
            opt_d.step()

            opt_g.zero_grad()
            score = D(m, fake)
            g_adv = bce(score, torch.ones_like(score))
            g_l1 = l1(fake, real)
            g_total = g_adv + config.lambda_l1 * g_l1 if config.lambda_l1 > 0 else g_adv
            g_total.backward()
            opt_g.step()

            if not (torch.isfinite(d_loss) and torch.isfinite(g_total)):
                raise RuntimeError(f"non-finite translator loss at iteration {it}")
            history.d_loss.append(d_loss.item())
            history.g_adv.append(g_adv.item())
            history.g_l1.append(g_l1.item())
            history.g_total.append(g_total.item())
            it += 1

    return G, history


@dataclass
class SyntheticPair:
    id: str
    mask: np.ndarray
    image: np.ndarray  # float32 in [0,1]
    provenance: dict[str, str]


@torch.no_grad()
def translate_masks(G: TranslatorGenerator, masks: np.ndarray) -> np.ndarray:
    """Deterministic inference: binary masks to [0,1] images."""
    G.eval()
    out = []
    x = torch.from_numpy(np.asarray(masks).astype(np.float32) * 2.0 - 1.0).unsqueeze(1)
    for i in range(0, len(x), 32):
        y = G(x[i : i + 32])
        out.append(((y[:, 0] + 1.0) / 2.0).clamp(0.0, 1.0).numpy().astype(np.float32))
    return np.concatenate(out, axis=0)


def synthesize_pairs(
    G: TranslatorGenerator,
    store: CurationStore,
    checkpoint_id: str,
    maskgen_run_id: str,
    ids: list[str] | None = None,
) -> list[SyntheticPair]:
    """One synthesized image per accepted mask, with full provenance.

    ids defaults to every accepted candidate; naming a candidate that is not
    accepted is an error.
    """
    accepted = dict(store.export_accepted())
    if ids is None:
        ids = sorted(accepted)
    else:
        bad = [i for i in ids if i not in accepted]
        if bad:
            raise ValueError(f"masks not curation-accepted: {bad[:5]}")
    if not ids:
        return []

    images = translate_masks(G, np.stack([accepted[i] for i in ids]))
    return [
        SyntheticPair(
            id=cid,
            mask=accepted[cid],
            image=img,
            provenance={
                "maskgen_run_id": maskgen_run_id,
                "curation_id": cid,
                "translator_checkpoint_id": checkpoint_id,
            },
        )
        for cid, img in zip(ids, images)
    ]


def export_pairs(pairs: list[SyntheticPair], out_dir: Path | str) -> Path:
    """Write paired PNGs and a provenance manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for p in pairs:
        mask_name = f"pair_{p.id}_mask.png"
        img_name = f"pair_{p.id}_t2.png"
        Image.fromarray((p.mask * 255).astype(np.uint8), mode="L").save(out_dir / mask_name)
        Image.fromarray((np.clip(p.image, 0, 1) * 255).astype(np.uint8), mode="L").save(
            out_dir / img_name
        )
        entries.append(
            {"id": p.id, "mask": mask_name, "image": img_name, "provenance": p.provenance}
        )
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps({"pairs": entries}, indent=2))
    return manifest


def save_translator(path: Path | str, G: TranslatorGenerator, seed: int | None = None) -> None:
    torch.save(
        {"state_dict": G.state_dict(), "config": asdict(G.config), "seed": seed}, path
    )


def load_translator(path: Path | str) -> TranslatorGenerator:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    G = TranslatorGenerator(Pix2PixConfig(**blob["config"]))
    G.load_state_dict(blob["state_dict"])
    G.eval()
    return G


def load_pairs(manifest_path: Path | str) -> list[SyntheticPair]:
    manifest_path = Path(manifest_path)
    doc = json.loads(manifest_path.read_text())
    pairs = []
    for e in doc["pairs"]:
        mask = np.asarray(Image.open(manifest_path.parent / e["mask"]).convert("L"))
        image = np.asarray(Image.open(manifest_path.parent / e["image"]).convert("L"))
        pairs.append(
            SyntheticPair(
                id=e["id"],
                mask=(mask > 127).astype(np.uint8),
                image=(image / 255.0).astype(np.float32),
                provenance=dict(e["provenance"]),
            )
        )
    return pairs
