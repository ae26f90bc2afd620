"""Standard augmentation suite applied jointly to image and mask.

Transforms: rotation (+-10 deg), shift (10% of height/width), horizontal and
vertical flips, zoom ([1, 1.2] central magnification with crop). The image is
interpolated bilinearly, the mask with nearest neighbour, both filled with 0
outside the frame, so masks stay binary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import affine_transform

from .dataio import SliceSample

TRANSFORM_NAMES = ("rotation", "shift", "hflip", "vflip", "zoom")

# Fixed row labels of the results tables, in table order.
TABLE_ROW_LABELS = (
    "Original",
    "Vertical flip",
    "Horizontal flip",
    "Rotation",
    "Shift",
    "Zoom",
    "All",
    "Synthetic data",
)

ROW_TO_TRANSFORMS: dict[str, frozenset[str]] = {
    "Original": frozenset(),
    "Vertical flip": frozenset({"vflip"}),
    "Horizontal flip": frozenset({"hflip"}),
    "Rotation": frozenset({"rotation"}),
    "Shift": frozenset({"shift"}),
    "Zoom": frozenset({"zoom"}),
    "All": frozenset(TRANSFORM_NAMES),
    "Synthetic data": frozenset(),
}


@dataclass(frozen=True)
class AugmentSpec:
    rotation_deg: float = 10.0  # symmetric range +-rotation_deg
    shift_frac: float = 0.10
    zoom_range: tuple[float, float] = (1.0, 1.2)
    enabled: frozenset[str] = frozenset()

    def __post_init__(self):
        if not (0 <= self.shift_frac < 1):
            raise ValueError(f"shift_frac must be in [0,1), got {self.shift_frac}")
        unknown = set(self.enabled) - set(TRANSFORM_NAMES)
        if unknown:
            raise ValueError(f"unknown transforms {sorted(unknown)}")

    @classmethod
    def for_row(cls, label: str) -> "AugmentSpec":
        if label not in ROW_TO_TRANSFORMS:
            raise ValueError(f"unknown table row {label!r}")
        return cls(enabled=ROW_TO_TRANSFORMS[label])


@dataclass(frozen=True)
class TransformParams:
    angle_deg: float = 0.0
    dy: float = 0.0  # row shift in pixels
    dx: float = 0.0  # col shift in pixels
    hflip: bool = False
    vflip: bool = False
    zoom: float = 1.0

    @property
    def is_identity(self) -> bool:
        return (
            self.angle_deg == 0.0
            and self.dy == 0.0
            and self.dx == 0.0
            and not self.hflip
            and not self.vflip
            and self.zoom == 1.0
        )


def sample_params(
    spec: AugmentSpec, shape: tuple[int, int], seed: int | np.random.SeedSequence
) -> TransformParams:
    """Draw one parameter set; disabled transforms contribute identity values."""
    rng = np.random.default_rng(seed)
    h, w = shape
    angle = rng.uniform(-spec.rotation_deg, spec.rotation_deg) if "rotation" in spec.enabled else 0.0
    if "shift" in spec.enabled:
        dy = rng.uniform(-spec.shift_frac * h, spec.shift_frac * h)
        dx = rng.uniform(-spec.shift_frac * w, spec.shift_frac * w)
    else:
        dy = dx = 0.0
    hflip = bool(rng.integers(0, 2)) if "hflip" in spec.enabled else False
    vflip = bool(rng.integers(0, 2)) if "vflip" in spec.enabled else False
    zoom = rng.uniform(*spec.zoom_range) if "zoom" in spec.enabled else 1.0
    return TransformParams(angle_deg=angle, dy=dy, dx=dx, hflip=hflip, vflip=vflip, zoom=zoom)


def _warp(channel: np.ndarray, params: TransformParams, order: int) -> np.ndarray:
    out = channel
    if params.hflip:
        out = out[:, ::-1]
    if params.vflip:
        out = out[::-1, :]
    if params.angle_deg == 0.0 and params.dy == 0.0 and params.dx == 0.0 and params.zoom == 1.0:
        return np.ascontiguousarray(out)

    h, w = out.shape
    c = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    t = np.array([params.dy, params.dx])
    theta = math.radians(params.angle_deg)
    fwd = params.zoom * np.array(
        [[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]]
    )
    inv = np.linalg.inv(fwd)
    offset = c - inv @ (c + t)
    return affine_transform(
        out.astype(np.float64), inv, offset=offset, order=order, mode="constant", cval=0.0
    )


def apply_transform(sample: SliceSample, params: TransformParams) -> SliceSample:
    """Apply one geometric transform identically to image and mask."""
    if params.is_identity:
        return SliceSample(
            image=sample.image.copy(),
            mask=sample.mask.copy(),
            patient_id=sample.patient_id,
            slice_index=sample.slice_index,
            spacing_mm=sample.spacing_mm,
        )
    image = _warp(sample.image, params, order=1).astype(np.float32)
    mask = _warp(sample.mask, params, order=0)
    return SliceSample(
        image=image,
        mask=(mask > 0.5).astype(np.uint8),
        patient_id=sample.patient_id,
        slice_index=sample.slice_index,
        spacing_mm=sample.spacing_mm,
    )


def build_augmented_epoch(
    samples: list[SliceSample], spec: AugmentSpec, rng_seed: int
) -> list[SliceSample]:
    """One freshly transformed variant per input sample (on-the-fly policy)."""
    if not samples:
        raise ValueError("samples is empty")
    children = np.random.SeedSequence(rng_seed).spawn(len(samples))
    return [
        apply_transform(s, sample_params(spec, s.image.shape, child))
        for s, child in zip(samples, children)
    ]
