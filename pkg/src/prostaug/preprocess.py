"""Per-slice preprocessing chain: resample, normalize, percentile clip, CLAHE.

Intensity steps never touch masks; masks only pass through nearest-neighbour
resampling so they stay strictly binary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataio import MaskVolume, SliceSample, Volume


@dataclass
class PreprocessConfig:
    target_size: tuple[int, int] = (256, 256)
    clip_lo_pct: float = 1.0
    clip_hi_pct: float = 99.0
    clahe_clip_limit: float = 0.01  # fraction of tile pixel count
    clahe_tiles: tuple[int, int] = (8, 8)
    clahe_bins: int = 256
    renormalize_after_clip: bool = True

    def __post_init__(self):
        if not (0 <= self.clip_lo_pct < self.clip_hi_pct <= 100):
            raise ValueError(f"bad clip percentiles ({self.clip_lo_pct}, {self.clip_hi_pct})")
        if min(self.clahe_tiles) < 1:
            raise ValueError("tile counts must be >= 1")
        if not (0 < self.clahe_clip_limit <= 1):
            raise ValueError("clahe_clip_limit must be in (0, 1]")


def resample_slice(
    image: np.ndarray, target: tuple[int, int], mode: str = "linear"
) -> np.ndarray:
    """Resize a 2-D array to `target` (h, w) with pixel-center alignment.

    linear: bilinear interpolation, output values stay inside the input range.
    nearest: picks existing values; the mode for masks.
    """
    image = np.asarray(image)
    if image.ndim != 2 or image.size == 0:
        raise ValueError(f"expected nonempty 2-D input, got shape {image.shape}")
    th, tw = target
    if th < 1 or tw < 1:
        raise ValueError(f"target dims must be >= 1, got {target}")
    h, w = image.shape
    if (h, w) == (th, tw):
        return image.copy()

    src_y = np.clip((np.arange(th) + 0.5) * (h / th) - 0.5, 0, h - 1)
    src_x = np.clip((np.arange(tw) + 0.5) * (w / tw) - 0.5, 0, w - 1)

    if mode == "nearest":
        iy = np.rint(src_y).astype(int)
        ix = np.rint(src_x).astype(int)
        return image[np.ix_(iy, ix)]
    if mode != "linear":
        raise ValueError(f"unknown mode {mode!r}")

    y0 = np.floor(src_y).astype(int)
    x0 = np.floor(src_x).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (src_y - y0)[:, None]
    wx = (src_x - x0)[None, :]

    img = image.astype(np.float64)
    top = img[np.ix_(y0, x0)] * (1 - wx) + img[np.ix_(y0, x1)] * wx
    bot = img[np.ix_(y1, x0)] * (1 - wx) + img[np.ix_(y1, x1)] * wx
    return (top * (1 - wy) + bot * wy).astype(np.float64)


def normalize01(image: np.ndarray) -> np.ndarray:
    """Affine map to [0,1]; a constant image maps to all-zeros."""
    image = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(image)):
        raise ValueError("non-finite values in input")
    lo, hi = image.min(), image.max()
    if hi == lo:
        return np.zeros_like(image)
    return (image - lo) / (hi - lo)


def clip_percentiles(image: np.ndarray, lo_pct: float, hi_pct: float) -> np.ndarray:
    """Clamp values outside the [lo_pct, hi_pct] percentile band."""
    if lo_pct >= hi_pct:
        raise ValueError(f"lo_pct must be < hi_pct, got ({lo_pct}, {hi_pct})")
    image = np.asarray(image, dtype=np.float64)
    lo, hi = np.percentile(image, [lo_pct, hi_pct])
    return np.clip(image, lo, hi)


def _bin_indices(image: np.ndarray, bins: int) -> np.ndarray:
    return np.minimum((image * bins).astype(np.int64), bins - 1)


def _tile_edges(n: int, tiles: int) -> np.ndarray:
    return np.floor(np.arange(tiles + 1) * (n / tiles)).astype(int)


def clahe(image: np.ndarray, config: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization on a [0,1] image.

    Per-tile histograms are clipped at clip_limit x tile pixel count, the
    excess is redistributed uniformly, and each pixel blends the equalization
    mappings of its four surrounding tiles bilinearly (clamped at borders).
    """
    image = np.asarray(image, dtype=np.float64)
    if image.min() < 0 or image.max() > 1:
        raise ValueError("clahe expects input in [0,1]")
    tr, tc = config.clahe_tiles
    h, w = image.shape
    if h < tr or w < tc:
        raise ValueError(f"image {image.shape} smaller than tile grid {config.clahe_tiles}")
    bins = config.clahe_bins

    bin_img = _bin_indices(image, bins)
    ye = _tile_edges(h, tr)
    xe = _tile_edges(w, tc)

    # per-tile cumulative mappings, shape (tr, tc, bins)
    cdfs = np.empty((tr, tc, bins), dtype=np.float64)
    for i in range(tr):
        for j in range(tc):
            tile = bin_img[ye[i] : ye[i + 1], xe[j] : xe[j + 1]]
            hist = np.bincount(tile.ravel(), minlength=bins).astype(np.float64)
            n_pix = tile.size
            clip = config.clahe_clip_limit * n_pix
            excess = np.maximum(hist - clip, 0).sum()
            hist = np.minimum(hist, clip) + excess / bins
            cdfs[i, j] = np.cumsum(hist) / n_pix

    # fractional tile-space coordinates of each pixel (tile centers at integers)
    fy = np.clip((np.arange(h) + 0.5) * (tr / h) - 0.5, 0, tr - 1)
    fx = np.clip((np.arange(w) + 0.5) * (tc / w) - 0.5, 0, tc - 1)
    i0 = np.floor(fy).astype(int)
    j0 = np.floor(fx).astype(int)
    i1 = np.minimum(i0 + 1, tr - 1)
    j1 = np.minimum(j0 + 1, tc - 1)
    wy = (fy - i0)[:, None]
    wx = (fx - j0)[None, :]

    def lut(ti, tj):
        return cdfs[ti[:, None], tj[None, :], bin_img]

    out = (
        (1 - wy) * ((1 - wx) * lut(i0, j0) + wx * lut(i0, j1))
        + wy * ((1 - wx) * lut(i1, j0) + wx * lut(i1, j1))
    )
    return np.clip(out, 0.0, 1.0)


def preprocess_slice(image: np.ndarray, config: PreprocessConfig) -> np.ndarray:
    """Full intensity chain for one slice."""
    out = resample_slice(image, config.target_size, mode="linear")
    out = normalize01(out)
    out = clip_percentiles(out, config.clip_lo_pct, config.clip_hi_pct)
    if config.renormalize_after_clip:
        out = normalize01(out)
    return clahe(out, config)


def preprocess_case(
    volume: Volume,
    mask: MaskVolume | None,
    config: PreprocessConfig = PreprocessConfig(),
) -> list[SliceSample]:
    """Apply the chain per slice; masks see only nearest-neighbour resampling."""
    th, tw = config.target_size
    _, sr, sc = volume.spacing_mm
    h, w = volume.voxels.shape[1:]
    spacing = (sr * (h / th), sc * (w / tw))

    samples = []
    for k in range(volume.voxels.shape[0]):
        img = preprocess_slice(volume.voxels[k], config)
        if mask is not None:
            m = resample_slice(mask.voxels[k], config.target_size, mode="nearest")
        else:
            m = np.zeros((th, tw), dtype=np.uint8)
        samples.append(
            SliceSample(
                image=img.astype(np.float32),
                mask=m.astype(np.uint8),
                patient_id=volume.patient_id,
                slice_index=k,
                spacing_mm=spacing,
            )
        )
    return samples
