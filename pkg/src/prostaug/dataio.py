"""Dataset loading, phantom generation, patient splitting and slice extraction.

Volumes come either from PROMISE12-style MetaImage files (CaseNN.mhd plus a
.raw/.zraw payload) or from a deterministic phantom generator that lets every
downstream stage run without the real dataset.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter


class MetaImageError(ValueError):
    """Malformed or unsupported MetaImage input."""


@dataclass
class Volume:
    """3-D intensity volume (slices x height x width) with physical spacing."""

    voxels: np.ndarray
    spacing_mm: tuple[float, float, float]  # (slice, row, col)
    patient_id: str

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3 or self.voxels.shape[0] < 1:
            raise ValueError(f"expected 3-D volume with >=1 slice, got shape {self.voxels.shape}")
        if not np.all(np.isfinite(self.voxels)):
            raise ValueError("volume contains non-finite voxels")
        if any(s <= 0 for s in self.spacing_mm):
            raise ValueError(f"spacing must be positive, got {self.spacing_mm}")


@dataclass
class MaskVolume:
    """Binary 3-D mask paired with a Volume of the same shape and spacing."""

    voxels: np.ndarray
    spacing_mm: tuple[float, float, float]
    patient_id: str

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        vals = np.unique(self.voxels)
        if not np.isin(vals, (0, 1)).all():
            raise ValueError(f"mask values must be binary, found {vals[:10]}")
        self.voxels = self.voxels.astype(np.uint8)


@dataclass
class SliceSample:
    """One axial slice: paired image/mask, the unit of 2-D training."""

    image: np.ndarray
    mask: np.ndarray
    patient_id: str
    slice_index: int
    spacing_mm: tuple[float, float]  # (row, col)

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise ValueError(
                f"image/mask shape mismatch: {self.image.shape} vs {self.mask.shape}"
            )

    @property
    def sample_id(self) -> str:
        return f"{self.patient_id}:{self.slice_index}"


@dataclass
class SplitManifest:
    """Disjoint patient-level train/val/test partition."""

    train: list[str]
    val: list[str]
    test: list[str]
    seed: int
    ratios: tuple[float, float, float]

    def to_json(self) -> str:
        return json.dumps(
            {
                "seed": self.seed,
                "ratios": list(self.ratios),
                "train": self.train,
                "val": self.val,
                "test": self.test,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        d = json.loads(text)
        return cls(
            train=list(d["train"]),
            val=list(d["val"]),
            test=list(d["test"]),
            seed=int(d["seed"]),
            ratios=tuple(d["ratios"]),
        )


# ---------------------------------------------------------------------------
# MetaImage (.mhd) reading and writing
# ---------------------------------------------------------------------------

_MET_DTYPES = {
    "MET_SHORT": np.int16,
    "MET_USHORT": np.uint16,
    "MET_FLOAT": np.float32,
}


def _parse_mhd_header(path: Path) -> dict[str, str]:
    header: dict[str, str] = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or "=" not in line:
            continue
        key, value = line.split("=", 1)
        header[key.strip()] = value.strip()
    return header


def read_mhd(path: Path | str) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Read a MetaImage header + payload into (slices, rows, cols) order.

    Supports little-endian int16/uint16/float32 with an uncompressed .raw or
    zlib-compressed .zraw payload; anything else raises MetaImageError.
    Returns the voxel array and spacing as (slice, row, col) in mm.
    """
    path = Path(path)
    if not path.exists():
        raise MetaImageError(f"header file not found: {path}")
    header = _parse_mhd_header(path)

    ndims = int(header.get("NDims", "3"))
    if ndims != 3:
        raise MetaImageError(f"only 3-D MetaImages supported, NDims={ndims}")

    elem_type = header.get("ElementType", "")
    if elem_type not in _MET_DTYPES:
        raise MetaImageError(f"unsupported ElementType {elem_type!r}")
    dtype = _MET_DTYPES[elem_type]

    msb = header.get("BinaryDataByteOrderMSB", header.get("ElementByteOrderMSB", "False"))
    if msb.lower() == "true":
        raise MetaImageError("big-endian payloads are not supported")

    try:
        # DimSize is X Y Z (cols rows slices)
        nx, ny, nz = (int(v) for v in header["DimSize"].split())
    except KeyError:
        raise MetaImageError(f"{path}: missing DimSize") from None

    spacing_key = "ElementSpacing" if "ElementSpacing" in header else "ElementSize"
    if spacing_key in header:
        sx, sy, sz = (float(v) for v in header[spacing_key].split())
    else:
        sx = sy = sz = 1.0

    data_file = header.get("ElementDataFile", "")
    if not data_file or data_file.upper() == "LOCAL":
        raise MetaImageError("ElementDataFile must name an external payload file")
    payload_path = path.parent / data_file
    if not payload_path.exists():
        raise MetaImageError(f"payload file not found: {payload_path}")

    raw = payload_path.read_bytes()
    compressed = header.get("CompressedData", "False").lower() == "true"
    if compressed or payload_path.suffix.lower() == ".zraw":
        try:
            raw = zlib.decompress(raw)
        except zlib.error as e:
            raise MetaImageError(f"failed to decompress {payload_path}: {e}") from e

    expected = nx * ny * nz * np.dtype(dtype).itemsize
    if len(raw) != expected:
        raise MetaImageError(
            f"{payload_path}: payload is {len(raw)} bytes, header declares {expected} "
            f"({nz}x{ny}x{nx} {elem_type})"
        )

    voxels = np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<")).reshape(nz, ny, nx)
    return voxels, (sz, sy, sx)


def write_mhd(
    path: Path | str,
    voxels: np.ndarray,
    spacing_mm: tuple[float, float, float],
    dtype: str = "MET_SHORT",
    compressed: bool = False,
) -> None:
    """Write a (slices, rows, cols) array as .mhd + .raw/.zraw (test fixture helper)."""
    path = Path(path)
    np_dtype = _MET_DTYPES[dtype]
    nz, ny, nx = voxels.shape
    sz, sy, sx = spacing_mm
    suffix = ".zraw" if compressed else ".raw"
    payload_name = path.stem + suffix

    raw = np.ascontiguousarray(voxels.astype(np_dtype)).tobytes()
    if compressed:
        raw = zlib.compress(raw)

    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        f"CompressedData = {compressed}",
        f"DimSize = {nx} {ny} {nz}",
        f"ElementSpacing = {sx} {sy} {sz}",
        f"ElementType = {dtype}",
        f"ElementDataFile = {payload_name}",
    ]
    path.write_text("\n".join(lines) + "\n")
    (path.parent / payload_name).write_bytes(raw)


def load_promise12_case(root_dir: Path | str, case_id: str) -> tuple[Volume, MaskVolume | None]:
    """Load CaseNN.mhd and, when present, CaseNN_segmentation.mhd.

    The segmentation is binarized as (value > 0); multi-valued labels are
    accepted only through that rule. Test-set cases without a segmentation
    file return (volume, None).
    """
    root = Path(root_dir)
    vox, spacing = read_mhd(root / f"{case_id}.mhd")
    volume = Volume(voxels=vox, spacing_mm=spacing, patient_id=case_id)

    seg_path = root / f"{case_id}_segmentation.mhd"
    if not seg_path.exists():
        return volume, None

    seg_vox, seg_spacing = read_mhd(seg_path)
    if seg_vox.shape != vox.shape:
        raise MetaImageError(
            f"{case_id}: segmentation shape {seg_vox.shape} != volume shape {vox.shape}"
        )
    mask = MaskVolume(
        voxels=(seg_vox > 0).astype(np.uint8), spacing_mm=seg_spacing, patient_id=case_id
    )
    return volume, mask


def list_promise12_cases(root_dir: Path | str) -> list[str]:
    """Case ids (CaseNN) found under root, sorted, segmentation headers excluded."""
    root = Path(root_dir)
    ids = [
        p.stem
        for p in sorted(root.glob("Case*.mhd"))
        if not p.stem.endswith("_segmentation")
    ]
    return ids


# ---------------------------------------------------------------------------
# Phantom cases
# ---------------------------------------------------------------------------

PHANTOM_SIZE = 96
PHANTOM_INTENSITY_RANGE = (0.0, 800.0)


def generate_phantom_case(seed: int, n_slices: int) -> tuple[Volume, MaskVolume]:
    """Deterministic synthetic case: one filled ellipse per interior slice.

    The ellipse axes vary smoothly across slices (sine profile peaking at the
    central slice); the first and last slices carry empty masks. The image is
    background texture plus a brighter gland region plus noise, clipped to
    PHANTOM_INTENSITY_RANGE.
    """
    if n_slices < 1:
        raise ValueError("n_slices must be >= 1")
    rng = np.random.default_rng(seed)
    h = w = PHANTOM_SIZE
    lo, hi = PHANTOM_INTENSITY_RANGE

    cy = h / 2 + rng.uniform(-6, 6)
    cx = w / 2 + rng.uniform(-6, 6)
    max_a = rng.uniform(10, 16)  # semi-axis rows
    max_b = rng.uniform(12, 20)  # semi-axis cols
    tilt = rng.uniform(-0.3, 0.3)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    masks = np.zeros((n_slices, h, w), dtype=np.uint8)
    for k in range(1, n_slices - 1):
        t = k / (n_slices - 1)
        scale = math.sin(math.pi * t)
        a = max(3.0, max_a * scale)
        b = max(3.0, max_b * scale)
        y = (yy - cy) * math.cos(tilt) - (xx - cx) * math.sin(tilt)
        x = (yy - cy) * math.sin(tilt) + (xx - cx) * math.cos(tilt)
        masks[k] = ((y / a) ** 2 + (x / b) ** 2 <= 1.0).astype(np.uint8)

    images = np.empty((n_slices, h, w), dtype=np.float32)
    for k in range(n_slices):
        texture = gaussian_filter(rng.normal(0.0, 1.0, (h, w)), sigma=6.0)
        texture = 180.0 + 120.0 * texture / (np.abs(texture).max() + 1e-12)
        gland = 260.0 * gaussian_filter(masks[k].astype(np.float64), sigma=1.5)
        noise = rng.normal(0.0, 18.0, (h, w))
        images[k] = np.clip(texture + gland + noise, lo, hi)

    spacing = (3.0, 0.625, 0.625)
    pid = f"phantom{seed:03d}"
    return (
        Volume(voxels=images, spacing_mm=spacing, patient_id=pid),
        MaskVolume(voxels=masks, spacing_mm=spacing, patient_id=pid),
    )


# ---------------------------------------------------------------------------
# Patient split and slice extraction
# ---------------------------------------------------------------------------

def split_patients(
    patient_ids: list[str],
    ratios: tuple[float, float, float],
    seed: int,
) -> SplitManifest:
    """Partition patients into train/val/test with largest-remainder sizing."""
    if not patient_ids:
        raise ValueError("patient_ids is empty")
    if len(set(patient_ids)) != len(patient_ids):
        raise ValueError("patient_ids contains duplicates")
    if any(r < 0 for r in ratios):
        raise ValueError(f"ratios must be nonnegative, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")

    n = len(patient_ids)
    quotas = [r * n for r in ratios]
    sizes = [int(math.floor(q)) for q in quotas]
    remainders = [q - s for q, s in zip(quotas, sizes)]
    # hand out leftover slots to the largest fractional parts; ties go to the
    # earlier split so the outcome is order-deterministic
    for _ in range(n - sum(sizes)):
        i = max(range(3), key=lambda j: (remainders[j], -j))
        sizes[i] += 1
        remainders[i] = -1.0

    order = np.random.default_rng(seed).permutation(sorted(patient_ids))
    train = list(order[: sizes[0]])
    val = list(order[sizes[0] : sizes[0] + sizes[1]])
    test = list(order[sizes[0] + sizes[1] :])
    return SplitManifest(train=train, val=val, test=test, seed=seed, ratios=tuple(ratios))


def extract_slices(
    volume: Volume, mask: MaskVolume, keep_empty: bool = True
) -> list[SliceSample]:
    """Split a volume into per-slice samples, optionally dropping empty-mask slices."""
    if volume.voxels.shape != mask.voxels.shape:
        raise ValueError(
            f"volume/mask shape mismatch: {volume.voxels.shape} vs {mask.voxels.shape}"
        )
    _, sr, sc = volume.spacing_mm
    samples = []
    for k in range(volume.voxels.shape[0]):
        m = mask.voxels[k]
        if not keep_empty and m.sum() == 0:
            continue
        samples.append(
            SliceSample(
                image=volume.voxels[k],
                mask=m,
                patient_id=volume.patient_id,
                slice_index=k,
                spacing_mm=(sr, sc),
            )
        )
    return samples
