"""Segmentation metrics: slice Dice, volumetric Dice, surface distances.

Distances are Euclidean in millimeters via the voxel spacing. Surface
distances default to 2-D per slice, aggregated per case; a 3-D mode treats
the whole volume boundary as one point set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .dataio import MaskVolume


@dataclass
class EvalConfig:
    include_empty_slices: bool = False  # score empty-empty slices as 1 and keep them
    surface_mode: str = "2d"  # or "3d"


@dataclass
class CaseMetrics:
    patient_id: str
    slice_dscs: list[float]
    volumetric_dsc: float
    msd_mm: float | None
    hd_mm: float | None
    n_skipped_slices: int  # slices where exactly one mask was empty


@dataclass
class MetricsReport:
    dsc_pct: float
    vdsc_pct: float
    msd_mm: float
    hd_mm: float
    n_cases: int
    per_case: list[CaseMetrics] = field(default_factory=list)
    n_distance_warnings: int = 0

    def as_row(self) -> tuple[float, float, float, float]:
        """(DSC%, MSD, HD, VDSC%) in results-table column order."""
        return (self.dsc_pct, self.msd_mm, self.hd_mm, self.vdsc_pct)

    def to_json(self) -> str:
        return json.dumps(
            {
                "dsc_pct": self.dsc_pct,
                "msd_mm": self.msd_mm,
                "hd_mm": self.hd_mm,
                "vdsc_pct": self.vdsc_pct,
                "n_cases": self.n_cases,
                "n_distance_warnings": self.n_distance_warnings,
                "per_case": [
                    {
                        "patient_id": c.patient_id,
                        "volumetric_dsc": c.volumetric_dsc,
                        "msd_mm": c.msd_mm,
                        "hd_mm": c.hd_mm,
                        "n_skipped_slices": c.n_skipped_slices,
                    }
                    for c in self.per_case
                ],
            },
            indent=2,
        )


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a.astype(bool), b.astype(bool)


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """2|A n B| / (|A| + |B|); both-empty masks score 1."""
    a, b = _check_pair(a, b)
    sa, sb = int(a.sum()), int(b.sum())
    if sa + sb == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / (sa + sb)


def volumetric_dice(pred_volume: np.ndarray, gt_volume: np.ndarray) -> float:
    """Dice over all voxels of one patient's stacked volume."""
    return dice(pred_volume, gt_volume)


def boundary_points(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a background 4-neighbour or image-edge adjacency.

    Works for 2-D masks (returns (n,2) row/col indices) and 3-D masks
    (6-neighbourhood, returns (n,3) slice/row/col indices).
    """
    m = np.asarray(mask).astype(bool)
    interior = np.ones_like(m)
    for axis in range(m.ndim):
        padded = np.pad(m, [(1, 1) if ax == axis else (0, 0) for ax in range(m.ndim)])
        lo = padded[tuple(slice(0, -2) if ax == axis else slice(None) for ax in range(m.ndim))]
        hi = padded[tuple(slice(2, None) if ax == axis else slice(None) for ax in range(m.ndim))]
        interior &= lo & hi
    return np.argwhere(m & ~interior)


def surface_distance_stats(
    a: np.ndarray, b: np.ndarray, spacing_mm: tuple[float, ...]
) -> dict[str, float]:
    """Symmetric mean and Hausdorff distance between two mask boundaries (mm)."""
    a, b = _check_pair(a, b)
    if a.sum() == 0 or b.sum() == 0:
        raise ValueError("surface distance undefined for an empty mask")
    if len(spacing_mm) != a.ndim:
        raise ValueError(f"spacing has {len(spacing_mm)} components for {a.ndim}-D masks")

    scale = np.asarray(spacing_mm, dtype=np.float64)
    pa = boundary_points(a) * scale
    pb = boundary_points(b) * scale
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    msd = 0.5 * (d_ab.mean() + d_ba.mean())
    hd = max(d_ab.max(), d_ba.max())
    return {"msd_mm": float(msd), "hd_mm": float(hd)}


def _case_metrics(
    pred: MaskVolume, gt: MaskVolume, config: EvalConfig
) -> CaseMetrics:
    pv = pred.voxels.astype(bool)
    gv = gt.voxels.astype(bool)
    if pv.shape != gv.shape:
        raise ValueError(f"{gt.patient_id}: prediction/gt shape mismatch")
    sz, sr, sc = gt.spacing_mm

    slice_dscs = []
    for k in range(gv.shape[0]):
        p_empty = not pv[k].any()
        g_empty = not gv[k].any()
        if p_empty and g_empty:
            if config.include_empty_slices:
                slice_dscs.append(1.0)
            continue
        slice_dscs.append(dice(pv[k], gv[k]))

    skipped = 0
    if config.surface_mode == "3d":
        msd = hd = None
        if pv.any() and gv.any():
            stats = surface_distance_stats(pv, gv, (sz, sr, sc))
            msd, hd = stats["msd_mm"], stats["hd_mm"]
        else:
            skipped = 1
    else:
        slice_msds, slice_hds = [], []
        for k in range(gv.shape[0]):
            p_any, g_any = pv[k].any(), gv[k].any()
            if not p_any and not g_any:
                continue
            if p_any != g_any:
                skipped += 1
                continue
            stats = surface_distance_stats(pv[k], gv[k], (sr, sc))
            slice_msds.append(stats["msd_mm"])
            slice_hds.append(stats["hd_mm"])
        msd = float(np.mean(slice_msds)) if slice_msds else None
        hd = float(np.max(slice_hds)) if slice_hds else None

    return CaseMetrics(
        patient_id=gt.patient_id,
        slice_dscs=slice_dscs,
        volumetric_dsc=volumetric_dice(pv, gv),
        msd_mm=msd,
        hd_mm=hd,
        n_skipped_slices=skipped,
    )


def evaluate(
    predictions: list[MaskVolume],
    ground_truths: list[MaskVolume],
    config: EvalConfig = EvalConfig(),
) -> MetricsReport:
    """Aggregate slice DSC, per-patient volumetric DSC and surface distances."""
    pred_by_id = {p.patient_id: p for p in predictions}
    gt_by_id = {g.patient_id: g for g in ground_truths}
    if set(pred_by_id) != set(gt_by_id):
        raise ValueError(
            f"patient sets differ: {sorted(set(pred_by_id) ^ set(gt_by_id))}"
        )

    cases = [
        _case_metrics(pred_by_id[pid], gt_by_id[pid], config)
        for pid in sorted(gt_by_id)
    ]

    all_slice_dscs = [d for c in cases for d in c.slice_dscs]
    msds = [c.msd_mm for c in cases if c.msd_mm is not None]
    hds = [c.hd_mm for c in cases if c.hd_mm is not None]
    warnings = sum(c.n_skipped_slices for c in cases) + sum(
        1 for c in cases if c.msd_mm is None
    )

    return MetricsReport(
        dsc_pct=100.0 * float(np.mean(all_slice_dscs)) if all_slice_dscs else 0.0,
        vdsc_pct=100.0 * float(np.mean([c.volumetric_dsc for c in cases])),
        msd_mm=float(np.mean(msds)) if msds else float("nan"),
        hd_mm=float(np.mean(hds)) if hds else float("nan"),
        n_cases=len(cases),
        per_case=cases,
        n_distance_warnings=warnings,
    )
