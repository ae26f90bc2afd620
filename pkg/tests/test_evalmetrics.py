import numpy as np
import pytest

from prostaug.dataio import MaskVolume
from prostaug.evalmetrics import (
    EvalConfig,
    boundary_points,
    dice,
    evaluate,
    surface_distance_stats,
    volumetric_dice,
)

from conftest import random_blob_mask


# ---------------------------------------------------------------------------
# Independent oracles: set enumeration and all-pairs boundary distances
# ---------------------------------------------------------------------------

def oracle_dice(a, b):
    sa = {tuple(p) for p in np.argwhere(np.asarray(a) > 0)}
    sb = {tuple(p) for p in np.argwhere(np.asarray(b) > 0)}
    if not sa and not sb:
        return 1.0
    return 2 * len(sa & sb) / (len(sa) + len(sb))


def oracle_boundary(mask):
    m = np.asarray(mask).astype(bool)
    pts = []
    h, w = m.shape
    for i in range(h):
        for j in range(w):
            if not m[i, j]:
                continue
            on_edge = i == 0 or i == h - 1 or j == 0 or j == w - 1
            has_bg = any(
                not m[i + di, j + dj]
                for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1))
                if 0 <= i + di < h and 0 <= j + dj < w
            )
            if on_edge or has_bg:
                pts.append((i, j))
    return np.array(pts, dtype=float)


def oracle_surface_stats(a, b, spacing):
    pa = oracle_boundary(a) * np.asarray(spacing)
    pb = oracle_boundary(b) * np.asarray(spacing)
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=2))
    d_ab = d.min(axis=1)
    d_ba = d.min(axis=0)
    return {
        "msd_mm": 0.5 * (d_ab.mean() + d_ba.mean()),
        "hd_mm": max(d_ab.max(), d_ba.max()),
    }


# ---------------------------------------------------------------------------
# dice
# ---------------------------------------------------------------------------

def test_dice_identical_nonempty():
    m = np.zeros((8, 8), dtype=np.uint8)
    m[2:5, 3:6] = 1
    assert dice(m, m) == 1.0


def test_dice_two_and_one_pixel():
    a = np.zeros((4, 4), dtype=np.uint8)
    b = np.zeros((4, 4), dtype=np.uint8)
    a[1, 1] = a[1, 2] = 1
    b[1, 1] = 1
    expected = oracle_dice(a, b)
    assert expected == pytest.approx(2 / 3)
    assert dice(a, b) == pytest.approx(expected)


def test_dice_disjoint():
    a = np.zeros((6, 6), dtype=np.uint8)
    b = np.zeros((6, 6), dtype=np.uint8)
    a[0, 0] = 1
    b[5, 5] = 1
    assert dice(a, b) == 0.0


def test_dice_both_empty_is_one():
    z = np.zeros((5, 5), dtype=np.uint8)
    assert dice(z, z) == 1.0


def test_dice_symmetric_and_permutation_invariant():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a = random_blob_mask(rng, 16, 16)
        b = random_blob_mask(rng, 16, 16)
        assert dice(a, b) == dice(b, a)
        assert dice(a[::-1], b[::-1]) == pytest.approx(dice(a, b))


def test_dice_shape_mismatch():
    with pytest.raises(ValueError):
        dice(np.zeros((3, 3)), np.zeros((4, 4)))


# ---------------------------------------------------------------------------
# surface distances
# ---------------------------------------------------------------------------

def test_surface_identical_masks_zero():
    m = np.zeros((9, 9), dtype=np.uint8)
    m[3:6, 3:6] = 1
    stats = surface_distance_stats(m, m, (1.0, 1.0))
    assert stats["msd_mm"] == 0.0
    assert stats["hd_mm"] == 0.0


def test_surface_single_pixels_euclidean():
    a = np.zeros((8, 8), dtype=np.uint8)
    b = np.zeros((8, 8), dtype=np.uint8)
    a[0, 0] = 1
    b[3, 4] = 1
    stats = surface_distance_stats(a, b, (1.0, 1.0))
    assert stats["hd_mm"] == pytest.approx(5.0)
    assert stats["msd_mm"] == pytest.approx(5.0)


def test_surface_concentric_squares_vs_oracle():
    a = np.zeros((11, 11), dtype=np.uint8)
    b = np.zeros((11, 11), dtype=np.uint8)
    a[1:10, 1:10] = 1  # 9x9
    b[3:8, 3:8] = 1  # 5x5
    got = surface_distance_stats(a, b, (1.0, 1.0))
    want = oracle_surface_stats(a, b, (1.0, 1.0))
    assert got["msd_mm"] == pytest.approx(want["msd_mm"], abs=1e-12)
    assert got["hd_mm"] == pytest.approx(want["hd_mm"], abs=1e-12)


def test_surface_spacing_scales_distances():
    a = np.zeros((8, 8), dtype=np.uint8)
    b = np.zeros((8, 8), dtype=np.uint8)
    a[0, 0] = 1
    b[0, 4] = 1
    stats = surface_distance_stats(a, b, (1.0, 0.5))
    assert stats["hd_mm"] == pytest.approx(2.0)


def test_surface_random_pairs_match_oracle():
    rng = np.random.default_rng(2)
    for _ in range(50):
        a = random_blob_mask(rng, 20, 20)
        b = random_blob_mask(rng, 20, 20)
        spacing = (rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0))
        got = surface_distance_stats(a, b, spacing)
        want = oracle_surface_stats(a, b, spacing)
        assert got["msd_mm"] == pytest.approx(want["msd_mm"], abs=1e-9)
        assert got["hd_mm"] == pytest.approx(want["hd_mm"], abs=1e-9)
        assert got["msd_mm"] <= got["hd_mm"] + 1e-12


def test_surface_empty_mask_is_error():
    m = np.zeros((5, 5), dtype=np.uint8)
    n = m.copy()
    n[2, 2] = 1
    with pytest.raises(ValueError):
        surface_distance_stats(m, n, (1.0, 1.0))


def test_boundary_matches_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        m = random_blob_mask(rng, 15, 15)
        got = {tuple(p) for p in boundary_points(m)}
        want = {tuple(int(v) for v in p) for p in oracle_boundary(m)}
        assert got == want


# ---------------------------------------------------------------------------
# volumetric dice
# ---------------------------------------------------------------------------

def test_volumetric_identical():
    v = np.zeros((4, 6, 6), dtype=np.uint8)
    v[1:3, 2:4, 2:4] = 1
    assert volumetric_dice(v, v) == 1.0


def test_volumetric_equal_slice_dice_collapses():
    # every slice has dice d with equal areas -> volume dice is d
    pred = np.zeros((3, 8, 8), dtype=np.uint8)
    gt = np.zeros((3, 8, 8), dtype=np.uint8)
    for k in range(3):
        pred[k, 2:4, 2:6] = 1  # 8 px
        gt[k, 3:5, 2:6] = 1  # 8 px, overlap 4 px -> dice 0.5
    per_slice = [dice(pred[k], gt[k]) for k in range(3)]
    assert all(d == pytest.approx(0.5) for d in per_slice)
    assert volumetric_dice(pred, gt) == pytest.approx(0.5)


def test_volumetric_empty_prediction():
    gt = np.zeros((3, 5, 5), dtype=np.uint8)
    gt[1, 2, 2] = 1
    assert volumetric_dice(np.zeros_like(gt), gt) == 0.0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def _volume(arr, pid, spacing=(3.0, 1.0, 1.0)):
    return MaskVolume(voxels=arr, spacing_mm=spacing, patient_id=pid)


def test_evaluate_perfect_predictions():
    v = np.zeros((4, 8, 8), dtype=np.uint8)
    v[1:3, 2:6, 2:6] = 1
    report = evaluate([_volume(v, "p0")], [_volume(v.copy(), "p0")])
    assert report.as_row() == pytest.approx((100.0, 0.0, 0.0, 100.0))


def test_evaluate_row_order_is_dsc_msd_hd_vdsc():
    v = np.zeros((3, 8, 8), dtype=np.uint8)
    v[1, 2:5, 2:5] = 1
    report = evaluate([_volume(v, "p0")], [_volume(v.copy(), "p0")])
    row = report.as_row()
    assert row == (report.dsc_pct, report.msd_mm, report.hd_mm, report.vdsc_pct)


def test_evaluate_two_patient_toy_matches_recompute():
    rng = np.random.default_rng(4)
    preds, gts = [], []
    for pid in ("pa", "pb"):
        pv = np.stack([random_blob_mask(rng, 12, 12) for _ in range(3)])
        gv = np.stack([random_blob_mask(rng, 12, 12) for _ in range(3)])
        preds.append(_volume(pv, pid, (2.0, 0.8, 0.8)))
        gts.append(_volume(gv, pid, (2.0, 0.8, 0.8)))
    report = evaluate(preds, gts)

    # independent recomputation from the closed forms
    slice_dscs, vdscs, msds, hds = [], [], [], []
    for p, g in zip(preds, gts):
        for k in range(3):
            slice_dscs.append(oracle_dice(p.voxels[k], g.voxels[k]))
        vdscs.append(oracle_dice(p.voxels, g.voxels))
        per_slice = [
            oracle_surface_stats(p.voxels[k], g.voxels[k], (0.8, 0.8)) for k in range(3)
        ]
        msds.append(np.mean([s["msd_mm"] for s in per_slice]))
        hds.append(np.max([s["hd_mm"] for s in per_slice]))

    assert report.dsc_pct == pytest.approx(100 * np.mean(slice_dscs))
    assert report.vdsc_pct == pytest.approx(100 * np.mean(vdscs))
    assert report.msd_mm == pytest.approx(np.mean(msds))
    assert report.hd_mm == pytest.approx(np.mean(hds))


def test_evaluate_patient_mismatch():
    v = np.ones((2, 4, 4), dtype=np.uint8)
    with pytest.raises(ValueError):
        evaluate([_volume(v, "a")], [_volume(v, "b")])


def test_evaluate_empty_empty_slices_excluded_by_default():
    v = np.zeros((4, 6, 6), dtype=np.uint8)
    v[1, 2:4, 2:4] = 1
    report = evaluate([_volume(v, "p")], [_volume(v.copy(), "p")])
    assert len(report.per_case[0].slice_dscs) == 1
    with_empty = evaluate(
        [_volume(v, "p")], [_volume(v.copy(), "p")], EvalConfig(include_empty_slices=True)
    )
    assert len(with_empty.per_case[0].slice_dscs) == 4


def test_evaluate_one_sided_empty_slice_warns():
    pred = np.zeros((3, 6, 6), dtype=np.uint8)
    gt = np.zeros((3, 6, 6), dtype=np.uint8)
    pred[0, 2:4, 2:4] = 1
    gt[0, 2:4, 2:4] = 1
    gt[1, 2:4, 2:4] = 1  # prediction misses this slice entirely
    report = evaluate([_volume(pred, "p")], [_volume(gt, "p")])
    assert report.n_distance_warnings >= 1
    assert np.isfinite(report.msd_mm)


def test_msd_never_exceeds_hd():
    rng = np.random.default_rng(5)
    for _ in range(30):
        a = random_blob_mask(rng, 14, 14)
        b = random_blob_mask(rng, 14, 14)
        s = surface_distance_stats(a, b, (1.0, 1.0))
        assert s["msd_mm"] <= s["hd_mm"] + 1e-12
