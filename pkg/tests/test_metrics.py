import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from labelcurate import metrics as M
from labelcurate.catalog import StructureCatalog, StructureDef
from labelcurate.errors import GridMismatch, IoError, UndefinedDistance, UndefinedRatio, UnknownStructure
from labelcurate.volgrid import LabelGrid

from oracles import metrics_oracle, random_mask_pair, surface_bruteforce


def cube(shape, lo, size):
    m = np.zeros(shape, dtype=bool)
    m[tuple(slice(l, l + size) for l in lo)] = True
    return m


def test_dice_examples():
    a = cube((4, 4, 4), (0, 0, 0), 2)
    b = cube((4, 4, 4), (1, 0, 0), 2)
    assert M.dice(a, a) == 1.0
    assert M.dice(a, cube((4, 4, 4), (2, 2, 2), 2)) == 0.0
    assert M.dice(a, b) == 0.5
    assert M.dice(np.zeros((2, 2, 2)), np.zeros((2, 2, 2))) == 1.0
    with pytest.raises(GridMismatch):
        M.dice(a, np.zeros((3, 3, 3)))


def test_surface_examples():
    assert len(M.surface_points(cube((5, 5, 5), (2, 2, 2), 1))) == 1
    assert len(M.surface_points(cube((5, 5, 5), (1, 1, 1), 3))) == 26
    assert len(M.surface_points(np.zeros((3, 3, 3)))) == 0


def test_shifted_cubes_distances():
    a = M.surface_points(cube((4, 4, 4), (0, 0, 0), 2))
    b = M.surface_points(cube((4, 4, 4), (1, 0, 0), 2))
    assert M.hd(a, b) == 1.0 and M.hd95(a, b) == 1.0
    assert M.hd(a, a) == 0.0 and M.hd95(a, a) == 0.0


def test_outlier_moves_hd_not_hd95():
    base = cube((40, 12, 12), (1, 1, 1), 6)
    s = M.surface_points(base)
    assert len(s) >= 20
    # one stray point 50 mm beyond the cube face at x = 6
    pts = np.vstack([s.points, [[56.0, 1, 1]]])
    out = M.SurfaceSet(pts)
    assert M.hd(s, out) == pytest.approx(50.0)
    assert M.hd95(s, out) == M.hd95(s, s)


def test_nsd_examples():
    shape = (20, 20, 20)
    a = cube(shape, (5, 5, 5), 6)
    sa = M.surface_points(a, (1.5,) * 3)
    assert M.nsd(sa, sa) == 1.0
    # two parallel slabs one voxel (1.5 mm) apart, then three voxels (4.5 mm) apart
    p = np.zeros(shape, bool); p[:, :, 5] = True
    q1 = np.zeros(shape, bool); q1[:, :, 6] = True
    q3 = np.zeros(shape, bool); q3[:, :, 8] = True
    sp = M.surface_points(p, (1.5,) * 3)
    assert M.nsd(sp, M.surface_points(q1, (1.5,) * 3), 3.0) == 1.0
    assert M.nsd(sp, M.surface_points(q3, (1.5,) * 3), 3.0) == 0.0


def test_tpr_and_error_volume():
    g = cube((4, 4, 4), (0, 0, 0), 2)
    assert M.tpr(g, np.ones_like(g)) == 1.0
    assert M.tpr(g, ~g) == 0.0
    assert M.tpr(g, cube((4, 4, 4), (1, 0, 0), 2)) == 0.5
    assert M.error_volume(g, g) == 0.0
    p = g.copy(); p[3, 3, :] = True
    assert M.error_volume(g, p) == 50.0
    assert M.error_volume(g, np.zeros_like(g)) == -100.0
    with pytest.raises(UndefinedRatio):
        M.tpr(np.zeros_like(g), g)
    with pytest.raises(UndefinedRatio):
        M.error_volume(np.zeros_like(g), g)


def test_empty_surface_raises():
    s = M.surface_points(cube((3, 3, 3), (0, 0, 0), 1))
    with pytest.raises(UndefinedDistance):
        M.hd(s, M.SurfaceSet(np.zeros((0, 3))))
    with pytest.raises(UndefinedDistance):
        M.nsd(M.SurfaceSet(np.zeros((0, 3))), s)


@pytest.mark.parametrize("seed", range(20))
def test_random_pairs_match_oracle(seed):
    rng = np.random.default_rng(seed)
    gt, pred = random_mask_pair(rng)
    spacing = tuple(rng.choice([0.8, 1.0, 1.5, 2.0], 3))
    sg, sp = M.surface_points(gt, spacing), M.surface_points(pred, spacing)
    np.testing.assert_array_equal(sg.points, surface_bruteforce(gt, spacing))
    want = metrics_oracle(gt, pred, spacing)
    got = {"dice": M.dice(gt, pred), "tpr": M.tpr(gt, pred), "error_volume": M.error_volume(gt, pred),
           "hd": M.hd(sg, sp), "hd95": M.hd95(sg, sp), "nsd": M.nsd(sg, sp)}
    for k in ("hd", "hd95"):
        assert abs(got[k] - want[k]) <= 1e-9, k
    for k in ("dice", "tpr", "nsd"):
        assert abs(got[k] - want[k]) <= 1e-12, k
    assert got["error_volume"] == pytest.approx(want["error_volume"], abs=1e-9)


def test_nearest_rank_avoids_float_traps():
    v = np.arange(1, 31, dtype=float)
    # 0.1 * 30 is 3.0000000000000004 in floating point
    assert M.nearest_rank(v, 0.1) == 3.0
    assert M.nearest_rank(v, 0.95) == 29.0
    assert M.nearest_rank([7.0], 0.95) == 7.0


# --- policy -------------------------------------------------------------------

CAT = StructureCatalog((StructureDef(1, "thing", 1, 10, 1000.0),))


def grid_with(count, shape=(100, 100, 100)):
    lab = np.zeros(shape, np.uint16)
    lab.reshape(-1)[:count] = 1
    return LabelGrid(lab, spacing=(1.5, 1.5, 1.5))


def test_policy_penalized_uses_diagonal():
    gt, empty = grid_with(950), grid_with(0)
    r = M.evaluate_structure(gt, empty, 1, catalog=CAT)
    assert r.status == M.PENALIZED and r.dice == 0 and r.nsd == 0
    assert r.hd95 == r.hd == pytest.approx(math.sqrt(3) * 150, abs=1e-9)
    assert r.flags == ()


def test_policy_excluded_and_evaluated():
    r = M.evaluate_structure(grid_with(50), grid_with(50), 1, catalog=CAT)
    assert r.status == M.EXCLUDED and r.dice is None and r.hd95 is None
    gt = grid_with(950)
    r = M.evaluate_structure(gt, gt, 1, catalog=CAT)
    assert r.status == M.EVALUATED and r.dice == 1.0 and r.hd == 0.0
    assert M.evaluate_structure(grid_with(0), grid_with(10), 1, catalog=CAT).status == M.EXCLUDED


def test_policy_partial_miss_is_flagged():
    r = M.evaluate_structure(grid_with(500), grid_with(0), 1, catalog=CAT)
    assert r.status == M.PENALIZED and r.flags == ("partially_visible_miss",)


def test_unknown_structure():
    with pytest.raises(UnknownStructure):
        M.evaluate_structure(grid_with(1), grid_with(1), 99, catalog=CAT)


def test_record_invariants():
    with pytest.raises(ValueError):
        M.MetricRecord("c", 1, M.EXCLUDED, dice=1.0)
    with pytest.raises(ValueError):
        M.MetricRecord("c", 1, M.EVALUATED, dice=1.0)


def test_bootstrap_is_seeded():
    v = np.arange(10.0)
    a = M.bootstrap_ci(v, np.random.default_rng(3), 2000)
    b = M.bootstrap_ci(v, np.random.default_rng(3), 2000)
    assert a == b and a[0] < v.mean() < a[1]


# --- properties ----------------------------------------------------------------

masks = arrays(np.bool_, (6, 6, 6), elements=st.booleans())


@settings(max_examples=60, deadline=None)
@given(masks, masks, st.floats(0.0, 6.0))
def test_metric_properties(a, b, tau):
    assert M.dice(a, b) == M.dice(b, a)
    assert 0.0 <= M.dice(a, b) <= 1.0
    if a.any():
        assert M.dice(a, a) == 1.0
        sa = M.surface_points(a)
        assert M.hd(sa, sa) == 0.0 and M.nsd(sa, sa, tau) == 1.0
    if a.any() and b.any():
        sa, sb = M.surface_points(a), M.surface_points(b)
        assert M.hd(sa, sb) == M.hd(sb, sa)
        assert M.hd95(sa, sb) <= M.hd(sa, sb)
        assert M.nsd(sa, sb, tau) <= M.nsd(sa, sb, tau + 1.0)


# --- dataset evaluation ----------------------------------------------------------

from labelcurate.io import Manifest, ManifestEntry, load_adapter, write_nifti  # noqa: E402

SMALL = StructureCatalog((StructureDef(1, "liver", 1, 5, 9.0), StructureDef(2, "kidney_r", 1, 5, 10.0),
                          StructureDef(3, "kidney_l", 1, 5, 10.0)))


def _write_case(tmp_path, case_id, gt, pred, **kw):
    d = tmp_path / case_id
    d.mkdir()
    write_nifti(LabelGrid(gt.astype(np.uint16)), d / "gt.nii")
    write_nifti(LabelGrid(pred.astype(np.uint16)), d / "p.nii")
    return ManifestEntry(case_id, gt=f"{case_id}/gt.nii", predictions={"final": f"{case_id}/p.nii"}, **kw)


def test_identity_gt_equals_pred(tmp_path):
    lab = np.zeros((8, 8, 8), np.uint16)
    lab[1:4, 1:4, 1:4] = 1
    lab[5:7, 5:7, 1:4] = 2
    m = Manifest((_write_case(tmp_path, "a", lab, lab),), base_dir=str(tmp_path))
    recs, agg = M.evaluate_dataset(m, catalog=SMALL, n_resamples=100)
    assert [r.structure_id for r in recs] == [1, 2]
    assert all(r.status == M.EVALUATED and r.dice == 1.0 for r in recs)
    assert agg["structures"]["1"]["dice"]["mean"] == 1.0


def test_kidney_merge_union_dice(tmp_path):
    gt = np.zeros((12, 12, 4), np.uint16)
    pred = np.zeros_like(gt)
    gt.reshape(-1)[:10] = 3          # left: 10 voxels
    pred.reshape(-1)[2:12] = 3       # overlap 8, dice 0.8
    gt[8:10, 8:12, 0] = 2            # right: 8 voxels, identical
    pred[8:10, 8:12, 0] = 2
    entry = _write_case(tmp_path, "a", gt, pred)
    m = Manifest((entry,), base_dir=str(tmp_path))
    (side_l, side_r) = [r for r in M.evaluate_dataset(m, catalog=SMALL, n_resamples=10)[0] if r.structure_id > 1][::-1]
    assert side_l.dice == pytest.approx(0.8) and side_r.dice == 1.0
    (merged,), _ = M.evaluate_dataset(m, adapter=load_adapter("kidneys"), catalog=SMALL, n_resamples=10)
    # union counts: |G| = |P| = 18, overlap 16
    assert merged.structure == "kidneys" and merged.dice == pytest.approx(2 * 16 / 36)


def test_sparse_slice_filter(tmp_path):
    gt = np.zeros((6, 6, 6), np.uint16)
    gt[1:4, 1:4, 0] = 1
    gt[1:4, 1:4, 5] = 1
    pred = gt.copy()
    pred[1:4, 1:4, 1:5] = 1          # unannotated slices 1-4
    pred[0, 0, 3] = 2
    m = Manifest((_write_case(tmp_path, "a", gt, pred),), base_dir=str(tmp_path))
    recs, _ = M.evaluate_dataset(m, adapter=load_adapter("sparse_slices"), catalog=SMALL, n_resamples=10)
    assert [(r.structure_id, r.dice) for r in recs] == [(1, 1.0)]
    recs, _ = M.evaluate_dataset(m, catalog=SMALL, n_resamples=10)
    assert recs[0].dice == pytest.approx(2 * 18 / (18 + 54))


def test_exclusion_flags_and_missing_files(tmp_path):
    lab = np.zeros((4, 4, 4), np.uint16)
    lab[:2] = 1
    a = _write_case(tmp_path, "a", lab, lab, flags=frozenset({"L6"}), adapter="transitional_vertebrae")
    b = ManifestEntry("b", gt="b/none.nii", predictions={"final": "b/none.nii"})
    m = Manifest((a, b), base_dir=str(tmp_path))
    with pytest.raises(IoError, match="case b"):
        M.evaluate_dataset(m, catalog=SMALL, n_resamples=10)
    recs, agg = M.evaluate_dataset(m, catalog=SMALL, n_resamples=10, isolate=True)
    assert recs == [] and agg["excluded_cases"] == ["a"] and list(agg["failed_cases"]) == ["b"]
