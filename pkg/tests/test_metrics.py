import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as hs
from hypothesis.extra import numpy as hnp

from oracles import boundary_loop, directed_distances
from zonalseg import metrics as M

masks = hnp.arrays(bool, hs.tuples(hs.integers(1, 9), hs.integers(1, 9)))


def test_hand_counts():
    S = np.array([[1, 1, 0], [0, 1, 0]], bool)
    G = np.array([[1, 0, 0], [0, 1, 1]], bool)
    assert M.confusion(S, G) == M.ConfusionCounts(tp=2, fp=1, fn=1, tn=2)
    assert M.dsc(S, G) == pytest.approx(200 * 2 / 6)
    assert M.sensitivity(S, G) == pytest.approx(200 / 3)
    assert M.specificity(S, G) == pytest.approx(100 * (1 - 1 / 3))
    assert M.true_negative_rate(S, G) == pytest.approx(100 * 2 / 3)


def test_empty_conventions():
    e = np.zeros((3, 3), bool)
    f = np.ones((3, 3), bool)
    assert M.dsc(e, e) == 100 and M.sensitivity(e, e) == 100 and M.specificity(e, e) == 100
    assert M.dsc(e, f) == 0 and M.sensitivity(e, f) == 0 and M.specificity(e, f) == 100
    assert math.isnan(M.avg_max_distance(e, f)[0])


def test_shape_mismatch():
    with pytest.raises(ValueError, match="differ"):
        M.dsc(np.zeros((2, 2), bool), np.zeros((2, 3), bool))


@given(masks, hs.data())
def test_rates_match_counting(S, data):
    G = data.draw(hnp.arrays(bool, S.shape))
    tp = sum(1 for s, g in zip(S.flat, G.flat) if s and g)
    fp = sum(1 for s, g in zip(S.flat, G.flat) if s and not g)
    fn = sum(1 for s, g in zip(S.flat, G.flat) if g and not s)
    assert M.dsc(S, G) == (100.0 if 2 * tp + fp + fn == 0 else 200.0 * tp / (2 * tp + fp + fn))
    assert M.dsc(S, G) == M.dsc(G, S)
    assert 0 <= M.specificity(S, G) <= 100


def test_boundary_frame_edge_counts():
    m = np.ones((3, 3), bool)
    got = sorted(map(tuple, M.boundary(m)))
    assert got == [(0, 0), (0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1), (2, 2)]


@given(masks)
def test_boundary_matches_loop(m):
    assert sorted(map(tuple, M.boundary(m))) == sorted(boundary_loop(m))


def test_shifted_square_distances():
    S = np.zeros((10, 10), bool)
    S[2:6, 2:6] = True
    G = np.roll(S, 2, axis=1)
    avg, mx = M.avg_max_distance(S, G)
    assert mx == 2.0
    avg2, mx2 = M.avg_max_distance(S, G, spacing=(0.5, 0.5))
    assert mx2 == 1.0 and avg2 == pytest.approx(avg / 2)


@given(masks, hs.data())
def test_distances_match_all_pairs(S, data):
    G = data.draw(hnp.arrays(bool, S.shape))
    got = M.avg_max_distance(S, G)
    want = directed_distances(S, G)
    if math.isnan(want[0]):
        assert math.isnan(got[0]) and math.isnan(got[1])
    else:
        assert got == pytest.approx(want, abs=1e-12)


def test_directed_is_not_symmetric_but_hausdorff_is():
    S = np.zeros((9, 9), bool)
    S[4, 4] = True
    G = np.zeros((9, 9), bool)
    G[1:8, 1:8] = True
    assert M.avg_max_distance(S, G)[1] == 3.0
    assert M.avg_max_distance(G, S)[1] == pytest.approx(math.hypot(3, 3))
    assert M.hausdorff(S, G) == M.hausdorff(G, S) == pytest.approx(math.hypot(3, 3))


def test_patient_aggregation_unweighted_and_nan_skipping():
    e = np.zeros((4, 4), bool)
    a = np.zeros((4, 4), bool)
    a[1:3, 1:3] = True
    r1 = M.slice_metrics({"CG": a, "PZ": a}, {"CG": a, "PZ": a})
    r2 = M.slice_metrics({"CG": e, "PZ": a}, {"CG": a, "PZ": a})
    agg = M.aggregate_patient([r1, r2])
    assert agg.get("CG", "dsc") == 50.0
    assert agg.get("CG", "avgd") == 0.0  # the undefined slice is skipped
    assert agg.level == "patient" and agg.n_slices == 2
    assert M.aggregate_patient([]) is None


def test_csv_rows_format():
    a = np.eye(3, dtype=bool)
    rec = M.aggregate_patient([M.slice_metrics({"CG": a, "PZ": ~a}, {"CG": a, "PZ": ~a})])
    rows = list(M.csv_rows(rec, "A", "A->A", 2, "A001"))
    assert rows[0][:7] == ["A", "A->A", "2", "A001", "CG", "patient", "100.000000"]
    assert len(rows) == 2 and len(rows[0]) == len(M.METRICS_CSV_HEADER)
