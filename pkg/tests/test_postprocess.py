import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as hs
from hypothesis.extra import numpy as hnp

from oracles import components_bfs, fill_holes_bfs
from zonalseg.postprocess import derive_pz, fill_holes, min_component_size, postprocess_cg, remove_small, threshold

masks = hnp.arrays(bool, hs.tuples(hs.integers(1, 12), hs.integers(1, 12)))


def test_threshold_inclusive():
    np.testing.assert_array_equal(threshold(np.array([0.49, 0.5, 0.51])), [False, True, True])


@given(masks)
def test_fill_holes_matches_bfs_and_laws(m):
    f = fill_holes(m)
    np.testing.assert_array_equal(f, fill_holes_bfs(m))
    assert (f | m).sum() == f.sum()  # extensive
    np.testing.assert_array_equal(fill_holes(f), f)  # idempotent


def test_fill_holes_uses_4_connectivity():
    # the centre touches the outside only diagonally: a hole under 4-connectivity
    m = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], bool)
    assert fill_holes(m)[1, 1]


@given(masks, hs.data())
def test_remove_small_laws(m, data):
    wg = data.draw(hnp.arrays(bool, m.shape))
    out = remove_small(m, wg)
    assert not (out & ~m).any()  # anti-extensive
    np.testing.assert_array_equal(remove_small(out, wg), out)  # idempotent
    limit = wg.sum() // 8
    want = np.zeros_like(m)
    if wg.any():
        for comp in components_bfs(m):
            if len(comp) >= limit:
                for p in comp:
                    want[p] = True
    np.testing.assert_array_equal(out, want)


def _blob(n, shape=(20, 20), origin=(0, 0)):
    m = np.zeros(shape, bool)
    flat = [(origin[0] + k // 6, origin[1] + k % 6) for k in range(n)]
    for p in flat:
        m[p] = True
    return m


def test_min_size_boundary_12_vs_11():
    wg = np.zeros((20, 20), bool)
    wg[:10, :10] = True
    assert wg.sum() == 100 and min_component_size(wg) == 12
    kept = _blob(12)
    assert remove_small(kept, wg).sum() == 12
    assert remove_small(_blob(11), wg).sum() == 0


def test_empty_wg_removes_everything():
    m = np.ones((4, 4), bool)
    assert not remove_small(m, np.zeros((4, 4), bool)).any()


@given(hnp.arrays(float, (10, 10), elements=hs.floats(0, 1)), hnp.arrays(bool, (10, 10)))
def test_pipeline_partition(prob, wg):
    cg, pz = postprocess_cg(prob, wg)
    np.testing.assert_array_equal(cg | pz, wg)
    assert not (cg & pz).any()
    assert not (cg & ~wg).any()


def test_pipeline_fills_and_clips():
    wg = np.zeros((12, 12), bool)
    wg[1:11, 1:11] = True
    prob = np.zeros((12, 12))
    prob[3:8, 3:8] = 0.9
    prob[5, 5] = 0.1  # hole
    prob[0, 0] = 0.99  # outside WG
    cg, pz = postprocess_cg(prob, wg)
    assert cg[5, 5] and not cg[0, 0] and cg.sum() == 25
    np.testing.assert_array_equal(derive_pz(wg, cg), pz)


def test_remove_small_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        remove_small(np.zeros((2, 2), bool), np.zeros((3, 3), bool))
