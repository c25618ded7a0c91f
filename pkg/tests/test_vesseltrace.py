import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import ndimage

from vampire import vesseltrace as vt
from vampire.errors import PreconditionError, StructuralError
from vampire.synthdata import GenConfig, generate_sample


def draw(shape, pixels):
    m = np.zeros(shape, dtype=np.uint8)
    for r, c in pixels:
        m[r, c] = 1
    return m


def y_skeleton():
    """Vertical stem (0,5)..(4,5), junction (5,5), diagonal arms to (10,10) and (10,0)."""
    stem = [(r, 5) for r in range(5)]
    right = [(5 + k, 5 + k) for k in range(1, 6)]
    left = [(5 + k, 5 - k) for k in range(1, 6)]
    return draw((11, 11), stem + [(5, 5)] + right + left)


def components(mask):
    return ndimage.label(mask, structure=np.ones((3, 3)))[1]


# --- masks ------------------------------------------------------------------

def test_segment_blank_is_zero():
    assert vt.segment_vessels(np.zeros((3, 16, 16))).sum() == 0


def test_segment_matches_ground_truth():
    s = generate_sample(GenConfig(n_patients=2, seed=4), 0)
    seg = vt.segment_vessels(s.layers)
    assert set(np.unique(seg)) <= {0, 1}
    truth = s.vessel_mask.astype(bool)
    dice = 2 * np.sum(seg.astype(bool) & truth) / (seg.sum() + truth.sum())
    assert dice >= 0.7


def test_refine_removes_small_blob_and_is_idempotent():
    m = np.zeros((12, 12), dtype=np.uint8)
    m[1, 1:4] = 1
    assert vt.refine_mask(m, min_component=5).sum() == 0
    m[6:9, 2:11] = 1
    once = vt.refine_mask(m, min_component=5, close_radius=0)
    np.testing.assert_array_equal(once[6:9, 2:11], 1)
    np.testing.assert_array_equal(vt.refine_mask(once, 5, 0), once)


def test_otsu_separates_two_levels():
    v = np.r_[np.full(50, 0.2), np.full(50, 0.8)]
    t = vt.otsu_threshold(v)
    assert 0.2 <= t < 0.8
    assert vt.otsu_threshold(np.full(10, 0.3)) is None


# --- skeleton ---------------------------------------------------------------

def test_bar_thins_to_line():
    m = np.zeros((5, 9), dtype=np.uint8)
    m[1:4, 1:8] = 1
    sk = vt.skeletonize(m)
    rows, cols = np.nonzero(sk)
    assert set(rows) == {2}
    assert np.all(np.diff(np.sort(cols)) == 1)


def test_empty_skeleton():
    assert vt.skeletonize(np.zeros((6, 6))).sum() == 0


def test_skeleton_preserves_components_on_synthetic_masks():
    for i in range(50):
        mask = generate_sample(GenConfig(n_patients=25, seed=11), i).vessel_mask
        sk = vt.skeletonize(mask)
        assert components(sk) == components(mask), i
        assert not (sk & ~mask.astype(bool)).any()
        assert len(vt._blocks(sk)) == 0


# --- graph and trajectories -------------------------------------------------

def test_straight_line_graph():
    g = vt.build_graph(draw((3, 12), [(1, c) for c in range(1, 11)]))
    assert sorted(n.kind for n in g.nodes) == ["endpoint", "endpoint"]
    assert len(g.edges) == 1 and len(g.edges[0]) == 10
    assert vt.extract_trajectories(g) == [[(1, c) for c in range(1, 11)]]


def test_y_graph_and_trajectories():
    sk = y_skeleton()
    g = vt.build_graph(sk)
    kinds = sorted(n.kind for n in g.nodes)
    assert kinds == ["endpoint"] * 3 + ["junction"]
    assert len(g.edges) == 3
    assert g.pixel_count() == sk.sum()
    trajs = vt.extract_trajectories(g)
    assert trajs == [
        [(r, 5) for r in range(6)] + [(5 + k, 5 + k) for k in range(1, 6)],
        [(5, 5)] + [(5 + k, 5 - k) for k in range(1, 6)],
    ]


def test_two_components_two_trajectories():
    sk = draw((8, 10), [(1, c) for c in range(1, 8)] + [(5, c) for c in range(2, 9)])
    trajs = vt.extract_trajectories(vt.build_graph(sk))
    assert trajs == [[(1, c) for c in range(1, 8)], [(5, c) for c in range(2, 9)]]


def test_loop_uses_anchor_and_covers_pixels():
    ring = draw((7, 7), [(1, 2), (1, 3), (1, 4), (2, 5), (3, 5), (4, 5), (5, 4), (5, 3), (5, 2), (4, 1), (3, 1), (2, 1)])
    g = vt.build_graph(ring)
    assert [n.kind for n in g.nodes] == ["anchor"]
    assert g.pixel_count() == ring.sum()
    (traj,) = vt.extract_trajectories(g)
    assert traj[0] == traj[-1] and len(set(traj)) == ring.sum()


def test_isolated_pixel():
    g = vt.build_graph(draw((3, 3), [(1, 1)]))
    assert [n.kind for n in g.nodes] == ["isolated"]
    assert vt.extract_trajectories(g) == [[(1, 1)]]


def test_thick_skeleton_rejected():
    with pytest.raises(StructuralError):
        vt.build_graph(np.ones((2, 2)))


def test_graph_partition_and_edge_use_on_synthetic_masks():
    for i in range(20):
        sk = vt.skeletonize(generate_sample(GenConfig(n_patients=10, seed=5), i).vessel_mask)
        g = vt.build_graph(sk)
        assert g.pixel_count() == sk.sum()
        trajs = vt.extract_trajectories(g)
        steps = [frozenset((a, b)) for t in trajs for a, b in zip(t, t[1:])]
        edge_steps = [frozenset((a, b)) for e in g.edges for a, b in zip(e.path, e.path[1:])]
        assert sorted(map(sorted, steps)) == sorted(map(sorted, edge_steps))
        assert {p for t in trajs for p in t} == {tuple(p) for p in np.argwhere(sk)}


# --- patch trajectories and scan orders -------------------------------------

def test_patchify_single_patch_and_row():
    assert vt.patchify_trajectories([[(1, 1), (1, 2), (2, 3)]], 16, 8, 0.1) == [[0]]
    line = [(3, c) for c in range(64)]
    assert vt.patchify_trajectories([line], 64, 8, 0.1) == [list(range(8))]


def test_patchify_dedups_shared_junction_patch():
    a = [(3, c) for c in range(0, 12)]
    b = [(3, 4)] + [(3 + k, 4) for k in range(1, 12)]
    out = vt.patchify_trajectories([a, b], 16, 8, 0.1)
    flat = [p for t in out for p in t]
    assert flat.count(0) == 1 and sorted(set(flat)) == sorted(flat)


def test_patchify_drops_sparse_patches():
    line = [(3, c) for c in range(9)]  # a single pixel lands in patch 1
    assert vt.patchify_trajectories([line], 16, 8, 0.25) == [[0]]


def test_scan_order_examples():
    np.testing.assert_array_equal(vt.build_scan_order([], (4, 4)).order, np.arange(16))
    so = vt.build_scan_order([[0, 1, 2, 3]], (4, 4))
    np.testing.assert_array_equal(so.order, np.arange(16))
    assert [r.kind for r in so.runs] == ["V", "R"]
    np.testing.assert_array_equal(vt.linear_scan_order((2, 2)).order, [0, 1, 2, 3])
    np.testing.assert_array_equal(vt.diagonal_scan_order((2, 2)).order, [0, 1, 2, 3])
    np.testing.assert_array_equal(vt.diagonal_scan_order((3, 3)).order, [0, 1, 3, 2, 4, 6, 5, 7, 8])


def test_scan_order_bridges_between_trajectories():
    so = vt.build_scan_order([[12, 13], [0, 1]], (4, 4))
    assert so.order[:2].tolist() == [0, 1]
    kinds = [r.kind for r in so.runs]
    assert kinds[:3] == ["V", "B", "V"]
    bridge = so.run_slices("B")[0].tolist()
    assert bridge == [5, 8]  # Bresenham corridor (0,1) -> (3,0) passes (1,1) and (2,0)
    assert sorted(so.order.tolist()) == list(range(16))


def test_scan_order_rejects_overlap_and_range():
    with pytest.raises(PreconditionError):
        vt.build_scan_order([[0, 1], [1, 2]], (2, 2))
    with pytest.raises(PreconditionError):
        vt.build_scan_order([[7]], (2, 2))


def _check_order(so, n, grid):
    assert sorted(so.order.tolist()) == list(range(n))
    vessel = {p for r in so.run_slices("V") for p in r.tolist()}
    for run in so.run_slices("V"):
        for a, b in zip(run[:-1], run[1:]):
            (ra, ca), (rb, cb) = divmod(int(a), grid), divmod(int(b), grid)
            assert max(abs(ra - rb), abs(ca - cb)) == 1
    for kind in ("B", "R"):
        for run in so.run_slices(kind):
            assert not vessel & set(run.tolist())


@given(st.integers(0, 9_999), st.sampled_from(("vessel", "linear", "diagonal")))
def test_scan_order_properties_on_random_masks(index, strategy):
    mask = generate_sample(GenConfig(n_patients=5000, seed=21), index).vessel_mask
    so = vt.scan_order_for(strategy, 8, mask)
    _check_order(so, 64, 8)
    again = vt.scan_order_for(strategy, 8, mask.copy())
    np.testing.assert_array_equal(so.order, again.order)


def test_vessel_runs_cover_kept_patches():
    mask = generate_sample(GenConfig(n_patients=3, seed=2), 1).vessel_mask
    sk = vt.skeletonize(mask)
    trajs = vt.extract_trajectories(vt.build_graph(sk))
    kept = {p for t in vt.patchify_trajectories(trajs, 64, 8, 0.1) for p in t}
    so = vt.vessel_scan_order(mask, 8, 0.1)
    assert {p for r in so.run_slices("V") for p in r.tolist()} == kept


@given(st.tuples(st.integers(0, 20), st.integers(0, 20)), st.tuples(st.integers(0, 20), st.integers(0, 20)))
def test_bresenham_is_connected(a, b):
    line = vt.bresenham(a, b)
    assert line[0] == a and line[-1] == b
    for p, q in zip(line, line[1:]):
        assert max(abs(p[0] - q[0]), abs(p[1] - q[1])) == 1


def test_order_csv(tmp_path):
    so = vt.build_scan_order([[0, 1]], (2, 2))
    text = vt.write_order_csv(so, tmp_path / "o.csv").read_text().splitlines()
    assert text[0] == "position,patch_index,run_kind,run_id"
    assert text[1:] == ["0,0,V,0", "1,1,V,0", "2,2,R,0", "3,3,R,0"]


def test_vessel_statistics_straight_line():
    m = np.zeros((20, 20), dtype=np.uint8)
    m[9:12, 2:18] = 1
    s = vt.vessel_statistics(m)
    assert s["density"] == pytest.approx(m.mean())
    assert s["tortuosity"] == pytest.approx(1.0)
    assert s["branches"] == 0
