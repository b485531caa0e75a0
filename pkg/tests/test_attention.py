import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oracles import (
    exhaustive_otsu_split,
    naive_reciprocal,
    opening,
    otsu_oracle_threshold,
    scalar_softmax_row,
)
from panelboard.attention import (
    AttentionView,
    CorrespondenceMap,
    DegenerateHistogram,
    ReciprocalState,
    build_correspondence,
    compute_attention,
    extract_cross_blocks,
    histogram,
    key_pca_map,
    mix_values,
    morphological_filter,
    otsu_split,
    otsu_threshold,
    reciprocal_heatmap,
    reciprocal_scores,
    update_ema,
)

unit = st.floats(0.0, 1.0, allow_nan=False, width=32)


def state_of(M):
    return ReciprocalState(momentum=0.8, M_bar=np.asarray(M, dtype=np.float32), updates=1)


# -- compute_attention --------------------------------------------------------


def test_attention_single_token():
    A = compute_attention(np.array([[3.0, -1.0]]), np.array([[0.5, 2.0]]))
    assert A.tolist() == [[1.0]]


def test_attention_identical_keys_uniform():
    Q = np.array([[1.0, 2.0], [-3.0, 0.5]])
    K = np.array([[0.7, 0.1], [0.7, 0.1]])
    np.testing.assert_array_equal(compute_attention(Q, K), np.full((2, 2), 0.5, dtype=np.float32))


def test_attention_two_token_scalar():
    A = compute_attention(np.array([[1.0], [0.0]]), np.array([[1.0], [0.0]]))
    e = math.e
    np.testing.assert_allclose(A[0], [e / (e + 1), 1 / (e + 1)], rtol=1e-6)
    np.testing.assert_allclose(A[0], [0.7311, 0.2689], atol=1e-4)
    np.testing.assert_allclose(A[1], [0.5, 0.5], rtol=1e-6)


def test_attention_matches_scalar_loop():
    rng = np.random.default_rng(0)
    Q, K = rng.standard_normal((2, 2, 6, 4))
    A = compute_attention(Q, K)
    for h in range(2):
        for i in range(6):
            np.testing.assert_allclose(A[h, i], scalar_softmax_row(Q[h, i], K[h], 4), rtol=1e-6)


def test_attention_shape_mismatch():
    with pytest.raises(ValueError):
        compute_attention(np.zeros((3, 4)), np.zeros((2, 4)))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float32, st.tuples(st.integers(1, 3), st.integers(1, 12), st.integers(1, 8)),
                  elements=st.floats(-20, 20, width=32)))
def test_attention_row_stochastic(Q):
    A = compute_attention(Q, Q[:, ::-1])
    np.testing.assert_allclose(A.astype(np.float64).sum(-1), 1.0, atol=1e-6)
    assert np.all(A >= 0) and np.all(A <= 1)


# -- cross blocks and reciprocal scores --------------------------------------


def _view(N, start, P, heads=1, d=2):
    z = np.zeros((heads, N, d), dtype=np.float32)
    return AttentionView(z, z.copy(), z.copy(), image_start=start, P=P)


def test_cross_blocks_direct_read():
    A = np.array([[[0.6, 0.4], [0.3, 0.7]]])
    A_tb, A_bt = extract_cross_blocks(A, _view(2, 0, 1))
    assert A_tb.tolist() == [[pytest.approx(0.4)]]
    assert A_bt.tolist() == [[pytest.approx(0.3)]]


def test_cross_blocks_head_mean():
    A = np.zeros((2, 2, 2))
    A[0, 0, 1], A[1, 0, 1] = 0.2, 0.4
    A_tb, _ = extract_cross_blocks(A, _view(2, 0, 1, heads=2))
    assert A_tb[0, 0] == pytest.approx(0.3)


def test_cross_blocks_with_text_prefix():
    A = np.eye(5)[None] * 0.0
    A[0, 3:, 3:] = [[0.6, 0.4], [0.3, 0.7]]
    A_tb, A_bt = extract_cross_blocks(A, _view(5, 3, 1))
    assert (A_tb[0, 0], A_bt[0, 0]) == (pytest.approx(0.4), pytest.approx(0.3))


def test_cross_blocks_out_of_range():
    with pytest.raises(ValueError):
        _view(4, 3, 1)
    with pytest.raises(ValueError):
        extract_cross_blocks(np.zeros((1, 3, 3)), _view(5, 2, 1))


def test_reciprocal_examples():
    assert reciprocal_scores([[0.3]], [[0.1]]).tolist() == [[0.1]]
    A_tb = np.array([[0.2, 0.5], [0.4, 0.1]])
    A_bt = np.array([[0.3, 0.3], [0.6, 0.05]])
    expected = naive_reciprocal(A_tb, A_bt)
    np.testing.assert_array_equal(expected, [[0.2, 0.5], [0.3, 0.05]])
    np.testing.assert_array_equal(reciprocal_scores(A_tb, A_bt), expected)
    np.testing.assert_array_equal(reciprocal_scores(A_tb, A_tb.T), A_tb)


@given(st.integers(1, 8).flatmap(lambda P: hnp.arrays(np.float32, (2, P, P), elements=unit)))
def test_reciprocal_min_dominance(blocks):
    A_tb, A_bt = blocks
    M = reciprocal_scores(A_tb, A_bt)
    assert np.all(M <= A_tb) and np.all(M <= A_bt.T)
    np.testing.assert_array_equal(M, naive_reciprocal(A_tb, A_bt))


# -- EMA -----------------------------------------------------------------------


def test_ema_first_update_initialises():
    s = update_ema(ReciprocalState(0.8), np.array([[0.7]]))
    assert s.updates == 1 and s.M_bar[0, 0] == pytest.approx(0.7)


def test_ema_convex_combination():
    s = update_ema(state_of([[1.0]]), np.array([[0.0]]))
    assert s.M_bar[0, 0] == pytest.approx(0.8)
    assert s.updates == 2


def test_ema_momentum_one_freezes():
    s = update_ema(ReciprocalState(1.0), np.array([[0.3, 0.6]]))
    for m in ([[0.9, 0.0]], [[0.1, 1.0]]):
        s = update_ema(s, np.array(m))
    np.testing.assert_array_equal(s.M_bar, np.array([[0.3, 0.6]], dtype=np.float32))


def test_state_invariants():
    with pytest.raises(ValueError):
        ReciprocalState(1.5)
    with pytest.raises(ValueError):
        ReciprocalState(0.5, M_bar=np.zeros((1, 1)), updates=0)


@settings(max_examples=60, deadline=None)
@given(
    st.floats(0, 1),
    st.floats(0, 0.5),
    st.floats(0.5, 1),
    st.lists(hnp.arrays(np.float64, (3, 3), elements=unit), min_size=1, max_size=8),
)
def test_ema_bounded(mu, a, b, mats):
    s = ReciprocalState(mu)
    for m in mats:
        s = update_ema(s, a + (b - a) * m)
    eps = 1e-6
    assert np.all(s.M_bar >= a - eps) and np.all(s.M_bar <= b + eps)


# -- Otsu ----------------------------------------------------------------------


def test_otsu_bimodal():
    vals = [0.1, 0.1, 0.1, 0.9, 0.9]
    thr = otsu_threshold(vals, 256)
    assert 0.1 < thr < 0.9
    assert thr == otsu_oracle_threshold(vals, 256) == pytest.approx(0.103125)
    assert (np.array(vals) > thr).sum() == 2


def test_otsu_two_values_two_bins():
    thr = otsu_threshold([0.0, 1.0], 2)
    assert thr == 0.5 == otsu_oracle_threshold([0.0, 1.0], 2)
    assert [x for x in (0.0, 1.0) if x > thr] == [1.0]


def test_otsu_degenerate():
    with pytest.raises(DegenerateHistogram):
        otsu_threshold([0.5] * 6)
    with pytest.raises(ValueError):
        otsu_threshold([0.5])


def test_histogram_right_closed():
    counts, edges = histogram([0.0, 0.5, 1.0], 2)
    assert counts.tolist() == [2, 1]  # 0.5 sits on the edge and belongs to the lower bin
    assert edges.tolist() == [0.0, 0.5, 1.0]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=2, max_size=40), st.integers(2, 40))
def test_otsu_value_level_oracle(values, bins):
    expected = otsu_oracle_threshold(values, bins)
    if expected is None:
        with pytest.raises(DegenerateHistogram):
            otsu_threshold(values, bins)
    else:
        assert otsu_threshold(values, bins) == expected


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 30), min_size=2, max_size=64))
def test_otsu_split_oracle(counts):
    expected = exhaustive_otsu_split(counts)
    if expected is None:
        with pytest.raises(DegenerateHistogram):
            otsu_split(counts)
    else:
        assert otsu_split(counts) == expected


# -- morphology ----------------------------------------------------------------


def test_opening_full_grid():
    out = morphological_filter(np.ones((4, 4), dtype=bool))
    np.testing.assert_array_equal(out, opening(np.ones((4, 4))))
    assert out.sum() == 12 and not out[0, 0] and out[1, 1]


def test_opening_isolated_pixel():
    m = np.zeros((5, 5), dtype=bool)
    m[2, 2] = True
    assert not morphological_filter(m).any()


def test_opening_empty():
    assert not morphological_filter(np.zeros((6, 4), dtype=bool)).any()


def test_small_grids_pass_through():
    m = np.array([[True, False, True]])
    np.testing.assert_array_equal(morphological_filter(m), m)


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(bool, st.tuples(st.integers(1, 9), st.integers(1, 9))))
def test_opening_oracle_and_idempotent(mask):
    out = morphological_filter(mask)
    np.testing.assert_array_equal(out, opening(mask))
    np.testing.assert_array_equal(morphological_filter(out), out)
    assert not np.any(out & ~mask)


# -- correspondence ------------------------------------------------------------


def test_correspondence_two_tokens():
    M = [[0.9, 0.01], [0.02, 0.8]]
    thr = otsu_oracle_threshold([0.9, 0.8], 256)
    cmap = build_correspondence(state_of(M), (1, 2), 0.5)
    expected = [(v, int(np.argmax(np.array(M)[:, v])), np.float32(M[0][v] if v == 0 else M[1][v]))
                for v, s in enumerate([0.9, 0.8]) if s > thr]
    assert [(v, u) for v, u, _ in cmap.entries] == [(v, u) for v, u, _ in expected] == [(0, 0)]
    assert cmap.entries[0][2] == pytest.approx(0.9)
    assert cmap.grid == (1, 2) and cmap.lam == 0.5


def test_correspondence_all_zero_is_empty():
    assert len(build_correspondence(state_of(np.zeros((4, 4))), (2, 2))) == 0


def test_correspondence_tie_lowest_top():
    M = np.array([[0.5, 0.0, 0.0], [0.5, 0.0, 0.0], [0.1, 0.0, 0.0]])
    cmap = build_correspondence(state_of(M), (1, 3))
    assert cmap.entries == [(0, 0, pytest.approx(0.5))]


def test_correspondence_needs_observations():
    with pytest.raises(ValueError):
        build_correspondence(ReciprocalState(0.8), (1, 1))


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float32, (9, 9), elements=st.sampled_from([0.0, 0.1, 0.2, 0.25, 0.5, 0.9])))
def test_correspondence_argmax_property(M):
    cmap = build_correspondence(state_of(M), (3, 3))
    vs = [v for v, _, _ in cmap.entries]
    assert len(vs) == len(set(vs))
    for v, u, score in cmap.entries:
        col = M[:, v]
        assert score == col.max() and u == int(np.flatnonzero(col == col.max())[0])


# -- value mixing --------------------------------------------------------------


def _rand_view(rng, heads=2, T=3, P=4, d=5):
    Q, K, V = rng.standard_normal((3, heads, T + 2 * P, d)).astype(np.float32)
    return AttentionView(Q, K, V, image_start=T, P=P)


def test_mix_lambda_one_identity():
    view = _rand_view(np.random.default_rng(1))
    cmap = CorrespondenceMap([(0, 3, 0.5), (2, 1, 0.4)], 1.0, (2, 2))
    np.testing.assert_array_equal(mix_values(view.V, cmap, view), view.V)


def test_mix_midpoint():
    V = np.zeros((1, 2, 2), dtype=np.float32)
    V[0, 1] = [2, 4]
    view = AttentionView(V.copy(), V.copy(), V, image_start=0, P=1)
    out = mix_values(V, CorrespondenceMap([(0, 0, 1.0)], 0.5, (1, 1)), view)
    assert out[0, 1].tolist() == [1.0, 2.0]


def test_mix_lambda_zero_replaces():
    rng = np.random.default_rng(2)
    view = _rand_view(rng)
    out = mix_values(view.V, CorrespondenceMap([(1, 3, 0.5)], 0.0, (2, 2)), view)
    np.testing.assert_array_equal(out[:, view.image_start + view.P + 1], view.V[:, view.image_start + 3])


def test_mix_touches_only_selected_rows():
    rng = np.random.default_rng(3)
    view = _rand_view(rng)
    Q0, K0 = view.Q.copy(), view.K.copy()
    A0 = compute_attention(view.Q, view.K)
    out = mix_values(view.V, CorrespondenceMap([(1, 3, 0.5)], 0.3, (2, 2)), view)
    changed = np.flatnonzero(np.any(out != view.V, axis=(0, 2)))
    assert changed.tolist() == [view.image_start + view.P + 1]
    np.testing.assert_array_equal(view.Q, Q0)
    np.testing.assert_array_equal(view.K, K0)
    np.testing.assert_array_equal(compute_attention(view.Q, view.K), A0)


def test_mix_rejects_bad_index():
    view = _rand_view(np.random.default_rng(4))
    with pytest.raises(ValueError):
        mix_values(view.V, CorrespondenceMap([(4, 0, 0.5)], 0.5, (2, 2)), view)


# -- diagnostics ---------------------------------------------------------------


def test_key_pca_identical_keys():
    out = key_pca_map(np.ones((8, 5)), (2, 2))
    assert out.shape == (4, 2, 3)
    np.testing.assert_array_equal(out, 0.5)


def test_key_pca_line():
    t = np.linspace(-1, 1, 18)
    K = np.outer(t, [1.0, 2.0, -2.0]) + [0.3, 0.1, 0.0]
    out = key_pca_map(K, (3, 3)).reshape(-1, 3)
    np.testing.assert_array_equal(out[:, 1:], 0.5)
    # rank-1 covariance: the single component is the normalised direction, so
    # channel 0 is t min-max scaled (up to the sign fixed by the largest loading)
    expected = (t + 1) / 2
    if out[0, 0] > out[-1, 0]:
        expected = 1 - expected
    np.testing.assert_allclose(out[:, 0], expected, atol=1e-12)


def test_key_pca_two_clusters():
    rng = np.random.default_rng(5)
    a, b = rng.standard_normal(6), rng.standard_normal(6)
    K = np.array([a] * 4 + [b] * 4)
    out = key_pca_map(K, (2, 2)).reshape(-1, 3)
    # two points: one component, clusters land on 0 and 1
    assert set(np.round(out[:, 0], 12)) == {0.0, 1.0}
    assert len({tuple(r) for r in out[:4]}) == 1 and len({tuple(r) for r in out[4:]}) == 1
    assert tuple(out[0]) != tuple(out[4])
    np.testing.assert_array_equal(out[:, 1:], 0.5)


def test_heatmap_single_peak():
    M = np.zeros((4, 4))
    M[2, 1] = 0.7
    h = reciprocal_heatmap(state_of(M), ("bottom", 1), (2, 2))
    assert h.tolist() == [[0.0, 0.0], [1.0, 0.0]]


def test_heatmap_uniform_zero():
    h = reciprocal_heatmap(state_of(np.full((4, 4), 0.3)), ("top", 0), (2, 2))
    assert not h.any()


def test_heatmap_minmax():
    h = reciprocal_heatmap(state_of([[0.2, 0.1], [0.6, 0.3]]), ("bottom", 0), (1, 2))
    np.testing.assert_allclose(h, [[0.0, 1.0]])
    h = reciprocal_heatmap(state_of([[0.2, 0.1], [0.6, 0.3]]), ("top", 1), (1, 2))
    np.testing.assert_allclose(h, [[1.0, 0.0]])
