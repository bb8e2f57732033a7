import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ecfusion import numerics as nx
from ecfusion.dqr import (assemble_queries, build_fusion_mask, encoding_grid, positional_encoding,
                          recover_modal_queries, select_topk_peaks, write_queries_csv, QueryCandidate)
from ecfusion.selftest import topk_enumeration


def test_single_maximum():
    h = np.zeros((3, 3, 1))
    h[1, 1, 0] = 0.9
    (c,) = select_topk_peaks(h, 1)
    assert (c.pos, c.cls, c.score) == ((1, 1), 0, 0.9)


def test_uniform_heatmap_tie_break_is_lexicographic():
    cs = select_topk_peaks(np.full((3, 3, 1), 0.5), 2)
    assert [c.pos for c in cs] == [(0, 0), (0, 1)]


def test_ties_broken_by_class_before_position():
    h = np.zeros((4, 4, 2))
    h[3, 3, 0] = 0.7
    h[0, 0, 1] = 0.7
    cs = select_topk_peaks(h, 2)
    assert [(c.cls, c.pos) for c in cs] == [(0, (3, 3)), (1, (0, 0))]


def test_fill_with_non_peaks_when_short():
    h = np.zeros((2, 2, 1))
    h[0, 0, 0] = 0.9
    h[0, 1, 0] = 0.5
    h[1, 1, 0] = 0.2
    cs = select_topk_peaks(h, 4)
    assert [c.pos for c in cs] == [(0, 0), (0, 1), (1, 1), (1, 0)]


@pytest.mark.parametrize("seed", range(8))
def test_topk_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    h = rng.random((8, 8, 2))
    if seed % 2:
        h = np.round(h * 3) / 3
    got = [(c.pos, c.cls) for c in select_topk_peaks(h, 5)]
    assert got == topk_enumeration(h, 5)


def test_topk_errors():
    h = np.zeros((2, 2, 1))
    for k in (0, 5):
        with pytest.raises(ValueError):
            select_topk_peaks(h, k)
    with pytest.raises(ValueError):
        select_topk_peaks(h, 1, window=2)


def test_mask_zero_exactly_at_query_cells():
    assert build_fusion_mask([], 4, 4).min() == 1.0
    m = build_fusion_mask([QueryCandidate((0, 0), 0, 1.0), QueryCandidate((2, 3), 1, 1.0)], 4, 4)
    assert set(zip(*np.nonzero(m == 0))) == {(0, 0), (2, 3)}


def test_mask_deduplicates_positions_across_classes():
    rng = np.random.default_rng(0)
    cands = [QueryCandidate((int(rng.integers(0, 5)), int(rng.integers(0, 5))), int(rng.integers(0, 3)), 0.5)
             for _ in range(20)]
    m = build_fusion_mask(cands, 5, 5)
    assert int((m == 0).sum()) == len({c.pos for c in cands})
    assert np.array_equal(m, build_fusion_mask(cands, 5, 5))


def test_recover_with_all_ones_mask_equals_plain_selection():
    h = np.random.default_rng(1).random((6, 6, 3))
    a = recover_modal_queries(h, np.ones((6, 6)), 4)
    b = select_topk_peaks(h, 4, source="P")
    assert [(c.pos, c.cls, c.score) for c in a] == [(c.pos, c.cls, c.score) for c in b]


def test_recover_masking_global_max_returns_runner_up():
    rng = np.random.default_rng(2)
    h = rng.random((6, 6, 2))
    top = select_topk_peaks(h, 1)
    m = build_fusion_mask(top, 6, 6)
    (got,) = recover_modal_queries(h, m, 1)
    hm = h * m[:, :, None]
    (want,) = [c for c in select_topk_peaks(hm, 1)]
    assert (got.pos, got.cls) == (want.pos, want.cls)
    assert got.pos != top[0].pos


def test_recover_all_masked_is_degenerate():
    cs = recover_modal_queries(np.random.default_rng(3).random((3, 3, 2)), np.zeros((3, 3)), 4, source="I")
    assert len(cs) == 4 and all(c.degenerate and c.score == 0.0 and c.source == "I" for c in cs)


def test_recover_zero_budget_and_shape_error():
    assert recover_modal_queries(np.zeros((3, 3, 1)), np.ones((3, 3)), 0) == []
    with pytest.raises(ValueError):
        recover_modal_queries(np.zeros((3, 3, 1)), np.ones((3, 4)), 1)


def test_recovery_completeness_on_constructed_instance():
    h_f = np.full((8, 8, 2), 0.05)
    h_f[1, 1, 0] = 0.6
    h_f[6, 6, 1] = 0.4
    p_f = select_topk_peaks(h_f, 2)
    h_p = np.full((8, 8, 2), 0.01)
    h_p[3, 5, 1] = 0.7  # beats every unmasked fusion score and is a peak
    m = build_fusion_mask(p_f, 8, 8)
    assert ((3, 5), 1) in [(c.pos, c.cls) for c in recover_modal_queries(h_p, m, 1)]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_recovered_positions_disjoint_and_scores_monotone(seed):
    rng = np.random.default_rng(seed)
    X, Y = int(rng.integers(3, 10)), int(rng.integers(3, 10))
    hs = [rng.random((X, Y, 2)) for _ in range(3)]
    p_f = select_topk_peaks(hs[0], int(rng.integers(1, 6)))
    m = build_fusion_mask(p_f, X, Y)
    fpos = {c.pos for c in p_f}
    for h in hs[1:]:
        cs = recover_modal_queries(h, m, int(rng.integers(1, 4)))
        assert not fpos & {c.pos for c in cs}
        peaks = [c.score for c in cs]
        assert peaks == sorted(peaks, reverse=True) or any(not c.degenerate for c in cs)


def test_positional_encoding_zero_case_and_bound():
    pe = positional_encoding((0, 0), 16, 8, 8)
    assert np.array_equal(pe[0::2], np.zeros(8)) and np.array_equal(pe[1::2], np.ones(8))
    g = encoding_grid(16, 16, 32)
    assert np.abs(g).max() <= 1.0
    with pytest.raises(ValueError):
        positional_encoding((0, 0), 7, 8, 8)


def test_positional_encoding_injective_on_16x16():
    g = encoding_grid(16, 16, 32)
    d = np.abs(g[:, None, :] - g[None, :, :]).max(-1)
    np.fill_diagonal(d, 1.0)
    assert d.min() > 1e-9


def test_positional_encoding_halves():
    a = positional_encoding((3, 0), 8, 8, 8)
    b = positional_encoding((3, 5), 8, 8, 8)
    assert np.array_equal(a[:4], b[:4]) and not np.array_equal(a[4:], b[4:])


def _queries(rng, X=6, Y=5, C=4):
    b_f, b_p, b_i = (rng.normal(size=(X, Y, C)) for _ in range(3))
    p_f = select_topk_peaks(rng.random((X, Y, 2)), 3)
    m = build_fusion_mask(p_f, X, Y)
    p_p = recover_modal_queries(rng.random((X, Y, 2)), m, 2, source="P")
    p_i = recover_modal_queries(rng.random((X, Y, 2)), m, 1, source="I")
    return (p_f, p_p, p_i), (b_f, b_p, b_i)


def test_assemble_order_counts_and_lookup():
    rng = np.random.default_rng(4)
    (p_f, p_p, p_i), (b_f, b_p, b_i) = _queries(rng)
    qs = assemble_queries(p_f, p_p, p_i, b_f, b_p, b_i)
    assert len(qs) == 6 and qs.sources == ["F"] * 3 + ["P"] * 2 + ["I"]
    assert qs.counts == {"F": 3, "P": 2, "I": 1}
    for k, (c, b) in enumerate([(p_f[0], b_f), (p_p[0], b_p), (p_i[0], b_i)]):
        row = [0, 3, 5][k]
        assert np.array_equal(qs.features.value[row], b[c.pos] + positional_encoding(c.pos, 4, 6, 5))


def test_assemble_without_recovery_is_fusion_only():
    rng = np.random.default_rng(5)
    (p_f, _, _), (b_f, b_p, b_i) = _queries(rng)
    qs = assemble_queries(p_f, [], [], b_f, b_p, b_i)
    assert qs.sources == ["F"] * 3


def test_zero_features_give_pure_codes():
    rng = np.random.default_rng(6)
    (p_f, p_p, p_i), _ = _queries(rng)
    z = np.zeros((6, 5, 4))
    qs = assemble_queries(p_f, p_p, p_i, z, z, z)
    pos = qs.positions
    for k in range(len(qs)):
        assert np.array_equal(qs.features.value[k], positional_encoding(tuple(pos[k]), 4, 6, 5))


def test_queries_csv(tmp_path):
    rng = np.random.default_rng(7)
    (p_f, p_p, p_i), bs = _queries(rng)
    write_queries_csv(tmp_path / "q.csv", assemble_queries(p_f, p_p, p_i, *bs))
    lines = (tmp_path / "q.csv").read_text().splitlines()
    assert lines[0] == "source,i,j,cls,score" and len(lines) == 7


def test_thousand_random_triples_disjoint():
    rng = np.random.default_rng(8)
    for _ in range(1000):
        X, Y = int(rng.integers(4, 12)), int(rng.integers(4, 12))
        p_f = select_topk_peaks(rng.random((X, Y, 3)), int(rng.integers(1, 8)))
        m = build_fusion_mask(p_f, X, Y)
        fpos = {c.pos for c in p_f}
        for src in ("P", "I"):
            cs = recover_modal_queries(rng.random((X, Y, 3)), m, int(rng.integers(1, 6)), source=src)
            assert not fpos & {c.pos for c in cs}
