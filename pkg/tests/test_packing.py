import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import make_call
from ttkit.errors import CorruptSegmentTable, InvalidTree, PathWithNoGeneratedTokens
from ttkit.packing import (
    NormalizationMode,
    SegmentEntry,
    attention_mask_rows,
    build_attention_mask,
    check_segment_table,
    compute_loss_weights,
    dfs_flatten,
    estimate_speedup,
    path_predecessors,
    unpack_paths,
)
from ttkit.synth import random_tree_calls
from ttkit.trajectory import TreeNode, build_tree

PS, PM = NormalizationMode.PATH_SUM, NormalizationMode.PATH_MEAN


def two_leaf():
    return build_tree([make_call("a", [1, 2, 3, 4]), make_call("b", [1, 2, 5])])


def test_two_leaf_weights_positions_mask():
    b = dfs_flatten(two_leaf(), PS)
    assert b.token_ids.tolist() == [1, 2, 3, 4, 5]
    assert b.loss_weights.tolist() == [2.0, 2.0, 1.0, 1.0, 1.0]
    assert b.position_ids.tolist() == [0, 1, 2, 3, 2]
    m = build_attention_mask(b)
    assert m[4].tolist() == [True, True, False, False, True]
    assert not m[2:4, 4].any() and not m[4, 2:4].any()


def test_single_path_is_causal():
    b = dfs_flatten(build_tree([make_call("a", [4, 5, 6], n_prompt=1)]), PS)
    assert b.position_ids.tolist() == [0, 1, 2]
    assert b.loss_weights.tolist() == [0.0, 1.0, 1.0]
    assert np.array_equal(build_attention_mask(b), np.tril(np.ones((3, 3), dtype=bool)))


def test_prompt_tokens_weigh_zero():
    calls = [make_call("a", [1, 2, 3, 4], n_prompt=2), make_call("b", [1, 2, 5], n_prompt=2)]
    b = dfs_flatten(build_tree(calls), PS)
    assert b.loss_weights.tolist() == [0.0, 0.0, 1.0, 1.0, 1.0]


def test_shared_by_three_leaves():
    calls = [make_call(f"c{k}", [1, 10 + k]) for k in range(3)]
    b = dfs_flatten(build_tree(calls), PS)
    assert b.loss_weights[0] == 3.0


def test_path_mean_example():
    # gen lengths 4 and 2: 1/(2*4) + 1/(2*2)
    calls = [make_call("a", [1, 2, 3, 4]), make_call("b", [1, 5])]
    b = dfs_flatten(build_tree(calls), PM)
    assert b.loss_weights[0] == pytest.approx(0.375, abs=1e-15)
    assert b.loss_weights[1:4].tolist() == pytest.approx([0.125] * 3)
    assert b.loss_weights[4] == pytest.approx(0.25)


def test_path_mean_rejects_prompt_only_path():
    calls = [make_call("a", [1, 2, 3], n_prompt=1), make_call("b", [1], n_prompt=1)]
    with pytest.raises(PathWithNoGeneratedTokens):
        compute_loss_weights(build_tree(calls), PM)
    dfs_flatten(build_tree(calls), PS)  # fine under PathSum


def test_children_in_ascending_id_order():
    calls = [make_call("a", [1, 9]), make_call("b", [1, 3]), make_call("c", [1, 5])]
    b = dfs_flatten(build_tree(calls), PS)
    ids = [s.segment_id for s in b.segments]
    assert ids == sorted(ids)
    assert b.token_ids.tolist() == [1, 9, 3, 5]  # insertion order


def test_invalid_tree_is_rejected():
    tree = two_leaf()
    n = tree.nodes[2]
    tree.nodes[2] = TreeNode(2, 7, n.tokens, n.turns, n.joined)
    with pytest.raises(InvalidTree):
        dfs_flatten(tree)


def test_corrupted_segment_table_detected():
    b = dfs_flatten(two_leaf())
    s = b.segments[1]
    b.segments[1] = SegmentEntry(s.segment_id, s.parent_segment_id, s.flat_start, s.flat_end, s.path_position_start + 1)
    with pytest.raises(CorruptSegmentTable):
        check_segment_table(b)
    with pytest.raises(CorruptSegmentTable):
        unpack_paths(b)


def test_predecessors_cross_segments():
    b = dfs_flatten(two_leaf())
    assert path_predecessors(b).tolist() == [-1, 0, 1, 2, 1]


def test_speedup_report():
    rep = estimate_speedup([two_leaf()], quadratic_attention=True)
    assert rep.token_ratio == 1.4
    # causal pairs 4*5/2 + 3*4/2 against sum of (position + 1) = 1+2+3+4+3
    assert (rep.attention_pairs_linear, rep.attention_pairs_tree) == (16, 13)
    single = estimate_speedup([build_tree([make_call("a", [1, 2, 3])])], quadratic_attention=True)
    assert single.token_ratio == 1.0 and single.attention_ratio == 1.0


def brute_mask(batch):
    """Mask from path enumeration only."""
    T = batch.num_tokens
    m = np.zeros((T, T), dtype=bool)
    for idx in batch.path_token_indices():
        for k, i in enumerate(idx):
            m[i, idx[: k + 1]] = True
    return m


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([PS, PM]))
def test_random_tree_properties(seed, mode):
    calls = random_tree_calls(np.random.default_rng(seed))
    b = dfs_flatten(build_tree(calls), mode)
    check_segment_table(b)
    # unpack is the inverse of flattening
    got = {c.call_id: c for c in unpack_paths(b)}
    for c in calls:
        assert got[c.call_id].tokens == c.tokens and got[c.call_id].turns == c.turns
    paths = b.path_token_indices()
    # weights equal the sum over containing paths of the path coefficient
    want = np.zeros(b.num_tokens)
    for p, idx in zip(b.paths, paths):
        gen = b.origins[idx] == 1
        coef = 1.0 if mode is PS else 1.0 / (len(paths) * gen.sum())
        want[idx[gen]] += coef
    np.testing.assert_allclose(b.loss_weights, want, rtol=1e-14, atol=0)
    assert np.all(b.loss_weights[b.origins == 0] == 0)
    for idx in paths:
        assert b.position_ids[idx].tolist() == list(range(len(idx)))
    m = build_attention_mask(b)
    assert np.array_equal(m, brute_mask(b))
    rows = np.arange(0, b.num_tokens, 3)
    assert np.array_equal(attention_mask_rows(b, rows), m[rows])
    # transitive: what a visible token sees, the row sees too
    mi = m.astype(np.int64)
    assert np.all(((mi @ mi) > 0) <= m)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_flatten_is_deterministic(seed):
    calls = random_tree_calls(np.random.default_rng(seed))
    a, b = dfs_flatten(build_tree(calls)), dfs_flatten(build_tree(calls))
    assert a.equals(b)
