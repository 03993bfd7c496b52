import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import make_call
from ttkit.errors import EmptyInput, InconsistentVocab, InvalidRecord
from ttkit.synth import random_tree_calls
from ttkit.trajectory import (
    LinearCall,
    Origin,
    Role,
    TaskSpec,
    TokenEvent,
    TreeNode,
    TurnSpan,
    build_tree,
    tree_stats,
    validate_tree,
)


def test_two_call_example():
    tree = build_tree([make_call("a", [1, 2, 3, 4]), make_call("b", [1, 2, 5])])
    root = tree.nodes[tree.roots[0]]
    assert [t.token_id for t in root.tokens] == [1, 2]
    kids = tree.child_map()[tree.roots[0]]
    assert [[t.token_id for t in tree.nodes[k].tokens] for k in kids] == [[3, 4], [5]]
    st_ = tree_stats(tree)
    assert (st_.tree_tokens, st_.linear_tokens) == (5, 7)
    assert st_.redundancy_ratio == 1.4


def test_single_call_is_one_node():
    call = make_call("a", [7, 7, 7], n_prompt=1)
    tree = build_tree([call])
    assert len(tree.nodes) == 1
    assert tree.extract_calls()[0].tokens == call.tokens
    assert tree_stats(tree).redundancy_ratio == 1.0


def test_shared_prompt_eight_calls():
    prompt = list(range(100))
    calls = [make_call(f"c{k}", prompt + [100 + 10 * k + j for j in range(10)], n_prompt=100) for k in range(8)]
    tree = build_tree(calls)
    st_ = tree_stats(tree)
    assert (st_.tree_tokens, st_.linear_tokens) == (180, 880)
    rebuilt = {c.call_id: c for c in tree.extract_calls()}
    for c in calls:
        assert rebuilt[c.call_id].tokens == c.tokens


def test_divergent_first_token_gets_empty_root():
    tree = build_tree([make_call("a", [1, 2]), make_call("b", [3, 4])])
    root = tree.nodes[tree.roots[0]]
    assert root.tokens == ()
    assert validate_tree(tree) == []
    assert tree_stats(tree).tree_tokens == 4


def test_logprob_mismatch_blocks_merge():
    a = LinearCall("a", (TokenEvent(1, Origin.GENERATED, -0.5),), (TurnSpan(0, 1, Role.ASSISTANT),))
    b = LinearCall("b", (TokenEvent(1, Origin.GENERATED, np.nextafter(-0.5, 0)),), (TurnSpan(0, 1, Role.ASSISTANT),))
    assert tree_stats(build_tree([a, b])).tree_tokens == 2


def test_origin_mismatch_blocks_merge():
    # token 1 is shared, token 2 differs only in origin
    a = make_call("a", [1, 2], n_prompt=1)
    b = make_call("b", [1, 2], n_prompt=2)
    tree = build_tree([a, b])
    assert tree_stats(tree).tree_tokens == 3
    assert validate_tree(tree) == []


def test_prefix_call_ends_on_internal_node():
    tree = build_tree([make_call("long", [1, 2, 3, 4]), make_call("short", [1, 2])])
    assert validate_tree(tree) == []
    assert tree_stats(tree).tree_tokens == 4
    assert {c.call_id: len(c) for c in tree.extract_calls()} == {"long": 4, "short": 2}


def test_turn_straddling_a_branch_point():
    # one assistant turn per call; the calls diverge inside it
    a, b = make_call("a", [1, 2, 3, 4]), make_call("b", [1, 2, 5])
    tree = build_tree([a, b])
    assert tree_stats(tree).tree_tokens == 5
    kids = tree.child_map()[0]
    assert all(tree.nodes[k].joined for k in kids)
    got = {c.call_id: c for c in tree.extract_calls()}
    assert got["a"].turns == a.turns and got["b"].turns == b.turns


def test_differing_turn_layout_splits_the_shared_span():
    # same tokens, but the turn boundaries differ after the first token
    ev = (TokenEvent(1, Origin.PROMPT), TokenEvent(2, Origin.PROMPT), TokenEvent(3, Origin.GENERATED, -1.0))
    a = LinearCall("a", ev, (TurnSpan(0, 2, Role.USER), TurnSpan(2, 3, Role.ASSISTANT)))
    b = LinearCall("b", ev, (TurnSpan(0, 1, Role.USER), TurnSpan(1, 2, Role.TOOL), TurnSpan(2, 3, Role.ASSISTANT)))
    tree = build_tree([a, b])
    assert validate_tree(tree) == []
    for c, got in zip([a, b], sorted(tree.extract_calls(), key=lambda c: c.call_id)):
        assert got.turns == c.turns


def test_build_tree_errors():
    with pytest.raises(EmptyInput):
        build_tree([])
    with pytest.raises(InconsistentVocab):
        build_tree([make_call("a", [1], vocab_size=4), make_call("b", [1], vocab_size=5)])
    with pytest.raises(InvalidRecord):
        build_tree([make_call("a", [1]), make_call("a", [2])])


def test_call_validation():
    with pytest.raises(InvalidRecord):
        LinearCall("x", ())
    with pytest.raises(InvalidRecord):  # generated token outside an assistant turn
        LinearCall("x", (TokenEvent(1, Origin.GENERATED, -1.0),), (TurnSpan(0, 1, Role.TOOL),))
    with pytest.raises(InvalidRecord):
        make_call("x", [9], vocab_size=5)
    with pytest.raises(Exception):
        TokenEvent(1, Origin.GENERATED, 0.5)
    with pytest.raises(Exception):
        TokenEvent(1, Origin.PROMPT, -0.5)


def test_task_spec_requires_fields():
    with pytest.raises(Exception):
        TaskSpec("", ("bash",), "s", "i", "v")
    assert TaskSpec("e", ("bash",), "s", "i", "v").to_dict()["env_id"] == "e"


def test_validate_reports_orphans_and_cycles():
    tree = build_tree([make_call("a", [1, 2, 3]), make_call("b", [1, 4])])
    bad = tree.nodes[1]
    tree.nodes[1] = TreeNode(bad.node_id, 99, bad.tokens, bad.turns)
    rules = {v.rule for v in validate_tree(tree)}
    assert "MissingParent" in rules
    tree.nodes[1] = TreeNode(bad.node_id, 1, bad.tokens, bad.turns)
    assert validate_tree(tree)


def _balanced_binary(depth, seg):
    calls, nxt = [], [1]

    def walk(prefix, d):
        toks = list(range(nxt[0], nxt[0] + seg))
        nxt[0] += seg
        path = prefix + toks
        if d == depth:
            calls.append(make_call(f"c{len(calls)}", path))
            return
        walk(path, d + 1)
        walk(path, d + 1)

    walk([], 1)
    return calls


@pytest.mark.parametrize("depth", [1, 2, 3, 4, 5])
@pytest.mark.parametrize("seg", [1, 3])
def test_balanced_binary_ratio_by_enumeration(depth, seg):
    tree = build_tree(_balanced_binary(depth, seg))
    # oracle: enumerate leaf paths directly
    linear = sum(len(tree.path_tokens(l.node_id)) for l in tree.leaf_paths)
    nodes = sum(len(n.tokens) for n in tree.nodes.values())
    assert nodes == seg * (2**depth - 1)
    assert linear == 2 ** (depth - 1) * depth * seg
    assert tree_stats(tree).redundancy_ratio == pytest.approx(depth * 2 ** (depth - 1) / (2**depth - 1), rel=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_trees_reconstruct_calls(seed):
    calls = random_tree_calls(np.random.default_rng(seed))
    tree = build_tree(calls)
    assert validate_tree(tree) == []
    got = {c.call_id: c for c in tree.extract_calls()}
    assert set(got) == {c.call_id for c in calls}
    for c in calls:
        assert got[c.call_id].tokens == c.tokens
        assert got[c.call_id].turns == c.turns
    st_ = tree_stats(tree)
    assert st_.tree_tokens <= st_.linear_tokens


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_merge_is_order_independent_in_content(seed):
    calls = random_tree_calls(np.random.default_rng(seed))
    a = build_tree(calls)
    b = build_tree(list(reversed(calls)))
    assert tree_stats(a) == tree_stats(b)
