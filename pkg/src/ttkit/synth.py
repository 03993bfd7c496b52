"""Random call sets with a known tree shape, for property tests and checks."""

from __future__ import annotations

import numpy as np

from .trajectory import LinearCall, Origin, Role, TokenEvent, TurnSpan


def _segment(rng, length, first_token, generated, vocab_size):
    events = []
    for k in range(length):
        tok = first_token if k == 0 else int(rng.integers(0, vocab_size))
        if generated:
            events.append(TokenEvent(tok, Origin.GENERATED, -float(rng.exponential(1.0))))
        else:
            events.append(TokenEvent(tok, Origin.PROMPT))
    return events


def random_tree_calls(rng, max_depth=6, max_branching=4, max_seg_len=4, vocab_size=17,
                      max_nodes=40, stop_prob=0.4, terminal_prob=0.2, join_prob=0.3):
    """Calls whose radix merge is a random tree of whole-turn segments.

    Sibling segments start with distinct token ids; every leaf segment is an
    assistant turn and every call has generated tokens.  Internal nodes are
    call endpoints with probability ``terminal_prob`` (always when they have
    a single child).  With probability ``join_prob`` an assistant segment
    continues its parent's assistant turn, so that turn straddles the
    branch point.
    """
    nodes = []  # [parent, events, turns, depth, children]

    def add(parent, first, depth):
        length = int(rng.integers(1, max_seg_len + 1))
        generated = bool(rng.random() < 0.6)
        events = _segment(rng, length, first, generated, vocab_size)
        role = Role.ASSISTANT if generated else rng.choice([Role.TOOL, Role.USER])
        nodes.append([parent, events, [TurnSpan(0, length, Role(role))], depth, []])
        return len(nodes) - 1

    root = add(None, int(rng.integers(0, vocab_size)), 1)
    frontier = [root]
    while frontier:
        nid = frontier.pop(0)
        depth = nodes[nid][3]
        if depth >= max_depth or len(nodes) >= max_nodes:
            continue
        if nid != root and rng.random() < stop_prob:
            continue
        k = int(rng.integers(1, max_branching + 1))
        k = min(k, max_nodes - len(nodes), vocab_size)
        firsts = rng.choice(vocab_size, size=k, replace=False)
        for f in firsts:
            child = add(nid, int(f), depth + 1)
            nodes[nid][4].append(child)
            frontier.append(child)

    for node in nodes:
        if not node[4] and node[1][0].origin != Origin.GENERATED:
            first = node[1][0].token_id
            length = len(node[1])
            node[1] = _segment(rng, length, first, True, vocab_size)
            node[2] = [TurnSpan(0, length, Role.ASSISTANT)]

    terminals = [
        i for i, n in enumerate(nodes)
        if not n[4] or len(n[4]) == 1 or rng.random() < terminal_prob
    ]
    # a call must carry generated tokens; nodes are in breadth-first order
    has_gen = []
    for i, node in enumerate(nodes):
        if i in terminals and not (node[1][0].origin == Origin.GENERATED or
                                   (node[0] is not None and has_gen[node[0]])):
            length = len(node[1])
            node[1] = _segment(rng, length, node[1][0].token_id, True, vocab_size)
            node[2] = [TurnSpan(0, length, Role.ASSISTANT)]
        here = node[1][0].origin == Origin.GENERATED
        has_gen.append(here or (node[0] is not None and has_gen[node[0]]))
    joins = [bool(rng.random() < join_prob) for _ in nodes]
    calls = []
    for c, nid in enumerate(terminals):
        chain = []
        cur = nid
        while cur is not None:
            chain.append(cur)
            cur = nodes[cur][0]
        events, turns = [], []
        for k in reversed(chain):
            seg_turns = [t.shifted(len(events)) for t in nodes[k][2]]
            if joins[k] and turns and turns[-1].role == Role.ASSISTANT and seg_turns[0].role == Role.ASSISTANT:
                turns[-1] = TurnSpan(turns[-1].start, seg_turns[0].end, Role.ASSISTANT)
                seg_turns = seg_turns[1:]
            turns.extend(seg_turns)
            events.extend(nodes[k][1])
        calls.append(LinearCall(f"call-{c}", tuple(events), tuple(turns), vocab_size=vocab_size))
    order = rng.permutation(len(calls))
    return [calls[i] for i in order]
