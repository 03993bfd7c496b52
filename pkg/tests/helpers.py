"""Small builders shared by the test modules."""

import numpy as np

from ttkit.trajectory import LinearCall, Origin, Role, TokenEvent, TurnSpan


def lp_of(tok):
    # a pure function of the token id keeps shared prefixes mergeable
    return -0.1 * (1 + tok % 7)


def make_call(cid, tokens, n_prompt=0, vocab_size=None):
    """Prompt tokens (one user turn) followed by one assistant turn."""
    events = [TokenEvent(t, Origin.PROMPT) for t in tokens[:n_prompt]]
    events += [TokenEvent(t, Origin.GENERATED, lp_of(t)) for t in tokens[n_prompt:]]
    turns = []
    if n_prompt:
        turns.append(TurnSpan(0, n_prompt, Role.USER))
    if len(tokens) > n_prompt:
        turns.append(TurnSpan(n_prompt, len(tokens), Role.ASSISTANT))
    return LinearCall(cid, tuple(events), tuple(turns), vocab_size=vocab_size)


def enumerate_shapes(max_nodes):
    """Ordered rooted trees as preorder parent arrays (root parent -1)."""
    out = []

    def grow(parents, rightmost):
        out.append(tuple(parents))
        if len(parents) == max_nodes:
            return
        for anc in rightmost:
            k = rightmost.index(anc)
            grow(parents + [anc], rightmost[: k + 1] + [len(parents)])

    grow([-1], [0])
    return out


def shape_calls(parents, lengths):
    """Calls realising a tree shape: node k carries ``lengths[k]`` generated
    tokens with distinct ids; leaves and single-child nodes end a call."""
    n = len(parents)
    children = [[c for c in range(n) if parents[c] == k] for k in range(n)]
    seg_tokens, nxt = [], 1
    for k in range(n):
        seg_tokens.append(list(range(nxt, nxt + lengths[k])))
        nxt += lengths[k]
    calls, node_paths = [], {}
    for k in range(n):
        if len(children[k]) == 1 or not children[k] or (k == 0 and n == 1):
            chain, cur = [], k
            while cur != -1:
                chain.append(cur)
                cur = parents[cur]
            toks = [t for c in reversed(chain) for t in seg_tokens[c]]
            calls.append(make_call(f"n{k}", toks))
            node_paths[k] = toks
    return calls, seg_tokens, node_paths


def random_rewards(rng, n):
    r = rng.integers(0, 3, n).astype(float)
    if n > 1 and np.all(r == r[0]):
        r[0] += 1.0
    return r
