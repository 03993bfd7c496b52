"""NumPy implementations of the packing kernels.

Used when the compiled ``ttkit._kernels`` extension is unavailable or
``TTKIT_PURE_PYTHON=1`` is set.  Results are identical to the extension.
"""

import numpy as np


def common_prefix(a_keys, a_bits, b_keys, b_bits):
    n = min(len(a_keys), len(b_keys))
    diff = (a_keys[:n] != b_keys[:n]) | (a_bits[:n] != b_bits[:n])
    hits = np.flatnonzero(diff)
    return int(hits[0]) if hits.size else n


def _ancestor_matrix(seg_parent):
    S = len(seg_parent)
    anc = np.eye(S, dtype=bool)
    for s in range(S):
        p = seg_parent[s]
        while p >= 0:
            anc[s, p] = True
            p = seg_parent[p]
    return anc


def tree_mask(seg_of_token, seg_parent, seg_start, seg_end):
    T = len(seg_of_token)
    anc = _ancestor_matrix(seg_parent)
    seg = np.asarray(seg_of_token)
    strict = anc.copy()
    np.fill_diagonal(strict, False)
    same = seg[:, None] == seg[None, :]
    causal = np.tri(T, dtype=bool)
    return strict[seg[:, None], seg[None, :]] | (same & causal)


def mask_rows(rows, seg_of_token, seg_parent, seg_start, seg_end):
    T = len(seg_of_token)
    out = np.zeros((len(rows), T), dtype=bool)
    for r, i in enumerate(rows):
        s = seg_of_token[i]
        out[r, seg_start[s] : i + 1] = True
        p = seg_parent[s]
        while p >= 0:
            out[r, seg_start[p] : seg_end[p]] = True
            p = seg_parent[p]
    return out


def predecessors(seg_of_token, seg_parent, seg_start, seg_end):
    T = len(seg_of_token)
    pred = np.arange(T, dtype=np.int64) - 1
    for i in np.flatnonzero(np.asarray(seg_start)[seg_of_token] == np.arange(T)):
        p = seg_parent[seg_of_token[i]]
        while p >= 0 and seg_end[p] <= seg_start[p]:
            p = seg_parent[p]
        pred[i] = seg_end[p] - 1 if p >= 0 else -1
    return pred
