"""Compile a trajectory tree into one flattened training sequence.

The flattened batch stores each shared prefix once.  Three things keep it
gradient-equivalent to training every root-to-leaf path separately:

* a tree attention mask, so that a token only sees its own path,
* position ids that restore each token's offset within its path,
* per-token loss weights that count how often the token would have been
  trained in the per-path baseline.

The mask is never stored; it is rebuilt from the segment table.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from . import _backend
from .errors import ConfigError, CorruptSegmentTable, InvalidTree, PathWithNoGeneratedTokens
from .trajectory import (
    LinearCall,
    Origin,
    Role,
    TokenEvent,
    TrajectoryTree,
    TurnSpan,
    tree_stats,
    validate_tree,
)


class NormalizationMode(Enum):
    PATH_SUM = 0
    PATH_MEAN = 1

    @classmethod
    def parse(cls, value) -> "NormalizationMode":
        if isinstance(value, cls):
            return value
        if isinstance(value, int):
            return cls(value)
        key = str(value).replace("-", "_").upper()
        aliases = {"PATHSUM": "PATH_SUM", "SUM": "PATH_SUM", "PATHMEAN": "PATH_MEAN", "MEAN": "PATH_MEAN"}
        try:
            return cls[aliases.get(key, key)]
        except KeyError:
            raise ConfigError(f"unknown normalisation mode {value!r}; use PathSum or PathMean") from None

    @property
    def label(self) -> str:
        return "PathSum" if self is NormalizationMode.PATH_SUM else "PathMean"


@dataclass(frozen=True)
class SegmentEntry:
    segment_id: int
    parent_segment_id: Optional[int]
    flat_start: int
    flat_end: int
    path_position_start: int

    @property
    def length(self) -> int:
        return self.flat_end - self.flat_start


@dataclass(frozen=True)
class TurnEntry:
    """A turn of one trajectory, in coordinates local to its segment."""

    segment_id: int
    start: int
    end: int
    role: Role
    turn_index: int
    trajectory: int


@dataclass(frozen=True)
class PathEntry:
    terminal_segment_id: int
    call_id: str


@dataclass(eq=False)
class PackedBatch:
    token_ids: np.ndarray
    origins: np.ndarray
    position_ids: np.ndarray
    loss_weights: np.ndarray
    rollout_logprobs: np.ndarray  # NaN where absent
    segments: list
    turn_table: list
    paths: list = field(default_factory=list)
    mode: NormalizationMode = NormalizationMode.PATH_SUM

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def num_tokens(self) -> int:
        return len(self.token_ids)

    def segment_index(self) -> dict:
        return {s.segment_id: k for k, s in enumerate(self.segments)}

    def segment_arrays(self):
        """(segment of each token, parent index, start, end) as int64 arrays.

        Parents are referenced by position in ``segments`` (-1 for the root).
        """
        index = self.segment_index()
        S = len(self.segments)
        parent = np.full(S, -1, dtype=np.int64)
        start = np.empty(S, dtype=np.int64)
        end = np.empty(S, dtype=np.int64)
        seg_of_token = np.empty(self.num_tokens, dtype=np.int64)
        for k, s in enumerate(self.segments):
            if s.parent_segment_id is not None:
                parent[k] = index[s.parent_segment_id]
            start[k], end[k] = s.flat_start, s.flat_end
            seg_of_token[s.flat_start : s.flat_end] = k
        return seg_of_token, parent, start, end

    def trajectory_turns(self) -> dict:
        """Per trajectory index, its turns as (role, flat token indices) in
        turn order; a turn crossing segments gathers all its pieces."""
        index = self.segment_index()
        grouped: dict = {}
        for e in sorted(self.turn_table, key=lambda e: (e.trajectory, e.turn_index)):
            base = self.segments[index[e.segment_id]].flat_start
            turns = grouped.setdefault(e.trajectory, {})
            role, pieces = turns.setdefault(e.turn_index, (e.role, []))
            if role != e.role:
                raise CorruptSegmentTable(f"turn {e.turn_index} of trajectory {e.trajectory} mixes roles")
            pieces.append(np.arange(base + e.start, base + e.end))
        return {
            traj: [(role, np.concatenate(pieces)) for _, (role, pieces) in sorted(turns.items())]
            for traj, turns in grouped.items()
        }

    def path_token_indices(self) -> list:
        """Flat indices of every trajectory, in path order."""
        index = self.segment_index()
        out = []
        for p in self.paths:
            chain = []
            k = index[p.terminal_segment_id]
            while True:
                chain.append(k)
                pid = self.segments[k].parent_segment_id
                if pid is None:
                    break
                k = index[pid]
            idx = [np.arange(self.segments[k].flat_start, self.segments[k].flat_end) for k in chain[::-1]]
            out.append(np.concatenate(idx) if idx else np.empty(0, dtype=np.int64))
        return out

    def equals(self, other: "PackedBatch") -> bool:
        arrays = ("token_ids", "origins", "position_ids", "loss_weights")
        return (
            all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
            and np.array_equal(
                self.rollout_logprobs.view(np.int64), other.rollout_logprobs.view(np.int64)
            )
            and self.segments == other.segments
            and self.turn_table == other.turn_table
            and self.paths == other.paths
            and self.mode == other.mode
        )


def _dfs_order(tree: TrajectoryTree) -> list:
    children = tree.child_map()
    order, stack = [], list(reversed(tree.roots))
    while stack:
        nid = stack.pop()
        order.append(nid)
        stack.extend(reversed(children.get(nid, [])))
    return order


def compute_loss_weights(tree: TrajectoryTree, mode=NormalizationMode.PATH_SUM) -> dict:
    """Per-node arrays of per-token loss weights.

    PATH_SUM: the number of trajectories whose path contains the token.
    PATH_MEAN: the sum over those trajectories of 1 / (P * generated tokens
    on the path).  Prompt tokens always weigh zero.
    """
    mode = NormalizationMode.parse(mode)
    P = len(tree.leaf_paths)
    coeff = {nid: 0.0 for nid in tree.nodes}
    for leaf in tree.leaf_paths:
        chain = tree.path_nodes(leaf.node_id)
        if mode is NormalizationMode.PATH_SUM:
            c = 1.0
        else:
            gen = sum(
                1 for nid in chain for t in tree.nodes[nid].tokens if t.origin == Origin.GENERATED
            )
            if gen == 0:
                raise PathWithNoGeneratedTokens(f"trajectory {leaf.call_id!r} has no generated tokens")
            c = 1.0 / (P * gen)
        for nid in chain:
            coeff[nid] += c
    out = {}
    for nid, node in tree.nodes.items():
        gen = np.fromiter((t.origin == Origin.GENERATED for t in node.tokens), dtype=bool, count=len(node.tokens))
        out[nid] = np.where(gen, coeff[nid], 0.0)
    return out


def dfs_flatten(tree: TrajectoryTree, mode=NormalizationMode.PATH_SUM) -> PackedBatch:
    mode = NormalizationMode.parse(mode)
    violations = validate_tree(tree)
    if violations:
        raise InvalidTree(violations)
    weights = compute_loss_weights(tree, mode)
    order = _dfs_order(tree)

    segments, flat_tokens = [], []
    offsets = tree.depth_offsets()
    cursor = 0
    for nid in order:
        node = tree.nodes[nid]
        n = len(node.tokens)
        segments.append(SegmentEntry(nid, node.parent_id, cursor, cursor + n, offsets[nid]))
        flat_tokens.extend(node.tokens)
        cursor += n

    T = cursor
    token_ids = np.fromiter((t.token_id for t in flat_tokens), dtype=np.int64, count=T)
    origins = np.fromiter((t.origin for t in flat_tokens), dtype=np.uint8, count=T)
    logprobs = np.array(
        [np.nan if t.rollout_logprob is None else t.rollout_logprob for t in flat_tokens],
        dtype=np.float64,
    )
    position_ids = np.concatenate(
        [np.arange(s.path_position_start, s.path_position_start + s.length) for s in segments]
    ).astype(np.int64)
    loss_weights = np.concatenate([weights[nid] for nid in order]).astype(np.float64)

    turn_table = []
    for traj, leaf in enumerate(tree.leaf_paths):
        n = 0
        for nid in tree.path_nodes(leaf.node_id):
            node = tree.nodes[nid]
            for k, t in enumerate(node.turns):
                if k == 0 and node.joined and n:
                    n -= 1  # continues the previous segment's last turn
                turn_table.append(TurnEntry(nid, t.start, t.end, t.role, n, traj))
                n += 1
    paths = [PathEntry(leaf.node_id, leaf.call_id) for leaf in tree.leaf_paths]
    return PackedBatch(
        token_ids, origins, position_ids, loss_weights, logprobs, segments, turn_table, paths, mode
    )


def build_attention_mask(batch: PackedBatch) -> np.ndarray:
    """Dense T x T boolean tree mask: row i marks the tokens i may attend to."""
    return _backend.tree_mask(*batch.segment_arrays())


def attention_mask_rows(batch: PackedBatch, rows) -> np.ndarray:
    return _backend.mask_rows(np.asarray(rows, dtype=np.int64), *batch.segment_arrays())


def path_predecessors(batch: PackedBatch) -> np.ndarray:
    """Index of each token's predecessor on its own path (-1 at path start)."""
    return _backend.predecessors(*batch.segment_arrays())


def check_segment_table(batch: PackedBatch) -> None:
    T = batch.num_tokens
    for name in ("origins", "position_ids", "loss_weights", "rollout_logprobs"):
        if len(getattr(batch, name)) != T:
            raise CorruptSegmentTable(f"{name} has length {len(getattr(batch, name))}, expected {T}")
    seen = {}
    cursor = 0
    for k, s in enumerate(batch.segments):
        if s.segment_id in seen:
            raise CorruptSegmentTable(f"duplicate segment id {s.segment_id}")
        if s.flat_start != cursor or s.flat_end < s.flat_start:
            raise CorruptSegmentTable(f"segment {s.segment_id} does not tile the sequence")
        cursor = s.flat_end
        if s.parent_segment_id is None:
            if k != 0:
                raise CorruptSegmentTable(f"segment {s.segment_id} is a second root")
            if s.path_position_start != 0:
                raise CorruptSegmentTable("root segment must start at position 0")
        else:
            if s.parent_segment_id not in seen:
                raise CorruptSegmentTable(
                    f"segment {s.segment_id} precedes its parent {s.parent_segment_id}"
                )
            parent = batch.segments[seen[s.parent_segment_id]]
            if parent.flat_end > s.flat_start:
                raise CorruptSegmentTable(f"parent of segment {s.segment_id} does not precede it")
            if s.path_position_start != parent.path_position_start + parent.length:
                raise CorruptSegmentTable(f"segment {s.segment_id} position start inconsistent")
        if s.length == 0 and k != 0:
            raise CorruptSegmentTable(f"non-root segment {s.segment_id} is empty")
        seen[s.segment_id] = k
    if cursor != T:
        raise CorruptSegmentTable(f"segments cover {cursor} of {T} tokens")
    if not batch.segments and T:
        raise CorruptSegmentTable("no segments")
    for s in batch.segments:
        pos = batch.position_ids[s.flat_start : s.flat_end]
        if not np.array_equal(pos, np.arange(s.path_position_start, s.path_position_start + s.length)):
            raise CorruptSegmentTable(f"position ids of segment {s.segment_id} inconsistent")
    for e in batch.turn_table:
        if e.segment_id not in seen:
            raise CorruptSegmentTable(f"turn references unknown segment {e.segment_id}")
        if not 0 <= e.start < e.end <= batch.segments[seen[e.segment_id]].length:
            raise CorruptSegmentTable(f"turn [{e.start},{e.end}) outside segment {e.segment_id}")
        if not 0 <= e.trajectory < len(batch.paths):
            raise CorruptSegmentTable(f"turn references unknown trajectory {e.trajectory}")
    for p in batch.paths:
        if p.terminal_segment_id not in seen:
            raise CorruptSegmentTable(f"path {p.call_id!r} ends in unknown segment")


def unpack_paths(batch: PackedBatch) -> list:
    """Recover every trajectory as a LinearCall (inverse of flattening)."""
    check_segment_table(batch)
    turns = batch.trajectory_turns()
    out = []
    for traj, (p, idx) in enumerate(zip(batch.paths, batch.path_token_indices())):
        events = tuple(
            TokenEvent(
                int(batch.token_ids[i]),
                Origin(int(batch.origins[i])),
                None if batch.origins[i] == Origin.PROMPT else float(batch.rollout_logprobs[i]),
            )
            for i in idx
        )
        inverse = {int(i): k for k, i in enumerate(idx)}
        local = []
        for role, flat in turns.get(traj, []):
            pos = [inverse.get(int(i), -1) for i in flat]
            if min(pos) < 0 or pos != list(range(pos[0], pos[0] + len(pos))):
                raise CorruptSegmentTable(f"turn of trajectory {traj} is not a contiguous span of its path")
            local.append(TurnSpan(pos[0], pos[-1] + 1, role))
        out.append(LinearCall(p.call_id, events, tuple(local)))
    return out


@dataclass(frozen=True)
class SpeedupReport:
    trees: int
    tree_tokens: int
    linear_tokens: int
    token_ratio: float
    attention_pairs_linear: Optional[int] = None
    attention_pairs_tree: Optional[int] = None
    attention_ratio: Optional[float] = None

    def to_dict(self) -> dict:
        out = {
            "trees": self.trees,
            "tree_tokens": self.tree_tokens,
            "linear_tokens": self.linear_tokens,
            "token_ratio": self.token_ratio,
        }
        if self.attention_ratio is not None:
            out.update(
                attention_pairs_linear=self.attention_pairs_linear,
                attention_pairs_tree=self.attention_pairs_tree,
                attention_ratio=self.attention_ratio,
            )
        return out


def estimate_speedup(trees, quadratic_attention: bool = False) -> SpeedupReport:
    """Aggregate compute-token redundancy over a set of trees.

    The attention proxy counts attended (query, key) pairs: causal pairs of
    every path, L(L+1)/2, against the tree-mask pairs, position + 1 per token.
    """
    trees = list(trees)
    if not trees:
        raise ValueError("estimate_speedup needs at least one tree")
    tree_tokens = linear = pairs_linear = pairs_tree = 0
    for tree in trees:
        st = tree_stats(tree)
        tree_tokens += st.tree_tokens
        linear += st.linear_tokens
        if quadratic_attention:
            offsets = tree.depth_offsets()
            for nid, node in tree.nodes.items():
                n, o = len(node.tokens), offsets[nid]
                pairs_tree += n * o + n * (n + 1) // 2
            for leaf in tree.leaf_paths:
                L = offsets[leaf.node_id] + len(tree.nodes[leaf.node_id].tokens)
                pairs_linear += L * (L + 1) // 2
    if not quadratic_attention:
        return SpeedupReport(len(trees), tree_tokens, linear, linear / tree_tokens)
    return SpeedupReport(
        len(trees), tree_tokens, linear, linear / tree_tokens,
        pairs_linear, pairs_tree, pairs_linear / pairs_tree,
    )
