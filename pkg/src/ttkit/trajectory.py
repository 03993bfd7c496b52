"""Rollout records and prefix-shared trajectory trees.

A task's rollout arrives as a set of linear model calls.  :func:`build_tree`
radix-merges them on their longest common prefixes so that shared context is
stored once.  Two tokens merge only when token id, origin and (for generated
tokens) the rollout log-probability agree bit-for-bit; turn spans never
straddle a node boundary.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Optional, Sequence

import numpy as np

from . import _backend
from .errors import EmptyInput, InconsistentVocab, InvalidRecord


class Origin(IntEnum):
    PROMPT = 0
    GENERATED = 1


class Role(IntEnum):
    ASSISTANT = 0
    TOOL = 1
    USER = 2

    @classmethod
    def parse(cls, value) -> "Role":
        if isinstance(value, Role):
            return value
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise InvalidRecord(f"unknown turn role {value!r}") from None
        return cls(int(value))

    @property
    def label(self) -> str:
        return self.name.lower()


@dataclass(frozen=True, slots=True)
class TokenEvent:
    token_id: int
    origin: Origin
    rollout_logprob: Optional[float] = None

    def __post_init__(self):
        if self.token_id < 0:
            raise InvalidRecord(f"negative token id {self.token_id}")
        if self.origin == Origin.GENERATED:
            if self.rollout_logprob is None:
                raise InvalidRecord("generated token without rollout_logprob")
            if not self.rollout_logprob <= 0.0:
                raise InvalidRecord(f"rollout_logprob {self.rollout_logprob} > 0")
        elif self.rollout_logprob is not None:
            raise InvalidRecord("prompt token carries a rollout_logprob")


@dataclass(frozen=True, slots=True)
class TurnSpan:
    start: int
    end: int
    role: Role

    def shifted(self, offset: int) -> "TurnSpan":
        return TurnSpan(self.start + offset, self.end + offset, self.role)


def check_turns(turns: Sequence[TurnSpan], length: int) -> Optional[str]:
    """Return a description of the first turn-layout problem, or None."""
    prev_end = 0
    for t in turns:
        if not 0 <= t.start < t.end <= length:
            return f"turn [{t.start},{t.end}) outside [0,{length})"
        if t.start < prev_end:
            return f"turn [{t.start},{t.end}) overlaps or is out of order"
        prev_end = t.end
    return None


@dataclass(frozen=True)
class LinearCall:
    """One model invocation: its full context plus generation."""

    call_id: str
    tokens: tuple
    turns: tuple = ()
    parent_hint: Optional[str] = None
    vocab_size: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "turns", tuple(self.turns))
        if not self.tokens:
            raise InvalidRecord(f"call {self.call_id!r} has no tokens")
        problem = check_turns(self.turns, len(self.tokens))
        if problem:
            raise InvalidRecord(f"call {self.call_id!r}: {problem}")
        if self.vocab_size is not None:
            top = max(t.token_id for t in self.tokens)
            if top >= self.vocab_size:
                raise InvalidRecord(
                    f"call {self.call_id!r}: token id {top} >= vocab_size {self.vocab_size}"
                )
        covered = np.zeros(len(self.tokens), dtype=bool)
        for t in self.turns:
            if t.role == Role.ASSISTANT:
                covered[t.start : t.end] = True
        gen = self.origins == Origin.GENERATED
        if np.any(gen & ~covered):
            i = int(np.flatnonzero(gen & ~covered)[0])
            raise InvalidRecord(
                f"call {self.call_id!r}: generated token {i} outside every assistant turn"
            )

    @classmethod
    def from_arrays(cls, call_id, token_ids, origins, logprobs=None, turns=(), **kw):
        if logprobs is None:
            logprobs = [None] * len(token_ids)
        if not len(token_ids) == len(origins) == len(logprobs):
            raise InvalidRecord(f"call {call_id!r}: tokens/origins/logprobs lengths differ")
        events = []
        for tok, org, lp in zip(token_ids, origins, logprobs):
            org = Origin(int(org))
            lp = None if lp is None or org == Origin.PROMPT and _isnan(lp) else float(lp)
            events.append(TokenEvent(int(tok), org, lp))
        return cls(call_id, tuple(events), tuple(turns), **kw)

    def __len__(self):
        return len(self.tokens)

    @property
    def token_ids(self) -> np.ndarray:
        return np.fromiter((t.token_id for t in self.tokens), dtype=np.int64, count=len(self))

    @property
    def origins(self) -> np.ndarray:
        return np.fromiter((t.origin for t in self.tokens), dtype=np.uint8, count=len(self))

    @property
    def rollout_logprobs(self) -> np.ndarray:
        """Rollout log-probs with NaN on prompt tokens."""
        return np.array(
            [np.nan if t.rollout_logprob is None else t.rollout_logprob for t in self.tokens],
            dtype=np.float64,
        )

    @property
    def num_generated(self) -> int:
        return sum(1 for t in self.tokens if t.origin == Origin.GENERATED)

    def merge_keys(self) -> tuple[np.ndarray, np.ndarray]:
        """(token/origin key, logprob bit pattern) arrays used for prefix merging."""
        keys = self.token_ids * 2 + self.origins
        lps = np.nan_to_num(self.rollout_logprobs, nan=0.0)
        bits = lps.view(np.int64).copy()
        bits[self.origins == Origin.PROMPT] = 0
        return keys, bits


def _isnan(x) -> bool:
    return isinstance(x, float) and x != x


@dataclass(frozen=True)
class TaskSpec:
    """The five-field RL sample record: environment, tools, scaffold, task, verifier."""

    env_id: str
    tools: tuple
    scaffold: str
    instruction: str
    verifier_id: str

    def __post_init__(self):
        object.__setattr__(self, "tools", tuple(self.tools))
        for name in ("env_id", "scaffold", "instruction", "verifier_id"):
            value = getattr(self, name)
            if not isinstance(value, str) or not value:
                raise InvalidRecord(f"TaskSpec.{name} must be a non-empty string")
        if not self.tools or not all(isinstance(t, str) and t for t in self.tools):
            raise InvalidRecord("TaskSpec.tools must be a non-empty list of names")

    def to_dict(self) -> dict:
        return {
            "env_id": self.env_id,
            "tools": list(self.tools),
            "scaffold": self.scaffold,
            "instruction": self.instruction,
            "verifier_id": self.verifier_id,
        }


@dataclass(frozen=True)
class RolloutGroup:
    """G rollouts of one task.  Each trajectory is a sequence of calls."""

    task: TaskSpec
    trajectories: tuple
    rewards: tuple

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(tuple(t) for t in self.trajectories))
        object.__setattr__(self, "rewards", tuple(float(r) for r in self.rewards))
        if not self.trajectories:
            raise InvalidRecord("RolloutGroup needs at least one trajectory")
        if len(self.rewards) != len(self.trajectories):
            raise InvalidRecord(
                f"{len(self.rewards)} rewards for {len(self.trajectories)} trajectories"
            )

    @property
    def calls(self) -> list:
        return [c for traj in self.trajectories for c in traj]


@dataclass
class TreeNode:
    """A tree segment.  ``turns`` are the segment-local pieces of the turns
    crossing it; ``joined`` marks a first piece that continues the parent's
    last one (a turn straddling the node boundary)."""

    node_id: int
    parent_id: Optional[int]
    tokens: tuple
    turns: tuple = ()
    joined: bool = False


@dataclass(frozen=True)
class LeafPath:
    node_id: int
    call_id: str


@dataclass
class TrajectoryTree:
    nodes: dict
    roots: list
    leaf_paths: list
    calls: dict = field(default_factory=dict)

    def child_map(self) -> dict:
        children = defaultdict(list)
        for nid in sorted(self.nodes):
            pid = self.nodes[nid].parent_id
            if pid is not None and pid != nid:
                children[pid].append(nid)
        return children

    def path_nodes(self, node_id: int) -> list:
        """Node ids from the root down to ``node_id``."""
        chain = []
        seen = set()
        nid = node_id
        while nid is not None:
            if nid in seen:
                raise ValueError(f"cycle through node {nid}")
            seen.add(nid)
            chain.append(nid)
            nid = self.nodes[nid].parent_id
        return chain[::-1]

    def path_tokens(self, node_id: int) -> list:
        out = []
        for nid in self.path_nodes(node_id):
            out.extend(self.nodes[nid].tokens)
        return out

    def path_turns(self, node_id: int) -> list:
        out, offset = [], 0
        for nid in self.path_nodes(node_id):
            node = self.nodes[nid]
            pieces = [t.shifted(offset) for t in node.turns]
            if node.joined and out and pieces:
                out[-1] = TurnSpan(out[-1].start, pieces[0].end, out[-1].role)
                pieces = pieces[1:]
            out.extend(pieces)
            offset += len(node.tokens)
        return out

    def depth_offsets(self) -> dict:
        """Path position of the first token of every node."""
        offsets = {}
        children = self.child_map()
        stack = [(r, 0) for r in self.roots]
        while stack:
            nid, off = stack.pop()
            offsets[nid] = off
            nxt = off + len(self.nodes[nid].tokens)
            stack.extend((c, nxt) for c in children.get(nid, ()))
        return offsets

    def extract_calls(self) -> list:
        """Rebuild one LinearCall per leaf path from the tree contents."""
        out = []
        for leaf in self.leaf_paths:
            src = self.calls.get(leaf.call_id)
            out.append(
                LinearCall(
                    leaf.call_id,
                    tuple(self.path_tokens(leaf.node_id)),
                    tuple(self.path_turns(leaf.node_id)),
                    parent_hint=src.parent_hint if src else None,
                    vocab_size=src.vocab_size if src else None,
                )
            )
        return out


def clip_turns(turns, lo: int, hi: int) -> tuple:
    """Pieces of ``turns`` inside [lo, hi), shifted to start at lo, and
    whether a turn straddles lo."""
    pieces = tuple(
        TurnSpan(max(t.start, lo) - lo, min(t.end, hi) - lo, t.role)
        for t in turns if t.end > lo and t.start < hi
    )
    return pieces, any(t.start < lo < t.end for t in turns)


class _Building:
    __slots__ = ("tokens", "keys", "bits", "turns", "joined", "children", "terminals")

    def __init__(self, tokens, keys, bits, turns, joined=False):
        self.tokens = tokens
        self.keys = keys
        self.bits = bits
        self.turns = turns
        self.joined = joined
        self.children = []
        self.terminals = []

    def split(self, cut: int) -> None:
        pieces, straddle = clip_turns(self.turns, cut, len(self.tokens))
        tail = _Building(self.tokens[cut:], self.keys[cut:], self.bits[cut:], pieces, straddle)
        tail.children, tail.terminals = self.children, self.terminals
        self.tokens, self.keys, self.bits = self.tokens[:cut], self.keys[:cut], self.bits[:cut]
        self.turns = clip_turns(self.turns, 0, cut)[0]
        self.children, self.terminals = [tail], []


def _agreement(a, b) -> int:
    """Largest c such that both piece lists clipped to [0, c) coincide."""
    for p, q in zip(a, b):
        if p.start != q.start or p.role != q.role:
            return min(p.start, q.start)
        if p.end != q.end:
            return min(p.end, q.end)
    if len(a) != len(b):
        return (a[len(b)] if len(a) > len(b) else b[len(a)]).start
    return 1 << 62


def _mergeable_length(node: _Building, pieces, straddle: bool, keys, bits, off: int) -> int:
    """Longest prefix of ``node`` the call suffix at ``off`` may share: tokens
    must agree and so must the turn layout over the shared span."""
    if node.joined != straddle:
        return 0
    limit = _backend.common_prefix(node.keys, node.bits, keys[off:], bits[off:])
    if limit == 0:
        return 0
    return min(limit, _agreement(node.turns, pieces))


def build_tree(calls: Iterable[LinearCall]) -> TrajectoryTree:
    """Radix-merge the calls of one task into a single-rooted tree.

    Children are ordered by creation; node ids are assigned in DFS preorder
    so ascending id among siblings equals insertion order.
    """
    calls = list(calls)
    if not calls:
        raise EmptyInput("build_tree needs at least one call")
    vocab = {c.vocab_size for c in calls if c.vocab_size is not None}
    if len(vocab) > 1:
        raise InconsistentVocab(f"calls declare different vocab sizes {sorted(vocab)}")
    ids = [c.call_id for c in calls]
    if len(set(ids)) != len(ids):
        raise InvalidRecord("duplicate call_id within one task")

    empty_keys = np.empty(0, dtype=np.int64)
    root = _Building((), empty_keys, empty_keys, [])
    for call in calls:
        keys, bits = call.merge_keys()
        node, off, n = root, 0, len(call)
        while True:
            if off == n:
                node.terminals.append(call.call_id)
                break
            pieces, straddle = clip_turns(call.turns, off, n)
            best, best_len = None, 0
            for child in node.children:
                c = _mergeable_length(child, pieces, straddle, keys, bits, off)
                if c > best_len:
                    best, best_len = child, c
            if best is None:
                leaf = _Building(call.tokens[off:], keys[off:], bits[off:], pieces, straddle)
                leaf.terminals.append(call.call_id)
                node.children.append(leaf)
                break
            if best_len < len(best.tokens):
                best.split(best_len)
            node, off = best, off + best_len

    top = root.children[0] if len(root.children) == 1 and not root.terminals else root

    nodes, terminal_of = {}, {}
    stack = [(top, None)]
    while stack:
        b, pid = stack.pop()
        nid = len(nodes)
        nodes[nid] = TreeNode(nid, pid, tuple(b.tokens), tuple(b.turns), b.joined)
        for cid in b.terminals:
            terminal_of[cid] = nid
        stack.extend((c, nid) for c in reversed(b.children))
    return TrajectoryTree(
        nodes=nodes,
        roots=[0],
        leaf_paths=[LeafPath(terminal_of[c.call_id], c.call_id) for c in calls],
        calls={c.call_id: c for c in calls},
    )


@dataclass(frozen=True)
class TreeStats:
    tree_tokens: int
    linear_tokens: int
    redundancy_ratio: float


def tree_stats(tree: TrajectoryTree) -> TreeStats:
    tree_tokens = sum(len(n.tokens) for n in tree.nodes.values())
    lengths = {}
    for leaf in tree.leaf_paths:
        if leaf.node_id not in lengths:
            lengths[leaf.node_id] = sum(
                len(tree.nodes[nid].tokens) for nid in tree.path_nodes(leaf.node_id)
            )
    linear = sum(lengths[leaf.node_id] for leaf in tree.leaf_paths)
    return TreeStats(tree_tokens, linear, linear / tree_tokens if tree_tokens else 1.0)


@dataclass(frozen=True)
class Violation:
    node_id: Optional[int]
    rule: str
    detail: str = ""

    def __str__(self):
        return f"{self.rule}(node={self.node_id}){': ' + self.detail if self.detail else ''}"


def validate_tree(tree: TrajectoryTree) -> list:
    """List every broken structural invariant; empty means the tree is sound."""
    out = []
    nodes = tree.nodes
    if len(tree.roots) != 1:
        out.append(Violation(None, "RootCount", f"{len(tree.roots)} roots"))
    roots = set(tree.roots)
    for r in tree.roots:
        if r not in nodes:
            out.append(Violation(r, "UnknownNode", "root id not in node table"))
        elif nodes[r].parent_id is not None:
            out.append(Violation(r, "RootHasParent"))

    reachable = {}
    for nid in sorted(nodes):
        node = nodes[nid]
        if node.node_id != nid:
            out.append(Violation(nid, "IdMismatch", f"stored id {node.node_id}"))
        if node.parent_id is None:
            if nid not in roots:
                out.append(Violation(nid, "OrphanNode", "no parent and not a root"))
        elif node.parent_id not in nodes:
            out.append(Violation(nid, "MissingParent", f"parent {node.parent_id}"))
        seen, cur, ok = set(), nid, True
        while cur is not None and cur in nodes:
            if cur in seen:
                out.append(Violation(nid, "CycleDetected"))
                ok = False
                break
            seen.add(cur)
            cur = nodes[cur].parent_id
        reachable[nid] = ok and cur is None
        if not node.tokens and nid not in roots:
            out.append(Violation(nid, "EmptyNode"))
        problem = check_turns(node.turns, len(node.tokens))
        if problem:
            out.append(Violation(nid, "TurnLayout", problem))
        elif node.joined:
            parent = nodes.get(node.parent_id)
            if (parent is None or not parent.turns or not node.turns or node.turns[0].start != 0
                    or parent.turns[-1].end != len(parent.tokens)
                    or parent.turns[-1].role != node.turns[0].role):
                out.append(Violation(nid, "TurnLayout", "joined piece does not continue the parent's last turn"))

    children = tree.child_map()
    terminals = {leaf.node_id for leaf in tree.leaf_paths}
    for nid in sorted(nodes):
        if not children.get(nid) and nid not in terminals:
            out.append(Violation(nid, "LeafWithoutPath"))

    for leaf in tree.leaf_paths:
        if leaf.node_id not in nodes:
            out.append(Violation(leaf.node_id, "UnknownNode", f"leaf of {leaf.call_id!r}"))
            continue
        call = tree.calls.get(leaf.call_id)
        if call is None:
            out.append(Violation(leaf.node_id, "UnknownCall", leaf.call_id))
            continue
        if not reachable.get(leaf.node_id, False):
            continue
        if tuple(tree.path_tokens(leaf.node_id)) != call.tokens:
            out.append(Violation(leaf.node_id, "PathReconstructionMismatch", leaf.call_id))
        elif tuple(tree.path_turns(leaf.node_id)) != call.turns:
            out.append(Violation(leaf.node_id, "TurnReconstructionMismatch", leaf.call_id))
    return out
