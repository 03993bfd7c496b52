"""Synthetic branching-scaffold workloads.

Each task has a prompt prefix followed by ``branch_points_per_task`` levels
of branching; every node below the prefix is a branch of ``branch_len``
tokens made of ``turns_per_branch`` turns alternating assistant (generated)
and tool (prompt).  Every leaf is one call and one trajectory.

Sibling branches start with distinct token ids, so the radix merge splits
exactly at branch boundaries and the token counts have a closed form.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError
from .records import TaskRecord
from .trajectory import LinearCall, Origin, Role, TaskSpec, TokenEvent, TurnSpan


@dataclass(frozen=True)
class WorkloadSpec:
    num_tasks: int = 2
    branching_factor: int = 2
    branch_points_per_task: int = 1
    shared_prefix_len: int = 16
    branch_len: int = 8
    turns_per_branch: int = 2
    vocab_size: int = 32
    seed: int = 0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if name == "seed":
                continue
            if not isinstance(value, int) or value <= 0:
                raise ConfigError(f"WorkloadSpec.{name} must be a positive integer, got {value!r}")
        if self.turns_per_branch > self.branch_len:
            raise ConfigError("turns_per_branch cannot exceed branch_len")
        if self.branching_factor > self.vocab_size:
            raise ConfigError("branching_factor cannot exceed vocab_size")

    @classmethod
    def from_dict(cls, obj) -> "WorkloadSpec":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in obj.items() if k in known})

    @property
    def calls_per_task(self) -> int:
        return self.branching_factor ** self.branch_points_per_task

    def closed_form_tokens(self) -> tuple:
        """(tree tokens, linear tokens) per task."""
        b, d, P, L = self.branching_factor, self.branch_points_per_task, self.shared_prefix_len, self.branch_len
        tree = P + L * sum(b**k for k in range(1, d + 1))
        linear = b**d * (P + d * L)
        return tree, linear

    def closed_form_ratio(self) -> float:
        tree, linear = self.closed_form_tokens()
        return linear / tree


def _turn_lengths(spec: WorkloadSpec) -> list:
    base, extra = divmod(spec.branch_len, spec.turns_per_branch)
    return [base + (1 if k < extra else 0) for k in range(spec.turns_per_branch)]


def _task_policy(rng, vocab_size):
    logits = rng.normal(0.0, 1.0, vocab_size)
    logp = logits - np.log(np.exp(logits - logits.max()).sum()) - logits.max()
    return logp, np.exp(logp) / np.exp(logp).sum()


def generate_task(spec: WorkloadSpec, task_index: int) -> TaskRecord:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, task_index]))
    logp, probs = _task_policy(rng, spec.vocab_size)
    lengths = _turn_lengths(spec)

    def segment(first_token):
        events, turns, pos = [], [], 0
        for k, n in enumerate(lengths):
            gen = k % 2 == 0
            if gen:
                toks = rng.choice(spec.vocab_size, size=n, p=probs)
            else:
                toks = rng.integers(0, spec.vocab_size, size=n)
            if k == 0:
                toks[0] = first_token
            for tok in toks:
                tok = int(tok)
                if gen:
                    events.append(TokenEvent(tok, Origin.GENERATED, float(logp[tok])))
                else:
                    events.append(TokenEvent(tok, Origin.PROMPT))
            turns.append(TurnSpan(pos, pos + n, Role.ASSISTANT if gen else Role.TOOL))
            pos += n
        return events, turns

    prefix = [TokenEvent(int(t), Origin.PROMPT) for t in rng.integers(0, spec.vocab_size, spec.shared_prefix_len)]
    frontier = [(prefix, [TurnSpan(0, len(prefix), Role.USER)])]
    for _ in range(spec.branch_points_per_task):
        nxt = []
        for events, turns in frontier:
            if spec.branching_factor == 1:
                firsts = [int(rng.choice(spec.vocab_size, p=probs))]
            else:
                firsts = rng.choice(spec.vocab_size, size=spec.branching_factor, replace=False, p=probs)
            for first in firsts:
                seg_events, seg_turns = segment(int(first))
                off = len(events)
                nxt.append((events + seg_events, turns + [t.shifted(off) for t in seg_turns]))
        frontier = nxt

    calls = [
        LinearCall(f"t{task_index}-c{k}", tuple(ev), tuple(tt), vocab_size=spec.vocab_size)
        for k, (ev, tt) in enumerate(frontier)
    ]
    rewards = rng.integers(0, 2, size=len(calls)).astype(float).tolist()
    task = TaskSpec(
        env_id=f"synthetic-env-{task_index}",
        tools=("bash", "edit", "search"),
        scaffold="synthetic-scaffold: you are a coding agent with sub-agents",
        instruction=f"synthetic task {task_index}",
        verifier_id="synthetic-unit-tests",
    )
    return TaskRecord(task, calls, rewards, spec.vocab_size)


def generate(spec: WorkloadSpec) -> list:
    return [generate_task(spec, t) for t in range(spec.num_tasks)]


DEFAULT_GRID = {
    "linear": WorkloadSpec(num_tasks=2, branching_factor=1, branch_points_per_task=2,
                           shared_prefix_len=24, branch_len=12, turns_per_branch=2, vocab_size=32, seed=11),
    "binary-deep": WorkloadSpec(num_tasks=3, branching_factor=2, branch_points_per_task=3,
                                shared_prefix_len=16, branch_len=6, turns_per_branch=2, vocab_size=16, seed=12),
    "subagents-8": WorkloadSpec(num_tasks=1, branching_factor=8, branch_points_per_task=1,
                                shared_prefix_len=256, branch_len=16, turns_per_branch=2, vocab_size=64, seed=13),
    "subagents-8x8": WorkloadSpec(num_tasks=1, branching_factor=8, branch_points_per_task=2,
                                  shared_prefix_len=256, branch_len=16, turns_per_branch=4, vocab_size=64, seed=14),
    "wide-shallow": WorkloadSpec(num_tasks=2, branching_factor=4, branch_points_per_task=1,
                                 shared_prefix_len=40, branch_len=5, turns_per_branch=1, vocab_size=24, seed=15),
}

# Large sub-agent fan-outs; too big for the dense gradient oracle in CI.
LARGE_SCALE = {
    "subagents-8x128-on-2048": WorkloadSpec(num_tasks=1, branching_factor=8, branch_points_per_task=1,
                                            shared_prefix_len=2048, branch_len=128, turns_per_branch=2,
                                            vocab_size=64, seed=21),
    "subagents-8x256-on-4096-2lvl": WorkloadSpec(num_tasks=1, branching_factor=8, branch_points_per_task=2,
                                                 shared_prefix_len=4096, branch_len=256, turns_per_branch=4,
                                                 vocab_size=64, seed=22),
}
