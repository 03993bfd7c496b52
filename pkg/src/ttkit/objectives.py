"""Group advantages, turn-level clipped surrogate, reference objectives, OPD
term and data-curation predicates.

Objectives are values to maximise.  Every objective returns the gradient of
its value with respect to the per-token training log-probabilities; rollout
log-probabilities are constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import (
    AlignmentMismatch,
    ConfigError,
    GroupTooSmall,
    MissingTestResult,
    UncoveredGeneratedToken,
)
from .trajectory import Origin, Role, TurnSpan


class AdvantageMode(Enum):
    MEAN_STD_NORM = "MeanStdNorm"
    MEAN_ONLY = "MeanOnly"


@dataclass(frozen=True)
class ObjectiveConfig:
    clip_epsilon: float = 0.2
    advantage_mode: AdvantageMode = AdvantageMode.MEAN_STD_NORM
    std_floor: float = 1e-8
    log_ratio_clamp: float = 20.0
    opd_lambda: float = 1.0
    icepop_threshold: float = float(np.log(2.0))

    def __post_init__(self):
        if isinstance(self.advantage_mode, str):
            object.__setattr__(self, "advantage_mode", AdvantageMode(self.advantage_mode))
        if not 0.0 < self.clip_epsilon < 1.0:
            raise ConfigError(f"clip_epsilon must lie in (0, 1), got {self.clip_epsilon}")
        if self.std_floor < 0 or self.opd_lambda < 0:
            raise ConfigError("std_floor and opd_lambda must be non-negative")
        if self.log_ratio_clamp <= 0 or self.icepop_threshold <= 0:
            raise ConfigError("log_ratio_clamp and icepop_threshold must be positive")

    @classmethod
    def from_dict(cls, obj: Mapping) -> "ObjectiveConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in obj.items() if k in known})


def group_advantages(rewards, cfg: ObjectiveConfig = ObjectiveConfig()) -> np.ndarray:
    """Group-relative advantages with population standard deviation."""
    r = np.asarray(rewards, dtype=np.float64)
    if cfg.advantage_mode is AdvantageMode.MEAN_ONLY:
        if r.size < 1:
            raise GroupTooSmall("MeanOnly needs at least one reward")
        return r - r.mean()
    if r.size < 2:
        raise GroupTooSmall("MeanStdNorm needs at least two rewards")
    centered = r - r.mean()
    std = r.std()
    if std == 0.0:
        return np.zeros_like(r)
    return centered / (std + cfg.std_floor)


@dataclass
class TrajectoryLogprobs:
    """Aligned per-token arrays for one trajectory."""

    train_logprobs: np.ndarray
    rollout_logprobs: np.ndarray
    origins: np.ndarray
    turns: Sequence[TurnSpan]

    def __post_init__(self):
        self.train_logprobs = np.asarray(self.train_logprobs, dtype=np.float64)
        self.rollout_logprobs = np.asarray(self.rollout_logprobs, dtype=np.float64)
        self.origins = np.asarray(self.origins, dtype=np.uint8)
        n = len(self.origins)
        if self.train_logprobs.shape != (n,) or self.rollout_logprobs.shape != (n,):
            raise AlignmentMismatch(
                f"{len(self.train_logprobs)} train / {len(self.rollout_logprobs)} rollout "
                f"log-probs for {n} tokens"
            )

    @classmethod
    def from_call(cls, call, train_logprobs) -> "TrajectoryLogprobs":
        return cls(train_logprobs, call.rollout_logprobs, call.origins, call.turns)

    def with_turns(self, turns) -> "TrajectoryLogprobs":
        return TrajectoryLogprobs(self.train_logprobs, self.rollout_logprobs, self.origins, list(turns))

    def as_single_turn(self) -> "TrajectoryLogprobs":
        """One assistant turn spanning every generated token (N = 1)."""
        gen = np.flatnonzero(self.origins == Origin.GENERATED)
        turns = [TurnSpan(int(gen[0]), int(gen[-1]) + 1, Role.ASSISTANT)] if gen.size else []
        return self.with_turns(turns)

    def as_token_turns(self) -> "TrajectoryLogprobs":
        """One assistant turn per generated token."""
        gen = np.flatnonzero(self.origins == Origin.GENERATED)
        return self.with_turns([TurnSpan(int(i), int(i) + 1, Role.ASSISTANT) for i in gen])


@dataclass
class TurnRatios:
    ratios: np.ndarray
    log_ratios: np.ndarray
    clamped: np.ndarray
    token_sets: list  # index arrays, one per policy turn


def _policy_token_sets(traj: TrajectoryLogprobs, keep=None) -> list:
    """Generated-token indices per assistant turn that contains any.

    Turns left empty by ``keep`` are dropped.  Raises if a generated token is outside every assistant turn.
    """
    gen = traj.origins == Origin.GENERATED
    covered = np.zeros(len(gen), dtype=np.int64)
    sets = []
    for t in traj.turns:
        if t.end > len(gen) or t.start < 0:
            raise AlignmentMismatch(f"turn [{t.start},{t.end}) outside {len(gen)} tokens")
        if t.role != Role.ASSISTANT:
            continue
        covered[t.start : t.end] += 1
        idx = np.arange(t.start, t.end)[gen[t.start : t.end]]
        if keep is not None:
            idx = idx[keep[idx]]
        if idx.size:
            sets.append(idx)
    bad = gen & (covered != 1)
    if np.any(bad):
        raise UncoveredGeneratedToken(f"generated token {int(np.flatnonzero(bad)[0])} not in exactly one assistant turn")
    return sets


def turn_ratios(traj: TrajectoryLogprobs, cfg: ObjectiveConfig = ObjectiveConfig(), keep=None) -> TurnRatios:
    """Per-turn importance ratios exp(sum over the turn of train - rollout).

    ``keep`` optionally drops tokens (e.g. IcePop) from the products.
    """
    if keep is not None:
        keep = np.asarray(keep, dtype=bool)
        if keep.shape != traj.origins.shape:
            raise AlignmentMismatch("keep mask length differs from trajectory")
    sets = _policy_token_sets(traj, keep)
    diff = traj.train_logprobs - traj.rollout_logprobs
    raw = np.array([diff[s].sum() for s in sets], dtype=np.float64)
    c = cfg.log_ratio_clamp
    logs = np.clip(raw, -c, c)
    return TurnRatios(np.exp(logs), logs, np.abs(raw) > c, sets)


@dataclass
class ObjectiveResult:
    value: float
    per_trajectory: np.ndarray
    grads: list  # d value / d train_logprobs, one array per trajectory
    ratios: list = field(default_factory=list)
    clip_fraction: float = 0.0


def _clipped_factors(ratios, clamped, adv, eps):
    """Per-turn s with min(rA, clip(r)A) = A * s, and gradient/clip flags.

    Factoring A out keeps the on-policy value (all r = 1) exactly equal to A.
    """
    clipped = np.clip(ratios, 1.0 - eps, 1.0 + eps)
    if adv >= 0:
        factors = np.minimum(ratios, clipped)
        unclipped_chosen = ratios <= clipped
    else:
        factors = np.maximum(ratios, clipped)
        unclipped_chosen = ratios >= clipped
    active = unclipped_chosen & ~clamped & (adv != 0.0)
    return factors, active, ~unclipped_chosen


def _surrogate(batch, advantages, cfg, keeps, pooled, split):
    advantages = np.asarray(advantages, dtype=np.float64)
    if len(advantages) != len(batch):
        raise AlignmentMismatch(f"{len(advantages)} advantages for {len(batch)} trajectories")
    keeps = keeps or [None] * len(batch)
    units = []
    for traj, adv, keep in zip(batch, advantages, keeps):
        tr = turn_ratios(split(traj), cfg, keep)
        factors, active, clip_hit = _clipped_factors(tr.ratios, tr.clamped, float(adv), cfg.clip_epsilon)
        units.append((traj, float(adv), tr, factors, active, clip_hit))

    total_turns = sum(len(u[3]) for u in units)
    per_traj, grads, ratios = [], [], []
    for traj, adv, tr, factors, active, _ in units:
        n = len(factors)
        denom = total_turns if pooled else n
        per_traj.append(adv * (factors.sum() / n) if n else 0.0)
        g = np.zeros(len(traj.origins))
        for idx, r, on in zip(tr.token_sets, tr.ratios, active):
            if on:
                g[idx] += adv * r / denom
        if not pooled:
            g /= len(batch)
        grads.append(g)
        ratios.append(tr)
    per_traj = np.array(per_traj)
    if pooled:
        value = sum(u[1] * u[3].sum() for u in units) / total_turns if total_turns else 0.0
    else:
        value = float(per_traj.mean()) if len(per_traj) else 0.0
    hits = sum(int(u[5].sum()) for u in units)
    return ObjectiveResult(float(value), per_traj, grads, ratios, hits / total_turns if total_turns else 0.0)


def turn_level_objective(batch, advantages, cfg: ObjectiveConfig = ObjectiveConfig(),
                         keeps=None, pooled: bool = False) -> ObjectiveResult:
    """Mean over trajectories of the per-turn clipped surrogate averaged over turns.

    With ``pooled=True`` all turns of the batch are averaged together instead.
    """
    return _surrogate(batch, advantages, cfg, keeps, pooled, lambda t: t)


def _reference(batch, advantages, cfg, keeps, per_token):
    advantages = np.asarray(advantages, dtype=np.float64)
    if len(advantages) != len(batch):
        raise AlignmentMismatch(f"{len(advantages)} advantages for {len(batch)} trajectories")
    keeps = keeps or [None] * len(batch)
    eps, c = cfg.clip_epsilon, cfg.log_ratio_clamp
    values, grads = [], []
    for traj, A, keep in zip(batch, advantages, keeps):
        sel = traj.origins == Origin.GENERATED
        if keep is not None:
            sel = sel & np.asarray(keep, dtype=bool)
        idx = np.flatnonzero(sel)
        d = (traj.train_logprobs - traj.rollout_logprobs)[idx]
        groups = [idx[k : k + 1] for k in range(idx.size)] if per_token else ([idx] if idx.size else [])
        raw = d if per_token else np.array([d.sum()] if idx.size else [])
        r = np.exp(np.clip(raw, -c, c))
        plain, clipped = r * A, np.clip(r, 1 - eps, 1 + eps) * A
        g = np.zeros(len(traj.origins))
        if r.size:
            values.append(float(np.minimum(plain, clipped).mean()))
            live = (plain <= clipped) & (np.abs(raw) <= c) & (A != 0.0)
            for grp, rk, on in zip(groups, r, live):
                if on:
                    g[grp] += A * rk / r.size
        else:
            values.append(0.0)
        grads.append(g / len(batch))
    per_traj = np.array(values)
    return ObjectiveResult(float(per_traj.mean()) if len(batch) else 0.0, per_traj, grads)


def gspo_reference(batch, advantages, cfg: ObjectiveConfig = ObjectiveConfig(), keeps=None) -> ObjectiveResult:
    """Sequence-level surrogate: one ratio, the product over all generated tokens."""
    return _reference(batch, advantages, cfg, keeps, per_token=False)


def grpo_reference(batch, advantages, cfg: ObjectiveConfig = ObjectiveConfig(), keeps=None) -> ObjectiveResult:
    """Token-level surrogate: per-token ratio and clip, mean over generated tokens."""
    return _reference(batch, advantages, cfg, keeps, per_token=True)


@dataclass
class OpdResult:
    value: float
    grads: np.ndarray


def opd_loss(student_logprobs, teacher_logprobs, mask, cfg: ObjectiveConfig = ObjectiveConfig()) -> OpdResult:
    """Mean student-minus-teacher log-prob gap on sampled tokens.

    A single-sample reverse-KL estimate on the student's own rollouts; the
    gradient flows through the student log-probs only.
    """
    s = np.asarray(student_logprobs, dtype=np.float64)
    t = np.asarray(teacher_logprobs, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if not s.shape == t.shape == m.shape:
        raise AlignmentMismatch(f"shapes {s.shape}, {t.shape}, {m.shape} differ")
    if not np.all(np.isfinite(t[m])):
        raise AlignmentMismatch("teacher log-probs must be finite on sampled tokens")
    count = int(m.sum())
    grads = np.zeros_like(s)
    if count == 0:
        return OpdResult(0.0, grads)
    grads[m] = 1.0 / count
    return OpdResult(float((s[m] - t[m]).sum() / count), grads)


def combined_objective(turn: ObjectiveResult, opd: OpdResult, cfg: ObjectiveConfig = ObjectiveConfig()):
    """L_turn - lambda * OPD, with gradients on the concatenated trajectories."""
    value = turn.value - cfg.opd_lambda * opd.value
    flat = np.concatenate(turn.grads) if turn.grads else np.zeros(0)
    if flat.shape != opd.grads.shape:
        raise AlignmentMismatch("OPD gradients do not align with the batch")
    return value, flat - cfg.opd_lambda * opd.grads


@dataclass(frozen=True)
class CurationSample:
    answers: tuple
    gold: object
    K: int = 8

    def __post_init__(self):
        object.__setattr__(self, "answers", tuple(self.answers))
        if self.K < 1:
            raise ConfigError("K must be at least 1")
        if len(self.answers) != self.K:
            raise ConfigError(f"{len(self.answers)} answers for K={self.K}")


@dataclass(frozen=True)
class PassAtKDecision:
    r_hat: float
    correct: int
    retained: bool
    reason: str


def pass_at_k_filter(sample: CurationSample) -> PassAtKDecision:
    """Keep samples whose empirical success rate is strictly between 0 and 1."""
    correct = sum(1 for a in sample.answers if a == sample.gold)
    r_hat = correct / sample.K
    if correct == 0:
        return PassAtKDecision(r_hat, correct, False, "intractable")
    if correct == sample.K:
        return PassAtKDecision(r_hat, correct, False, "trivial")
    return PassAtKDecision(r_hat, correct, True, "")


PASS, FAIL = "Pass", "Fail"


@dataclass(frozen=True)
class TestOutcomes:
    __test__ = False  # not a pytest class

    fail_set_results: Mapping
    pass_set_results: Mapping

    def __post_init__(self):
        overlap = set(self.fail_set_results) & set(self.pass_set_results)
        if overlap:
            raise ConfigError(f"test ids in both sets: {sorted(overlap)}")


@dataclass(frozen=True)
class VerifyDecision:
    f2p: bool
    p2p: bool
    retained: bool
    vacuous_f2p: bool
    reason: str


def _normalise_outcome(test_id, value) -> bool:
    if isinstance(value, str) and value.capitalize() in (PASS, FAIL):
        return value.capitalize() == PASS
    if isinstance(value, bool):
        return value
    raise MissingTestResult(f"test {test_id!r} has no Pass/Fail result ({value!r})")


def f2p_p2p_verify(outcomes: TestOutcomes) -> VerifyDecision:
    """Retain iff every originally failing and every originally passing test passes."""
    f2p = all([_normalise_outcome(k, v) for k, v in outcomes.fail_set_results.items()])
    p2p = all([_normalise_outcome(k, v) for k, v in outcomes.pass_set_results.items()])
    reasons = [name for name, ok in (("F2P", f2p), ("P2P", p2p)) if not ok]
    return VerifyDecision(f2p, p2p, f2p and p2p, not outcomes.fail_set_results, "+".join(reasons))
