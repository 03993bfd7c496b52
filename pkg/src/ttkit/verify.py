"""Oracle checks on packed batches, shared by ``ttkit check`` and the tests."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import batchio, refnet
from .errors import TTKitError
from .objectives import (
    AdvantageMode,
    ObjectiveConfig,
    TrajectoryLogprobs,
    group_advantages,
    grpo_reference,
    gspo_reference,
    turn_level_objective,
)
from .packing import (
    NormalizationMode,
    PackedBatch,
    attention_mask_rows,
    build_attention_mask,
    check_segment_table,
    dfs_flatten,
    unpack_paths,
)
from .trajectory import build_tree

GRADEQUIV_RTOL = 1e-10
IDENTITY_TOL = 1e-12
DENSE_MASK_LIMIT = 2048
SAMPLED_MASK_ROWS = 512


@dataclass
class CheckResult:
    suite: str
    target: str
    passed: bool
    detail: str = ""
    max_error: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


def default_params(batch: PackedBatch, seed: int, dim: int = 4) -> refnet.RefNetParams:
    vocab = int(batch.token_ids.max()) + 1 if batch.num_tokens else 1
    positions = int(batch.position_ids.max()) + 1 if batch.num_tokens else 1
    return refnet.RefNetParams.init(vocab, dim, positions, seed)


def path_coefficients(calls, mode: NormalizationMode) -> list:
    """Per-trajectory loss coefficient of the per-path baseline."""
    if mode is NormalizationMode.PATH_SUM:
        return [1.0] * len(calls)
    P = len(calls)
    return [1.0 / (P * c.num_generated) for c in calls]


def check_roundtrip(batch: PackedBatch, target: str, source_calls=None) -> CheckResult:
    try:
        paths = unpack_paths(batch)
        rebuilt = dfs_flatten(build_tree(paths), batch.mode)
    except TTKitError as exc:
        return CheckResult("roundtrip", target, False, f"{type(exc).__name__}: {exc}")
    if batchio.to_bytes(rebuilt) != batchio.to_bytes(batch):
        return CheckResult("roundtrip", target, False, "re-packed batch differs from the original")
    if source_calls is not None:
        by_id = {c.call_id: c for c in source_calls}
        if set(by_id) != {p.call_id for p in paths}:
            return CheckResult("roundtrip", target, False, "path set differs from source calls")
        for p in paths:
            src = by_id[p.call_id]
            if p.tokens != src.tokens or p.turns != src.turns:
                return CheckResult("roundtrip", target, False, f"path {p.call_id!r} differs from its call")
    return CheckResult("roundtrip", target, True, f"{len(paths)} paths reconstructed")


def brute_force_rows(batch: PackedBatch, rows) -> np.ndarray:
    """Mask rows from explicit path enumeration: j is visible to i iff j is
    on a path through i at or before i's place on that path."""
    rows = list(rows)
    where = {}
    for idx in batch.path_token_indices():
        for pos, i in enumerate(idx):
            where.setdefault(int(i), (idx, pos))
    out = np.zeros((len(rows), batch.num_tokens), dtype=bool)
    for r, i in enumerate(rows):
        if i not in where:
            raise ValueError(f"token {i} lies on no path")
        idx, pos = where[i]
        out[r, idx[: pos + 1]] = True
    return out


def check_mask(batch: PackedBatch, target: str, seed: int = 0) -> CheckResult:
    try:
        check_segment_table(batch)
    except TTKitError as exc:
        return CheckResult("mask", target, False, str(exc))
    T = batch.num_tokens
    for k, idx in enumerate(batch.path_token_indices()):
        if not np.array_equal(batch.position_ids[idx], np.arange(len(idx))):
            return CheckResult("mask", target, False, f"positions of trajectory {k} are not path offsets")
    if T <= DENSE_MASK_LIMIT:
        rows = np.arange(T)
        got = build_attention_mask(batch)
    else:
        rng = np.random.default_rng(seed)
        edges = [s.flat_start for s in batch.segments if s.length] + [s.flat_end - 1 for s in batch.segments if s.length]
        rows = np.unique(np.concatenate([rng.choice(T, SAMPLED_MASK_ROWS, replace=False), edges]))
        got = attention_mask_rows(batch, rows)
    try:
        want = brute_force_rows(batch, rows.tolist())
    except ValueError as exc:
        return CheckResult("mask", target, False, str(exc))
    bad = np.flatnonzero((got != want).any(axis=1))
    if bad.size:
        return CheckResult("mask", target, False, f"mask row {int(rows[bad[0]])} differs from path enumeration")
    return CheckResult("mask", target, True, f"{len(rows)} of {T} rows checked")


def check_gradequiv(batch: PackedBatch, target: str, params=None, seed: int = 0) -> CheckResult:
    try:
        paths = unpack_paths(batch)
        params = params or default_params(batch, seed)
        coeffs = path_coefficients(paths, batch.mode)
    except TTKitError as exc:
        return CheckResult("gradequiv", target, False, f"{type(exc).__name__}: {exc}")
    baseline = refnet.path_coefficient_grads(params, paths, coeffs)
    packed = refnet.packed_grads(params, batch)
    err = refnet.relative_error(packed, baseline)
    ok = err <= GRADEQUIV_RTOL
    return CheckResult("gradequiv", target, ok, f"max relative error {err:.3e} ({batch.mode.label})", err)


def check_objective(batch: PackedBatch, target: str, params=None, rewards=None, seed: int = 0,
                    cfg: ObjectiveConfig = ObjectiveConfig()) -> CheckResult:
    """Objective identities on the batch's trajectories.

    Training log-probs are read off one packed forward pass and compared with
    independent per-path passes; then the GSPO/GRPO reductions and the
    on-policy fixed point are checked.
    """
    try:
        paths = unpack_paths(batch)
        params = params or default_params(batch, seed)
    except TTKitError as exc:
        return CheckResult("objective", target, False, f"{type(exc).__name__}: {exc}")
    flat_lp, _ = refnet.forward_logprobs(
        params, batch.token_ids, batch.position_ids, refnet.AttentionPlan.from_batch(batch)
    )
    views, max_lp_gap = [], 0.0
    for call, idx in zip(paths, batch.path_token_indices()):
        lp, _ = refnet.forward_logprobs(params, call.token_ids, np.arange(len(call)),
                                        refnet.AttentionPlan.causal(len(call)))
        max_lp_gap = max(max_lp_gap, float(np.abs(flat_lp[idx] - lp).max()))
        views.append(TrajectoryLogprobs.from_call(call, flat_lp[idx]))
    if rewards is None:
        rewards = np.random.default_rng(seed).integers(0, 2, len(views)).astype(float)
    if len(views) < 2:
        cfg = ObjectiveConfig(**{**cfg.__dict__, "advantage_mode": AdvantageMode.MEAN_ONLY})
    adv = group_advantages(rewards, cfg)

    gspo_res = abs(
        turn_level_objective([v.as_single_turn() for v in views], adv, cfg).value
        - gspo_reference(views, adv, cfg).value
    )
    grpo_res = abs(
        turn_level_objective([v.as_token_turns() for v in views], adv, cfg).value
        - grpo_reference(views, adv, cfg).value
    )
    on_policy = [TrajectoryLogprobs(v.rollout_logprobs, v.rollout_logprobs, v.origins, v.turns) for v in views]
    fixed = turn_level_objective(on_policy, adv, cfg)
    fixed_ok = fixed.value == float(np.mean(adv)) and fixed.clip_fraction == 0.0
    worst = max(gspo_res, grpo_res)
    ok = worst <= IDENTITY_TOL and max_lp_gap <= GRADEQUIV_RTOL and fixed_ok
    detail = (f"gspo {gspo_res:.1e}, grpo {grpo_res:.1e}, packed-vs-path logprob {max_lp_gap:.1e}, "
              f"on-policy {'exact' if fixed_ok else 'BROKEN'}")
    return CheckResult("objective", target, ok, detail, worst)


SUITES = ("roundtrip", "mask", "gradequiv", "objective")


def run_suites(batch: PackedBatch, target: str, suites, seed: int = 0, source_calls=None,
               rewards=None) -> list:
    out = []
    for suite in suites:
        if suite == "roundtrip":
            out.append(check_roundtrip(batch, target, source_calls))
        elif suite == "mask":
            out.append(check_mask(batch, target, seed))
        elif suite == "gradequiv":
            out.append(check_gradequiv(batch, target, seed=seed))
        elif suite == "objective":
            out.append(check_objective(batch, target, rewards=rewards, seed=seed))
        else:
            raise ValueError(f"unknown suite {suite!r}")
    return out
