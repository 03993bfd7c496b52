"""Line-delimited JSON task records.

One task per line::

    {"task": {...TaskSpec...},
     "calls": [{"call_id", "tokens", "origins", "logprobs", "turns"}],
     "rewards": [...]}

Optional extras: a top-level ``vocab_size`` and per-call ``parent_hint`` and
``train_logprobs``.  Anything else is rejected in strict mode and dropped
with a warning otherwise.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .errors import InvalidRecord, ParseError
from .trajectory import LinearCall, Role, RolloutGroup, TaskSpec, TurnSpan

log = logging.getLogger(__name__)

TASK_FIELDS = ("env_id", "tools", "scaffold", "instruction", "verifier_id")
RECORD_FIELDS = {"task", "calls", "rewards", "vocab_size"}
REQUIRED_RECORD = ("task", "calls", "rewards")
CALL_FIELDS = {"call_id", "tokens", "origins", "logprobs", "turns", "parent_hint", "train_logprobs"}
REQUIRED_CALL = ("call_id", "tokens", "origins", "logprobs", "turns")
TURN_FIELDS = ("start", "end", "role")


@dataclass
class TaskRecord:
    task: TaskSpec
    calls: list
    rewards: list
    vocab_size: Optional[int] = None
    train_logprobs: dict = field(default_factory=dict)

    def group(self) -> RolloutGroup:
        # each call is its own trajectory with its own reward slot
        return RolloutGroup(self.task, [[c] for c in self.calls], self.rewards)


def _check_fields(obj, allowed, required, where, strict):
    if not isinstance(obj, dict):
        raise InvalidRecord(f"{where} must be an object")
    missing = [k for k in required if k not in obj]
    if missing:
        raise InvalidRecord(f"{where} missing field(s) {missing}")
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        if strict:
            raise InvalidRecord(f"{where} has unknown field(s) {unknown}")
        log.warning("%s: ignoring unknown field(s) %s", where, unknown)


def record_from_dict(obj: dict, strict: bool = False) -> TaskRecord:
    _check_fields(obj, RECORD_FIELDS, REQUIRED_RECORD, "record", strict)
    task_obj = obj["task"]
    _check_fields(task_obj, TASK_FIELDS, TASK_FIELDS, "task", strict)
    task = TaskSpec(**{k: task_obj[k] for k in TASK_FIELDS})
    vocab = obj.get("vocab_size")
    if vocab is not None and (not isinstance(vocab, int) or vocab <= 0):
        raise InvalidRecord("vocab_size must be a positive integer")

    calls, train = [], {}
    if not isinstance(obj["calls"], list) or not obj["calls"]:
        raise InvalidRecord("calls must be a non-empty list")
    for k, c in enumerate(obj["calls"]):
        where = f"calls[{k}]"
        _check_fields(c, CALL_FIELDS, REQUIRED_CALL, where, strict)
        turns = []
        for j, t in enumerate(c["turns"]):
            _check_fields(t, TURN_FIELDS, TURN_FIELDS, f"{where}.turns[{j}]", strict)
            turns.append(TurnSpan(int(t["start"]), int(t["end"]), Role.parse(t["role"])))
        for name in ("tokens", "origins"):
            if not all(isinstance(v, int) and not isinstance(v, bool) for v in c[name]):
                raise InvalidRecord(f"{where}.{name} must contain integers")
        if any(o not in (0, 1) for o in c["origins"]):
            raise InvalidRecord(f"{where}.origins must be 0 or 1")
        call = LinearCall.from_arrays(
            str(c["call_id"]),
            c["tokens"],
            c["origins"],
            c["logprobs"],
            turns,
            parent_hint=c.get("parent_hint"),
            vocab_size=vocab,
        )
        calls.append(call)
        if c.get("train_logprobs") is not None:
            lp = np.array([np.nan if v is None else v for v in c["train_logprobs"]], dtype=float)
            if lp.shape != (len(call),):
                raise InvalidRecord(f"{where}.train_logprobs length mismatch")
            train[call.call_id] = lp

    rewards = obj["rewards"]
    if not isinstance(rewards, list) or not all(
        isinstance(r, (int, float)) and not isinstance(r, bool) and math.isfinite(r)
        for r in rewards
    ):
        raise InvalidRecord("rewards must be a list of finite numbers")
    if len(rewards) != len(calls):
        raise InvalidRecord(f"{len(rewards)} rewards for {len(calls)} calls")
    return TaskRecord(task, calls, [float(r) for r in rewards], vocab, train)


def record_to_dict(rec: TaskRecord) -> dict:
    out = {"task": rec.task.to_dict(), "calls": []}
    if rec.vocab_size is not None:
        out["vocab_size"] = rec.vocab_size
    for call in rec.calls:
        entry = {
            "call_id": call.call_id,
            "tokens": [t.token_id for t in call.tokens],
            "origins": [int(t.origin) for t in call.tokens],
            "logprobs": [t.rollout_logprob for t in call.tokens],
            "turns": [{"start": t.start, "end": t.end, "role": t.role.label} for t in call.turns],
        }
        if call.parent_hint is not None:
            entry["parent_hint"] = call.parent_hint
        if call.call_id in rec.train_logprobs:
            entry["train_logprobs"] = [
                None if math.isnan(v) else float(v) for v in rec.train_logprobs[call.call_id]
            ]
        out["calls"].append(entry)
    out["rewards"] = list(rec.rewards)
    return out


def dumps_record(rec: TaskRecord) -> str:
    return json.dumps(record_to_dict(rec), separators=(",", ":"), allow_nan=False)


def iter_records(path, strict: bool = False) -> Iterator[TaskRecord]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON: {exc.msg}", line=lineno) from None
            try:
                yield record_from_dict(obj, strict=strict)
            except InvalidRecord as exc:
                raise ParseError(str(exc), line=lineno) from None


def read_records(path, strict: bool = False) -> list:
    return list(iter_records(path, strict=strict))


def write_records(path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(dumps_record(rec))
            fh.write("\n")
