"""TTK1 packed-batch container and its JSON mirror.

Binary layout (all little-endian, sections in this order)::

    header      magic "TTK1", version u32, T u64, segment_count u64, mode u8
    token_ids   u32[T]
    origins     u8[T]
    position_ids u32[T]
    loss_weights f64[T]
    logprobs    presence bitmap u8[ceil(T/8)] (bit i%8 of byte i//8), f64[T]
    segments    segment_count x {u64 id, i64 parent|-1, u64 flat_start,
                                 u64 flat_end, u64 path_position_start}
    turns       u64 count, count x {u64 segment_id, u32 start, u32 end,
                                    u8 role, u32 turn_index, u32 trajectory}
    paths       u64 count, count x {u64 terminal_segment_id, u32 n, n bytes utf-8 call_id}

Absent log-probabilities are written as 0.0 with a clear presence bit.
"""

from __future__ import annotations

import json
import math
import struct

import numpy as np

from .errors import CorruptBatchFile
from .packing import NormalizationMode, PackedBatch, PathEntry, SegmentEntry, TurnEntry
from .trajectory import Role

MAGIC = b"TTK1"
VERSION = 1
_HEADER = struct.Struct("<4sIQQB")
_SEGMENT = np.dtype(
    [("id", "<u8"), ("parent", "<i8"), ("start", "<u8"), ("end", "<u8"), ("pos", "<u8")]
)
_TURN = np.dtype(
    [("seg", "<u8"), ("start", "<u4"), ("end", "<u4"), ("role", "u1"), ("n", "<u4"), ("traj", "<u4")]
)
_U64 = struct.Struct("<Q")
_U32 = struct.Struct("<I")


def to_bytes(batch: PackedBatch) -> bytes:
    T = batch.num_tokens
    present = ~np.isnan(batch.rollout_logprobs)
    parts = [
        _HEADER.pack(MAGIC, VERSION, T, len(batch.segments), batch.mode.value),
        batch.token_ids.astype("<u4").tobytes(),
        batch.origins.astype("u1").tobytes(),
        batch.position_ids.astype("<u4").tobytes(),
        batch.loss_weights.astype("<f8").tobytes(),
        np.packbits(present, bitorder="little").tobytes(),
        np.where(present, batch.rollout_logprobs, 0.0).astype("<f8").tobytes(),
    ]
    seg = np.array(
        [
            (s.segment_id, -1 if s.parent_segment_id is None else s.parent_segment_id,
             s.flat_start, s.flat_end, s.path_position_start)
            for s in batch.segments
        ],
        dtype=_SEGMENT,
    )
    parts.append(seg.tobytes())
    turns = np.array(
        [(e.segment_id, e.start, e.end, int(e.role), e.turn_index, e.trajectory) for e in batch.turn_table],
        dtype=_TURN,
    )
    parts += [_U64.pack(len(turns)), turns.tobytes(), _U64.pack(len(batch.paths))]
    for p in batch.paths:
        name = p.call_id.encode("utf-8")
        parts += [_U64.pack(p.terminal_segment_id), _U32.pack(len(name)), name]
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.data):
            raise CorruptBatchFile(f"truncated at byte {self.pos} (need {n} more)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def array(self, dtype, count: int) -> np.ndarray:
        dtype = np.dtype(dtype)
        return np.frombuffer(self.take(dtype.itemsize * count), dtype=dtype, count=count)

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))


def from_bytes(data: bytes) -> PackedBatch:
    r = _Reader(data)
    magic, version, T, S, mode = r.unpack(_HEADER)
    if magic != MAGIC:
        raise CorruptBatchFile(f"bad magic {bytes(magic)!r}")
    if version != VERSION:
        raise CorruptBatchFile(f"unsupported version {version}")
    try:
        mode = NormalizationMode(mode)
    except ValueError:
        raise CorruptBatchFile(f"unknown normalization mode {mode}") from None
    token_ids = r.array("<u4", T).astype(np.int64)
    origins = r.array("u1", T).copy()
    position_ids = r.array("<u4", T).astype(np.int64)
    loss_weights = r.array("<f8", T).astype(np.float64)
    present = np.unpackbits(r.array("u1", (T + 7) // 8), bitorder="little", count=T).astype(bool)
    values = r.array("<f8", T).astype(np.float64)
    logprobs = np.where(present, values, np.nan)
    segments = [
        SegmentEntry(int(s["id"]), None if s["parent"] < 0 else int(s["parent"]),
                     int(s["start"]), int(s["end"]), int(s["pos"]))
        for s in r.array(_SEGMENT, S)
    ]
    (n_turns,) = r.unpack(_U64)
    try:
        turns = [
            TurnEntry(int(t["seg"]), int(t["start"]), int(t["end"]), Role(int(t["role"])),
                      int(t["n"]), int(t["traj"]))
            for t in r.array(_TURN, n_turns)
        ]
    except ValueError as exc:
        raise CorruptBatchFile(str(exc)) from None
    (n_paths,) = r.unpack(_U64)
    paths = []
    for _ in range(n_paths):
        (sid,) = r.unpack(_U64)
        (n,) = r.unpack(_U32)
        paths.append(PathEntry(int(sid), bytes(r.take(n)).decode("utf-8")))
    if r.pos != len(r.data):
        raise CorruptBatchFile(f"{len(r.data) - r.pos} trailing bytes")
    return PackedBatch(token_ids, origins, position_ids, loss_weights, logprobs,
                       segments, turns, paths, mode)


def write_batch(path, batch: PackedBatch) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(batch))


def read_batch(path) -> PackedBatch:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:1] == b"{":
        return from_json(data.decode("utf-8"))
    return from_bytes(data)


def to_json(batch: PackedBatch) -> str:
    obj = {
        "format": "TTK1-json",
        "version": VERSION,
        "mode": batch.mode.name,
        "token_ids": batch.token_ids.tolist(),
        "origins": batch.origins.tolist(),
        "position_ids": batch.position_ids.tolist(),
        "loss_weights": batch.loss_weights.tolist(),
        "rollout_logprobs": [None if math.isnan(v) else v for v in batch.rollout_logprobs.tolist()],
        "segments": [
            [s.segment_id, s.parent_segment_id, s.flat_start, s.flat_end, s.path_position_start]
            for s in batch.segments
        ],
        "turn_table": [
            [e.segment_id, e.start, e.end, e.role.label, e.turn_index, e.trajectory]
            for e in batch.turn_table
        ],
        "paths": [[p.terminal_segment_id, p.call_id] for p in batch.paths],
    }
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def from_json(text: str) -> PackedBatch:
    try:
        obj = json.loads(text)
        if obj.get("format") != "TTK1-json":
            raise CorruptBatchFile("not a TTK1 JSON mirror")
        lp = np.array([np.nan if v is None else v for v in obj["rollout_logprobs"]], dtype=np.float64)
        return PackedBatch(
            np.array(obj["token_ids"], dtype=np.int64),
            np.array(obj["origins"], dtype=np.uint8),
            np.array(obj["position_ids"], dtype=np.int64),
            np.array(obj["loss_weights"], dtype=np.float64),
            lp,
            [SegmentEntry(*s) for s in obj["segments"]],
            [TurnEntry(s, a, b, Role.parse(r), n, t) for s, a, b, r, n, t in obj["turn_table"]],
            [PathEntry(s, c) for s, c in obj["paths"]],
            NormalizationMode[obj["mode"]],
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CorruptBatchFile):
            raise
        raise CorruptBatchFile(f"bad JSON batch: {exc}") from None
