"""A one-layer causal-attention network with exact analytic gradients.

Architecture, all float64::

    h0 = token_embedding[tok] + position_embedding[pos]
    a  = softmax_masked(h0 W_q (h0 W_k)^T / sqrt(D)) (h0 W_v)
    h  = h0 + a W_o
    logprob[i] = log_softmax(h[pred(i)] @ unembedding)[tok[i]]

``pred(i)`` is the token just before ``i`` on its own path (the latest
earlier token it may attend to).  A token with no predecessor is scored from
a zero context, i.e. ``-log V``, and carries no gradient.

Attention is evaluated in blocks of query rows against only the keys they
can see, so a tree-structured batch costs what its mask allows instead of
T^2.  The same block code serves dense masks, causal sequences and packed
trees.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _backend
from .errors import InstanceTooLarge, PositionOverflow, ShapeMismatch, TraceMismatch

PARAM_NAMES = (
    "token_embedding",
    "position_embedding",
    "W_q",
    "W_k",
    "W_v",
    "W_o",
    "unembedding",
)

LCG_MULTIPLIER = 6364136223846793005
LCG_INCREMENT = 1442695040888963407
_MASK64 = (1 << 64) - 1


class LCG64:
    """64-bit linear congruential stream (Knuth MMIX constants).

    ``state <- state * 6364136223846793005 + 1442695040888963407 mod 2^64``;
    a uniform draw is the top 53 bits of the new state times 2^-53.
    """

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state * LCG_MULTIPLIER + LCG_INCREMENT) & _MASK64
        return self.state

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))


@dataclass
class RefNetParams:
    token_embedding: np.ndarray
    position_embedding: np.ndarray
    W_q: np.ndarray
    W_k: np.ndarray
    W_v: np.ndarray
    W_o: np.ndarray
    unembedding: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self):
        for name in PARAM_NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        V, D = self.token_embedding.shape
        expected = {
            "position_embedding": (self.position_embedding.shape[0], D),
            "W_q": (D, D), "W_k": (D, D), "W_v": (D, D), "W_o": (D, D),
            "unembedding": (D, V),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeMismatch(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        for name in PARAM_NAMES:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ShapeMismatch(f"{name} has non-finite entries")

    @property
    def vocab_size(self) -> int:
        return self.token_embedding.shape[0]

    @property
    def dim(self) -> int:
        return self.token_embedding.shape[1]

    @property
    def max_positions(self) -> int:
        return self.position_embedding.shape[0]

    @property
    def num_parameters(self) -> int:
        return sum(getattr(self, n).size for n in PARAM_NAMES)

    def blocks(self) -> dict:
        return {n: getattr(self, n) for n in PARAM_NAMES}

    def copy(self) -> "RefNetParams":
        return RefNetParams(**{n: getattr(self, n).copy() for n in PARAM_NAMES}, seed=self.seed)

    @classmethod
    def zeros(cls, vocab_size: int, dim: int, max_positions: int) -> "RefNetParams":
        D, V = dim, vocab_size
        return cls(np.zeros((V, D)), np.zeros((max_positions, D)), np.zeros((D, D)),
                   np.zeros((D, D)), np.zeros((D, D)), np.zeros((D, D)), np.zeros((D, V)))

    @classmethod
    def init(cls, vocab_size: int, dim: int, max_positions: int, seed: int, scale: float = 0.5):
        """Uniform(-scale, scale) entries drawn from :class:`LCG64`.

        Blocks are filled in ``PARAM_NAMES`` order, each row-major.
        """
        rng = LCG64(seed)
        shapes = cls.zeros(vocab_size, dim, max_positions).blocks()
        filled = {}
        for name in PARAM_NAMES:
            n = shapes[name].size
            vals = np.fromiter((rng.uniform() for _ in range(n)), dtype=np.float64, count=n)
            filled[name] = (scale * (2.0 * vals - 1.0)).reshape(shapes[name].shape)
        return cls(**filled, seed=seed)

    def to_json(self) -> str:
        obj = {"seed": self.seed, "init": "lcg64-uniform",
               "vocab_size": self.vocab_size, "dim": self.dim, "max_positions": self.max_positions}
        obj.update({n: getattr(self, n).tolist() for n in PARAM_NAMES})
        return json.dumps(obj, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "RefNetParams":
        obj = json.loads(text)
        return cls(**{n: np.array(obj[n], dtype=np.float64) for n in PARAM_NAMES}, seed=obj.get("seed"))


def load_params(path) -> RefNetParams:
    with open(path, encoding="utf-8") as fh:
        return RefNetParams.from_json(fh.read())


def save_params(path, params: RefNetParams) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(params.to_json())


@dataclass
class _Block:
    rows: slice
    keys: np.ndarray
    local: np.ndarray  # (rows, keys) bool


@dataclass
class AttentionPlan:
    """Which keys each block of query rows attends to, plus path predecessors."""

    length: int
    blocks: list
    predecessors: np.ndarray

    @property
    def attended_pairs(self) -> int:
        return int(sum(b.local.sum() for b in self.blocks))

    @classmethod
    def causal(cls, T: int, chunk: int = 512) -> "AttentionPlan":
        blocks = []
        for a in range(0, T, chunk):
            b = min(T, a + chunk)
            local = np.arange(b)[None, :] <= np.arange(a, b)[:, None]
            blocks.append(_Block(slice(a, b), np.arange(b), local))
        return cls(T, blocks, np.arange(T, dtype=np.int64) - 1)

    @classmethod
    def from_mask(cls, mask, chunk: int = 512) -> "AttentionPlan":
        mask = np.asarray(mask, dtype=bool)
        T = mask.shape[0]
        if mask.shape != (T, T):
            raise ShapeMismatch(f"mask shape {mask.shape} is not square")
        if not np.all(np.diagonal(mask)):
            raise ShapeMismatch("mask diagonal must be all true")
        blocks = []
        for a in range(0, T, chunk):
            b = min(T, a + chunk)
            keys = np.flatnonzero(mask[a:b].any(axis=0))
            blocks.append(_Block(slice(a, b), keys, mask[a:b][:, keys]))
        earlier = np.tril(mask, k=-1)
        has = earlier.any(axis=1)
        last = T - 1 - np.argmax(earlier[:, ::-1], axis=1)
        pred = np.where(has, last, -1).astype(np.int64)
        return cls(T, blocks, pred)

    @classmethod
    def from_segments(cls, seg_of_token, seg_parent, seg_start, seg_end, chunk: int = 512):
        T = len(seg_of_token)
        blocks = []
        for s in range(len(seg_parent)):
            lo, hi = int(seg_start[s]), int(seg_end[s])
            if hi <= lo:
                continue
            ranges = []
            p = seg_parent[s]
            while p >= 0:
                ranges.append(np.arange(seg_start[p], seg_end[p]))
                p = seg_parent[p]
            anc = np.concatenate(ranges[::-1]) if ranges else np.empty(0, dtype=np.int64)
            for a in range(lo, hi, chunk):
                b = min(hi, a + chunk)
                keys = np.concatenate([anc, np.arange(lo, b)]).astype(np.int64)
                own = np.arange(lo, b)[None, :] <= np.arange(a, b)[:, None]
                local = np.concatenate([np.ones((b - a, len(anc)), dtype=bool), own], axis=1)
                blocks.append(_Block(slice(a, b), keys, local))
        pred = _backend.predecessors(seg_of_token, seg_parent, seg_start, seg_end)
        return cls(T, blocks, pred)

    @classmethod
    def from_batch(cls, batch, chunk: int = 512) -> "AttentionPlan":
        return cls.from_segments(*batch.segment_arrays(), chunk=chunk)


_CACHE_LIMIT = 1 << 22


@dataclass
class ForwardTrace:
    params: RefNetParams
    token_ids: np.ndarray
    position_ids: np.ndarray
    plan: AttentionPlan
    h0: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    mix: np.ndarray
    h: np.ndarray
    logits: np.ndarray
    log_softmax: np.ndarray
    attention: Optional[list] = field(default=None, repr=False)


def _attend(q, k, local, scale):
    s = (q @ k.T) * scale
    s = np.where(local, s, -np.inf)
    s -= s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def _as_plan(mask, T: int) -> AttentionPlan:
    plan = mask if isinstance(mask, AttentionPlan) else AttentionPlan.from_mask(mask)
    if plan.length != T:
        raise ShapeMismatch(f"mask covers {plan.length} tokens, sequence has {T}")
    return plan


def forward_logprobs(params: RefNetParams, token_ids, position_ids, mask):
    """Per-token next-token log-probabilities under an arbitrary mask.

    ``mask`` is a boolean T x T array or a prebuilt :class:`AttentionPlan`.
    Returns ``(logprobs, trace)``.
    """
    tok = np.asarray(token_ids, dtype=np.int64)
    pos = np.asarray(position_ids, dtype=np.int64)
    T = len(tok)
    if pos.shape != (T,):
        raise ShapeMismatch(f"{len(pos)} position ids for {T} tokens")
    if T and (tok.min() < 0 or tok.max() >= params.vocab_size):
        raise ShapeMismatch(f"token id outside vocabulary of size {params.vocab_size}")
    if T and (pos.min() < 0 or pos.max() >= params.max_positions):
        raise PositionOverflow(f"position {pos.max()} >= max_positions {params.max_positions}")
    plan = _as_plan(mask, T)

    scale = 1.0 / np.sqrt(params.dim)
    h0 = params.token_embedding[tok] + params.position_embedding[pos]
    q, k, v = h0 @ params.W_q, h0 @ params.W_k, h0 @ params.W_v
    mix = np.zeros_like(h0)
    cache = [] if sum(b.local.size for b in plan.blocks) <= _CACHE_LIMIT else None
    for blk in plan.blocks:
        att = _attend(q[blk.rows], k[blk.keys], blk.local, scale)
        mix[blk.rows] = att @ v[blk.keys]
        if cache is not None:
            cache.append(att)
    h = h0 + mix @ params.W_o
    logits = h @ params.unembedding
    zmax = logits.max(axis=1, keepdims=True)
    lse = zmax + np.log(np.exp(logits - zmax).sum(axis=1, keepdims=True))
    lsm = logits - lse

    pred = plan.predecessors
    out = np.full(T, -np.log(params.vocab_size))
    sel = pred >= 0
    out[sel] = lsm[pred[sel], tok[sel]]
    trace = ForwardTrace(params, tok, pos, plan, h0, q, k, v, mix, h, logits, lsm, cache)
    return out, trace


def backward(trace: ForwardTrace, per_token_grads) -> RefNetParams:
    """Exact gradient of sum_i g_i * logprob_i with respect to every parameter."""
    g = np.asarray(per_token_grads, dtype=np.float64)
    T = len(trace.token_ids)
    if g.shape != (T,):
        raise TraceMismatch(f"{g.shape} upstream grads for a trace of {T} tokens")
    p = trace.params
    tok, pred = trace.token_ids, trace.plan.predecessors
    scale = 1.0 / np.sqrt(p.dim)

    sel = (pred >= 0) & (g != 0)
    rows, targets, gs = pred[sel], tok[sel], g[sel]
    probs = np.exp(trace.log_softmax[rows])
    G_z = np.zeros_like(trace.logits)
    np.add.at(G_z, rows, -gs[:, None] * probs)
    np.add.at(G_z, (rows, targets), gs)

    d_unemb = trace.h.T @ G_z
    G_h = G_z @ p.unembedding.T
    d_Wo = trace.mix.T @ G_h
    G_mix = G_h @ p.W_o.T
    G_h0 = G_h.copy()

    G_q = np.zeros_like(trace.q)
    G_k = np.zeros_like(trace.k)
    G_v = np.zeros_like(trace.v)
    for n, blk in enumerate(trace.plan.blocks):
        qb, kb, vb = trace.q[blk.rows], trace.k[blk.keys], trace.v[blk.keys]
        att = trace.attention[n] if trace.attention is not None else _attend(qb, kb, blk.local, scale)
        gm = G_mix[blk.rows]
        G_v[blk.keys] += att.T @ gm
        G_att = gm @ vb.T
        G_s = att * (G_att - (G_att * att).sum(axis=1, keepdims=True))
        G_q[blk.rows] += (G_s @ kb) * scale
        G_k[blk.keys] += (G_s.T @ qb) * scale

    h0 = trace.h0
    d_Wq, d_Wk, d_Wv = h0.T @ G_q, h0.T @ G_k, h0.T @ G_v
    G_h0 += G_q @ p.W_q.T + G_k @ p.W_k.T + G_v @ p.W_v.T
    d_tok = np.zeros_like(p.token_embedding)
    d_pos = np.zeros_like(p.position_embedding)
    np.add.at(d_tok, tok, G_h0)
    np.add.at(d_pos, trace.position_ids, G_h0)
    return RefNetParams(d_tok, d_pos, d_Wq, d_Wk, d_Wv, d_Wo, d_unemb)


def flat_vector(params: RefNetParams) -> np.ndarray:
    return np.concatenate([getattr(params, n).ravel() for n in PARAM_NAMES])


def relative_error(a: RefNetParams, b: RefNetParams) -> float:
    """max |a - b| over all parameters, relative to max |b|."""
    va, vb = flat_vector(a), flat_vector(b)
    scale = max(np.abs(vb).max(initial=0.0), np.abs(va).max(initial=0.0))
    diff = np.abs(va - vb).max(initial=0.0)
    return 0.0 if diff == 0.0 else diff / scale if scale > 0 else float("inf")


def add_params(a: RefNetParams, b: RefNetParams) -> RefNetParams:
    return RefNetParams(**{n: getattr(a, n) + getattr(b, n) for n in PARAM_NAMES})


def path_coefficient_grads(params: RefNetParams, calls, coefficients) -> RefNetParams:
    """Sum over independent causal passes of coefficient * sum of generated logprobs."""
    total = None
    for call, c in zip(calls, coefficients):
        tok = call.token_ids
        _, trace = forward_logprobs(params, tok, np.arange(len(tok)), AttentionPlan.causal(len(tok)))
        g = np.where(call.origins == 1, float(c), 0.0)
        grads = backward(trace, g)
        total = grads if total is None else add_params(total, grads)
    return total


def packed_grads(params: RefNetParams, batch) -> RefNetParams:
    """One pass over the flattened tree, upstream gradient = loss weights."""
    _, trace = forward_logprobs(params, batch.token_ids, batch.position_ids, AttentionPlan.from_batch(batch))
    return backward(trace, batch.loss_weights)


@dataclass
class GradcheckInstance:
    token_ids: np.ndarray
    position_ids: np.ndarray
    mask: np.ndarray
    upstream: np.ndarray


@dataclass
class GradcheckReport:
    errors: dict
    rtol: float
    atol: float

    @property
    def failed(self) -> list:
        return [n for n in PARAM_NAMES if self.errors[n] > self.rtol]

    @property
    def passed(self) -> bool:
        return not self.failed

    @property
    def max_error(self) -> float:
        return max(self.errors.values())


MAX_GRADCHECK_PARAMS = 10_000


def gradcheck(params: RefNetParams, instance: GradcheckInstance, rtol: float = 1e-5,
              atol: float = 1e-8, step: float = 1e-6, analytic: Optional[RefNetParams] = None):
    """Compare analytic gradients with central finite differences, per block.

    A block's error is ``max|analytic - numeric|`` over the block divided by
    the largest magnitude of either gradient over all parameters (floored at
    ``atol``).  Normalising by the whole gradient keeps blocks whose true
    gradient is near zero from being judged on finite-difference roundoff.
    Pass ``analytic`` to check a supplied gradient instead of the one
    computed here.
    """
    if params.num_parameters > MAX_GRADCHECK_PARAMS:
        raise InstanceTooLarge(f"{params.num_parameters} parameters > {MAX_GRADCHECK_PARAMS}")
    plan = _as_plan(instance.mask, len(instance.token_ids))
    g = np.asarray(instance.upstream, dtype=np.float64)

    def loss(p):
        lp, _ = forward_logprobs(p, instance.token_ids, instance.position_ids, plan)
        return float(g @ lp)

    if analytic is None:
        _, trace = forward_logprobs(params, instance.token_ids, instance.position_ids, plan)
        analytic = backward(trace, g)
    work = params.copy()
    numeric = {}
    for name in PARAM_NAMES:
        arr = getattr(work, name)
        num = np.zeros_like(arr)
        flat, nflat = arr.reshape(-1), num.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            up = loss(work)
            flat[idx] = orig - step
            down = loss(work)
            flat[idx] = orig
            nflat[idx] = (up - down) / (2 * step)
        numeric[name] = num
    scale = max(
        max(np.abs(getattr(analytic, n)).max(initial=0.0) for n in PARAM_NAMES),
        max(np.abs(numeric[n]).max(initial=0.0) for n in PARAM_NAMES),
        atol,
    )
    errors = {
        n: float(np.abs(getattr(analytic, n) - numeric[n]).max(initial=0.0) / scale) for n in PARAM_NAMES
    }
    return GradcheckReport(errors, rtol, atol)
