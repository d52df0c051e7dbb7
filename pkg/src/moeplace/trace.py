"""Routing traces: per-layer, per-token top-k expert selections.

A trace is held as a dense ``(num_layers, num_tokens, top_k)`` integer array.
On disk it is JSON Lines: a header object followed by one record per
``(layer, token)`` pair, sorted by layer then token::

    {"layers":2,"experts":4,"top_k":2,"tokens":2}
    {"l":0,"t":0,"e":[0,1]}
    ...
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass
from typing import BinaryIO, Iterator, NamedTuple

import numpy as np

from .errors import IntegrityError, TraceFormatError


@dataclass(frozen=True)
class ModelShape:
    num_layers: int
    num_experts: int
    top_k: int

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError(f"num_layers must be >= 1, got {self.num_layers}")
        if not 1 <= self.top_k <= self.num_experts:
            raise ValueError(
                f"top_k must lie in [1, num_experts={self.num_experts}], got {self.top_k}"
            )


# Layer/expert/top-k counts of the MoE models used for evaluation.
PRESETS = {
    "olmoe": ModelShape(num_layers=16, num_experts=64, top_k=8),
    "deepseek_v2_lite": ModelShape(num_layers=26, num_experts=64, top_k=6),
    "qwen3_30b": ModelShape(num_layers=48, num_experts=128, top_k=8),
}


class TraceRecord(NamedTuple):
    layer: int
    token: int
    experts: tuple


class RoutingTrace:
    """Expert selections for every (layer, token) pair.

    ``experts[l, t]`` holds the ``top_k`` distinct experts chosen for token
    ``t`` at layer ``l``, in gate order.
    """

    def __init__(self, shape: ModelShape, experts):
        experts = np.asarray(experts)
        if experts.size == 0:
            experts = experts.reshape(shape.num_layers, 0, shape.top_k)
        if experts.ndim != 3 or experts.shape[0] != shape.num_layers or experts.shape[2] != shape.top_k:
            raise IntegrityError(
                f"expert array of shape {experts.shape} does not match "
                f"(layers={shape.num_layers}, tokens, top_k={shape.top_k})"
            )
        self.shape = shape
        self.experts = experts.astype(np.int32, copy=False)
        self.experts.setflags(write=False)

    @property
    def num_tokens(self) -> int:
        return self.experts.shape[1]

    def records(self) -> Iterator[TraceRecord]:
        for layer in range(self.shape.num_layers):
            for token in range(self.num_tokens):
                yield TraceRecord(layer, token, tuple(int(e) for e in self.experts[layer, token]))

    def validate(self) -> None:
        """Raise IntegrityError if any record is out of range or repeats an expert."""
        e = self.experts
        if e.size == 0:
            return
        if e.min() < 0 or e.max() >= self.shape.num_experts:
            bad = np.argwhere((e < 0) | (e >= self.shape.num_experts))[0]
            raise IntegrityError(
                f"expert index out of range at layer {bad[0]}, token {bad[1]}"
            )
        if self.shape.top_k > 1:
            srt = np.sort(e, axis=2)
            dup = (np.diff(srt, axis=2) == 0).any(axis=2)
            if dup.any():
                layer, token = np.argwhere(dup)[0]
                raise IntegrityError(f"duplicate expert at layer {layer}, token {token}")

    def __eq__(self, other):
        if not isinstance(other, RoutingTrace):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.experts, other.experts)

    def __repr__(self):
        s = self.shape
        return (
            f"RoutingTrace(layers={s.num_layers}, experts={s.num_experts}, "
            f"top_k={s.top_k}, tokens={self.num_tokens})"
        )


def trace_hash(trace: RoutingTrace) -> str:
    h = hashlib.sha256()
    s = trace.shape
    h.update(f"{s.num_layers},{s.num_experts},{s.top_k},{trace.num_tokens};".encode())
    h.update(trace.experts.astype("<i4").tobytes())
    return h.hexdigest()


def concat_traces(traces) -> RoutingTrace:
    """Join traces of identical shape along the token axis (joint profiling)."""
    traces = list(traces)
    if not traces:
        raise ValueError("no traces to concatenate")
    shape = traces[0].shape
    for t in traces[1:]:
        if t.shape != shape:
            raise IntegrityError(f"cannot concatenate traces of shapes {shape} and {t.shape}")
    return RoutingTrace(shape, np.concatenate([t.experts for t in traces], axis=1))


# --- synthetic generation -------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of a planted-structure trace.

    Experts of each layer are split into ``num_blocks`` co-activation blocks
    by a permutation drawn from ``layout_seed`` (defaults to ``seed``), so two
    traces sharing ``layout_seed`` but differing in ``seed`` have the same
    block structure and independent token draws.
    """

    shape: ModelShape
    num_tokens: int
    num_blocks: int = 1
    within_block_prob: float = 0.0
    popularity_skew: float = 0.0
    seed: int = 0
    layout_seed: int | None = None

    def __post_init__(self):
        if self.num_tokens < 0:
            raise ValueError("num_tokens must be non-negative")
        if not 1 <= self.num_blocks <= self.shape.num_experts:
            raise ValueError(
                f"num_blocks must lie in [1, {self.shape.num_experts}], got {self.num_blocks}"
            )
        if not 0.0 <= self.within_block_prob <= 1.0:
            raise ValueError("within_block_prob must lie in [0, 1]")
        if self.popularity_skew < 0:
            raise ValueError("popularity_skew must be >= 0")


def _zipf(m: int, a: float) -> np.ndarray:
    w = np.arange(1, m + 1, dtype=float) ** -a
    return w / w.sum()


def block_layout(spec: SyntheticSpec, layer: int) -> list[np.ndarray]:
    """Expert blocks of one layer, each listed from most to least popular."""
    layout_seed = spec.seed if spec.layout_seed is None else spec.layout_seed
    rng = np.random.default_rng((layout_seed, layer, 0))
    perm = rng.permutation(spec.shape.num_experts)
    return np.array_split(perm, spec.num_blocks)


def _layer_mixtures(spec: SyntheticSpec, blocks):
    """Per-home-block selection distributions over experts, plus the global one."""
    n = spec.shape.num_experts
    a = spec.popularity_skew
    # global popularity interleaves blocks by their within-block rank
    order = sorted(
        ((rank, b, int(e)) for b, members in enumerate(blocks) for rank, e in enumerate(members))
    )
    glob = np.empty(n)
    glob[[e for _, _, e in order]] = _zipf(n, a)
    mix = np.empty((len(blocks), n))
    p = spec.within_block_prob
    for b, members in enumerate(blocks):
        inside = np.zeros(n)
        inside[members] = _zipf(len(members), a)
        mix[b] = p * inside + (1.0 - p) * glob
    return mix, glob


def _draw(stacked: np.ndarray, n: int, which: np.ndarray, u: np.ndarray) -> np.ndarray:
    # inverse CDF with a per-draw row choice; row b of the CDF is shifted by +b
    idx = np.searchsorted(stacked, which + u, side="right") - which * n
    return np.minimum(idx, n - 1)


def generate_synthetic_trace(spec: SyntheticSpec) -> RoutingTrace:
    """Sample a trace with planted co-activation blocks and Zipf popularity.

    For each (layer, token) a home block is drawn Zipf over blocks. Each of the
    k selections comes from the home block with probability
    ``within_block_prob`` and from all experts otherwise, Zipf-weighted
    within the pool. Repeated experts are rejected and redrawn; when the
    rejection loop stalls the remaining draw is taken directly from the
    same mixture restricted to unused experts (which is the distribution
    rejection converges to).
    """
    shape = spec.shape
    n, k, T = shape.num_experts, shape.top_k, spec.num_tokens
    out = np.empty((shape.num_layers, T, k), dtype=np.int32)
    block_p = _zipf(spec.num_blocks, spec.popularity_skew)
    block_cdf = np.cumsum(block_p)
    for layer in range(shape.num_layers):
        rng = np.random.default_rng((spec.seed, layer, 1))
        blocks = block_layout(spec, layer)
        mix, glob = _layer_mixtures(spec, blocks)
        cdf = np.cumsum(mix, axis=1)
        cdf[:, -1] = 1.0
        stacked = (cdf + np.arange(len(blocks))[:, None]).ravel()
        home = np.minimum(np.searchsorted(block_cdf, rng.random(T), side="right"), spec.num_blocks - 1)
        chosen = out[layer]
        for j in range(k):
            pending = np.arange(T)
            for _ in range(32):
                if pending.size == 0:
                    break
                draw = _draw(stacked, n, home[pending], rng.random(pending.size))
                clash = (chosen[pending, :j] == draw[:, None]).any(axis=1)
                chosen[pending[~clash], j] = draw[~clash]
                pending = pending[clash]
            if pending.size:
                w = mix[home[pending]]
                rows = np.arange(pending.size)[:, None]
                w[rows, chosen[pending, :j]] = 0.0
                empty = w.sum(axis=1) <= 0.0
                if empty.any():
                    w[empty] = glob
                    w[rows[empty], chosen[pending[empty], :j]] = 0.0
                c = np.cumsum(w / w.sum(axis=1, keepdims=True), axis=1)
                pick = (c <= rng.random(pending.size)[:, None]).sum(axis=1)
                # guard against rounding past the last unused expert
                pick = np.minimum(pick, n - 1)
                while True:
                    bad = w[np.arange(pending.size), pick] == 0.0
                    if not bad.any():
                        break
                    pick[bad] -= 1
                chosen[pending, j] = pick
    return RoutingTrace(shape, out)


# --- serialization ----------------------------------------------------------


def _open(target, mode):
    if isinstance(target, (str, os.PathLike)):
        return open(target, mode), True
    return target, False


def save_trace(trace: RoutingTrace, sink: BinaryIO | str | os.PathLike) -> None:
    """Write ``trace`` as JSON Lines, records sorted by (layer, token)."""
    s = trace.shape
    header = {"layers": s.num_layers, "experts": s.num_experts, "top_k": s.top_k, "tokens": trace.num_tokens}
    fh, owned = _open(sink, "wb")
    try:
        fh.write((json.dumps(header, separators=(",", ":")) + "\n").encode())
        line = '{"l":%d,"t":%d,"e":[' + ",".join(["%d"] * s.top_k) + "]}\n"
        T = trace.num_tokens
        ids = np.arange(T, dtype=np.int64)[:, None]
        for layer in range(s.num_layers):
            rec = np.hstack([np.full((T, 1), layer), ids, trace.experts[layer].astype(np.int64)])
            fh.write(((line * T) % tuple(rec.ravel().tolist())).encode())
    finally:
        if owned:
            fh.close()


def _field(obj, key, lineno):
    try:
        value = obj[key]
    except (KeyError, TypeError):
        raise TraceFormatError(f"missing field {key!r}", lineno) from None
    return value


def _as_int(value, what, lineno):
    if isinstance(value, bool) or not isinstance(value, int):
        raise TraceFormatError(f"{what} must be an integer", lineno)
    return value


_DIGIT_ONLY = bytes.maketrans(b'{}[]:,"let', b" " * 10)


def _parse_canonical(body: list, k: int):
    # files in exactly the layout save_trace writes: check every line, then scan ints in C
    pat = re.compile(rb'\{"l":\d+,"t":\d+,"e":\[' + rb"\d+," * (k - 1) + rb"\d+\]\}")
    if not body or not all(map(pat.fullmatch, body)):
        return None
    flat = np.fromstring(b" ".join(body).translate(_DIGIT_ONLY), dtype=np.int64, sep=" ")
    rec = flat.reshape(len(body), k + 2)
    return rec[:, 0], rec[:, 1], rec[:, 2:]


def _parse_bulk(body):
    # one C-level parse of the whole file; None means "use the slow path"
    try:
        objs = json.loads("[" + ",".join(body) + "]")
        layer_ix = np.array([o["l"] for o in objs], dtype=None)
        token_ix = np.array([o["t"] for o in objs], dtype=None)
        exp = np.array([o["e"] for o in objs], dtype=None)
    except (ValueError, KeyError, TypeError):
        return None
    if not body:
        return np.empty(0, np.int64), np.empty(0, np.int64), np.empty((0, 0), np.int64)
    if layer_ix.dtype.kind != "i" or token_ix.dtype.kind != "i" or exp.dtype.kind != "i" or exp.ndim != 2:
        return None
    return layer_ix, token_ix, exp


def _parse_lines(body, k):
    layer_ix, token_ix, exp = [], [], []
    for i, line in enumerate(body):
        lineno = i + 2
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceFormatError(exc.msg, lineno) from None
        layer_ix.append(_as_int(_field(obj, "l", lineno), "l", lineno))
        token_ix.append(_as_int(_field(obj, "t", lineno), "t", lineno))
        e = _field(obj, "e", lineno)
        if not isinstance(e, list) or not all(isinstance(x, int) and not isinstance(x, bool) for x in e):
            raise TraceFormatError("'e' must be an array of integers", lineno)
        if len(e) != k:
            raise IntegrityError(f"line {lineno}: expected {k} experts, got {len(e)}")
        exp.append(e)
    return (
        np.array(layer_ix, dtype=np.int64),
        np.array(token_ix, dtype=np.int64),
        np.array(exp, dtype=np.int64).reshape(len(body), k),
    )


def load_trace(source: BinaryIO | str | os.PathLike, format: str = "jsonl") -> RoutingTrace:
    """Read a JSON Lines trace, validating every record.

    ``tokens`` in the header is optional; when absent it is inferred from the
    largest token index. Raises TraceFormatError for unparseable lines and
    IntegrityError for duplicate, missing, or out-of-range records.
    """
    if format != "jsonl":
        raise ValueError(f"unsupported trace format {format!r}")
    fh, owned = _open(source, "rb")
    try:
        raw = fh.read().split(b"\n")
    finally:
        if owned:
            fh.close()
    if raw and raw[-1] == b"":
        raw.pop()
    if not raw:
        raise TraceFormatError("empty trace file (missing header)", 1)
    try:
        header = json.loads(raw[0])
    except json.JSONDecodeError as exc:
        raise TraceFormatError(f"bad header: {exc.msg}", 1) from None
    try:
        shape = ModelShape(
            _as_int(_field(header, "layers", 1), "layers", 1),
            _as_int(_field(header, "experts", 1), "experts", 1),
            _as_int(_field(header, "top_k", 1), "top_k", 1),
        )
    except ValueError as exc:
        if isinstance(exc, TraceFormatError):
            raise
        raise IntegrityError(f"invalid header: {exc}") from None
    declared = header.get("tokens")

    L, k, n = shape.num_layers, shape.top_k, shape.num_experts
    body = raw[1:]
    parsed = _parse_canonical(body, k)
    if parsed is None:
        try:
            body = [line.decode("utf-8") for line in body]
        except UnicodeDecodeError as exc:
            raise TraceFormatError(f"invalid UTF-8 ({exc.reason})") from None
        parsed = _parse_bulk(body)
        if parsed is None:
            parsed = _parse_lines(body, k)
    layer_ix, token_ix, exp = parsed
    n_rec = len(body)
    if not n_rec:
        exp = np.empty((0, k), dtype=np.int64)

    def lineno_of(mask):
        return int(np.argmax(mask)) + 2

    if n_rec and exp.shape[1] != k:
        raise IntegrityError(f"line 2: expected {k} experts, got {exp.shape[1]}")
    if n_rec:
        bad = (layer_ix < 0) | (layer_ix >= L)
        if bad.any():
            raise IntegrityError(f"line {lineno_of(bad)}: layer out of range [0, {L})")
        bad = token_ix < 0
        if bad.any():
            raise IntegrityError(f"line {lineno_of(bad)}: negative token index")
        bad = ((exp < 0) | (exp >= n)).any(axis=1)
        if bad.any():
            raise IntegrityError(f"line {lineno_of(bad)}: expert index out of range [0, {n})")
        if k > 1:
            bad = (np.diff(np.sort(exp, axis=1), axis=1) == 0).any(axis=1)
            if bad.any():
                raise IntegrityError(f"line {lineno_of(bad)}: duplicate expert in record")

    if declared is not None:
        num_tokens = _as_int(declared, "tokens", 1)
    else:
        num_tokens = int(token_ix.max()) + 1 if n_rec else 0
    if n_rec and token_ix.max() >= num_tokens:
        raise IntegrityError(f"token index {int(token_ix.max())} exceeds declared tokens={num_tokens}")
    flat = layer_ix * num_tokens + token_ix
    seen = np.bincount(flat, minlength=L * num_tokens)
    if (seen > 1).any():
        f = int(np.argmax(seen > 1))
        raise IntegrityError(f"duplicate record for layer {f // num_tokens}, token {f % num_tokens}")
    if (seen == 0).any():
        f = int(np.argmax(seen == 0))
        raise IntegrityError(f"missing record for layer {f // num_tokens}, token {f % num_tokens}")
    experts = np.empty((L, num_tokens, k), dtype=np.int32)
    experts[layer_ix, token_ix] = exp
    return RoutingTrace(shape, experts)
