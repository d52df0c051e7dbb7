"""Co-activation statistics and the grouping quality scores built on them."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .trace import RoutingTrace, trace_hash


def _check_layer(trace: RoutingTrace, layer: int) -> None:
    if not 0 <= layer < trace.shape.num_layers:
        raise IndexError(f"layer {layer} out of range [0, {trace.shape.num_layers})")


def build_affinity(trace: RoutingTrace, layer: int) -> np.ndarray:
    """Symmetric n x n matrix of co-activation counts for one layer.

    Entry (i, j), i != j, counts the tokens whose top-k set contains both i
    and j. The diagonal is zero.
    """
    _check_layer(trace, layer)
    n, k = trace.shape.num_experts, trace.shape.top_k
    sel = trace.experts[layer].astype(np.int64)
    A = np.zeros(n * n, dtype=np.int64)
    for a in range(k):
        for b in range(a + 1, k):
            A += np.bincount(sel[:, a] * n + sel[:, b], minlength=n * n)
    A = A.reshape(n, n)
    return A + A.T


def build_load(trace: RoutingTrace, layer: int) -> np.ndarray:
    """Tokens assigned to each expert in one layer."""
    _check_layer(trace, layer)
    return np.bincount(trace.experts[layer].ravel(), minlength=trace.shape.num_experts).astype(np.int64)


def intra_score(A: np.ndarray, S) -> float:
    """Full double sum of A over S x S (each unordered pair counted twice)."""
    S = np.asarray(list(S), dtype=np.int64)
    if S.size == 0:
        return 0.0
    return float(A[np.ix_(S, S)].sum())


def affinity_utilization(A: np.ndarray, groups) -> float:
    """Share of pairwise affinity (i < j) that falls inside a group."""
    total = float(np.triu(A, 1).sum())
    if total <= 0:
        raise ValueError("undefined utilization: affinity matrix has no off-diagonal mass")
    inside = 0.0
    for g in groups:
        g = np.asarray(list(g), dtype=np.int64)
        if g.size > 1:
            inside += float(np.triu(A[np.ix_(g, g)], 1).sum())
    return inside / total


def size_deviation(groups, E: float) -> float:
    """RMS deviation of group sizes from the ideal size E."""
    sizes = np.array([len(g) for g in groups], dtype=float)
    if sizes.size == 0:
        raise ValueError("at least one group is required")
    return float(np.sqrt(np.mean((sizes - E) ** 2)))


def validate_partition(groups, n: int, allow_empty: bool = False) -> None:
    seen = np.zeros(n, dtype=int)
    for g in groups:
        if not g and not allow_empty:
            raise ValueError("empty group in partition")
        for e in g:
            if not 0 <= e < n:
                raise ValueError(f"expert {e} out of range [0, {n})")
            seen[e] += 1
    if (seen != 1).any():
        raise ValueError("groups do not partition the expert set")


# --- per-layer profile ------------------------------------------------------


@dataclass
class LayerProfile:
    layer: int
    affinity: np.ndarray
    load: np.ndarray

    @property
    def n(self) -> int:
        return self.load.shape[0]


@dataclass
class Profile:
    layers: list
    num_tokens: int
    top_k: int
    trace_hash: str = ""

    @property
    def num_experts(self) -> int:
        return self.layers[0].n

    def affinities(self):
        return [p.affinity for p in self.layers]

    def loads(self):
        return [p.load for p in self.layers]


def build_profile(trace: RoutingTrace) -> Profile:
    layers = [
        LayerProfile(l, build_affinity(trace, l), build_load(trace, l))
        for l in range(trace.shape.num_layers)
    ]
    return Profile(layers, trace.num_tokens, trace.shape.top_k, trace_hash(trace))


def profile_to_json(profile: Profile) -> dict:
    return {
        "trace_hash": profile.trace_hash,
        "tokens": profile.num_tokens,
        "top_k": profile.top_k,
        "layers": [
            {
                "layer": p.layer,
                "n": p.n,
                "affinity": p.affinity.ravel().tolist(),
                "load": p.load.tolist(),
            }
            for p in profile.layers
        ],
    }


def profile_from_json(doc: dict) -> Profile:
    layers = []
    for entry in doc["layers"]:
        n = int(entry["n"])
        A = np.asarray(entry["affinity"], dtype=np.int64).reshape(n, n)
        layers.append(LayerProfile(int(entry["layer"]), A, np.asarray(entry["load"], dtype=np.int64)))
    return Profile(layers, int(doc.get("tokens", 0)), int(doc.get("top_k", 0)), doc.get("trace_hash", ""))


def save_profile(profile: Profile, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(profile_to_json(profile), fh, separators=(",", ":"))


def load_profile(path) -> Profile:
    with open(path, encoding="utf-8") as fh:
        return profile_from_json(json.load(fh))
