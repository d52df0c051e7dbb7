"""Replica selection: predicted post-replication loads, polling weights, routing policies.

Random draws come from a counter-based stream: the uniform used for a
routing decision is a hash of ``(seed, layer, token, slot)``, so results do
not depend on evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import IntegrityError
from .grouping import ClusterTopology

POLICIES = ("wrr", "tar")
LOAD_FLOOR = 1.0


@dataclass(frozen=True)
class PredictedLoads:
    w_p: float
    w_max_prime: float
    w_i_prime: np.ndarray


def predict_loads(w_max: float, w_r: float, w_i, n_replica: int, split: str = "max") -> PredictedLoads:
    """Loads expected after replication.

    The per-instance share is ``w_max / (n_replica + 1)`` (``split="max"``);
    ``split="hot"`` divides the replicated load ``w_r`` instead. The heaviest
    GPU keeps ``w_max - w_r + w_p`` and each replica host gains ``w_p``.
    """
    if n_replica < 1:
        raise ValueError("n_replica must be >= 1")
    if w_r > w_max:
        raise IntegrityError(f"replicated load {w_r} exceeds the heaviest group load {w_max}")
    if split == "max":
        w_p = w_max / (n_replica + 1)
    elif split == "hot":
        w_p = w_r / (n_replica + 1)
    else:
        raise ValueError(f"unknown split {split!r}")
    return PredictedLoads(w_p, w_max - w_r + w_p, np.asarray(w_i, dtype=float) + w_p)


def polling_weights(loads: dict) -> dict:
    """Weights inversely proportional to predicted load (floored at one token), summing to 1."""
    if not loads:
        raise ValueError("at least one host is required")
    inv = {int(g): 1.0 / max(float(x), LOAD_FLOOR) for g, x in loads.items()}
    total = sum(inv.values())
    return {g: v / total for g, v in sorted(inv.items())}


def _uniform(rng) -> float:
    if isinstance(rng, (float, np.floating)):
        return float(rng)
    return float(rng.random())


def _cdf(weights: dict):
    gpus = np.array(sorted(weights), dtype=np.int64)
    w = np.array([weights[g] for g in gpus.tolist()], dtype=float)
    return gpus, np.cumsum(w / w.sum())


def choose_many(weights: dict, u) -> np.ndarray:
    """Vectorized inverse-CDF draw: one GPU per uniform in ``u``."""
    gpus, cdf = _cdf(weights)
    idx = np.searchsorted(cdf, np.asarray(u, dtype=float), side="right")
    return gpus[np.minimum(idx, gpus.size - 1)]


def choose_by_polling_weight(weights: dict, rng) -> int:
    """Draw a GPU with probability equal to its weight (inverse CDF, ascending ids).

    ``rng`` is anything with a ``random()`` method, or a uniform in [0, 1)
    to use directly.
    """
    if len(weights) == 1:
        return int(next(iter(weights)))
    return int(choose_many(weights, [_uniform(rng)])[0])


def _check_hosts(expert_hosts, weights):
    hosts = sorted(int(g) for g in expert_hosts)
    if not hosts:
        raise IntegrityError("expert has no host")
    if len(hosts) > 1 and sorted(weights) != hosts:
        raise IntegrityError(f"polling weights {sorted(weights)} do not match hosts {hosts}")
    return hosts


def route_token(token_gpu: int, expert_hosts, weights: dict, policy: str, topology: ClusterTopology, rng) -> int:
    """Pick the GPU that serves one (token, expert) pair.

    ``wrr`` draws over all hosts. ``tar`` prefers the token's own GPU, then
    hosts on the token's node (weights renormalized over them), and only then
    draws over every host.
    """
    hosts = _check_hosts(expert_hosts, weights)
    if policy not in POLICIES:
        raise ValueError(f"unknown routing policy {policy!r}")
    if len(hosts) == 1:
        return hosts[0]
    if policy == "wrr":
        return choose_by_polling_weight(weights, rng)
    if token_gpu in hosts:
        return token_gpu
    node = topology.node_of(token_gpu)
    local = [g for g in hosts if topology.node_of(g) == node]
    if local:
        return choose_by_polling_weight({g: weights[g] for g in local}, rng)
    return choose_by_polling_weight(weights, rng)


def route_many(token_gpus, expert_hosts, weights: dict, policy: str, topology: ClusterTopology, u) -> np.ndarray:
    """``route_token`` over many tokens of one expert, each with its own uniform."""
    hosts = _check_hosts(expert_hosts, weights)
    if policy not in POLICIES:
        raise ValueError(f"unknown routing policy {policy!r}")
    token_gpus = np.asarray(token_gpus, dtype=np.int64)
    u = np.asarray(u, dtype=float)
    if len(hosts) == 1:
        return np.full(token_gpus.shape, hosts[0], dtype=np.int64)
    if policy == "wrr":
        return choose_many(weights, u)
    out = np.empty(token_gpus.shape, dtype=np.int64)
    for g in np.unique(token_gpus).tolist():
        sel = token_gpus == g
        if g in hosts:
            out[sel] = g
            continue
        node = topology.node_of(g)
        local = [h for h in hosts if topology.node_of(h) == node]
        pool = {h: weights[h] for h in local} if local else weights
        out[sel] = choose_many(pool, u[sel])
    return out


# --- per-layer weights -------------------------------------------------------


def host_predicted_loads(layer_replicas, split: str = "max") -> dict:
    """Predicted load of every GPU hosting a hot expert instance in this layer."""
    lr = layer_replicas
    if not lr.hot:
        return {}
    w = np.asarray(lr.gpu_loads, dtype=float)
    heavy = int(np.argmax(w))
    w_max = float(w[heavy])
    pred = predict_loads(w_max, min(lr.w_r, w_max), w, max(lr.n_replica, 1), split)
    replica_hosts = {g for h in lr.hot for g in h.replicas}
    out = {}
    for g in {g for h in lr.hot for g in h.hosts}:
        if g == heavy:
            out[g] = pred.w_max_prime
        elif g in replica_hosts:
            out[g] = float(pred.w_i_prime[g])
        else:
            out[g] = float(w[g])
    return out


def layer_weights(layer_replicas, split: str = "max") -> dict:
    """``{expert: {gpu: weight}}`` for the hot experts of one layer."""
    loads = host_predicted_loads(layer_replicas, split)
    return {h.expert: polling_weights({g: loads[g] for g in h.hosts}) for h in layer_replicas.hot}


def compute_weights(replica_plan, split: str = "max") -> dict:
    """Fill ``replica_plan.weights`` for every layer and return it."""
    replica_plan.weights = {lr.layer: layer_weights(lr, split) for lr in replica_plan.layers if lr.hot}
    return replica_plan.weights


# --- counter-based uniforms -------------------------------------------------

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _mix64(x: np.ndarray) -> np.ndarray:
    x = x ^ (x >> np.uint64(30))
    x = x * _M1
    x = x ^ (x >> np.uint64(27))
    x = x * _M2
    return x ^ (x >> np.uint64(31))


def token_uniforms(seed: int, layer: int, tokens, slots) -> np.ndarray:
    """Uniforms in [0, 1) determined solely by (seed, layer, token, slot)."""
    tokens = np.asarray(tokens, dtype=np.uint64)
    slots = np.asarray(slots, dtype=np.uint64)
    with np.errstate(over="ignore"):
        x = _mix64(np.asarray([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64) + _GOLDEN)
        x = _mix64(x ^ (np.uint64(layer) * _GOLDEN))
        x = _mix64(x ^ (tokens * _M1))
        x = _mix64(x ^ (slots + _GOLDEN))
    return (x >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def token_uniform(seed: int, layer: int, token: int, slot: int) -> float:
    return float(token_uniforms(seed, layer, [token], [slot])[0])
