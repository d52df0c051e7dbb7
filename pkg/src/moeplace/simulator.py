"""Trace replay over a placement + replica plan, counting token transfers and GPU load.

Transfer accounting per (layer, token), with the token resident on its home
GPU and T the set of distinct GPUs serving its experts:

* every GPU of T on the home node other than the home GPU costs one
  intra-node transfer;
* every remote node holding part of T costs one cross-node transfer (a
  single copy to that node) plus one intra-node transfer for each further
  GPU of T on it.

Counts are for the dispatch phase; ``include_combine`` doubles them to add
the symmetric result-gathering phase.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import IntegrityError
from .grouping import ClusterTopology, PlacementPlan
from .replication import ReplicaPlan
from .routing import compute_weights, route_many, token_uniforms
from .trace import RoutingTrace, trace_hash


def assign_token_homes(num_tokens, topology: ClusterTopology, scheme: str = "round_robin") -> np.ndarray:
    """Home GPU of each token; ``num_tokens`` may also be a trace."""
    if isinstance(num_tokens, RoutingTrace):
        num_tokens = num_tokens.num_tokens
    if scheme != "round_robin":
        raise ValueError(f"unknown token home scheme {scheme!r}")
    return np.arange(num_tokens, dtype=np.int64) % topology.total_gpus


def count_transfers(targets: np.ndarray, homes: np.ndarray, topology: ClusterTopology):
    """Per-token (intra_node, cross_node) dispatch transfers.

    ``targets`` is (tokens, k) serving GPUs, ``homes`` the home GPU per token.
    """
    T = targets.shape[0]
    N, G = topology.num_nodes, topology.gpus_per_node
    hit = np.zeros((T, N * G), dtype=bool)
    if T:
        hit[np.arange(T)[:, None], targets] = True
    per_node = hit.reshape(T, N, G).sum(axis=2)
    rows = np.arange(T)
    home_node = homes // G
    intra = per_node[rows, home_node] - hit[rows, homes]
    remote = per_node.copy()
    remote[rows, home_node] = 0
    cross = (remote > 0).sum(axis=1)
    intra = intra + np.maximum(remote - 1, 0).sum(axis=1)
    return intra.astype(np.int64), cross.astype(np.int64)


@dataclass
class SimReport:
    config: dict
    loads: np.ndarray  # (layers, gpus) token assignments
    cross_node: np.ndarray  # per layer
    intra_node: np.ndarray  # per layer
    trace_hash: str = ""
    topology: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def cross_node_tokens(self) -> int:
        return int(self.cross_node.sum())

    @property
    def intra_node_tokens(self) -> int:
        return int(self.intra_node.sum())

    @property
    def total_transfer_tokens(self) -> int:
        return self.cross_node_tokens + self.intra_node_tokens

    @property
    def layer_std(self) -> np.ndarray:
        return self.loads.std(axis=1)

    @property
    def mean_layer_load_std(self) -> float:
        return float(self.layer_std.mean()) if self.loads.size else 0.0

    @property
    def idle_proxy(self) -> float:
        if not self.loads.size:
            return 0.0
        return float((self.loads.max(axis=1, keepdims=True) - self.loads).sum())

    def metrics(self) -> dict:
        return {
            "cross_node_tokens": self.cross_node_tokens,
            "intra_node_tokens": self.intra_node_tokens,
            "total_transfer_tokens": self.total_transfer_tokens,
            "mean_layer_load_std": self.mean_layer_load_std,
            "idle_proxy": self.idle_proxy,
        }

    def to_json(self) -> dict:
        std = self.layer_std
        return {
            "config": self.config,
            "trace_hash": self.trace_hash,
            "topology": self.topology,
            "totals": {
                "cross_node_tokens": self.cross_node_tokens,
                "intra_node_tokens": self.intra_node_tokens,
            },
            "per_layer": [
                {
                    "layer": l,
                    "loads": self.loads[l].tolist(),
                    "std": float(std[l]),
                    "cross": int(self.cross_node[l]),
                    "intra": int(self.intra_node[l]),
                }
                for l in range(self.loads.shape[0])
            ],
            "mean_layer_load_std": self.mean_layer_load_std,
            "idle_proxy": self.idle_proxy,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SimReport":
        per = sorted(doc["per_layer"], key=lambda x: x["layer"])
        return cls(
            doc.get("config", {}),
            np.array([p["loads"] for p in per], dtype=np.int64),
            np.array([p["cross"] for p in per], dtype=np.int64),
            np.array([p["intra"] for p in per], dtype=np.int64),
            doc.get("trace_hash", ""),
            doc.get("topology", ""),
        )

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n_gpu = self.loads.shape[1] if self.loads.ndim == 2 else 0
        w.writerow(["layer", "cross", "intra", "std", *[f"gpu{g}" for g in range(n_gpu)]])
        std = self.layer_std
        for l in range(self.loads.shape[0]):
            w.writerow([l, int(self.cross_node[l]), int(self.intra_node[l]), repr(float(std[l])), *self.loads[l].tolist()])
        return buf.getvalue()


def simulate(trace: RoutingTrace, plan: PlacementPlan, replicas: ReplicaPlan | None = None,
             weights: dict | None = None, topology: ClusterTopology | None = None,
             policy: str = "wrr", seed: int = 0, include_combine: bool = False,
             homes: np.ndarray | None = None, config: dict | None = None) -> SimReport:
    """Replay ``trace`` and measure transfers and per-GPU load.

    Hot experts listed in ``replicas`` are routed with ``policy``; every other
    expert is served by its primary GPU. ``weights`` defaults to the weights
    stored on the replica plan (computed on demand).
    """
    topology = topology or plan.topology
    if topology != plan.topology:
        raise IntegrityError(f"plan topology {plan.topology} differs from simulation topology {topology}")
    if plan.num_experts != trace.shape.num_experts or plan.num_layers != trace.shape.num_layers:
        raise IntegrityError(
            f"plan covers {plan.num_layers} layers x {plan.num_experts} experts, "
            f"trace has {trace.shape.num_layers} x {trace.shape.num_experts}"
        )
    plan.validate()
    replicas = replicas or ReplicaPlan("none", [])
    if weights is None:
        weights = replicas.weights if replicas.weights or not any(lr.hot for lr in replicas.layers) else compute_weights(replicas)
    if homes is None:
        homes = assign_token_homes(trace.num_tokens, topology)
    homes = np.asarray(homes, dtype=np.int64)
    L, T = trace.shape.num_layers, trace.num_tokens
    if homes.shape != (T,) or (T and (homes.min() < 0 or homes.max() >= topology.total_gpus)):
        raise IntegrityError("token homes must give one valid GPU per token")

    n_gpu = topology.total_gpus
    loads = np.zeros((L, n_gpu), dtype=np.int64)
    cross = np.zeros(L, dtype=np.int64)
    intra = np.zeros(L, dtype=np.int64)
    by_layer = {lr.layer: lr for lr in replicas.layers}
    for layer in range(L):
        sel = trace.experts[layer].astype(np.int64)
        targets = plan.assignment[layer][sel]
        lr = by_layer.get(layer)
        if lr is not None:
            for h in lr.hot:
                if h.primary_gpu != plan.assignment[layer, h.expert]:
                    raise IntegrityError(f"layer {layer}: replica plan primary of expert {h.expert} disagrees with placement")
                rows, cols = np.nonzero(sel == h.expert)
                if rows.size == 0:
                    continue
                w = weights.get(layer, {}).get(h.expert)
                if w is None:
                    raise IntegrityError(f"layer {layer}: no polling weights for replicated expert {h.expert}")
                u = token_uniforms(seed, layer, rows, cols)
                targets[rows, cols] = route_many(homes[rows], h.hosts, w, policy, topology, u)
        loads[layer] = np.bincount(targets.ravel(), minlength=n_gpu)
        i, c = count_transfers(targets, homes, topology)
        intra[layer], cross[layer] = i.sum(), c.sum()
    if include_combine:
        intra, cross = intra * 2, cross * 2
    cfg = {"policy": policy, "seed": seed, "include_combine": include_combine,
           "placement": plan.mode, "replication": replicas.mode}
    cfg.update(config or {})
    return SimReport(cfg, loads, cross, intra, trace_hash(trace), str(topology))


# --- comparison ---------------------------------------------------------------

METRICS = ("cross_node_tokens", "intra_node_tokens", "total_transfer_tokens", "mean_layer_load_std", "idle_proxy")


def compare(reports, baseline: int = 0) -> list[dict]:
    """Metric table across reports with percentage change against ``reports[baseline]``."""
    reports = list(reports)
    if not reports:
        raise ValueError("nothing to compare")
    ident = {(r.trace_hash, r.topology) for r in reports}
    if len(ident) > 1:
        raise IntegrityError("reports come from different traces or topologies")
    base = reports[baseline].metrics()
    rows = []
    for name in METRICS:
        values = [r.metrics()[name] for r in reports]
        b = base[name]
        deltas = []
        for v in values:
            if b == 0:
                deltas.append(0.0 if v == 0 else None)
            else:
                deltas.append(100.0 * (v - b) / b)
        rows.append({"metric": name, "values": values, "delta_pct": deltas})
    return rows


def format_table(rows, labels=None) -> str:
    n = len(rows[0]["values"]) if rows else 0
    labels = labels or [f"r{i}" for i in range(n)]
    head = f"{'metric':<24}" + "".join(f"{lab:>22}" for lab in labels)
    lines = [head]
    for row in rows:
        cells = []
        for v, d in zip(row["values"], row["delta_pct"]):
            val = f"{v:.4g}" if isinstance(v, float) else str(v)
            pct = "n/a" if d is None else f"{d:+.1f}%"
            cells.append(f"{val} ({pct})".rjust(22))
        lines.append(f"{row['metric']:<24}" + "".join(cells))
    return "\n".join(lines)


def comparison_csv(rows, labels=None) -> str:
    n = len(rows[0]["values"]) if rows else 0
    labels = labels or [f"r{i}" for i in range(n)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", *labels, *[f"{lab}_delta_pct" for lab in labels]])
    for row in rows:
        w.writerow([row["metric"], *row["values"], *["" if d is None else d for d in row["delta_pct"]]])
    return buf.getvalue()
