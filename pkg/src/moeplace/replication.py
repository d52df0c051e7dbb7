"""Load-skew driven replication of hot experts onto underutilized GPUs."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .grouping import PlacementPlan

REPLICATION_MODES = ("none", "fixed_one", "dynamic", "every_gpu_hot", "every_gpu_collaborative")


@dataclass
class GroupLoadStats:
    loads: np.ndarray  # per-GPU token counts
    w_max: float
    w_mean: float
    rho: float | None  # None when every load is zero

    @property
    def heaviest(self) -> int:
        return int(np.argmax(self.loads))


def compute_group_loads(plan: PlacementPlan, loads) -> list[GroupLoadStats]:
    """Per-layer GPU loads W_i under the primary placement, with skew rho = W_max / mean."""
    n_gpu = plan.topology.total_gpus
    out = []
    for layer in range(plan.num_layers):
        expert_load = np.asarray(loads[layer], dtype=float)
        if expert_load.shape[0] != plan.num_experts:
            raise ValueError(f"layer {layer}: load vector does not match plan expert count")
        w = np.bincount(plan.assignment[layer], weights=expert_load, minlength=n_gpu)
        w_max, w_mean = float(w.max()), float(w.mean())
        rho = w_max / w_mean if w_mean > 0 else None
        out.append(GroupLoadStats(w, w_max, w_mean, rho))
    return out


def replica_count(rho: float, n_gpu: int) -> int:
    """min(max(1, floor(rho)), n_gpu - 1)."""
    if n_gpu < 2:
        raise ValueError("replication needs at least 2 GPUs")
    return min(max(1, math.floor(rho)), n_gpu - 1)


def select_hot_experts(experts, expert_loads, w_max: float, n_replica: int) -> list:
    """Shortest heaviest-first prefix whose cumulative load exceeds w_max * n / (1 + n).

    ``experts`` and ``expert_loads`` describe the members of the heaviest
    group; ties in load are broken by ascending expert id.
    """
    experts = [int(e) for e in experts]
    loads = dict(zip(experts, (float(x) for x in expert_loads)))
    threshold = w_max * n_replica / (1 + n_replica)
    hot, total = [], 0.0
    for e in sorted(experts, key=lambda e: (-loads[e], e)):
        hot.append(e)
        total += loads[e]
        if total > threshold:
            return hot
    return hot if total > 0 else []


@dataclass
class HotExpert:
    expert: int
    primary_gpu: int
    replicas: list
    load: float

    @property
    def hosts(self) -> list:
        return sorted([self.primary_gpu, *self.replicas])


@dataclass
class LayerReplicas:
    layer: int
    rho: float | None
    n_replica: int
    hot: list = field(default_factory=list)
    w_r: float = 0.0
    gpu_loads: list = field(default_factory=list)  # pre-replication W_i

    def hot_map(self) -> dict:
        return {h.expert: h for h in self.hot}


@dataclass
class ReplicaPlan:
    mode: str
    layers: list
    weights: dict = field(default_factory=dict)  # layer -> {expert: {gpu: weight}}

    def hosts(self, layer: int, expert: int, primary: int) -> list:
        for lr in self.layers:
            if lr.layer == layer:
                for h in lr.hot:
                    if h.expert == expert:
                        return h.hosts
        return [primary]

    def replica_slots(self, n_gpu: int) -> np.ndarray:
        """Extra expert copies held by each GPU, summed over layers."""
        slots = np.zeros(n_gpu, dtype=np.int64)
        for lr in self.layers:
            for h in lr.hot:
                for g in h.replicas:
                    slots[g] += 1
        return slots

    def memory_overhead(self, n_gpu: int, params_per_expert: int) -> np.ndarray:
        return self.replica_slots(n_gpu) * int(params_per_expert)

    def to_json(self) -> dict:
        layers = []
        for lr in self.layers:
            entry = {
                "layer": lr.layer,
                "rho": lr.rho,
                "n_replica": lr.n_replica,
                "hot": [
                    {"expert": h.expert, "primary_gpu": h.primary_gpu, "replicas": list(h.replicas), "load": h.load}
                    for h in lr.hot
                ],
                "W_r": lr.w_r,
                "gpu_loads": list(lr.gpu_loads),
            }
            w = self.weights.get(lr.layer)
            if w:
                entry["weights"] = {
                    str(e): {str(g): float(f"{x:.12g}") for g, x in sorted(gw.items())}
                    for e, gw in sorted(w.items())
                }
            layers.append(entry)
        return {"mode": self.mode, "layers": layers}

    @classmethod
    def from_json(cls, doc: dict) -> "ReplicaPlan":
        layers, weights = [], {}
        for entry in doc["layers"]:
            hot = [
                HotExpert(int(h["expert"]), int(h["primary_gpu"]), [int(g) for g in h["replicas"]], float(h["load"]))
                for h in entry["hot"]
            ]
            lr = LayerReplicas(int(entry["layer"]), entry["rho"], int(entry["n_replica"]), hot,
                               float(entry["W_r"]), list(entry.get("gpu_loads", [])))
            layers.append(lr)
            if "weights" in entry:
                weights[lr.layer] = {
                    int(e): {int(g): float(x) for g, x in gw.items()} for e, gw in entry["weights"].items()
                }
        return cls(doc.get("mode", ""), layers, weights)


def _least_loaded(loads: np.ndarray, count: int, exclude) -> list:
    order = sorted((g for g in range(loads.size) if g not in exclude), key=lambda g: (loads[g], g))
    return order[:count]


def plan_replication(plan: PlacementPlan, loads, mode: str = "dynamic", affinities=None,
                     hot_count: int = 2) -> ReplicaPlan:
    """Choose hot experts per layer and the GPUs that receive their secondary copies.

    The primary placement is never modified. ``hot_count`` only applies to
    the ``every_gpu_*`` modes.
    """
    if mode not in REPLICATION_MODES:
        raise ValueError(f"unknown replication mode {mode!r}")
    n_gpu = plan.topology.total_gpus
    if mode == "none":
        return ReplicaPlan(mode, [])
    if n_gpu < 2:
        raise ValueError("replication needs at least 2 GPUs")
    if mode == "every_gpu_collaborative" and affinities is None:
        raise ValueError("every_gpu_collaborative needs affinity matrices")

    stats = compute_group_loads(plan, loads)
    layers = []
    for layer, st in enumerate(stats):
        expert_load = np.asarray(loads[layer], dtype=float)
        row = plan.assignment[layer]
        if st.rho is None:
            layers.append(LayerReplicas(layer, None, 0, [], 0.0, st.loads.tolist()))
            continue
        heavy = st.heaviest
        if mode in ("dynamic", "fixed_one"):
            n_rep = replica_count(st.rho, n_gpu) if mode == "dynamic" else 1
            members = np.flatnonzero(row == heavy)
            hot_ids = select_hot_experts(members, expert_load[members], st.w_max, n_rep)
            targets = _least_loaded(st.loads, n_rep, {heavy})
            if not targets:
                warnings.warn(f"layer {layer}: no replica target available", RuntimeWarning, stacklevel=2)
                layers.append(LayerReplicas(layer, st.rho, 0, [], 0.0, st.loads.tolist()))
                continue
            hot = [HotExpert(e, heavy, list(targets), float(expert_load[e])) for e in hot_ids]
        else:
            if mode == "every_gpu_hot":
                score = expert_load
            else:
                score = np.asarray(affinities[layer], dtype=float).sum(axis=1)
            picked = sorted(range(score.size), key=lambda e: (-score[e], e))[:hot_count]
            n_rep = n_gpu - 1
            hot = [
                HotExpert(e, int(row[e]), [g for g in range(n_gpu) if g != row[e]], float(expert_load[e]))
                for e in picked
            ]
        w_r = float(sum(h.load for h in hot if h.primary_gpu == heavy))
        layers.append(LayerReplicas(layer, st.rho, n_rep, hot, w_r, st.loads.tolist()))
    return ReplicaPlan(mode, layers)
