"""Affinity-driven expert grouping and placement onto a node/GPU topology.

Groupings are lists of sorted expert-id lists. Placement plans map every
expert of every layer to one primary GPU.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .affinity import affinity_utilization, size_deviation
from .errors import InfeasibleGroupingError, IntegrityError

DEFAULT_RATIOS = (0.0, 0.125, 0.25, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class ClusterTopology:
    num_nodes: int
    gpus_per_node: int

    def __post_init__(self):
        if self.num_nodes < 1 or self.gpus_per_node < 1:
            raise ValueError("topology needs at least one node and one GPU per node")

    @classmethod
    def parse(cls, text: str) -> "ClusterTopology":
        """Parse ``"NxG"``, e.g. ``"2x4"``."""
        try:
            nodes, gpus = text.lower().split("x")
            return cls(int(nodes), int(gpus))
        except ValueError:
            raise ValueError(f"topology must look like NxG, got {text!r}") from None

    @property
    def total_gpus(self) -> int:
        return self.num_nodes * self.gpus_per_node

    def node_of(self, gpu: int) -> int:
        return gpu // self.gpus_per_node

    def local_of(self, gpu: int) -> int:
        return gpu % self.gpus_per_node

    def gpu_id(self, node: int, local: int) -> int:
        return node * self.gpus_per_node + local

    def gpu_nodes(self) -> np.ndarray:
        return np.arange(self.total_gpus) // self.gpus_per_node

    def __str__(self):
        return f"{self.num_nodes}x{self.gpus_per_node}"


# --- spectral clustering ------------------------------------------------------


def _kmeans(X: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 100) -> np.ndarray:
    m = X.shape[0]
    centers = [int(rng.integers(m))]
    d2 = ((X - X[centers[0]]) ** 2).sum(axis=1)
    while len(centers) < k:
        nxt = int(np.argmax(d2))
        centers.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(axis=1))
    C = X[centers].copy()
    labels = None
    for _ in range(max_iter):
        dist = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
        new = np.argmin(dist, axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in range(k):
            members = labels == c
            if members.any():
                C[c] = X[members].mean(axis=0)
    return labels


def _spectral_labels(A: np.ndarray, D: int, rng: np.random.Generator) -> np.ndarray:
    deg = A.sum(axis=1)
    inv = 1.0 / np.sqrt(deg)
    lap = np.eye(A.shape[0]) - inv[:, None] * A * inv[None, :]
    _, vecs = np.linalg.eigh(lap)
    X = vecs[:, :D]
    norms = np.linalg.norm(X, axis=1)
    X = X / np.where(norms > 0, norms, 1.0)[:, None]
    return _kmeans(X, D, rng)


def _member_strength(A: np.ndarray, e: int, group) -> float:
    # affinity of e to the rest of its group
    return float(A[e, group].sum() - A[e, e])


def _repair_empty(A: np.ndarray, groups: list) -> list:
    while any(len(g) == 0 for g in groups):
        empty = next(i for i, g in enumerate(groups) if not g)
        big = max(range(len(groups)), key=lambda i: (len(groups[i]), -i))
        src = groups[big]
        weakest = min(src, key=lambda e: (_member_strength(A, e, src), e))
        src.remove(weakest)
        groups[empty].append(weakest)
    return groups


def spectral_cluster(A, D: int, seed=0) -> list:
    """Split experts into D groups by normalized-Laplacian spectral clustering.

    Experts with no co-activation mass are left out of the embedding and
    spread over the smallest groups afterwards; empty clusters are refilled
    with the weakest member of the largest cluster.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    if not 1 <= D <= n:
        raise InfeasibleGroupingError(f"cannot form {D} groups from {n} experts")
    if D == 1:
        return [list(range(n))]
    active = np.flatnonzero(A.sum(axis=1) > 0)
    groups = [[] for _ in range(D)]
    if active.size <= D:
        for i, e in enumerate(active):
            groups[i].append(int(e))
    else:
        labels = _spectral_labels(A[np.ix_(active, active)], D, np.random.default_rng(seed))
        for e, lab in zip(active, labels):
            groups[lab].append(int(e))
    for e in np.setdiff1d(np.arange(n), active):
        target = min(range(D), key=lambda i: (len(groups[i]), i))
        groups[target].append(int(e))
    groups = _repair_empty(A, groups)
    return [sorted(g) for g in groups]


def fully_non_uniform_group(A, D: int, seed=0) -> list:
    """Affinity-only grouping: group sizes are whatever the clustering yields."""
    return spectral_cluster(A, D, seed)


# --- size-controlled grouping -------------------------------------------------


def size_band(n: int, D: int, r: float):
    """Return ``(E, delta, num_min, num_max)`` for n experts in D groups."""
    if r < 0:
        raise ValueError("ratio r must be non-negative")
    E = n // D
    delta = max(1, math.floor(E * r + 0.5))
    return E, delta, max(1, E - delta), E + delta


def _fill_needy(A: np.ndarray, L: list, num_min: int) -> list:
    """Move weakest-bound experts out of groups above num_min into undersized ones."""
    while True:
        needy = [d for d, g in enumerate(L) if len(g) < num_min]
        if not needy:
            return L
        donors = [d for d, g in enumerate(L) if len(g) > num_min]
        if not donors:
            raise InfeasibleGroupingError("no donor group can give up an expert")
        _, e, src = min(
            (_member_strength(A, e, L[d]), e, d) for d in donors for e in L[d]
        )
        L[src].remove(e)
        dst = max(needy, key=lambda d: (_intra_with(A, L[d], e), -d))
        L[dst].append(e)


def _intra_with(A: np.ndarray, group, e: int) -> float:
    idx = np.asarray(list(group) + [e], dtype=np.int64)
    return float(A[np.ix_(idx, idx)].sum())


def constrain_groups(A, clusters, num_min: int, num_max: int) -> list:
    """Force clusters into the size band [num_min, num_max] with minimal disruption.

    Oversized clusters keep their num_max most strongly bound members; the
    rest go, one at a time, to the group with spare capacity whose intra
    score including the newcomer is highest. Undersized groups are then
    topped up from groups above num_min.
    """
    A = np.asarray(A, dtype=float)
    n, D = A.shape[0], len(clusters)
    if D * num_min > n or n > D * num_max:
        raise InfeasibleGroupingError(
            f"{n} experts cannot fill {D} groups with sizes in [{num_min}, {num_max}]"
        )
    L, overflow = [], []
    for C in clusters:
        C = list(C)
        if len(C) > num_max:
            ranked = sorted(C, key=lambda e: (-_member_strength(A, e, C), e))
            L.append(ranked[:num_max])
            overflow.extend(ranked[num_max:])
        else:
            L.append(C)
    for e in overflow:
        open_groups = [d for d in range(D) if len(L[d]) < num_max]
        dst = max(open_groups, key=lambda d: (_intra_with(A, L[d], e), -d))
        L[dst].append(e)
    L = _fill_needy(A, L, num_min)
    return [sorted(g) for g in L]


def refine_groups(A, groups, num_min: int, num_max: int, max_passes: int = 20) -> list:
    """Fiduccia-Mattheyses style passes of single-expert moves inside the size band.

    Each pass moves every expert at most once, always taking the best
    admissible move even when it loses affinity, then rolls back to the
    best prefix. Stops when a pass yields no gain, so intra-group affinity
    never decreases.
    """
    A = np.array(A, dtype=float)
    np.fill_diagonal(A, 0.0)
    n, D = A.shape[0], len(groups)
    label = np.empty(n, dtype=np.int64)
    for d, g in enumerate(groups):
        label[list(g)] = d
    S = np.stack([A[:, label == d].sum(axis=1) for d in range(D)], axis=1)
    sizes = np.bincount(label, minlength=D)
    rows = np.arange(n)
    for _ in range(max_passes):
        locked = np.zeros(n, dtype=bool)
        history, acc, best, best_len = [], 0.0, 0.0, 0
        for _ in range(n):
            valid = np.ones((n, D), dtype=bool)
            valid[locked] = False
            valid[rows, label] = False
            valid[sizes[label] <= num_min] = False
            valid[:, sizes >= num_max] = False
            if not valid.any():
                break
            gain = np.where(valid, S - S[rows, label][:, None], -np.inf)
            e, d = divmod(int(np.argmax(gain)), D)
            a = label[e]
            acc += gain[e, d]
            S[:, a] -= A[:, e]
            S[:, d] += A[:, e]
            sizes[a] -= 1
            sizes[d] += 1
            label[e] = d
            locked[e] = True
            history.append((e, a, d))
            if acc > best + 1e-9 * max(1.0, abs(best)):
                best, best_len = acc, len(history)
        for e, a, d in reversed(history[best_len:]):
            S[:, d] -= A[:, e]
            S[:, a] += A[:, e]
            sizes[d] -= 1
            sizes[a] += 1
            label[e] = a
        if best_len == 0:
            break
    return [np.flatnonzero(label == d).tolist() for d in range(D)]


def controlled_non_uniform_group(A, D: int, r: float, seed=0, clusters=None, refine: bool = True) -> list:
    """Spectral grouping with sizes held to E +/- max(1, round(E*r)), E = n // D.

    With ``refine`` the band-repaired grouping is polished by
    :func:`refine_groups`; ``refine=False`` stops after the repair.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    if not 1 <= D <= n:
        raise InfeasibleGroupingError(f"cannot form {D} groups from {n} experts")
    _, _, lo, hi = size_band(n, D, r)
    if clusters is None:
        clusters = spectral_cluster(A, D, seed)
    groups = constrain_groups(A, clusters, lo, hi)
    if refine:
        groups = refine_groups(A, groups, lo, hi)
    return groups


# --- ratio selection ----------------------------------------------------------


def knee_index(xs, ys) -> int:
    """Index of the point farthest above the chord joining the first and last points.

    Both axes are min-max normalized first so the result does not depend on
    their units. Only points above the chord (diminishing returns in ys)
    count as a knee; with none, or a degenerate chord, 0 is returned. Ties
    go to the earliest point.
    """
    pts = np.column_stack([np.asarray(xs, float), np.asarray(ys, float)])
    span = pts.max(axis=0) - pts.min(axis=0)
    pts = (pts - pts.min(axis=0)) / np.where(span > 0, span, 1.0)
    a, b = pts[0], pts[-1]
    chord = b - a
    length = float(np.hypot(*chord))
    if length == 0.0:
        warnings.warn("degenerate knee chord; choosing the smallest ratio", RuntimeWarning, stacklevel=2)
        return 0
    rel = pts - a
    dist = (chord[0] * rel[:, 1] - chord[1] * rel[:, 0]) / length
    best = dist.max()
    if best <= 1e-12:
        return 0
    return int(np.flatnonzero(dist >= best - 1e-12 * max(1.0, best))[0])


@dataclass
class RatioSelection:
    candidates: list
    utilization: list
    deviation: list
    chosen: int
    groupings: list = field(default_factory=list, repr=False)

    @property
    def ratio(self) -> float:
        return self.candidates[self.chosen]

    def to_json(self) -> dict:
        return {
            "candidates": list(self.candidates),
            "utilization": list(self.utilization),
            "deviation": list(self.deviation),
            "chosen": self.chosen,
            "r": self.ratio,
        }


def select_ratio(A, D: int, candidates=DEFAULT_RATIOS, seed=0, clusters=None, refine: bool = True) -> RatioSelection:
    """Evaluate controlled grouping over candidate ratios and pick the (S, U) knee."""
    candidates = [float(r) for r in candidates]
    if len(candidates) < 3:
        raise ValueError("knee selection needs at least 3 candidate ratios")
    if any(b <= a for a, b in zip(candidates, candidates[1:])) or candidates[0] < 0 or candidates[-1] > 1:
        raise ValueError("candidate ratios must be strictly ascending within [0, 1]")
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    if clusters is None:
        clusters = spectral_cluster(A, D, seed)
    E = n // D
    has_mass = np.triu(A, 1).sum() > 0
    utils, devs, groupings = [], [], []
    for r in candidates:
        g = controlled_non_uniform_group(A, D, r, clusters=clusters, refine=refine)
        groupings.append(g)
        utils.append(affinity_utilization(A, g) if has_mass else 0.0)
        devs.append(size_deviation(g, E))
    chosen = knee_index(devs, utils)
    return RatioSelection(candidates, utils, devs, chosen, groupings)


# --- placement plans ----------------------------------------------------------


@dataclass
class PlacementPlan:
    """Primary GPU of every expert in every layer (``assignment[layer, expert]``)."""

    topology: ClusterTopology
    assignment: np.ndarray
    ratio_selection: list = field(default_factory=list)
    mode: str = ""

    @property
    def num_layers(self) -> int:
        return self.assignment.shape[0]

    @property
    def num_experts(self) -> int:
        return self.assignment.shape[1]

    def gpu_experts(self, layer: int) -> list:
        a = self.assignment[layer]
        return [np.flatnonzero(a == g).tolist() for g in range(self.topology.total_gpus)]

    def validate(self) -> None:
        a = self.assignment
        if a.ndim != 2 or a.min() < 0 or a.max() >= self.topology.total_gpus:
            raise IntegrityError("placement refers to a GPU outside the topology")

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "topology": {"nodes": self.topology.num_nodes, "gpus_per_node": self.topology.gpus_per_node},
            "layers": [
                {"layer": l, "placement": {str(e): int(g) for e, g in enumerate(row)}}
                for l, row in enumerate(self.assignment)
            ],
            "ratio_selection": self.ratio_selection,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "PlacementPlan":
        topo = ClusterTopology(int(doc["topology"]["nodes"]), int(doc["topology"]["gpus_per_node"]))
        layers = sorted(doc["layers"], key=lambda x: x["layer"])
        n = len(layers[0]["placement"])
        assignment = np.empty((len(layers), n), dtype=np.int64)
        for i, entry in enumerate(layers):
            if entry["layer"] != i:
                raise IntegrityError(f"plan layers are not contiguous at layer {entry['layer']}")
            pl = entry["placement"]
            if sorted(int(e) for e in pl) != list(range(n)):
                raise IntegrityError(f"plan layer {i} does not place every expert exactly once")
            for e, g in pl.items():
                assignment[i, int(e)] = int(g)
        plan = cls(topo, assignment, doc.get("ratio_selection", []), doc.get("mode", ""))
        plan.validate()
        return plan


def _order_by_load(groups, load):
    # heaviest group first; ties by smallest member
    return sorted(groups, key=lambda g: (-float(np.sum(load[g])) if g else 0.0, min(g) if g else -1))


def _assign(row: np.ndarray, groups, gpu_ids) -> None:
    for g, gpu in zip(groups, gpu_ids):
        row[g] = gpu


def hierarchical_group(affinities, topology: ClusterTopology, r="auto", seed=0, loads=None,
                       candidates=DEFAULT_RATIOS) -> PlacementPlan:
    """Two-level placement: affinity-only split across nodes, size-controlled split across GPUs.

    ``r`` is either a fixed ratio applied to every node group or ``"auto"``,
    which picks a knee ratio per (layer, node group). GPU groups inside a node
    are numbered heaviest-first.
    """
    affinities = [np.asarray(A, dtype=float) for A in affinities]
    n = affinities[0].shape[0]
    if topology.total_gpus > n:
        raise InfeasibleGroupingError(
            f"{topology.total_gpus} GPUs cannot each hold a primary expert out of {n}"
        )
    assignment = np.empty((len(affinities), n), dtype=np.int64)
    diagnostics = []
    for layer, A in enumerate(affinities):
        try:
            _place_layer_hierarchical(assignment[layer], diagnostics, layer, A, topology, r, seed, loads, candidates)
        except InfeasibleGroupingError as exc:
            raise InfeasibleGroupingError(f"layer {layer}: {exc}") from None
    return PlacementPlan(topology, assignment, diagnostics, "hierarchical")


def _place_layer_hierarchical(row, diagnostics, layer, A, topology, r, seed, loads, candidates):
    """Fill one layer's row of a hierarchical placement."""
    n = A.shape[0]
    N, G = topology.num_nodes, topology.gpus_per_node
    load = np.asarray(loads[layer], float) if loads is not None else A.sum(axis=1)
    if N == 1:
        node_groups = [list(range(n))]
    else:
        node_groups = fully_non_uniform_group(A, N, seed=(seed, layer))
        node_groups = [sorted(g) for g in _fill_needy(A, [list(g) for g in node_groups], G)]
        node_groups = _order_by_load(node_groups, load)
    for node, members in enumerate(node_groups):
        members = np.asarray(members, dtype=np.int64)
        if G == 1:
            local = [list(range(members.size))]
        else:
            sub = A[np.ix_(members, members)]
            sub_seed = (seed, layer, node + 1)
            if r == "auto":
                sel = select_ratio(sub, G, candidates, seed=sub_seed)
                local = sel.groupings[sel.chosen]
                diagnostics.append({"layer": layer, "node": node, **sel.to_json()})
            else:
                local = controlled_non_uniform_group(sub, G, float(r), seed=sub_seed)
        gpu_groups = _order_by_load([members[g].tolist() for g in local], load)
        _assign(row, gpu_groups, [topology.gpu_id(node, i) for i in range(G)])


def baseline_group(num_experts: int, num_layers: int, topology: ClusterTopology, mode: str,
                   affinities=None, loads=None, seed=0) -> PlacementPlan:
    """Reference placements: contiguous slices, or spectral groups of equal size."""
    n_gpu = topology.total_gpus
    n = num_experts
    if n_gpu > n:
        raise InfeasibleGroupingError(f"{n_gpu} GPUs cannot each hold a primary expert out of {n}")
    assignment = np.empty((num_layers, n), dtype=np.int64)
    if mode == "vanilla_contiguous":
        base = n // n_gpu
        row = np.empty(n, dtype=np.int64)
        row[: base * n_gpu] = np.arange(base * n_gpu) // base
        row[base * n_gpu:] = np.arange(n - base * n_gpu)
        assignment[:] = row
    elif mode == "uniform_spectral":
        if affinities is None:
            raise ValueError("uniform_spectral placement needs affinity matrices")
        E = n // n_gpu
        hi = E if n % n_gpu == 0 else E + 1
        for layer, A in enumerate(affinities):
            A = np.asarray(A, dtype=float)
            load = np.asarray(loads[layer], float) if loads is not None else A.sum(axis=1)
            groups = constrain_groups(A, spectral_cluster(A, n_gpu, (seed, layer)), E, hi)
            _assign(assignment[layer], _order_by_load(groups, load), range(n_gpu))
    else:
        raise ValueError(f"unknown baseline mode {mode!r}")
    return PlacementPlan(topology, assignment, [], mode)


def flat_group(affinities, topology: ClusterTopology, mode: str, r="auto", seed=0, loads=None,
               candidates=DEFAULT_RATIOS) -> PlacementPlan:
    """Single-level grouping straight onto GPUs (``controlled`` or ``fully_non_uniform``)."""
    n_gpu = topology.total_gpus
    n = np.asarray(affinities[0]).shape[0]
    if n_gpu > n:
        raise InfeasibleGroupingError(f"{n_gpu} GPUs cannot each hold a primary expert out of {n}")
    assignment = np.empty((len(affinities), n), dtype=np.int64)
    diagnostics = []
    for layer, A in enumerate(affinities):
        A = np.asarray(A, dtype=float)
        load = np.asarray(loads[layer], float) if loads is not None else A.sum(axis=1)
        if mode == "fully_non_uniform":
            groups = fully_non_uniform_group(A, n_gpu, (seed, layer))
        elif mode == "controlled":
            try:
                if r == "auto":
                    sel = select_ratio(A, n_gpu, candidates, seed=(seed, layer))
                    groups = sel.groupings[sel.chosen]
                    diagnostics.append({"layer": layer, "node": None, **sel.to_json()})
                else:
                    groups = controlled_non_uniform_group(A, n_gpu, float(r), seed=(seed, layer))
            except InfeasibleGroupingError as exc:
                raise InfeasibleGroupingError(f"layer {layer}: {exc}") from None
        else:
            raise ValueError(f"unknown grouping mode {mode!r}")
        _assign(assignment[layer], _order_by_load(groups, load), range(n_gpu))
    return PlacementPlan(topology, assignment, diagnostics, mode)


GROUPING_MODES = ("vanilla_contiguous", "uniform_spectral", "controlled", "fully_non_uniform", "hierarchical")


def build_placement(mode: str, affinities, loads, topology: ClusterTopology, r="auto", seed=0) -> PlacementPlan:
    if mode == "hierarchical":
        return hierarchical_group(affinities, topology, r=r, seed=seed, loads=loads)
    if mode in ("vanilla_contiguous", "uniform_spectral"):
        n = np.asarray(affinities[0]).shape[0]
        return baseline_group(n, len(affinities), topology, mode, affinities, loads, seed)
    return flat_group(affinities, topology, mode, r=r, seed=seed, loads=loads)
