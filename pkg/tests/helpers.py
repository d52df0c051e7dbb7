import numpy as np

from moeplace.affinity import build_affinity
from moeplace.grouping import ClusterTopology, PlacementPlan
from moeplace.replication import HotExpert, LayerReplicas, ReplicaPlan
from moeplace.trace import ModelShape, RoutingTrace, SyntheticSpec, generate_synthetic_trace


def make_trace(rows, n):
    """Trace from nested lists ``rows[layer][token] = expert list``."""
    arr = np.asarray(rows, dtype=np.int32)
    return RoutingTrace(ModelShape(arr.shape[0], n, arr.shape[2]), arr)


def planted_affinity(block_sizes, strong=10.0, weak=0.0):
    """Block-diagonal affinity: ``strong`` inside blocks, ``weak`` across them."""
    n = sum(block_sizes)
    A = np.full((n, n), weak)
    start = 0
    for b in block_sizes:
        A[start:start + b, start:start + b] = strong
        start += b
    np.fill_diagonal(A, 0.0)
    return A


MICRO_TOPOLOGIES = ((1, 1), (1, 2), (2, 1), (1, 3), (1, 4), (2, 2), (4, 1))


def micro_instance(rng):
    """Random tiny (trace, plan, replicas, weights) with at most 3 tokens, 2 layers, 4 GPUs."""
    nodes, per = MICRO_TOPOLOGIES[rng.integers(len(MICRO_TOPOLOGIES))]
    topo = ClusterTopology(int(nodes), int(per))
    n_gpu = topo.total_gpus
    layers = int(rng.integers(1, 3))
    n = int(rng.integers(1, 9))
    k = int(rng.integers(1, min(n, 4) + 1))
    tokens = int(rng.integers(0, 4))
    sel = np.array([[rng.permutation(n)[:k] for _ in range(tokens)] for _ in range(layers)], dtype=np.int32)
    trace = RoutingTrace(ModelShape(layers, n, k), sel.reshape(layers, tokens, k))
    plan = PlacementPlan(topo, rng.integers(0, n_gpu, size=(layers, n)), mode="micro")
    rep_layers, weights = [], {}
    for layer in range(layers):
        hot = []
        if n_gpu > 1:
            for e in range(n):
                if rng.random() < 0.4:
                    primary = int(plan.assignment[layer, e])
                    others = [g for g in range(n_gpu) if g != primary]
                    m = int(rng.integers(1, len(others) + 1))
                    hot.append(HotExpert(e, primary, sorted(rng.permutation(others)[:m].tolist()), 1.0))
        rep_layers.append(LayerReplicas(layer, 1.0, max(1, max((len(h.replicas) for h in hot), default=1)), hot))
        w = {}
        for h in hot:
            raw = rng.random(len(h.hosts)) + 0.05
            w[h.expert] = {g: float(x / raw.sum()) for g, x in zip(h.hosts, raw)}
        weights[layer] = w
    return trace, plan, ReplicaPlan("micro", rep_layers, weights), weights


def trace_affinity(seed, n=8):
    """Co-activation counts of a small random synthetic trace."""
    rng = np.random.default_rng(seed)
    spec = SyntheticSpec(
        ModelShape(1, n, int(rng.integers(2, 4))),
        int(rng.integers(50, 400)),
        num_blocks=int(rng.integers(1, 4)),
        within_block_prob=float(rng.random()),
        popularity_skew=float(rng.random() * 1.5),
        seed=seed,
    )
    return build_affinity(generate_synthetic_trace(spec), 0).astype(float)
