import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import planted_affinity, trace_affinity
from oracles import best_two_way_utilization
from moeplace.affinity import affinity_utilization, intra_score, validate_partition
from moeplace.errors import InfeasibleGroupingError, IntegrityError
from moeplace.grouping import (
    DEFAULT_RATIOS,
    ClusterTopology,
    PlacementPlan,
    baseline_group,
    build_placement,
    constrain_groups,
    controlled_non_uniform_group,
    flat_group,
    fully_non_uniform_group,
    hierarchical_group,
    knee_index,
    refine_groups,
    select_ratio,
    size_band,
    spectral_cluster,
)


def random_affinity(seed, n, density=1.0):
    rng = np.random.default_rng(seed)
    M = rng.random((n, n)) * (rng.random((n, n)) < density)
    M = np.triu(M, 1)
    return M + M.T


def components(A):
    """Connected components of the affinity graph by depth-first search."""
    n = A.shape[0]
    seen, comps = set(), []
    for s in range(n):
        if s in seen:
            continue
        stack, comp = [s], []
        seen.add(s)
        while stack:
            v = stack.pop()
            comp.append(v)
            for w in np.flatnonzero(A[v] > 0):
                if int(w) not in seen:
                    seen.add(int(w))
                    stack.append(int(w))
        comps.append(sorted(comp))
    return sorted(comps)


# --- topology -----------------------------------------------------------------


def test_topology_mapping():
    t = ClusterTopology.parse("2x4")
    assert (t.num_nodes, t.gpus_per_node, t.total_gpus) == (2, 4, 8)
    for g in range(8):
        assert t.gpu_id(t.node_of(g), t.local_of(g)) == g
    assert t.gpu_nodes().tolist() == [0, 0, 0, 0, 1, 1, 1, 1]
    assert str(t) == "2x4"
    for bad in ("2", "ax2", "0x2"):
        with pytest.raises(ValueError):
            ClusterTopology.parse(bad)


# --- spectral clustering ------------------------------------------------------


def test_two_perfect_blocks_are_recovered():
    A = planted_affinity([5, 3], strong=4.0)
    rng = np.random.default_rng(0)
    perm = rng.permutation(8)
    A = A[np.ix_(perm, perm)]
    groups = spectral_cluster(A, 2, seed=3)
    assert sorted(groups) == components(A)


def test_all_zero_matrix_is_spread_round_robin():
    groups = spectral_cluster(np.zeros((4, 4)), 2)
    assert sorted(len(g) for g in groups) == [2, 2]
    assert groups == [[0, 2], [1, 3]]


def test_single_group_and_bad_counts():
    A = random_affinity(0, 5)
    assert spectral_cluster(A, 1) == [[0, 1, 2, 3, 4]]
    for D in (0, 6):
        with pytest.raises(InfeasibleGroupingError):
            spectral_cluster(A, D)
    assert fully_non_uniform_group(A, 2, seed=1) == spectral_cluster(A, 2, seed=1)


def test_zero_degree_experts_are_placed():
    A = planted_affinity([3, 3, 2])
    A[6:, :] = 0
    A[:, 6:] = 0
    groups = spectral_cluster(A, 2, seed=0)
    validate_partition(groups, 8)
    assert [0, 1, 2] in [[e for e in g if e < 3] for g in groups]


@given(st.integers(0, 10_000), st.integers(2, 16), st.data())
def test_spectral_partition_property_and_determinism(seed, n, data):
    D = data.draw(st.integers(1, n))
    A = random_affinity(seed, n, density=data.draw(st.floats(0.0, 1.0)))
    groups = spectral_cluster(A, D, seed)
    assert len(groups) == D
    validate_partition(groups, n)
    assert groups == spectral_cluster(A, D, seed)


# --- controlled grouping ------------------------------------------------------


def test_size_band_values():
    assert size_band(6, 2, 0.0) == (3, 1, 2, 4)
    assert size_band(64, 4, 0.25) == (16, 4, 12, 20)
    assert size_band(16, 2, 0.125) == (8, 1, 7, 9)
    # half-way values round up
    assert size_band(12, 1, 0.125)[1] == 2
    with pytest.raises(ValueError):
        size_band(8, 2, -0.1)


def test_six_experts_tight_band():
    A = random_affinity(2, 6)
    groups = controlled_non_uniform_group(A, 2, 0.0, seed=0)
    validate_partition(groups, 6)
    assert all(2 <= len(g) <= 4 for g in groups)


def test_isolated_expert_forces_a_split():
    A = planted_affinity([5, 1])
    _, _, lo, hi = size_band(6, 2, 0.0)
    groups = controlled_non_uniform_group(A, 2, 0.0, seed=0)
    assert all(lo <= len(g) <= hi for g in groups)
    validate_partition(groups, 6)


def test_unrefined_grouping_with_inactive_band_equals_spectral():
    A = planted_affinity([6, 2], strong=3.0) + random_affinity(1, 8) * 0.1
    _, _, lo, hi = size_band(8, 2, 4.0)
    assert lo == 1 and hi >= 8
    for seed in range(5):
        assert controlled_non_uniform_group(A, 2, 4.0, seed=seed, refine=False) == fully_non_uniform_group(A, 2, seed)


def test_refinement_never_lowers_intra_affinity():
    for seed in range(20):
        A = random_affinity(seed, 12)
        _, _, lo, hi = size_band(12, 3, 0.5)
        base = constrain_groups(A, spectral_cluster(A, 3, seed), lo, hi)
        refined = refine_groups(A, base, lo, hi)
        validate_partition(refined, 12)
        assert all(lo <= len(g) <= hi for g in refined)
        assert sum(intra_score(A, g) for g in refined) >= sum(intra_score(A, g) for g in base) - 1e-9


def test_infeasible_band_is_reported():
    A = random_affinity(0, 6)
    with pytest.raises(InfeasibleGroupingError):
        constrain_groups(A, [[0, 1, 2, 3, 4, 5], []], 4, 5)
    with pytest.raises(InfeasibleGroupingError):
        controlled_non_uniform_group(A, 7, 0.0)


@given(st.integers(0, 10_000), st.integers(2, 20), st.data())
def test_controlled_sizes_stay_in_band(seed, n, data):
    D = data.draw(st.integers(1, n))
    r = data.draw(st.sampled_from(DEFAULT_RATIOS + (2.0,)))
    A = random_affinity(seed, n, density=data.draw(st.floats(0.0, 1.0)))
    _, _, lo, hi = size_band(n, D, r)
    for refine in (False, True):
        groups = controlled_non_uniform_group(A, D, r, seed=seed, refine=refine)
        validate_partition(groups, n)
        assert all(lo <= len(g) <= hi for g in groups)


@pytest.mark.parametrize("blocks", [[11, 5], [10, 6], [12, 4], [7, 7, 2]])
def test_relaxing_the_band_does_not_lose_utilization(blocks):
    n = sum(blocks)
    D = len(blocks) if len(blocks) == 2 else 2
    for seed in range(5):
        A = planted_affinity(blocks, strong=5.0) + random_affinity(seed, n) * 0.5
        tight = affinity_utilization(A, controlled_non_uniform_group(A, D, 0.0, seed=seed))
        loose = affinity_utilization(A, controlled_non_uniform_group(A, D, 1.0, seed=seed))
        assert loose >= tight - 1e-9


@pytest.mark.parametrize(
    "source,r",
    [("trace", 0.0), ("trace", 0.5), ("trace", 1.0), ("uniform", 0.25)],
)
def test_near_optimal_against_exhaustive_search(source, r):
    worst = 1.0
    for seed in range(100):
        A = trace_affinity(seed) if source == "trace" else random_affinity(seed, 8)
        if np.triu(A, 1).sum() == 0:
            continue
        _, _, lo, hi = size_band(8, 2, r)
        u = affinity_utilization(A, controlled_non_uniform_group(A, 2, r, seed=seed))
        worst = min(worst, u / best_two_way_utilization(A.tolist(), lo, hi))
    assert worst >= 0.9


# --- knee selection -----------------------------------------------------------


def test_knee_examples():
    assert knee_index([0, 1, 2, 3], [0, 0.9, 0.95, 1.0]) == 1
    assert knee_index([0, 1, 2, 3], [0, 1, 2, 3]) == 0
    # convex curve: no diminishing returns, so no knee
    assert knee_index([0, 1, 2, 3], [0, 0.1, 0.3, 1.0]) == 0
    assert knee_index([0, 1, 2, 3], [0, 0.1, 0.95, 1.0]) == 2
    with pytest.warns(RuntimeWarning):
        assert knee_index([1, 1, 1], [0.5, 0.5, 0.5]) == 0


def test_knee_is_unit_free():
    xs, ys = [0, 1, 2, 3], [0, 0.9, 0.95, 1.0]
    assert knee_index(np.array(xs) * 100, ys) == knee_index(xs, np.array(ys) * 1e-3) == 1


def test_select_ratio_contract():
    A = planted_affinity([10, 6], strong=4.0) + random_affinity(0, 16)
    sel = select_ratio(A, 2, seed=1)
    assert len(sel.utilization) == len(sel.deviation) == len(DEFAULT_RATIOS)
    assert 0 <= sel.chosen < len(DEFAULT_RATIOS)
    assert sel.ratio == DEFAULT_RATIOS[sel.chosen]
    assert sel.to_json()["r"] == sel.ratio
    assert sel.utilization[sel.chosen] == affinity_utilization(A, sel.groupings[sel.chosen])
    for bad in ([0.0, 0.5], [0.0, 0.5, 0.25], [0.0, 0.5, 1.5], [-0.1, 0.5, 1.0]):
        with pytest.raises(ValueError):
            select_ratio(A, 2, candidates=bad)


def test_select_ratio_on_massless_matrix_warns_and_picks_smallest():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        sel = select_ratio(np.zeros((8, 8)), 2)
    assert sel.chosen == 0
    assert any(issubclass(w.category, RuntimeWarning) for w in caught)


# --- placements ---------------------------------------------------------------


def test_single_gpu_holds_everything():
    plan = hierarchical_group([random_affinity(0, 6)] * 2, ClusterTopology(1, 1))
    assert not plan.assignment.any()


def test_four_experts_on_four_gpus():
    plan = hierarchical_group([random_affinity(3, 4)], ClusterTopology(2, 2))
    assert sorted(plan.assignment[0].tolist()) == [0, 1, 2, 3]


def test_too_many_gpus():
    with pytest.raises(InfeasibleGroupingError):
        hierarchical_group([random_affinity(0, 3)], ClusterTopology(2, 2))
    with pytest.raises(InfeasibleGroupingError):
        baseline_group(3, 1, ClusterTopology(2, 2), "vanilla_contiguous")


@pytest.mark.parametrize("seed", range(6))
def test_planted_blocks_map_to_nodes_and_gpus(seed):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(64)
    A = planted_affinity([16] * 4, strong=20.0) + random_affinity(seed, 64)
    A = A[np.ix_(perm, perm)]
    block = perm // 16
    topo = ClusterTopology(2, 2)
    plan = hierarchical_group([A], topo, r="auto", seed=seed)
    row = plan.assignment[0]
    node_of = topo.gpu_nodes()[row]
    for node in range(2):
        held = np.bincount(block[node_of == node], minlength=4)
        # whole blocks only
        assert set(held.tolist()) <= {0, 16}
        if held.sum() == 32:
            # a node with two blocks gives each GPU one block
            for g in (topo.gpu_id(node, 0), topo.gpu_id(node, 1)):
                assert len(set(block[row == g].tolist())) == 1
    vanilla = baseline_group(64, 1, topo, "vanilla_contiguous")
    assert affinity_utilization(A, plan.gpu_experts(0)) > affinity_utilization(A, vanilla.gpu_experts(0))
    assert {d["node"] for d in plan.ratio_selection} == {0, 1}


@given(st.integers(0, 1000), st.sampled_from(["1x1", "1x4", "2x2", "4x1", "2x3"]), st.sampled_from(["auto", 0.0, 0.5]))
def test_hierarchical_partition_and_determinism(seed, topo, r):
    topology = ClusterTopology.parse(topo)
    affs = [random_affinity(seed + l, 24, density=0.5) for l in range(2)]
    plan = hierarchical_group(affs, topology, r=r, seed=seed)
    plan.validate()
    for layer in range(2):
        groups = plan.gpu_experts(layer)
        validate_partition(groups, 24)
    again = hierarchical_group(affs, topology, r=r, seed=seed)
    assert np.array_equal(plan.assignment, again.assignment)


def test_vanilla_contiguous():
    plan = baseline_group(8, 2, ClusterTopology(2, 2), "vanilla_contiguous")
    for g in range(4):
        assert plan.gpu_experts(0)[g] == [2 * g, 2 * g + 1]
    odd = baseline_group(10, 1, ClusterTopology(1, 4), "vanilla_contiguous")
    assert [len(g) for g in odd.gpu_experts(0)] == [3, 3, 2, 2]
    assert odd.assignment[0].tolist() == [0, 0, 1, 1, 2, 2, 3, 3, 0, 1]


def test_uniform_spectral_sizes():
    affs = [random_affinity(s, 8) for s in range(3)]
    plan = baseline_group(8, 3, ClusterTopology(2, 2), "uniform_spectral", affs)
    for layer in range(3):
        assert [len(g) for g in plan.gpu_experts(layer)] == [2, 2, 2, 2]
    with pytest.raises(ValueError):
        baseline_group(8, 1, ClusterTopology(2, 2), "uniform_spectral")
    with pytest.raises(ValueError):
        baseline_group(8, 1, ClusterTopology(2, 2), "nope")


def test_groups_are_numbered_heaviest_first():
    A = planted_affinity([4, 4])
    load = np.array([1, 1, 1, 1, 9, 9, 9, 9])
    plan = flat_group([A], ClusterTopology(1, 2), "controlled", r=0.0, loads=[load])
    assert plan.gpu_experts(0) == [[4, 5, 6, 7], [0, 1, 2, 3]]


@pytest.mark.parametrize("mode", ["vanilla_contiguous", "uniform_spectral", "controlled", "fully_non_uniform", "hierarchical"])
def test_build_placement_modes_round_trip(mode):
    affs = [random_affinity(s, 12) for s in range(2)]
    loads = [a.sum(axis=1) for a in affs]
    plan = build_placement(mode, affs, loads, ClusterTopology(2, 2), r="auto", seed=1)
    assert plan.mode == mode
    for layer in range(2):
        validate_partition(plan.gpu_experts(layer), 12)
    back = PlacementPlan.from_json(plan.to_json())
    assert np.array_equal(back.assignment, plan.assignment)
    assert back.topology == plan.topology


def test_flat_group_rejects_unknown_mode():
    with pytest.raises(ValueError):
        flat_group([random_affinity(0, 8)], ClusterTopology(1, 2), "nope")


def test_plan_file_integrity():
    doc = baseline_group(4, 2, ClusterTopology(1, 2), "vanilla_contiguous").to_json()
    assert doc["topology"] == {"nodes": 1, "gpus_per_node": 2}
    assert doc["layers"][0]["placement"] == {"0": 0, "1": 0, "2": 1, "3": 1}
    bad = dict(doc, layers=[doc["layers"][0], {"layer": 1, "placement": {"0": 0, "1": 0, "2": 1}}])
    with pytest.raises(IntegrityError):
        PlacementPlan.from_json(bad)
    bad = dict(doc, layers=[{"layer": 0, "placement": {"0": 0, "1": 5, "2": 1, "3": 1}}])
    with pytest.raises(IntegrityError):
        PlacementPlan.from_json(bad)
