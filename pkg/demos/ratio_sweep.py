"""How the non-uniformity ratio r trades utilization against size balance.

For one layer of a planted trace, groups the experts into D groups at each
candidate r and prints utilization U and size deviation S, marking the knee
that automatic selection would pick.

    python demos/ratio_sweep.py [--groups 4] [--layer 0]
"""

import argparse

from moeplace.affinity import affinity_utilization, build_affinity, size_deviation
from moeplace.grouping import DEFAULT_RATIOS, controlled_non_uniform_group, knee_index
from moeplace.trace import PRESETS, SyntheticSpec, generate_synthetic_trace


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--groups", type=int, default=4)
    ap.add_argument("--layer", type=int, default=0)
    ap.add_argument("--tokens", type=int, default=5000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    shape = PRESETS["olmoe"]
    spec = SyntheticSpec(shape, args.tokens, num_blocks=6, within_block_prob=0.8, popularity_skew=0.8, seed=args.seed)
    A = build_affinity(generate_synthetic_trace(spec), args.layer).astype(float)
    E = shape.num_experts // args.groups

    utils, devs = [], []
    for r in DEFAULT_RATIOS:
        groups = controlled_non_uniform_group(A, args.groups, r, seed=args.seed)
        utils.append(affinity_utilization(A, groups))
        devs.append(size_deviation(groups, E))
    knee = knee_index(devs, utils)

    print(f"{'r':>6} {'U':>8} {'S':>8}  sizes")
    for i, r in enumerate(DEFAULT_RATIOS):
        sizes = sorted(len(g) for g in controlled_non_uniform_group(A, args.groups, r, seed=args.seed))
        mark = "  <- knee" if i == knee else ""
        print(f"{r:>6} {utils[i]:>8.3f} {devs[i]:>8.2f}  {sizes}{mark}")


if __name__ == "__main__":
    main()
