"""Command-line pipeline: gen-trace -> profile -> plan -> simulate -> compare.

Settings come from built-in defaults, then an optional flat JSON config
(``--config``, dotted keys such as ``"grouping.ratio"``), then flags.

Exit codes: 0 success, 2 usage, 3 input integrity, 4 infeasible grouping.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .affinity import build_profile, profile_from_json, profile_to_json
from .errors import InfeasibleGroupingError, IntegrityError, TraceFormatError
from .grouping import GROUPING_MODES, ClusterTopology, PlacementPlan, build_placement
from .replication import REPLICATION_MODES, ReplicaPlan, plan_replication
from .routing import POLICIES, compute_weights
from .simulator import SimReport, compare, comparison_csv, format_table, simulate
from .trace import PRESETS, ModelShape, SyntheticSpec, concat_traces, generate_synthetic_trace, load_trace, save_trace

EXIT_OK, EXIT_USAGE, EXIT_INTEGRITY, EXIT_INFEASIBLE = 0, 2, 3, 4


@dataclass
class RunConfig:
    topology: str = "2x2"
    preset: str = "olmoe"
    layers: int | None = None
    experts: int | None = None
    top_k: int | None = None
    num_tokens: int | None = None
    batch: int = 128
    prefill: int = 64
    decode: int = 16
    num_blocks: int = 4
    within_block_prob: float = 0.9
    popularity_skew: float = 0.5
    layout_seed: int | None = None
    grouping: str = "hierarchical"
    ratio: str = "auto"
    replication: str = "dynamic"
    hot_count: int = 2
    params_per_expert: int = 0
    routing: str = "wrr"
    split: str = "max"
    include_combine: bool = False
    seed: int = 0

    def shape(self) -> ModelShape:
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        base = PRESETS[self.preset]
        return ModelShape(
            self.layers or base.num_layers,
            self.experts or base.num_experts,
            self.top_k or base.top_k,
        )

    def tokens(self) -> int:
        # batch x (prefill + decode) unless an explicit count is given
        if self.num_tokens is not None:
            return self.num_tokens
        return self.batch * (self.prefill + self.decode)

    def cluster(self) -> ClusterTopology:
        return ClusterTopology.parse(self.topology)

    def ratio_value(self):
        if str(self.ratio) == "auto":
            return "auto"
        r = float(self.ratio)
        if r < 0:
            raise ValueError("ratio must be 'auto' or a non-negative number")
        return r

    def validate(self) -> list:
        """Raise on invalid settings; return notes about ineffective combinations."""
        self.shape()
        self.cluster()
        self.ratio_value()
        for name, value, allowed in (
            ("grouping", self.grouping, GROUPING_MODES),
            ("replication", self.replication, REPLICATION_MODES),
            ("routing", self.routing, POLICIES),
            ("split", self.split, ("max", "hot")),
        ):
            if value not in allowed:
                raise ValueError(f"unknown {name} {value!r}; choose from {list(allowed)}")
        notes = []
        if self.replication == "none" and self.routing != "wrr":
            notes.append(f"routing policy {self.routing!r} has no effect without replication")
        if self.grouping in ("vanilla_contiguous", "uniform_spectral", "fully_non_uniform") and self.ratio != "auto":
            notes.append(f"ratio is ignored by grouping mode {self.grouping!r}")
        return notes


# dotted config-file key -> RunConfig field
CONFIG_KEYS = {
    "cluster.topology": "topology",
    "model.preset": "preset",
    "model.layers": "layers",
    "model.experts": "experts",
    "model.top_k": "top_k",
    "workload.num_tokens": "num_tokens",
    "workload.batch": "batch",
    "workload.prefill": "prefill",
    "workload.decode": "decode",
    "trace.num_blocks": "num_blocks",
    "trace.within_block_prob": "within_block_prob",
    "trace.popularity_skew": "popularity_skew",
    "trace.layout_seed": "layout_seed",
    "grouping.mode": "grouping",
    "grouping.ratio": "ratio",
    "replication.mode": "replication",
    "replication.hot_count": "hot_count",
    "replication.params_per_expert": "params_per_expert",
    "routing.policy": "routing",
    "routing.split": "split",
    "simulate.include_combine": "include_combine",
    "seed": "seed",
}


def _flatten(doc, prefix=""):
    out = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def load_config(path) -> dict:
    """Read a config file into ``{field: value}``."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValueError("config file must hold a JSON object")
    out = {}
    for key, value in _flatten(doc).items():
        if key not in CONFIG_KEYS:
            raise ValueError(f"unknown config key {key!r}")
        out[CONFIG_KEYS[key]] = value
    return out


# flag dest -> RunConfig field
FLAG_FIELDS = {
    "seed": "seed", "topology": "topology", "grouping": "grouping", "replication": "replication",
    "routing": "routing", "ratio": "ratio", "preset": "preset", "tokens": "num_tokens",
    "blocks": "num_blocks", "within_block_prob": "within_block_prob", "skew": "popularity_skew",
    "layout_seed": "layout_seed", "split": "split", "hot_count": "hot_count",
    "include_combine": "include_combine",
}


def resolve_config(args) -> tuple[RunConfig, set]:
    """Merge defaults, the config file and flags; also return the explicitly set fields."""
    values = load_config(args.config) if getattr(args, "config", None) else {}
    for dest, name in FLAG_FIELDS.items():
        v = getattr(args, dest, None)
        if v is not None and v is not False:
            values[name] = v
    known = {f.name for f in fields(RunConfig)}
    cfg = RunConfig(**{k: v for k, v in values.items() if k in known})
    return cfg, set(values)


def _digest(doc) -> str:
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _write_json(path, doc) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def _read_json(path):
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise IntegrityError(f"{path}: not valid JSON ({exc})") from None


def _note(msg) -> None:
    print(f"note: {msg}", file=sys.stderr)


# --- commands ---------------------------------------------------------------


def cmd_gen_trace(args, cfg: RunConfig) -> int:
    spec = SyntheticSpec(
        cfg.shape(), cfg.tokens(), cfg.num_blocks, cfg.within_block_prob,
        cfg.popularity_skew, cfg.seed, cfg.layout_seed,
    )
    trace = generate_synthetic_trace(spec)
    save_trace(trace, args.out)
    s = trace.shape
    print(f"wrote {args.out}: {s.num_layers} layers x {s.num_experts} experts, top_k={s.top_k}, {trace.num_tokens} tokens")
    return EXIT_OK


def cmd_profile(args, cfg: RunConfig) -> int:
    traces = [load_trace(p) for p in args.traces]
    trace = concat_traces(traces)
    if trace.num_tokens == 0:
        raise IntegrityError("cannot profile a trace with no tokens")
    profile = build_profile(trace)
    doc = profile_to_json(profile)
    doc["sources"] = [str(p) for p in args.traces]
    _write_json(args.out, doc)
    print(f"wrote {args.out}: {len(profile.layers)} layers from {trace.num_tokens} tokens")
    return EXIT_OK


def cmd_plan(args, cfg: RunConfig) -> int:
    pdoc = _read_json(args.profile)
    try:
        profile = profile_from_json(pdoc)
    except (KeyError, TypeError, ValueError) as exc:
        raise IntegrityError(f"{args.profile}: malformed profile ({exc})") from None
    topology = cfg.cluster()
    placement = build_placement(cfg.grouping, profile.affinities(), profile.loads(), topology,
                                r=cfg.ratio_value(), seed=cfg.seed)
    replicas = plan_replication(placement, profile.loads(), cfg.replication,
                                affinities=profile.affinities(), hot_count=cfg.hot_count)
    compute_weights(replicas, cfg.split)

    inputs = {"trace_hash": profile.trace_hash, "profile_hash": _digest(pdoc)}
    plan_doc = placement.to_json()
    plan_doc["inputs"] = inputs
    plan_doc["config"] = asdict(cfg)
    rep_doc = replicas.to_json()
    rep_doc["inputs"] = {**inputs, "plan_hash": _digest(plan_doc)}
    rep_doc["split"] = cfg.split
    if cfg.params_per_expert:
        rep_doc["memory_overhead"] = replicas.memory_overhead(topology.total_gpus, cfg.params_per_expert).tolist()
    out = Path(args.out)
    _write_json(out / "plan.json", plan_doc)
    _write_json(out / "replicas.json", rep_doc)
    n_rep = [lr.n_replica for lr in replicas.layers]
    extra = f", n_replica {min(n_rep)}..{max(n_rep)}" if n_rep else ""
    print(f"wrote {out}/plan.json and {out}/replicas.json ({cfg.grouping} + {cfg.replication}{extra})")
    return EXIT_OK


def _plan_paths(args):
    plan = Path(args.plan)
    if plan.is_dir():
        replicas = args.replicas or (plan / "replicas.json" if (plan / "replicas.json").exists() else None)
        return plan / "plan.json", replicas
    return plan, args.replicas


def cmd_simulate(args, cfg: RunConfig, explicit: set) -> int:
    plan_path, rep_path = _plan_paths(args)
    plan_doc = _read_json(plan_path)
    try:
        plan = PlacementPlan.from_json(plan_doc)
        rep_doc = _read_json(rep_path) if rep_path else None
        replicas = ReplicaPlan.from_json(rep_doc) if rep_doc else None
    except (KeyError, TypeError) as exc:
        raise IntegrityError(f"malformed plan file ({exc})") from None
    if replicas is not None and not replicas.weights and any(lr.hot for lr in replicas.layers):
        compute_weights(replicas, rep_doc.get("split", cfg.split))
    if (replicas is None or replicas.mode == "none") and "routing" in explicit:
        _note("routing policy has no effect: the plan has no replicas")
    topology = cfg.cluster() if "topology" in explicit else None
    trace = load_trace(args.trace)
    config = {
        "trace": str(args.trace),
        "inputs": {
            "plan_hash": _digest(plan_doc),
            "replicas_hash": _digest(rep_doc) if rep_doc else None,
            "plan_trace_hash": plan_doc.get("inputs", {}).get("trace_hash"),
        },
        "run": asdict(cfg),
    }
    report = simulate(trace, plan, replicas, topology=topology, policy=cfg.routing, seed=cfg.seed,
                      include_combine=cfg.include_combine, config=config)
    out = Path(args.out)
    _write_json(out, report.to_json())
    out.with_suffix(".csv").write_text(report.to_csv(), encoding="utf-8")
    m = report.metrics()
    print(
        f"wrote {out}: cross_node={m['cross_node_tokens']} intra_node={m['intra_node_tokens']} "
        f"load_std={m['mean_layer_load_std']:.2f} digest={report.digest()[:16]}"
    )
    return EXIT_OK


def cmd_compare(args, cfg: RunConfig) -> int:
    reports = []
    for p in args.reports:
        try:
            reports.append(SimReport.from_json(_read_json(p)))
        except (KeyError, TypeError) as exc:
            raise IntegrityError(f"{p}: malformed report ({exc})") from None
    if not 0 <= args.baseline < len(reports):
        raise ValueError(f"baseline index {args.baseline} out of range for {len(reports)} reports")
    labels = args.labels.split(",") if args.labels else [Path(p).stem for p in args.reports]
    if len(labels) != len(reports):
        raise ValueError("need one label per report")
    rows = compare(reports, args.baseline)
    print(format_table(rows, labels))
    if args.out:
        Path(args.out).write_text(comparison_csv(rows, labels), encoding="utf-8")
    return EXIT_OK


# --- argument parsing -------------------------------------------------------


def _common(p, out_help, out_required=True):
    p.add_argument("--config", help="flat JSON config with dotted keys")
    p.add_argument("--seed", type=int)
    p.add_argument("--topology", help="cluster shape NxG, e.g. 2x4")
    p.add_argument("--grouping", choices=GROUPING_MODES)
    p.add_argument("--replication", choices=REPLICATION_MODES)
    p.add_argument("--routing", choices=POLICIES)
    p.add_argument("--ratio", help="non-uniformity ratio r, or 'auto'")
    p.add_argument("--out", required=out_required, help=out_help)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moeplace", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-trace", help="generate a synthetic routing trace (JSONL)")
    _common(p, "trace file to write")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--tokens", type=int, help="tokens per layer (default batch x (prefill + decode))")
    p.add_argument("--blocks", type=int, help="number of co-activation blocks")
    p.add_argument("--within-block-prob", type=float)
    p.add_argument("--skew", type=float, help="Zipf exponent of expert popularity")
    p.add_argument("--layout-seed", type=int, help="seed of the block layout (default: --seed)")
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("profile", help="build per-layer affinity matrices and loads")
    p.add_argument("traces", nargs="+", help="one or more traces; several are profiled jointly")
    _common(p, "profile JSON to write")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("plan", help="compute placement and replica plans")
    p.add_argument("profile")
    _common(p, "directory for plan.json and replicas.json")
    p.add_argument("--split", choices=("max", "hot"), help="per-instance load share used for polling weights")
    p.add_argument("--hot-count", type=int, help="experts copied per layer by the every_gpu modes")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="replay a trace against a plan")
    p.add_argument("trace")
    p.add_argument("--plan", required=True, help="plan.json, or the directory written by 'plan'")
    p.add_argument("--replicas", help="replicas.json (default: next to plan.json)")
    p.add_argument("--include-combine", action="store_true", help="also count the combine phase")
    _common(p, "report JSON to write (a CSV is written next to it)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="tabulate reports against a baseline")
    p.add_argument("reports", nargs="+")
    p.add_argument("--baseline", type=int, default=0, help="index of the baseline report")
    p.add_argument("--labels", help="comma-separated column labels")
    _common(p, "CSV file to write", out_required=False)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg, explicit = resolve_config(args)
        for note in cfg.validate():
            if args.command == "plan":
                _note(note)
        if args.command == "simulate":
            return cmd_simulate(args, cfg, explicit)
        return args.func(args, cfg)
    except (TraceFormatError, IntegrityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except InfeasibleGroupingError as exc:
        print(f"error: infeasible grouping: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ValueError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
