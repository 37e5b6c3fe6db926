"""Command line entry point.

Subcommands cover the main workflows: `simulate` (block prefill under a
budget), `compare` (retained-set overlap and diversity across policies),
`verify-theory` (randomized bound suites), `flops`, `bench`, and
`gen-trace`. Human-readable text goes to stderr; machine-readable CSV
goes to files or stdout so pipelines stay clean.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric
failure (including bound violations).
"""

import argparse
import os
import sys

import numpy as np

from . import analysis, attention, policies, theory, traceio
from .errors import (
    ConfigError,
    ContextError,
    DimError,
    DomainError,
    FullyMaskedError,
    KvEvictError,
    OrderError,
    ParseError,
    SchemaError,
    SizeError,
    UndefinedCorrelation,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

CONFIG_ERRORS = (ConfigError, DimError, OrderError, ContextError, SchemaError, ValueError)
IO_ERRORS = (OSError, ParseError)
NUMERIC_ERRORS = (DomainError, FullyMaskedError, UndefinedCorrelation, SizeError)

DEFAULT_BLOCK = 128


def _parse_synth(text: str, seed: int) -> attention.SynthSpec:
    """Parse the k=v synth grammar, e.g. 'T=64,d=16,outliers=2,kappa=8'."""
    mapping = {
        "T": "length",
        "d": "head_dim",
        "layers": "layers",
        "kv_heads": "kv_heads",
        "q_heads": "q_heads",
        "kappa": "concentration",
        "outliers": "n_outliers",
        "separation": "separation",
        "seed": "seed",
    }
    fields: dict = {"seed": seed}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ConfigError(f"synth spec entry {part!r} is not key=value")
        key, value = part.split("=", 1)
        key = key.strip()
        if key not in mapping:
            raise ConfigError(f"unknown synth key {key!r}; expected one of {sorted(mapping)}")
        name = mapping[key]
        fields[name] = float(value) if name in ("concentration", "separation") else int(value)
    if "length" not in fields or "head_dim" not in fields:
        raise ConfigError("synth spec needs at least T=<len>,d=<dim>")
    if "q_heads" not in fields and "kv_heads" in fields:
        fields["q_heads"] = fields["kv_heads"]
    return attention.SynthSpec(**fields)


def _load_trace(args) -> traceio.TokenTrace:
    if getattr(args, "trace", None):
        return traceio.read_trace(args.trace)
    if getattr(args, "synth", None):
        return attention.synth_trace(_parse_synth(args.synth, args.seed))
    raise ConfigError("provide --trace FILE or --synth SPEC")


def _policy_from_args(args, name: str | None = None) -> policies.EvictionPolicySpec:
    return policies.parse_policy(
        name or args.policy,
        anchor=args.anchor,
        metric=args.metric,
        window_fraction=args.window_fraction,
        snap_kernel=args.snap_kernel,
        snap_recent=args.snap_recent,
        sink_count=args.sink_count,
        seed=args.seed,
    )


def _write_rows(args, rows, schema: str) -> None:
    if args.out:
        traceio.write_report_csv(rows, schema, args.out)
    else:
        traceio.write_report_csv(rows, schema, sys.stdout)


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("KVEVICT_WORKERS", "1")))
    except ValueError:
        return 1


def cmd_simulate(args) -> int:
    trace = _load_trace(args)
    model = attention.AttentionModel.for_trace(trace)
    policy = _policy_from_args(args)
    if args.budget < 1:
        raise ConfigError("budget must be >= 1")
    report = attention.run_block_prompt(
        trace, model, policy, budget=args.budget, block_size=args.block,
        max_workers=_workers(),
    )
    _write_rows(args, report.rows(), "simulation")
    print(
        f"simulated {trace.length} tokens, {trace.layers} layer(s) x "
        f"{trace.kv_heads} head(s), policy {policy.kind.value}, "
        f"budget {args.budget}, block {args.block}",
        file=sys.stderr,
    )
    return EXIT_OK


def cmd_compare(args) -> int:
    trace = _load_trace(args)
    model = attention.AttentionModel.for_trace(trace)
    names = [p.strip() for p in args.policies.split(",") if p.strip()]
    if not names:
        raise ConfigError("--policies must name at least one policy")
    if args.budget < 1:
        raise ConfigError("budget must be >= 1")
    finals = {}
    logdets = {}
    for name in names:
        policy = _policy_from_args(args, name)
        report = attention.run_block_prompt(
            trace, model, policy, budget=args.budget, block_size=args.block,
            max_workers=_workers(),
        )
        finals[name] = [set(rec.final_cache.time_ids.tolist()) for rec in report.heads]
        logdets[name] = float(
            np.mean([analysis.log_det_gram(rec.final_cache.keys) for rec in report.heads])
        )
    rows = []
    for a in names:
        for b in names:
            overlaps = [
                len(sa & sb) / max(1, max(len(sa), len(sb)))
                for sa, sb in zip(finals[a], finals[b])
            ]
            rows.append((a, b, float(np.mean(overlaps)), logdets[a], logdets[b]))
    _write_rows(args, rows, "compare")
    return EXIT_OK


def cmd_verify_theory(args) -> int:
    if args.instances < 0:
        raise ConfigError("--instances must be >= 0")
    rows = []
    total_violations = 0
    if args.instances > 0:
        suites = (
            theory.run_lemma1_suite(args.instances, seed=args.seed, fault=args.fault_sign_flip),
            theory.run_theorem2_suite(args.instances, seed=args.seed + 1, fault=args.fault_sign_flip),
            theory.run_orthsum_suite(args.instances, seed=args.seed + 2, fault=args.fault_sign_flip),
        )
        for suite in suites:
            rows.append(suite.row())
            total_violations += suite.violations
            print(
                f"{suite.check}: {suite.instances} instances, "
                f"{suite.violations} violations, max slack {suite.max_slack:.3e}",
                file=sys.stderr,
            )
    _write_rows(args, rows, "bounds")
    return EXIT_NUMERIC if total_violations else EXIT_OK


def cmd_flops(args) -> int:
    report = analysis.flop_count_keydiff(args.n, args.d)
    print(report.weighted_total)
    print(
        f"n={report.n} d={report.d}: {report.mults} mult, {report.adds} add, "
        f"{report.divs} div, {report.sqrts} sqrt",
        file=sys.stderr,
    )
    return EXIT_OK


def cmd_bench(args) -> int:
    policy = _policy_from_args(args)
    grid = [int(x) for x in args.n_grid.split(",") if x.strip()]
    if not grid:
        raise ConfigError("--n-grid must list at least one size")
    points = analysis.scaling_bench(policy, grid, d=args.d, trials=args.trials,
                                    seed=args.seed)
    rows = [(policy.kind.value, n, t) for n, t in points]
    _write_rows(args, rows, "scaling")
    if len(points) >= 2:
        print(f"log-log slope: {analysis.loglog_slope(points):.3f}", file=sys.stderr)
    return EXIT_OK


def cmd_gen_trace(args) -> int:
    spec = _parse_synth(args.synth, args.seed)
    trace = attention.synth_trace(spec)
    traceio.write_trace(trace, args.out)
    print(f"wrote {args.out}: T={trace.length} d={trace.head_dim} "
          f"layers={trace.layers} kv_heads={trace.kv_heads}", file=sys.stderr)
    return EXIT_OK


def _add_source_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--trace", help="KVTR trace file to process")
    p.add_argument("--synth", help="synthetic trace spec, e.g. T=64,d=16,outliers=2")


def _add_policy_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--anchor", choices=[a.value for a in policies.AnchorKind])
    p.add_argument("--metric", choices=[m.value for m in policies.MetricKind])
    p.add_argument("--window-fraction", type=float, dest="window_fraction")
    p.add_argument("--snap-kernel", type=int, dest="snap_kernel")
    p.add_argument("--snap-recent", type=int, dest="snap_recent")
    p.add_argument("--sink-count", type=int, dest="sink_count")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kvevict",
        description="KV cache eviction simulation, comparison, and verification",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="block prefill under a cache budget")
    _add_source_args(p)
    _add_policy_args(p)
    p.add_argument("--policy", required=True)
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--block", type=int, default=DEFAULT_BLOCK)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="retained-set overlap across policies")
    _add_source_args(p)
    _add_policy_args(p)
    p.add_argument("--policies", required=True, help="comma-separated policy names")
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--block", type=int, default=DEFAULT_BLOCK)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("verify-theory", help="randomized bound verification suites")
    p.add_argument("--instances", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--fault-sign-flip", action="store_true",
                   help=argparse.SUPPRESS)  # negative-control test hook
    p.set_defaults(func=cmd_verify_theory)

    p = sub.add_parser("flops", help="instruction-count model of the O(n) scorer")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("bench", help="scoring wall-time scaling fit")
    _add_policy_args(p)
    p.add_argument("--policy", required=True)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--n-grid", dest="n_grid", default="1024,2048,4096,8192,16384,32768")
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gen-trace", help="write a synthetic KVTR trace")
    p.add_argument("--synth", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_trace)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IO_ERRORS as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NUMERIC_ERRORS as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except KvEvictError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
