"""Command line: run one scenario variant to CSV, or compare all variants."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .scenarios import (
    VARIANTS,
    ConfigError,
    ScenarioConfig,
    apply_variant,
    compare_runs,
    get_scenario,
    run_scenario,
)
from .scenarios.builtin import BUILTIN
from .scenarios.compare import format_table, rows_to_csv


def _load(args) -> ScenarioConfig:
    if args.config:
        return ScenarioConfig.load(args.config)
    return get_scenario(args.scenario)


def _windows(spec: str | None):
    if not spec:
        return None
    out = []
    for part in spec.split(","):
        a, b = part.split(":")
        out.append((float(a), float(b)))
    return out


def _progress(enabled: bool):
    if not enabled:
        return None

    def show(t):
        print(f"\r  t = {t:8.1f} s", end="", file=sys.stderr, flush=True)
    return show


def cmd_run(args) -> int:
    cfg = apply_variant(_load(args), args.variant)
    res = run_scenario(cfg, args.seed, args.duration, _progress(args.progress))
    if args.progress:
        print(file=sys.stderr)
    Path(args.out).write_text(res.to_csv())
    for fid, fl in res.observed.items():
        status = "intact" if fl.receiver.intact else "incomplete"
        if fl.sender.size is None:
            status = "greedy"
        print(f"{fid}: {fl.meter.cum_bytes} bytes delivered ({status})")
    print(f"{res.sim.dispatched} events in {res.wall_s:.1f} s; wrote {args.out}")
    return 0


def cmd_compare(args) -> int:
    cfg = _load(args)
    variants = args.variants.split(",") if args.variants else VARIANTS
    rows, _ = compare_runs(cfg, variants, args.seed, _windows(args.windows), args.duration,
                           _progress(args.progress))
    if args.progress:
        print(file=sys.stderr)
    Path(args.out).write_text(rows_to_csv(rows))
    print(format_table(rows))
    print(f"wrote {args.out}")
    return 0


def cmd_list(args) -> int:
    for name in sorted(BUILTIN):
        cfg = BUILTIN[name]()
        print(f"{name:<24}{cfg.duration_s:>8g} s  {cfg.description}")
    return 0


def cmd_show(args) -> int:
    cfg = _load(args)
    if args.variant:
        cfg = apply_variant(cfg, args.variant)
    print(cfg.to_json())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowsplit",
                                description="Run flow-splitting transport scenarios.")
    sub = p.add_subparsers(dest="command", required=True)

    def source(sp):
        g = sp.add_mutually_exclusive_group(required=True)
        g.add_argument("--scenario", choices=sorted(BUILTIN), help="built-in scenario name")
        g.add_argument("--config", help="scenario file (JSON)")

    r = sub.add_parser("run", help="run one variant and write per-interval samples as CSV")
    source(r)
    r.add_argument("--seed", type=int, default=1)
    r.add_argument("--duration", type=float, default=None, help="override duration (s)")
    r.add_argument("--variant", choices=VARIANTS, default="split")
    r.add_argument("--out", required=True)
    r.add_argument("--progress", action="store_true")
    r.set_defaults(fn=cmd_run)

    c = sub.add_parser("compare", help="run every variant and summarize windowed means")
    source(c)
    c.add_argument("--seed", type=int, default=1)
    c.add_argument("--duration", type=float, default=None)
    c.add_argument("--variants", default=None, help="comma-separated subset of variants")
    c.add_argument("--windows", default=None, help="e.g. 0:250,750:1000 (seconds)")
    c.add_argument("--out", required=True)
    c.add_argument("--progress", action="store_true")
    c.set_defaults(fn=cmd_compare)

    ls = sub.add_parser("list", help="list built-in scenarios")
    ls.set_defaults(fn=cmd_list)

    sh = sub.add_parser("show", help="print a scenario as JSON")
    source(sh)
    sh.add_argument("--variant", choices=VARIANTS, default=None)
    sh.set_defaults(fn=cmd_show)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
