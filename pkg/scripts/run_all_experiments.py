#!/usr/bin/env python3
"""Run every built-in scenario, write per-run CSVs and a summary per scenario.

    python3 scripts/run_all_experiments.py --out results
    python3 scripts/run_all_experiments.py --only dsl-upload intersite --seed 2

Comparison scenarios run all three variants and summarize the default windows
(boundaries at each loss-schedule or cross-traffic change). Single-variant
scenarios (migration, middlebox-crash, queue-sharing) run the split variant and
report whether the transfer arrived intact.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from flowsplit.scenarios import VARIANTS, get_scenario, run_scenario
from flowsplit.scenarios.builtin import BUILTIN
from flowsplit.scenarios.compare import compare_runs, format_table, rows_to_csv

COMPARED = ("dsl-upload", "dsl-download", "wireless-eln-upload", "wireless-eln-download",
            "intersite")
SINGLE = ("migration", "middlebox-crash", "queue-sharing")


def run_compared(name: str, seed: int, out: Path) -> None:
    cfg = get_scenario(name)
    rows, results = compare_runs(cfg, VARIANTS, seed)
    for variant, res in results.items():
        res.write_csv(out / f"{name}.{variant}.csv")
    (out / f"{name}.summary.csv").write_text(rows_to_csv(rows))
    print(format_table(rows))


def run_single(name: str, seed: int, out: Path) -> None:
    res = run_scenario(get_scenario(name), seed)
    res.write_csv(out / f"{name}.split.csv")
    for fid, fl in res.observed.items():
        state = "intact" if fl.receiver.intact else "incomplete"
        if fl.sender.size is None:
            state = "greedy"
        print(f"  {fid}: {fl.meter.cum_bytes} bytes ({state})")
    for t, kind, node in res.events:
        print(f"  {t / 1e9:8.3f} s  {kind} {node}")


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="results")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--only", nargs="*", choices=sorted(BUILTIN))
    args = p.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = args.only or [*COMPARED, *SINGLE]
    for name in names:
        t0 = time.perf_counter()
        print(f"== {name}")
        if name in SINGLE:
            run_single(name, args.seed, out)
        else:
            run_compared(name, args.seed, out)
        print(f"   ({time.perf_counter() - t0:.0f} s wall)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
