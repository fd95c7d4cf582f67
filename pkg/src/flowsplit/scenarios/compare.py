"""Variant comparisons: windowed means over metric samples."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

from ..sim.engine import NS_PER_S
from .apps import MetricSample
from .builtin import VARIANTS, apply_variant
from .config import ScenarioConfig
from .runner import RunResult, run_scenario


def window_samples(samples: list[MetricSample], start_s: float, end_s: float):
    """Samples whose trailing interval lies inside ``[start_s, end_s]``."""
    out = []
    for s in samples:
        if s.t_ns / NS_PER_S > start_s + 1e-9 and s.t_ns / NS_PER_S <= end_s + 1e-9:
            out.append(s)
    return out


def mean_goodput(samples: list[MetricSample], start_s: float, end_s: float) -> float:
    w = window_samples(samples, start_s, end_s)
    return sum(s.goodput_bps for s in w) / len(w) if w else math.nan


def mean_delay_ms(samples: list[MetricSample], start_s: float, end_s: float) -> float:
    """Byte-weighted mean one-way delay over the window."""
    w = window_samples(samples, start_s, end_s)
    num = den = 0.0
    for s in w:
        if not math.isnan(s.e2e_delay_ns) and s.goodput_bps > 0:
            num += s.e2e_delay_ns * s.goodput_bps
            den += s.goodput_bps
    return num / den / 1e6 if den else math.nan


def bytes_between(samples: list[MetricSample], start_s: float, end_s: float) -> int:
    """Bytes delivered in ``(start_s, end_s]``, integrated from the cum_bytes column."""
    before = 0
    last = 0
    for s in samples:
        t = s.t_ns / NS_PER_S
        if t <= start_s + 1e-9:
            before = s.cum_bytes
        if t <= end_s + 1e-9:
            last = s.cum_bytes
    return last - before


@dataclass
class SummaryRow:
    variant: str
    flow_id: str
    window: tuple[float, float]
    goodput_bps: float
    delay_ms: float
    bytes: int


def summarize(result: RunResult, variant: str, windows: list[tuple[float, float]],
              flow_id: str = "observed") -> list[SummaryRow]:
    samples = result.samples[flow_id]
    return [SummaryRow(variant, flow_id, w, mean_goodput(samples, *w),
                       mean_delay_ms(samples, *w), bytes_between(samples, *w))
            for w in windows]


def default_windows(cfg: ScenarioConfig) -> list[tuple[float, float]]:
    """Boundaries at every change in the loss schedule or cross-traffic population."""
    marks = {0.0, cfg.duration_s}
    for f in cfg.flows:
        if f.role == "cross" and 0 < f.start_s < cfg.duration_s:
            marks.add(f.start_s)
    for l in cfg.links:
        for t, _ in l.loss:
            if 0 < t < cfg.duration_s:
                marks.add(float(t))
    m = sorted(marks)
    return list(zip(m[:-1], m[1:]))


def compare_runs(cfg: ScenarioConfig, variants=VARIANTS, seed: int = 1,
                 windows: list[tuple[float, float]] | None = None,
                 duration_s: float | None = None, progress=None):
    """Run every variant with the same seed; return (rows, {variant: RunResult})."""
    windows = windows or default_windows(cfg)
    results: dict[str, RunResult] = {}
    rows: list[SummaryRow] = []
    for v in variants:
        res = run_scenario(apply_variant(cfg, v), seed, duration_s, progress)
        results[v] = res
        rows += summarize(res, v, windows)
    return rows, results


def rows_to_csv(rows: list[SummaryRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("variant", "flow_id", "window_start_s", "window_end_s",
                "mean_goodput_bps", "mean_delay_ms", "bytes"))
    for r in rows:
        delay = "" if math.isnan(r.delay_ms) else f"{r.delay_ms:.3f}"
        w.writerow((r.variant, r.flow_id, r.window[0], r.window[1],
                    f"{r.goodput_bps:.1f}", delay, r.bytes))
    return buf.getvalue()


def format_table(rows: list[SummaryRow]) -> str:
    lines = [f"{'variant':<13}{'window_s':>16}{'goodput_kbps':>14}{'delay_ms':>11}{'bytes':>12}"]
    for r in rows:
        lines.append(f"{r.variant:<13}{f'{r.window[0]:g}-{r.window[1]:g}':>16}"
                     f"{r.goodput_bps / 1e3:>14.1f}{r.delay_ms:>11.1f}{r.bytes:>12}")
    return "\n".join(lines)
