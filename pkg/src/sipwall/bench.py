"""Benchmark scenarios and the shared stats CSV schema.

Scenario 1 sweeps the offered rate with an empty ruleset to measure the
bare inspection path.  Scenario 2 pins the rate and doubles the rule
count to measure per-rule evaluation cost; the filler rules are regex
tests that scan a real header value but never match, plus one counter
rule at the end of the file.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence, TextIO

from .engine import Engine
from .gen import gen_invite_flood
from .rules import compile_ruleset, parse_ruleset
from .trace import ReplayReport, replay

__all__ = [
    "BenchPoint",
    "CSV_HEADER",
    "percentile_ns",
    "synthetic_ruleset",
    "run_scenario1",
    "run_scenario2",
    "point_from_report",
    "format_csv",
    "write_csv",
]

CSV_HEADER = (
    "rate_offered,rate_achieved,rules,msgs,forwarded,dropped,malformed,"
    "p50_us,p90_us,p99_us"
)


@dataclass
class BenchPoint:
    rate_offered: float
    rate_achieved: float
    rules: int
    msgs: int
    forwarded: int
    dropped: int
    malformed: int
    p50_us: float
    p90_us: float
    p99_us: float

    def csv_row(self) -> str:
        return (
            f"{self.rate_offered:.3f},{self.rate_achieved:.3f},{self.rules},"
            f"{self.msgs},{self.forwarded},{self.dropped},{self.malformed},"
            f"{self.p50_us:.1f},{self.p90_us:.1f},{self.p99_us:.1f}"
        )


def percentile_ns(samples: Sequence[int], q: float) -> float:
    """Nearest-rank percentile of latency samples, in nanoseconds."""
    if not samples:
        return 0.0
    ordered = sorted(samples)
    rank = max(1, math.ceil(q * len(ordered)))
    return float(ordered[rank - 1])


def point_from_report(report: ReplayReport, rules: int) -> BenchPoint:
    lat = report.latencies_ns
    return BenchPoint(
        rate_offered=report.offered_rate or 0.0,
        rate_achieved=report.achieved_rate,
        rules=rules,
        msgs=report.messages,
        forwarded=report.forwarded,
        dropped=report.dropped,
        malformed=report.malformed,
        p50_us=percentile_ns(lat, 0.50) / 1000.0,
        p90_us=percentile_ns(lat, 0.90) / 1000.0,
        p99_us=percentile_ns(lat, 0.99) / 1000.0,
    )


def synthetic_ruleset(n: int) -> str:
    """n rules: n-1 never-matching regex tests plus one counter rule.

    The regexes run against the User-Agent header, which the generated
    traffic always carries, so each filler rule costs a real scan.
    """
    if n < 1:
        raise ValueError("need at least one rule")
    lines = [
        f'secsip "FIELDS:sip.user_agent" "^probe-{i:04d}-[0-9a-f]+$" forward'
        for i in range(n - 1)
    ]
    lines.append('secsip "FIELDS:sip.method" "^INVITE$" declare:bench_total=counter[10;60]')
    return "\n".join(lines) + "\n"


def _run_point(
    ruleset_text: str, rate: float, duration: float, seed: int
) -> BenchPoint:
    program = compile_ruleset(parse_ruleset(ruleset_text))
    engine = Engine(program)
    count = max(1, int(round(rate * duration)))
    records = gen_invite_flood(count=count, rate=rate, seed=seed)
    report = replay(records, engine, pacing="fixed", rate=rate)
    return point_from_report(report, rules=len(program.rules))


def run_scenario1(
    *,
    rate_start: int = 10,
    rate_stop: int = 500,
    rate_step: int = 50,
    duration: float = 10.0,
    seed: int = 1,
    progress: TextIO | None = None,
) -> list[BenchPoint]:
    rates = list(range(rate_start, rate_stop + 1, rate_step))
    if not rates or rates[-1] != rate_stop:
        rates.append(rate_stop)
    points = []
    for rate in rates:
        if progress:
            print(f"# scenario 1: {rate} msg/s for {duration:.0f}s", file=progress)
        points.append(_run_point("", float(rate), duration, seed))
    return points


def run_scenario2(
    *,
    rate: float = 60.0,
    max_rules: int = 256,
    duration: float = 4.0,
    seed: int = 1,
    progress: TextIO | None = None,
) -> list[BenchPoint]:
    counts = []
    n = 1
    while n <= max_rules:
        counts.append(n)
        n *= 2
    points = []
    for count in counts:
        if progress:
            print(f"# scenario 2: {count} rules at {rate:.0f} msg/s", file=progress)
        points.append(_run_point(synthetic_ruleset(count), rate, duration, seed))
    return points


def format_csv(points: Iterable[BenchPoint]) -> str:
    return "\n".join([CSV_HEADER] + [p.csv_row() for p in points]) + "\n"


def write_csv(points: Iterable[BenchPoint], path: str) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(format_csv(points))
