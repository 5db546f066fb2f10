"""Latency and memory profiling of module execution, plus the worker-count benchmark.

Per-op latency is measured barrier to barrier: from the end of the previous
op's Wait (or the start of the program) to the end of this op's Wait, so it
includes Alloc/Free and queueing. Times come from ``time.perf_counter_ns``.
"""

from __future__ import annotations

import csv
import io
import json
import statistics
from dataclasses import asdict, dataclass
from typing import Sequence

from .executor import Runtime
from .module_format import CompiledModule

SCHEMA = "tilevm.profile/1"
CSV_HEADER = ("op_id", "kind", "items", "wall_ns", "worker_ns")


@dataclass(frozen=True)
class OpProfile:
    op_id: int
    kind: str
    items: int
    wall_ns: int
    worker_ns: int  # summed duration of the op's work items across workers


@dataclass(frozen=True)
class ProfileReport:
    total_ns: int
    per_op: tuple[OpProfile, ...]
    peak_heap_bytes: int
    per_worker_scratch_peak_bytes: tuple[int, ...]
    workers_used: int
    repeats: int = 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_op"] = [asdict(p) for p in self.per_op]
        d["per_worker_scratch_peak_bytes"] = list(self.per_worker_scratch_peak_bytes)
        return {"schema": SCHEMA, **d}

    @classmethod
    def from_dict(cls, d: dict) -> "ProfileReport":
        if d.get("schema") != SCHEMA:
            raise ValueError(f"not a {SCHEMA} document")
        return cls(d["total_ns"], tuple(OpProfile(**p) for p in d["per_op"]), d["peak_heap_bytes"],
                   tuple(d["per_worker_scratch_peak_bytes"]), d["workers_used"], d["repeats"])


def _single_run(rt: Runtime, m: CompiledModule, x) -> tuple:
    out = rt.run(m, x, profile=True)
    state = rt.last_state
    events = state.events
    t0 = events[0][2]
    bounds, prev = {}, t0
    for event, op_id, t in events:
        if event == "barrier":
            bounds[op_id] = t - prev
            prev = t
    total = events[-1][2] - t0
    worker_ns: dict[int, int] = {}
    for entry in rt.pool.log:
        worker_ns[entry.op_id] = worker_ns.get(entry.op_id, 0) + entry.end_ns - entry.start_ns
    per_op = tuple(OpProfile(op.op_id, op.kind, op.tile_config.item_count, bounds.get(op.op_id, 0),
                             worker_ns.get(op.op_id, 0)) for op in m.ops)
    return out, total, per_op, state.arena.peak_bytes


def profile_inference(m: CompiledModule, x, workers: int = 1, repeats: int = 10,
                      runtime: Runtime | None = None) -> ProfileReport:
    """Run ``repeats`` inferences and report the run with the median total time."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    rt = runtime or Runtime(workers)
    try:
        if rt.workers != workers:
            rt.resize(workers)
        runs = [_single_run(rt, m, x) for _ in range(repeats)]
        scratch = tuple(rt.pool.scratch_peaks)
    finally:
        if runtime is None:
            rt.close()
    median_total = statistics.median_low(r[1] for r in runs)
    _, total, per_op, peak = next(r for r in runs if r[1] == median_total)
    return ProfileReport(total, per_op, peak, scratch, workers, repeats)


def report_render(r: ProfileReport, format: str = "table") -> str:  # noqa: A002
    if format == "json":
        return json.dumps(r.to_dict(), indent=2, sort_keys=True) + "\n"
    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for p in r.per_op:
            w.writerow((p.op_id, p.kind, p.items, p.wall_ns, p.worker_ns))
        return buf.getvalue()
    if format != "table":
        raise ValueError(f"unknown report format {format!r}")
    rows = [(str(p.op_id), p.kind, str(p.items), f"{p.wall_ns / 1e3:.1f}", f"{p.worker_ns / 1e3:.1f}")
            for p in r.per_op]
    rows.append(("total", "", str(sum(p.items for p in r.per_op)), f"{r.total_ns / 1e3:.1f}",
                 f"{sum(p.worker_ns for p in r.per_op) / 1e3:.1f}"))
    head = ("op", "kind", "items", "wall_us", "worker_us")
    widths = [max(len(c) for c in col) for col in zip(head, *rows)]
    fmt = "  ".join(f"{{:>{w}}}" for w in widths)
    lines = [fmt.format(*head)] + [fmt.format(*row) for row in rows]
    lines.append(f"peak heap: {r.peak_heap_bytes} bytes; scratch peaks: "
                 f"{list(r.per_worker_scratch_peak_bytes)}; workers: {r.workers_used}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class BenchRow:
    workers: int
    median_ns: int
    speedup: float


def bench(m: CompiledModule, x, workers_list: Sequence[int], repeats: int = 10,
          warmup: int = 1) -> list[BenchRow]:
    """Median end-to-end latency per worker count; speedup is relative to one worker."""
    if not workers_list or any(w < 1 for w in workers_list):
        raise ValueError("workers list must hold positive integers")
    medians: dict[int, int] = {}
    with Runtime(workers_list[0]) as rt:
        for w in list(dict.fromkeys([1, *workers_list])):
            rt.resize(w)
            for _ in range(warmup):
                rt.run(m, x)
            medians[w] = profile_inference(m, x, w, repeats, runtime=rt).total_ns
    base = medians[1]
    return [BenchRow(w, medians[w], base / medians[w]) for w in workers_list]


def render_bench(rows: Sequence[BenchRow], csv_out: bool = False) -> str:
    if csv_out:
        return "workers,median_ns,speedup\n" + "".join(
            f"{r.workers},{r.median_ns},{r.speedup:.4f}\n" for r in rows)
    lines = [f"{'workers':>7}  {'median_ms':>10}  {'speedup':>7}"]
    lines += [f"{r.workers:>7}  {r.median_ns / 1e6:>10.3f}  {r.speedup:>7.2f}" for r in rows]
    return "\n".join(lines) + "\n"
