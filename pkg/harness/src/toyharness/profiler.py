"""Loop instrumentation: per-section wall timers, function-level op tables
from cProfile, and peak-memory capture."""

from __future__ import annotations

import logging
import pstats
import resource
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, List, Tuple

logger = logging.getLogger(__name__)

SECTION_NAMES = ("forward", "backward", "optimizer", "data_loading")
TABLE_CAP = 15


class SectionTimer:
    """Accumulates wall time and call counts for the four canonical loop
    sections: forward, backward, optimizer, data_loading."""

    def __init__(self):
        self.totals: Dict[str, float] = {name: 0.0 for name in SECTION_NAMES}
        self.counts: Dict[str, int] = {name: 0 for name in SECTION_NAMES}

    @contextmanager
    def measure(self, name: str):
        if name not in self.totals:
            raise KeyError(f"unknown section {name!r}")
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.totals[name] += time.perf_counter() - t0
            self.counts[name] += 1


def profile_sections(timer: SectionTimer, wall_time: float) -> List[dict]:
    """Render the timer into section rows whose percent shares are taken
    against the full loop wall time (so they sum to at most 100)."""
    rows = []
    for name in SECTION_NAMES:
        total = timer.totals[name]
        count = timer.counts[name]
        if count == 0:
            raise ValueError(f"section {name!r} was never entered")
        rows.append(
            {
                "name": name,
                "total_time": total,
                "avg_time": total / count,
                "pct_of_total": 100.0 * total / wall_time if wall_time > 0 else 0.0,
                "call_count": count,
            }
        )
    return rows


def _is_numeric_kernel(filename: str, funcname: str) -> bool:
    # Hot numeric work lives in the kernels module and numpy internals;
    # everything else counts as generic CPU-side orchestration.
    if "kernels" in Path(filename).name:
        return True
    if "numpy" in filename:
        return True
    return "numpy" in funcname or funcname.startswith("<built-in method numpy")


def collect_op_tables(profile) -> Tuple[List[dict], List[dict], int]:
    """Split cProfile results into a numeric-kernel table and a CPU-op table.

    Both tables are sorted descending by self time and truncated to
    TABLE_CAP entries. Returns (kernel_table, cpu_op_table, raw_op_count).
    """
    stats = pstats.Stats(profile).stats
    kernel: List[dict] = []
    cpu: List[dict] = []
    for (filename, lineno, funcname), (cc, nc, tt, ct, callers) in stats.items():
        if filename == "~":
            label = funcname.strip("<>")
        else:
            label = f"{Path(filename).stem}:{funcname}"
        entry = {"name": label, "total_time": tt, "call_count": int(nc)}
        if _is_numeric_kernel(filename, funcname):
            kernel.append(entry)
        else:
            cpu.append(entry)
    key = lambda e: (-e["total_time"], e["name"])
    kernel.sort(key=key)
    cpu.sort(key=key)
    return kernel[:TABLE_CAP], cpu[:TABLE_CAP], len(stats)


def peak_memory_bytes() -> int:
    """Peak resident set size of this process, in bytes (Linux reports KiB)."""
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024
