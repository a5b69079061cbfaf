"""Island-structured program database with elite archive, migration, and
parent/inspiration sampling.

All mutations go through a single writer (the store instance); sampling takes
an explicit random.Random so concurrent generations stay reproducible.
Persistence is one source file per program plus an append-only NDJSON journal,
which doubles as the crash-recovery log.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Tuple

from .telemetry import MetricsReport, parse_metrics, serialize_metrics

logger = logging.getLogger(__name__)

STATUSES = ("pending", "buggy", "over_threshold", "acceptable")

DEFAULT_ARCHIVE_CAPACITY = 20
DEFAULT_P_ELITE = 0.5
DEFAULT_LOCAL_ELITE_FRACTION = 0.2
DEFAULT_MIGRATION_INTERVAL = 10


class StoreError(ValueError):
    """Invalid insertion or query."""


class EmptyIslandError(StoreError):
    """Island has no samplable (non-buggy) members."""


@dataclass
class ProgramRecord:
    id: str
    island_id: int
    generation: int
    source: str
    status: str = "pending"
    parent_id: Optional[str] = None
    metrics: Optional[MetricsReport] = None
    score: Optional[float] = None
    created_at: float = 0.0

    def validate(self, island_count: int) -> None:
        if self.status not in STATUSES:
            raise StoreError(f"unknown status {self.status!r}")
        if not (0 <= self.island_id < island_count):
            raise StoreError(f"island_id {self.island_id} out of range (islands: {island_count})")
        if self.generation < 0:
            raise StoreError("generation must be non-negative")
        if (self.score is not None) != (self.status in ("over_threshold", "acceptable")):
            raise StoreError(f"record {self.id}: score present iff status is over_threshold/acceptable")
        if self.score is not None and self.score < 0:
            raise StoreError("score must be non-negative")


@dataclass
class IslandState:
    island_id: int
    member_ids: List[str] = field(default_factory=list)
    local_elite_ids: List[str] = field(default_factory=list)


@dataclass
class EliteArchive:
    capacity: int = DEFAULT_ARCHIVE_CAPACITY
    entries: List[str] = field(default_factory=list)


@dataclass
class MigrationReport:
    cycle_index: int
    moves: List[Tuple[int, int, str]] = field(default_factory=list)  # (src island, dst island, copied id)


class ProgramStore:
    def __init__(
        self,
        island_count: int = 4,
        archive_capacity: int = DEFAULT_ARCHIVE_CAPACITY,
        p_elite: float = DEFAULT_P_ELITE,
        local_elite_fraction: float = DEFAULT_LOCAL_ELITE_FRACTION,
        migration_interval: int = DEFAULT_MIGRATION_INTERVAL,
        root: Optional[str | Path] = None,
        clock: Callable[[], float] = time.time,
    ):
        if island_count < 1:
            raise StoreError("island_count must be >= 1")
        if archive_capacity < 1:
            raise StoreError("archive_capacity must be >= 1")
        self.island_count = island_count
        self.p_elite = p_elite
        self.local_elite_fraction = local_elite_fraction
        self.migration_interval = migration_interval
        self.clock = clock
        self.records: Dict[str, ProgramRecord] = {}
        self.islands = [IslandState(i) for i in range(island_count)]
        self.archive = EliteArchive(capacity=archive_capacity)
        self.root = Path(root) if root else None
        if self.root is not None:
            (self.root / "programs").mkdir(parents=True, exist_ok=True)

    # -- persistence -------------------------------------------------------

    @property
    def journal_path(self) -> Optional[Path]:
        return (self.root / "journal.ndjson") if self.root else None

    def append_event(self, event: Dict[str, Any]) -> None:
        if self.journal_path is None:
            return
        with open(self.journal_path, "a", encoding="utf-8") as f:
            f.write(json.dumps(event, sort_keys=True) + "\n")

    def _persist_record(self, record: ProgramRecord) -> None:
        if self.root is None:
            return
        (self.root / "programs" / f"{record.id}.src").write_text(record.source, encoding="utf-8")
        if record.metrics is not None:
            (self.root / "programs" / f"{record.id}.metrics.json").write_bytes(serialize_metrics(record.metrics))

    @classmethod
    def load(cls, root: str | Path, **kwargs) -> "ProgramStore":
        """Rebuild a store by replaying the journal against the program files."""
        root = Path(root)
        journal = root / "journal.ndjson"
        events = []
        if journal.exists():
            for line in journal.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    events.append(json.loads(line))
        island_count = kwargs.pop("island_count", None)
        if island_count is None:
            island_count = max((e["island_id"] + 1 for e in events if e.get("event") == "insert"), default=1)
        store = cls(island_count=island_count, root=None, **kwargs)
        store.root = root  # attach without re-journaling during replay
        for e in events:
            if e.get("event") != "insert":
                continue
            src_path = root / "programs" / f"{e['id']}.src"
            metrics_path = root / "programs" / f"{e['id']}.metrics.json"
            metrics = parse_metrics(metrics_path.read_bytes()) if metrics_path.exists() else None
            record = ProgramRecord(
                id=e["id"],
                island_id=e["island_id"],
                generation=e["generation"],
                source=src_path.read_text(encoding="utf-8"),
                status=e["status"],
                parent_id=e.get("parent_id"),
                metrics=metrics,
                score=e.get("score"),
                created_at=e.get("created_at", 0.0),
            )
            store._insert_in_memory(record)
        return store

    # -- insertion and elite maintenance ------------------------------------

    def _rank_key(self, record_id: str) -> Tuple[float, float]:
        rec = self.records[record_id]
        return (rec.score, rec.created_at)

    def _recompute_elites(self) -> bool:
        """Rebuild local elites and the global archive; True if archive changed."""
        for island in self.islands:
            scored = [rid for rid in island.member_ids if self.records[rid].score is not None]
            scored.sort(key=self._rank_key)
            k = max(1, math.ceil(self.local_elite_fraction * len(island.member_ids))) if scored else 0
            island.local_elite_ids = scored[:k]
        scored_all = [rid for rid, rec in self.records.items() if rec.score is not None]
        scored_all.sort(key=self._rank_key)
        new_entries = scored_all[: self.archive.capacity]
        changed = new_entries != self.archive.entries
        self.archive.entries = new_entries
        return changed

    def _insert_in_memory(self, record: ProgramRecord) -> bool:
        record.validate(self.island_count)
        if record.id in self.records:
            raise StoreError(f"duplicate program id {record.id}")
        if record.parent_id is not None and record.parent_id in self.records:
            parent = self.records[record.parent_id]
            if parent.generation >= record.generation:
                raise StoreError(
                    f"record {record.id}: parent {record.parent_id} generation "
                    f"{parent.generation} not smaller than {record.generation}"
                )
        self.records[record.id] = record
        self.islands[record.island_id].member_ids.append(record.id)
        return self._recompute_elites()

    def insert_program(self, record: ProgramRecord) -> str:
        if record.created_at == 0.0:
            record.created_at = self.clock()
        archive_changed = self._insert_in_memory(record)
        self._persist_record(record)
        self.append_event(
            {
                "event": "insert",
                "id": record.id,
                "parent_id": record.parent_id,
                "island_id": record.island_id,
                "generation": record.generation,
                "status": record.status,
                "score": record.score,
                "created_at": record.created_at,
                "source_sha256": hashlib.sha256(record.source.encode("utf-8")).hexdigest(),
            }
        )
        if archive_changed:
            self.append_event({"event": "elite_change", "entries": list(self.archive.entries)})
        return record.id

    # -- queries -------------------------------------------------------------

    def get(self, record_id: str) -> ProgramRecord:
        try:
            return self.records[record_id]
        except KeyError:
            raise StoreError(f"unknown program id {record_id}") from None

    def all_records(self) -> Iterable[ProgramRecord]:
        return list(self.records.values())

    def island(self, island_id: int) -> IslandState:
        if not (0 <= island_id < self.island_count):
            raise StoreError(f"island_id {island_id} out of range")
        return self.islands[island_id]

    # -- sampling ------------------------------------------------------------

    def sample_parent(self, island_id: int, rng: random.Random) -> ProgramRecord:
        island = self.island(island_id)
        samplable = [rid for rid in island.member_ids if self.records[rid].status != "buggy"]
        if not samplable:
            raise EmptyIslandError(f"island {island_id} has no samplable members")
        elites = [rid for rid in island.local_elite_ids if rid in set(samplable)]
        non_elites = [rid for rid in samplable if rid not in set(elites)]
        use_elite = rng.random() < self.p_elite
        pool = elites if use_elite else non_elites
        if not pool:
            pool = non_elites if use_elite else elites
        return self.records[pool[rng.randrange(len(pool))]]

    def sample_inspirations(
        self,
        top_count: int,
        diverse_count: int,
        exclude_id: Optional[str],
        rng: random.Random,
    ) -> Tuple[List[str], List[str]]:
        if top_count < 0 or diverse_count < 0:
            raise StoreError("top_count and diverse_count must be >= 0")
        archive_pool = [rid for rid in self.archive.entries if rid != exclude_id]
        top = archive_pool if len(archive_pool) <= top_count else rng.sample(archive_pool, top_count)
        top = sorted(top, key=self._rank_key)
        taken = set(top) | {exclude_id}
        outsider_pool = sorted(
            rid
            for rid, rec in self.records.items()
            if rec.status != "buggy" and rid not in set(self.archive.entries) and rid not in taken
        )
        diverse = (
            outsider_pool if len(outsider_pool) <= diverse_count else rng.sample(outsider_pool, diverse_count)
        )
        return list(top), list(diverse)

    # -- migration -------------------------------------------------------------

    def _island_best(self, island_id: int) -> Optional[ProgramRecord]:
        scored = [rid for rid in self.islands[island_id].member_ids if self.records[rid].score is not None]
        if not scored:
            return None
        return self.records[min(scored, key=self._rank_key)]

    def migrate(self, cycle_index: int) -> MigrationReport:
        """Ring migration: every migration_interval cycles, copy each island's
        best member into the next island. Copies keep source and metrics
        bit-for-bit; lineage points at the original."""
        if cycle_index <= 0:
            raise StoreError("cycle_index must be > 0")
        report = MigrationReport(cycle_index=cycle_index)
        if self.island_count < 2 or cycle_index % self.migration_interval != 0:
            return report
        bests = [self._island_best(i) for i in range(self.island_count)]
        for src_island, best in enumerate(bests):
            if best is None:
                continue
            dst_island = (src_island + 1) % self.island_count
            copy = ProgramRecord(
                id=f"{best.id}~m{cycle_index}",
                island_id=dst_island,
                generation=best.generation + 1,
                source=best.source,
                status=best.status,
                parent_id=best.id,
                metrics=best.metrics,
                score=best.score,
            )
            self.insert_program(copy)
            report.moves.append((src_island, dst_island, copy.id))
        if report.moves:
            self.append_event(
                {
                    "event": "migration",
                    "cycle_index": cycle_index,
                    "moves": [list(m) for m in report.moves],
                }
            )
        return report
