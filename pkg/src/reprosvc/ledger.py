"""Append-only run ledger plus the queries built on it.

One newline-delimited JSON log per project. Records are never rewritten;
every analytical answer (history, diffs, first regression) is recomputed
from the stored records, so the log alone is the source of truth.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

from reprosvc.errors import ServiceError, duplicate, no_run, rejected
from reprosvc.harness import CELL_PASS, CellOutcome, TEST_OK, TestOutcome
from reprosvc.ingest import CommitRef, TriggerEvent
from reprosvc.pipeline import STAGE_ORDER, StageOutcome
from reprosvc.util import from_rfc3339, to_rfc3339

log = logging.getLogger(__name__)

_HEX_RE = re.compile(r"^[0-9a-f]*$")


@dataclass(frozen=True)
class RunRecord:
    """Everything one pipeline run produced, as persisted.

    Stage outcomes form a prefix of FETCH, DEPS, BUILD; the developer test
    appears only when all three succeeded, and cells only when the test was
    OK. An empty matrix is cells=[] and is distinct from cells-absent.
    """

    run_id: str
    trigger: TriggerEvent
    commit: CommitRef
    manifest_digest: str
    stages: tuple[StageOutcome, ...]
    test: TestOutcome | None
    cells: tuple[CellOutcome, ...] | None
    env_fingerprint: dict
    started_at: datetime
    finished_at: datetime

    def stage(self, name: str) -> StageOutcome | None:
        for outcome in self.stages:
            if outcome.stage == name:
                return outcome
        return None

    def to_doc(self) -> dict:
        doc = {
            "run_id": self.run_id,
            "trigger": self.trigger.to_doc(),
            "commit": self.commit.to_doc(),
            "manifest_digest": self.manifest_digest,
            "stages": [s.to_doc() for s in self.stages],
            "env_fingerprint": self.env_fingerprint,
            "started_at": to_rfc3339(self.started_at),
            "finished_at": to_rfc3339(self.finished_at),
        }
        if self.test is not None:
            doc["test"] = self.test.to_doc()
        if self.cells is not None:
            doc["cells"] = [c.to_doc() for c in self.cells]
        return doc

    @classmethod
    def from_doc(cls, doc: dict) -> "RunRecord":
        return cls(
            run_id=doc["run_id"],
            trigger=TriggerEvent.from_doc(doc["trigger"]),
            commit=CommitRef.from_doc(doc["commit"]),
            manifest_digest=doc["manifest_digest"],
            stages=tuple(StageOutcome.from_doc(s) for s in doc["stages"]),
            test=TestOutcome.from_doc(doc["test"]) if "test" in doc else None,
            cells=tuple(CellOutcome.from_doc(c) for c in doc["cells"])
            if "cells" in doc
            else None,
            env_fingerprint=doc["env_fingerprint"],
            started_at=from_rfc3339(doc["started_at"]),
            finished_at=from_rfc3339(doc["finished_at"]),
        )


def validate_record(record: RunRecord) -> None:
    """Enforce the structural rules; raises ValueError with the violation."""
    if not record.run_id:
        raise ValueError("run_id must be non-empty")
    if not _HEX_RE.match(record.manifest_digest):
        raise ValueError("manifest_digest must be lowercase hex (or empty when unfetched)")
    if record.finished_at < record.started_at:
        raise ValueError("finished_at precedes started_at")
    stages = record.stages
    if not stages:
        raise ValueError("a run has at least the FETCH stage")
    for i, outcome in enumerate(stages):
        if i >= len(STAGE_ORDER) or outcome.stage != STAGE_ORDER[i]:
            raise ValueError(f"stage sequence broken at position {i}: {outcome.stage}")
    for outcome in stages[:-1]:
        if not outcome.ok:
            raise ValueError(f"non-final stage {outcome.stage} must be OK")
    if stages[-1].ok:
        if len(stages) < len(STAGE_ORDER):
            raise ValueError("stages stopped early without a failure")
        if record.test is None:
            raise ValueError("all stages OK requires a test outcome")
    else:
        if record.test is not None or record.cells is not None:
            raise ValueError("a failed stage ends the run; no test or cells may follow")
    if record.test is not None:
        if record.test.status == TEST_OK and record.cells is None:
            raise ValueError("an OK test requires a cell list (possibly empty)")
        if record.test.status != TEST_OK and record.cells is not None:
            raise ValueError("cells may not follow a failed or timed-out test")
    if record.cells is not None:
        keys = [(c.benchmark_id, c.algorithm) for c in record.cells]
        if keys != sorted(keys):
            raise ValueError("cells must be sorted by (benchmark_id, algorithm)")
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (benchmark_id, algorithm) cell")


@dataclass(frozen=True)
class CellChange:
    benchmark_id: str
    algorithm: str
    old_status: str
    new_status: str
    old_digest: str | None
    new_digest: str | None

    def to_doc(self) -> dict:
        return {
            "benchmark_id": self.benchmark_id,
            "algorithm": self.algorithm,
            "old_status": self.old_status,
            "new_status": self.new_status,
            "old_digest": self.old_digest,
            "new_digest": self.new_digest,
        }


@dataclass(frozen=True)
class BehaviorDiff:
    from_commit: CommitRef
    to_commit: CommitRef
    changes: tuple[CellChange, ...]
    added_cells: tuple[CellOutcome, ...]
    removed_cells: tuple[CellOutcome, ...]

    def to_doc(self) -> dict:
        return {
            "from_commit": self.from_commit.to_doc(),
            "to_commit": self.to_commit.to_doc(),
            "changes": [c.to_doc() for c in self.changes],
            "added_cells": [c.to_doc() for c in self.added_cells],
            "removed_cells": [c.to_doc() for c in self.removed_cells],
        }


@dataclass
class HistoryEntry:
    commit_id: str
    status: str
    output_digest: str | None
    wall_ms: int
    run_id: str
    started_at: datetime
    env_fingerprint: dict = field(default_factory=dict)

    def to_doc(self) -> dict:
        return {
            "commit_id": self.commit_id,
            "status": self.status,
            "output_digest": self.output_digest,
            "wall_ms": self.wall_ms,
            "run_id": self.run_id,
            "started_at": to_rfc3339(self.started_at),
            "env_fingerprint": self.env_fingerprint,
        }


class Ledger:
    """Per-project append-only logs with crash-safe appends.

    Appends flush and fsync before returning, so a record acknowledged to
    the caller survives a process kill. A torn trailing line (power cut mid
    write) is trimmed on the next open; complete records are untouched.
    """

    def __init__(self, root: Path):
        self.root = root
        self._lock = threading.RLock()
        self._cache: dict[str, list[RunRecord]] = {}
        self._run_ids: dict[str, set[str]] = {}

    def _path(self, project_id: str) -> Path:
        return self.root / "ledger" / f"{project_id}.ndjson"

    def _recover(self, path: Path) -> None:
        """Trim a torn final write so later appends start on a fresh line."""
        if not path.exists():
            return
        data = path.read_bytes()
        if not data or data.endswith(b"\n"):
            return
        keep = data.rfind(b"\n") + 1
        log.warning("ledger %s: trimming %d bytes of torn final record", path.name, len(data) - keep)
        with open(path, "r+b") as fh:
            fh.truncate(keep)

    def _load(self, project_id: str) -> list[RunRecord]:
        with self._lock:
            if project_id in self._cache:
                return self._cache[project_id]
            path = self._path(project_id)
            self._recover(path)
            records: list[RunRecord] = []
            if path.exists():
                with open(path, encoding="utf-8") as fh:
                    for lineno, line in enumerate(fh, start=1):
                        line = line.strip()
                        if not line:
                            continue
                        try:
                            records.append(RunRecord.from_doc(json.loads(line)))
                        except (ValueError, KeyError) as exc:
                            log.warning(
                                "ledger %s line %d unreadable (%s); skipped",
                                path.name, lineno, exc,
                            )
            self._cache[project_id] = records
            self._run_ids[project_id] = {r.run_id for r in records}
            return records

    def append_run(self, project_id: str, record: RunRecord) -> int:
        """Durably append one record; returns its position in the log."""
        try:
            validate_record(record)
        except ValueError as exc:
            raise rejected(str(exc)) from None
        with self._lock:
            records = self._load(project_id)
            if record.run_id in self._run_ids[project_id]:
                raise duplicate(f"run {record.run_id} already recorded")
            path = self._path(project_id)
            path.parent.mkdir(parents=True, exist_ok=True)
            line = json.dumps(record.to_doc(), sort_keys=True, separators=(",", ":")) + "\n"
            with open(path, "a", encoding="utf-8") as fh:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())
            records.append(record)
            self._run_ids[project_id].add(record.run_id)
            return len(records) - 1

    # -- reads -----------------------------------------------------------------

    def runs(self, project_id: str) -> list[RunRecord]:
        with self._lock:
            return list(self._load(project_id))

    def get_run(self, project_id: str, run_id: str) -> RunRecord:
        for record in self.runs(project_id):
            if record.run_id == run_id:
                return record
        raise ServiceError("NOT_FOUND", f"no run {run_id} for project {project_id}")

    def latest_run(self, project_id: str, commit_id: str | None = None) -> RunRecord | None:
        best = None
        for record in self.runs(project_id):
            if commit_id is None or record.commit.commit_id == commit_id:
                best = record
        return best

    def latest_run_with_cells(self, project_id: str, commit_id: str) -> RunRecord | None:
        best = None
        for record in self.runs(project_id):
            if record.commit.commit_id == commit_id and record.cells is not None:
                best = record
        return best

    def history(self, project_id: str, benchmark_id: str, algorithm: str) -> list[HistoryEntry]:
        """Every recorded outcome of one cell, ordered by run start time."""
        entries: list[HistoryEntry] = []
        for record in self.runs(project_id):
            if record.cells is None:
                continue
            for cell in record.cells:
                if cell.benchmark_id == benchmark_id and cell.algorithm == algorithm:
                    entries.append(
                        HistoryEntry(
                            commit_id=record.commit.commit_id,
                            status=cell.status,
                            output_digest=cell.output_digest,
                            wall_ms=cell.wall_ms,
                            run_id=record.run_id,
                            started_at=record.started_at,
                            env_fingerprint=record.env_fingerprint,
                        )
                    )
        entries.sort(key=lambda e: e.started_at)
        return entries

    def diff_commits(self, project_id: str, from_commit: str, to_commit: str) -> BehaviorDiff:
        """Cell-level behavior difference between two commits' latest runs."""
        old_run = self.latest_run_with_cells(project_id, from_commit)
        if old_run is None:
            raise no_run(from_commit)
        new_run = self.latest_run_with_cells(project_id, to_commit)
        if new_run is None:
            raise no_run(to_commit)
        old_cells = {(c.benchmark_id, c.algorithm): c for c in old_run.cells}
        new_cells = {(c.benchmark_id, c.algorithm): c for c in new_run.cells}
        changes = []
        for key in sorted(old_cells.keys() & new_cells.keys()):
            old, new = old_cells[key], new_cells[key]
            if (old.status, old.output_digest) != (new.status, new.output_digest):
                changes.append(
                    CellChange(
                        benchmark_id=key[0],
                        algorithm=key[1],
                        old_status=old.status,
                        new_status=new.status,
                        old_digest=old.output_digest,
                        new_digest=new.output_digest,
                    )
                )
        added = tuple(new_cells[k] for k in sorted(new_cells.keys() - old_cells.keys()))
        removed = tuple(old_cells[k] for k in sorted(old_cells.keys() - new_cells.keys()))
        return BehaviorDiff(
            from_commit=old_run.commit,
            to_commit=new_run.commit,
            changes=tuple(changes),
            added_cells=added,
            removed_cells=removed,
        )

    def first_regression(self, project_id: str, benchmark_id: str, algorithm: str) -> str | None:
        """Commit where the cell first went from PASS to anything else."""
        previous = None
        for entry in self.history(project_id, benchmark_id, algorithm):
            if previous == CELL_PASS and entry.status != CELL_PASS:
                return entry.commit_id
            previous = entry.status
        return None
