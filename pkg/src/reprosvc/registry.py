"""Community benchmark repository.

Models arrive with an expected property, get validated against the latest
successful build, and stay in the matrix until retired. Nothing is ever
deleted: retirement writes a tombstone and past outcomes remain readable.
"""

from __future__ import annotations

import re
import threading
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import Iterable
from urllib.parse import urlparse

from reprosvc.errors import (
    ServiceError,
    bad_doi,
    duplicate,
    not_found,
    too_large,
)
from reprosvc.harness import Assertion, CELL_PASS, CELL_TIMEOUT, CellOutcome
from reprosvc.ingest import CommitRef
from reprosvc.util import (
    ContentStore,
    digest_doc,
    from_rfc3339,
    new_id,
    sha256_hex,
    to_rfc3339,
    utcnow,
)

STATE_PENDING = "PENDING"
STATE_ACTIVE = "ACTIVE"
STATE_RETIRED = "RETIRED"

DEFAULT_MAX_MODEL_BYTES = 16 * 1024 * 1024

# registrant codes are numeric, possibly dotted (10.1000, 10.23919.x is not
# a registrant: dots only between digit groups)
_DOI_RE = re.compile(r"^10\.\d+(\.\d+)*/\S+$")


@dataclass(frozen=True)
class PublicationLink:
    doi: str
    citation_text: str = ""

    def __post_init__(self):
        if not self.doi:
            raise ServiceError("BAD_DOI", "doi must be non-empty")
        if _DOI_RE.match(self.doi):
            return
        parsed = urlparse(self.doi)
        if parsed.scheme in ("http", "https") and parsed.netloc:
            return
        raise bad_doi(self.doi)

    def to_doc(self) -> dict:
        return {"doi": self.doi, "citation_text": self.citation_text}

    @classmethod
    def from_doc(cls, doc: dict) -> "PublicationLink":
        return cls(doi=doc["doi"], citation_text=doc.get("citation_text", ""))


@dataclass(frozen=True)
class Benchmark:
    benchmark_id: str
    project_id: str
    model_blob: bytes
    model_digest: str
    format_tag: str
    assertion: Assertion
    algorithm_tags: tuple[str, ...]
    submitter: str
    publications: tuple[PublicationLink, ...] = ()
    schema_version: int = 1
    state: str = STATE_PENDING
    submitted_at: datetime = field(default_factory=utcnow)
    wall_seconds: int | None = None

    def __post_init__(self):
        if sha256_hex(self.model_blob) != self.model_digest:
            raise ValueError("model_digest does not match model_blob")
        if self.wall_seconds is not None and self.wall_seconds <= 0:
            raise ValueError("wall_seconds override must be positive")

    @property
    def publication(self) -> PublicationLink | None:
        """Latest attached link; corrections supersede by appending."""
        return self.publications[-1] if self.publications else None

    def identity_key(self) -> tuple[str, str, str]:
        """Duplicate-detection key: same model with same claim is the same benchmark."""
        return (self.project_id, self.model_digest, digest_doc(self.assertion.to_doc()))

    def to_doc(self, include_blob: bool = False) -> dict:
        doc = {
            "benchmark_id": self.benchmark_id,
            "project_id": self.project_id,
            "model_digest": self.model_digest,
            "format_tag": self.format_tag,
            "assertion": self.assertion.to_doc(),
            "algorithm_tags": list(self.algorithm_tags),
            "submitter": self.submitter,
            "publications": [p.to_doc() for p in self.publications],
            "schema_version": self.schema_version,
            "state": self.state,
            "submitted_at": to_rfc3339(self.submitted_at),
            "wall_seconds": self.wall_seconds,
        }
        if include_blob:
            doc["model_blob_hex"] = self.model_blob.hex()
        return doc


@dataclass(frozen=True)
class Tombstone:
    benchmark_id: str
    reason: str
    actor: str
    retired_at: datetime = field(default_factory=utcnow)

    def to_doc(self) -> dict:
        return {
            "benchmark_id": self.benchmark_id,
            "reason": self.reason,
            "actor": self.actor,
            "retired_at": to_rfc3339(self.retired_at),
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "Tombstone":
        return cls(
            benchmark_id=doc["benchmark_id"],
            reason=doc["reason"],
            actor=doc["actor"],
            retired_at=from_rfc3339(doc["retired_at"]),
        )


@dataclass(frozen=True)
class ValidationReport:
    benchmark_id: str
    validated_against: CommitRef
    cells: tuple[CellOutcome, ...]
    accepted: bool

    def __post_init__(self):
        if self.accepted and not self.cells:
            raise ValueError("an accepted validation must carry at least one cell")

    def to_doc(self) -> dict:
        return {
            "benchmark_id": self.benchmark_id,
            "validated_against": self.validated_against.to_doc(),
            "cells": [c.to_doc() for c in self.cells],
            "accepted": self.accepted,
        }


@dataclass(frozen=True)
class HardModel:
    benchmark_id: str
    timeout_algorithms: tuple[str, ...]
    passing_algorithms: tuple[str, ...]

    def to_doc(self) -> dict:
        return {
            "benchmark_id": self.benchmark_id,
            "timeout_algorithms": list(self.timeout_algorithms),
            "passing_algorithms": list(self.passing_algorithms),
        }


def hard_models(cells: Iterable[CellOutcome]) -> list[HardModel]:
    """Benchmarks that defeat at least one algorithm by timeout while another proves them.

    These mark genuine algorithm weaknesses rather than broken models, so
    both a TIMEOUT cell and a PASS cell must exist for the same benchmark.
    """
    by_benchmark: dict[str, dict[str, list[str]]] = {}
    for cell in cells:
        bucket = by_benchmark.setdefault(cell.benchmark_id, {"t": [], "p": []})
        if cell.status == CELL_TIMEOUT:
            bucket["t"].append(cell.algorithm)
        elif cell.status == CELL_PASS:
            bucket["p"].append(cell.algorithm)
    found = [
        HardModel(
            benchmark_id=bid,
            timeout_algorithms=tuple(sorted(bucket["t"])),
            passing_algorithms=tuple(sorted(bucket["p"])),
        )
        for bid, bucket in by_benchmark.items()
        if bucket["t"] and bucket["p"]
    ]
    found.sort(key=lambda h: h.benchmark_id)
    return found


def parse_benchmark_metadata(doc: dict) -> dict:
    """Validate the submission metadata document and normalize its fields."""
    if not isinstance(doc, dict):
        raise ServiceError("BAD_EVENT", "benchmark metadata must be an object")
    try:
        assertion = Assertion.from_doc(doc["assertion"])
    except KeyError:
        raise ServiceError("BAD_EVENT", "benchmark metadata requires an assertion") from None
    except ValueError as exc:
        raise ServiceError("BAD_EVENT", f"bad assertion: {exc}") from None
    tags = doc.get("algorithm_tags", [])
    if not isinstance(tags, list) or not all(isinstance(t, str) and t for t in tags):
        raise ServiceError("BAD_EVENT", "algorithm_tags must be a list of non-empty strings")
    publication = None
    if doc.get("publication"):
        publication = PublicationLink.from_doc(doc["publication"])
    wall = doc.get("wall_seconds")
    if wall is not None:
        wall = int(wall)
        if wall <= 0:
            raise ServiceError("BAD_EVENT", "wall_seconds must be positive")
    return {
        "format_tag": str(doc.get("format_tag", "")),
        "assertion": assertion,
        "algorithm_tags": tuple(tags),
        "submitter": str(doc.get("submitter", "anonymous")),
        "publication": publication,
        "schema_version": int(doc.get("schema_version", 1)),
        "wall_seconds": wall,
    }


class BenchmarkRegistry:
    """Thread-safe store of benchmarks and their tombstones.

    Model bytes live in a content-addressed blob store; the registry doc
    holds metadata only, so persistence stays small and blobs deduplicate.
    """

    def __init__(self, blobs: ContentStore, max_model_bytes: int = DEFAULT_MAX_MODEL_BYTES):
        self._lock = threading.RLock()
        self._benchmarks: dict[str, Benchmark] = {}
        self._tombstones: dict[str, Tombstone] = {}
        self._order: list[str] = []
        self.blobs = blobs
        self.max_model_bytes = max_model_bytes

    def create(
        self,
        project_id: str,
        model_blob: bytes,
        format_tag: str,
        assertion: Assertion,
        algorithm_tags: tuple[str, ...] = (),
        submitter: str = "anonymous",
        publication: PublicationLink | None = None,
        schema_version: int = 1,
        wall_seconds: int | None = None,
    ) -> Benchmark:
        """Store a PENDING benchmark, enforcing size and uniqueness rules."""
        if len(model_blob) > self.max_model_bytes:
            raise too_large(len(model_blob), self.max_model_bytes)
        benchmark = Benchmark(
            benchmark_id=new_id("bm"),
            project_id=project_id,
            model_blob=model_blob,
            model_digest=sha256_hex(model_blob),
            format_tag=format_tag,
            assertion=assertion,
            algorithm_tags=tuple(algorithm_tags),
            submitter=submitter,
            publications=(publication,) if publication else (),
            schema_version=schema_version,
            wall_seconds=wall_seconds,
        )
        with self._lock:
            key = benchmark.identity_key()
            for other in self._benchmarks.values():
                if other.state != STATE_RETIRED and other.identity_key() == key:
                    raise duplicate(
                        f"benchmark {other.benchmark_id} already carries this model and assertion"
                    )
            self.blobs.put(model_blob)
            self._benchmarks[benchmark.benchmark_id] = benchmark
            self._order.append(benchmark.benchmark_id)
            return benchmark

    def activate(self, benchmark_id: str) -> Benchmark:
        with self._lock:
            benchmark = self.get(benchmark_id)
            if benchmark.state == STATE_RETIRED:
                raise ServiceError("REJECTED", f"benchmark {benchmark_id} is retired")
            updated = replace(benchmark, state=STATE_ACTIVE)
            self._benchmarks[benchmark_id] = updated
            return updated

    def discard_pending(self, benchmark_id: str) -> None:
        """Remove a PENDING benchmark whose validation never produced cells."""
        with self._lock:
            benchmark = self.get(benchmark_id)
            if benchmark.state != STATE_PENDING:
                raise RuntimeError("only PENDING benchmarks can be discarded")
            del self._benchmarks[benchmark_id]
            self._order.remove(benchmark_id)

    def retire(self, benchmark_id: str, reason: str, actor: str) -> Tombstone:
        """Retire a benchmark; calling again returns the original tombstone."""
        with self._lock:
            benchmark = self.get(benchmark_id)
            existing = self._tombstones.get(benchmark_id)
            if benchmark.state == STATE_RETIRED and existing is not None:
                return existing
            tombstone = Tombstone(benchmark_id=benchmark_id, reason=reason, actor=actor)
            self._benchmarks[benchmark_id] = replace(benchmark, state=STATE_RETIRED)
            self._tombstones[benchmark_id] = tombstone
            return tombstone

    def get(self, benchmark_id: str) -> Benchmark:
        with self._lock:
            try:
                return self._benchmarks[benchmark_id]
            except KeyError:
                raise not_found(f"no benchmark {benchmark_id}") from None

    def tombstone(self, benchmark_id: str) -> Tombstone | None:
        with self._lock:
            return self._tombstones.get(benchmark_id)

    def active_for(self, project_id: str) -> list[Benchmark]:
        with self._lock:
            return [
                self._benchmarks[bid]
                for bid in self._order
                if self._benchmarks[bid].project_id == project_id
                and self._benchmarks[bid].state == STATE_ACTIVE
            ]

    def all_for(self, project_id: str) -> list[Benchmark]:
        with self._lock:
            return [
                self._benchmarks[bid]
                for bid in self._order
                if self._benchmarks[bid].project_id == project_id
            ]

    def link_publication(self, benchmark_id: str, link: PublicationLink) -> Benchmark:
        with self._lock:
            benchmark = self.get(benchmark_id)
            updated = replace(benchmark, publications=benchmark.publications + (link,))
            self._benchmarks[benchmark_id] = updated
            return updated

    # -- persistence ---------------------------------------------------------

    def to_doc(self) -> dict:
        with self._lock:
            return {
                "benchmarks": [self._benchmarks[bid].to_doc() for bid in self._order],
                "tombstones": [t.to_doc() for t in self._tombstones.values()],
            }

    def load_doc(self, doc: dict) -> None:
        with self._lock:
            for bdoc in doc.get("benchmarks", []):
                try:
                    blob = self.blobs.get(bdoc["model_digest"])
                except KeyError:
                    # metadata without bytes is unusable; skip rather than crash
                    continue
                benchmark = Benchmark(
                    benchmark_id=bdoc["benchmark_id"],
                    project_id=bdoc["project_id"],
                    model_blob=blob,
                    model_digest=bdoc["model_digest"],
                    format_tag=bdoc["format_tag"],
                    assertion=Assertion.from_doc(bdoc["assertion"]),
                    algorithm_tags=tuple(bdoc["algorithm_tags"]),
                    submitter=bdoc["submitter"],
                    publications=tuple(
                        PublicationLink.from_doc(p) for p in bdoc.get("publications", [])
                    ),
                    schema_version=bdoc["schema_version"],
                    state=bdoc["state"],
                    submitted_at=from_rfc3339(bdoc["submitted_at"]),
                    wall_seconds=bdoc.get("wall_seconds"),
                )
                self._benchmarks[benchmark.benchmark_id] = benchmark
                self._order.append(benchmark.benchmark_id)
            for tdoc in doc.get("tombstones", []):
                tombstone = Tombstone.from_doc(tdoc)
                self._tombstones[tombstone.benchmark_id] = tombstone
