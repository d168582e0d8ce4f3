"""Event intake: pushes, dependency updates, manual and validation requests.

Every accepted event becomes exactly one queued job. Jobs are executed FIFO
per project, never two at once for the same project; distinct projects are
independent.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import TYPE_CHECKING, Callable

from reprosvc import sources
from reprosvc.errors import (
    ServiceError,
    bad_event,
    duplicate,
    not_registered,
    source_unavailable,
)
from reprosvc.util import from_rfc3339, new_id, normalize_commit_id, to_rfc3339, utcnow

if TYPE_CHECKING:
    from reprosvc.manifest import Manifest
    from reprosvc.registry import PublicationLink

log = logging.getLogger(__name__)

KIND_PUSH = "PUSH"
KIND_DEPENDENCY_UPDATE = "DEPENDENCY_UPDATE"
KIND_MANUAL = "MANUAL"
KIND_SUBMISSION_VALIDATION = "SUBMISSION_VALIDATION"

JOB_QUEUED = "QUEUED"
JOB_RUNNING = "RUNNING"
JOB_DONE = "DONE"
JOB_FAILED_INTERNAL = "FAILED_INTERNAL"


def _check_manifest_path(path: str) -> str:
    if not path or path.startswith("/") or path.startswith("\\"):
        raise ServiceError("BAD_EVENT", f"manifest path must be relative: {path!r}")
    parts = path.replace("\\", "/").split("/")
    if ".." in parts:
        raise ServiceError("BAD_EVENT", f"manifest path may not escape the tree: {path!r}")
    return path


@dataclass(frozen=True)
class Project:
    project_id: str
    name: str
    source: str
    manifest_path: str
    venue_id: str
    publications: tuple["PublicationLink", ...] = ()
    created_at: datetime = field(default_factory=utcnow)

    def to_doc(self) -> dict:
        return {
            "project_id": self.project_id,
            "name": self.name,
            "source": self.source,
            "manifest_path": self.manifest_path,
            "venue_id": self.venue_id,
            "publications": [p.to_doc() for p in self.publications],
            "created_at": to_rfc3339(self.created_at),
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "Project":
        from reprosvc.registry import PublicationLink

        return cls(
            project_id=doc["project_id"],
            name=doc["name"],
            source=doc["source"],
            manifest_path=doc["manifest_path"],
            venue_id=doc["venue_id"],
            publications=tuple(
                PublicationLink.from_doc(p) for p in doc.get("publications", [])
            ),
            created_at=from_rfc3339(doc["created_at"]),
        )


@dataclass(frozen=True)
class CommitRef:
    project_id: str
    commit_id: str
    observed_at: datetime = field(default_factory=utcnow)

    def to_doc(self) -> dict:
        return {
            "project_id": self.project_id,
            "commit_id": self.commit_id,
            "observed_at": to_rfc3339(self.observed_at),
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "CommitRef":
        return cls(
            project_id=doc["project_id"],
            commit_id=doc["commit_id"],
            observed_at=from_rfc3339(doc["observed_at"]),
        )


@dataclass(frozen=True)
class TriggerEvent:
    kind: str
    project_id: str
    event_id: str
    commit: CommitRef | None = None
    dependency: tuple[str, str] | None = None
    benchmark_id: str | None = None
    received_at: datetime = field(default_factory=utcnow)

    def __post_init__(self):
        if self.kind in (KIND_PUSH, KIND_MANUAL) and self.commit is None:
            raise ValueError(f"{self.kind} event requires a commit")
        if self.kind == KIND_DEPENDENCY_UPDATE and self.dependency is None:
            raise ValueError("DEPENDENCY_UPDATE event requires a dependency pair")

    def to_doc(self) -> dict:
        doc = {
            "kind": self.kind,
            "project_id": self.project_id,
            "event_id": self.event_id,
            "received_at": to_rfc3339(self.received_at),
        }
        if self.commit is not None:
            doc["commit"] = self.commit.to_doc()
        if self.dependency is not None:
            doc["dependency"] = {"name": self.dependency[0], "version": self.dependency[1]}
        if self.benchmark_id is not None:
            doc["benchmark_id"] = self.benchmark_id
        return doc

    @classmethod
    def from_doc(cls, doc: dict) -> "TriggerEvent":
        dep = doc.get("dependency")
        return cls(
            kind=doc["kind"],
            project_id=doc["project_id"],
            event_id=doc["event_id"],
            commit=CommitRef.from_doc(doc["commit"]) if "commit" in doc else None,
            dependency=(dep["name"], dep["version"]) if dep else None,
            benchmark_id=doc.get("benchmark_id"),
            received_at=from_rfc3339(doc["received_at"]),
        )


@dataclass
class Job:
    job_id: str
    trigger: TriggerEvent
    seq: int
    state: str = JOB_QUEUED
    enqueued_at: datetime = field(default_factory=utcnow)
    started_at: datetime | None = None
    finished_at: datetime | None = None

    @property
    def project_id(self) -> str:
        return self.trigger.project_id


ManifestReader = Callable[[Project, str], "Manifest"]


class IngestStore:
    """Registered projects, pending jobs and the per-project run serialization.

    All public methods are safe to call from multiple threads; a single lock
    guards the whole structure (intake is cheap, contention negligible).
    """

    def __init__(self, manifest_reader: ManifestReader | None = None):
        self._lock = threading.RLock()
        self._projects: dict[str, Project] = {}
        self._jobs: dict[str, Job] = {}
        self._by_event: dict[str, str] = {}
        self._seq = 0
        # last commit we enqueued a run for, and last commit whose fetch succeeded
        self._last_seen: dict[str, str] = {}
        self._last_good: dict[str, str] = {}
        self.manifest_reader = manifest_reader

    # -- projects ----------------------------------------------------------

    def register_project(
        self,
        name: str,
        source: str,
        manifest_path: str = "repro.manifest.json",
        venue_id: str = "default",
        project_id: str | None = None,
    ) -> Project:
        _check_manifest_path(manifest_path)
        if not source:
            raise ServiceError("BAD_EVENT", "project source must be non-empty")
        pid = project_id or name.lower().replace(" ", "-")
        with self._lock:
            if pid in self._projects:
                raise duplicate(f"project {pid!r} is already registered")
            project = Project(
                project_id=pid,
                name=name,
                source=source,
                manifest_path=manifest_path,
                venue_id=venue_id,
            )
            self._projects[pid] = project
            return project

    def get_project(self, project_id: str) -> Project:
        with self._lock:
            try:
                return self._projects[project_id]
            except KeyError:
                raise not_registered(project_id) from None

    def projects(self) -> list[Project]:
        with self._lock:
            return sorted(self._projects.values(), key=lambda p: p.project_id)

    def replace_project(self, project: Project) -> None:
        with self._lock:
            if project.project_id not in self._projects:
                raise not_registered(project.project_id)
            self._projects[project.project_id] = project

    def add_publication(self, project_id: str, link: "PublicationLink") -> Project:
        with self._lock:
            project = self.get_project(project_id)
            updated = replace(project, publications=project.publications + (link,))
            self._projects[project_id] = updated
            return updated

    # -- commit bookkeeping --------------------------------------------------

    def note_good_fetch(self, project_id: str, commit_id: str) -> None:
        with self._lock:
            self._last_good[project_id] = commit_id

    def last_good_commit(self, project_id: str) -> str | None:
        with self._lock:
            return self._last_good.get(project_id)

    # -- intake --------------------------------------------------------------

    def _enqueue(self, trigger: TriggerEvent) -> Job:
        existing = self._by_event.get(trigger.event_id)
        if existing is not None:
            return self._jobs[existing]
        self._seq += 1
        job = Job(job_id=new_id("job"), trigger=trigger, seq=self._seq)
        self._jobs[job.job_id] = job
        self._by_event[trigger.event_id] = job.job_id
        return job

    def receive_push(self, payload: dict) -> Job:
        try:
            project_id = payload["project_id"]
            raw_commit = payload["commit_id"]
            event_id = payload["event_id"]
        except (KeyError, TypeError) as exc:
            raise bad_event(f"push payload missing {exc}") from None
        with self._lock:
            project = self.get_project(project_id)
            try:
                commit_id = normalize_commit_id(raw_commit)
            except ValueError as exc:
                raise bad_event(str(exc)) from None
            trigger = TriggerEvent(
                kind=KIND_PUSH,
                project_id=project.project_id,
                event_id=str(event_id),
                commit=CommitRef(project_id=project.project_id, commit_id=commit_id),
            )
            job = self._enqueue(trigger)
            self._last_seen[project.project_id] = commit_id
            return job

    def receive_dependency_update(self, dep_name: str, new_version: str) -> list[Job]:
        """Queue a re-run for every project whose manifest declares the name.

        Projects without a successfully fetched commit are skipped: there is
        no tree to rebuild yet, the next push will pick the new version up.
        """
        jobs: list[Job] = []
        with self._lock:
            candidates = list(self._projects.values())
        for project in candidates:
            commit_id = self.last_good_commit(project.project_id)
            if commit_id is None:
                log.warning(
                    "dependency update %s=%s: project %s has no fetched commit, skipped",
                    dep_name, new_version, project.project_id,
                )
                continue
            if not self._declares(project, commit_id, dep_name):
                continue
            trigger = TriggerEvent(
                kind=KIND_DEPENDENCY_UPDATE,
                project_id=project.project_id,
                event_id=f"dep:{dep_name}:{new_version}:{project.project_id}",
                commit=CommitRef(project_id=project.project_id, commit_id=commit_id),
                dependency=(dep_name, new_version),
            )
            with self._lock:
                jobs.append(self._enqueue(trigger))
        return jobs

    def _declares(self, project: Project, commit_id: str, dep_name: str) -> bool:
        if self.manifest_reader is None:
            return False
        try:
            manifest = self.manifest_reader(project, commit_id)
        except Exception as exc:
            log.warning("manifest of %s@%s unreadable (%s); treated as not declaring",
                        project.project_id, commit_id[:12], exc)
            return False
        return manifest.declares_dependency(dep_name)

    def poll_source(self, project: Project) -> Job | None:
        try:
            head = sources.head_commit(project.source)
        except sources.SourceError as exc:
            raise source_unavailable(str(exc)) from None
        with self._lock:
            if self._last_seen.get(project.project_id) == head:
                return None
            trigger = TriggerEvent(
                kind=KIND_PUSH,
                project_id=project.project_id,
                event_id=f"poll:{project.project_id}:{head}",
                commit=CommitRef(project_id=project.project_id, commit_id=head),
            )
            job = self._enqueue(trigger)
            self._last_seen[project.project_id] = head
            return job

    def receive_manual(self, project_id: str, commit_id: str) -> Job:
        with self._lock:
            project = self.get_project(project_id)
            try:
                commit_id = normalize_commit_id(commit_id)
            except ValueError as exc:
                raise bad_event(str(exc)) from None
            trigger = TriggerEvent(
                kind=KIND_MANUAL,
                project_id=project.project_id,
                event_id=new_id("manual"),
                commit=CommitRef(project_id=project.project_id, commit_id=commit_id),
            )
            return self._enqueue(trigger)

    def receive_submission_validation(
        self, project_id: str, commit_id: str, benchmark_id: str
    ) -> Job:
        with self._lock:
            project = self.get_project(project_id)
            trigger = TriggerEvent(
                kind=KIND_SUBMISSION_VALIDATION,
                project_id=project.project_id,
                event_id=f"subval:{benchmark_id}",
                commit=CommitRef(project_id=project.project_id, commit_id=commit_id),
                benchmark_id=benchmark_id,
            )
            return self._enqueue(trigger)

    # -- scheduling ------------------------------------------------------------

    def next_job(self, project_id: str) -> Job | None:
        """Oldest queued job for the project, marked RUNNING, or None.

        None while another job of the same project runs: runs are serialized.
        """
        with self._lock:
            queued = None
            for job in self._jobs.values():
                if job.project_id != project_id:
                    continue
                if job.state == JOB_RUNNING:
                    return None
                if job.state == JOB_QUEUED and (queued is None or job.seq < queued.seq):
                    queued = job
            if queued is None:
                return None
            queued.state = JOB_RUNNING
            queued.started_at = utcnow()
            return queued

    def claim_any(self) -> Job | None:
        """Claim the globally oldest runnable job across all projects."""
        with self._lock:
            running = {j.project_id for j in self._jobs.values() if j.state == JOB_RUNNING}
            candidates = [
                j for j in self._jobs.values()
                if j.state == JOB_QUEUED and j.project_id not in running
            ]
            if not candidates:
                return None
            job = min(candidates, key=lambda j: j.seq)
            job.state = JOB_RUNNING
            job.started_at = utcnow()
            return job

    def finish_job(self, job_id: str, ok: bool) -> Job:
        with self._lock:
            job = self._jobs[job_id]
            if job.state != JOB_RUNNING:
                raise RuntimeError(f"job {job_id} is {job.state}, not RUNNING")
            job.state = JOB_DONE if ok else JOB_FAILED_INTERNAL
            job.finished_at = utcnow()
            return job

    def job(self, job_id: str) -> Job:
        with self._lock:
            return self._jobs[job_id]

    def pending_count(self, project_id: str | None = None) -> int:
        with self._lock:
            return sum(
                1 for j in self._jobs.values()
                if j.state in (JOB_QUEUED, JOB_RUNNING)
                and (project_id is None or j.project_id == project_id)
            )

    # -- persistence -------------------------------------------------------------

    def to_doc(self) -> dict:
        """Durable part of the store: projects and commit bookkeeping.

        Queued jobs are deliberately not persisted; after a restart the poll
        loop re-detects unprocessed heads.
        """
        with self._lock:
            return {
                "projects": [p.to_doc() for p in self.projects()],
                "last_seen": dict(self._last_seen),
                "last_good": dict(self._last_good),
            }

    def load_doc(self, doc: dict) -> None:
        with self._lock:
            for pdoc in doc.get("projects", []):
                project = Project.from_doc(pdoc)
                self._projects[project.project_id] = project
            self._last_seen.update(doc.get("last_seen", {}))
            self._last_good.update(doc.get("last_good", {}))
