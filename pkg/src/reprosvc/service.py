"""Service orchestration: executes queued jobs end to end.

A job walks the full pipeline (fetch, deps, build, test, matrix), appends
one RunRecord to the ledger, and manages workspace retention so benchmark
submissions can validate against the latest successful build without a
rebuild.
"""

from __future__ import annotations

import json
import logging
import shutil
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from reprosvc import harness, registry as registry_mod, report, sources
from reprosvc.errors import ServiceError, no_baseline, no_data, not_found
from reprosvc.harness import host_fingerprint, run_cell, run_matrix, run_sanity_tests
from reprosvc.ingest import (
    CommitRef,
    IngestStore,
    Job,
    KIND_SUBMISSION_VALIDATION,
    Project,
    TriggerEvent,
)
from reprosvc.ledger import Ledger, RunRecord
from reprosvc.manifest import (
    MANIFEST_FILENAME,
    Manifest,
    ManifestError,
    parse_manifest,
)
from reprosvc.pipeline import (
    DependencyCache,
    Pipeline,
    STAGE_DEPS,
    STAGE_FETCH,
    STATUS_FAILED,
    STATUS_OK,
    StageOutcome,
    TranscriptStore,
    Workspace,
)
from reprosvc.registry import Benchmark, BenchmarkRegistry, ValidationReport
from reprosvc.report import VenuePolicy
from reprosvc.util import (
    ContentStore,
    atomic_write_text,
    new_id,
    normalize_commit_id,
    sha256_hex,
    tree_digest,
    utcnow,
)

log = logging.getLogger(__name__)


@dataclass
class ServiceConfig:
    data_dir: Path
    listen_address: str = "127.0.0.1:8787"
    worker_limit: int = 2
    poll_seconds: int = 60
    retention_count: int = 5
    max_model_bytes: int = registry_mod.DEFAULT_MAX_MODEL_BYTES
    workspaces_dir: Path | None = None
    cell_parallelism: int = 1
    max_attempts: int = 1
    api_token: str | None = None
    cors_origins: tuple[str, ...] = ("*",)

    def __post_init__(self):
        self.data_dir = Path(self.data_dir)
        if self.workspaces_dir is None:
            self.workspaces_dir = self.data_dir / "workspaces"
        else:
            self.workspaces_dir = Path(self.workspaces_dir)
        if self.worker_limit < 1:
            raise ValueError("worker_limit must be positive")
        if self.poll_seconds < 1:
            raise ValueError("poll_seconds must be positive")
        if self.retention_count < 0:
            raise ValueError("retention_count must be non-negative")
        if self.max_model_bytes < 1:
            raise ValueError("max_model_bytes must be positive")
        host, sep, port = self.listen_address.rpartition(":")
        if not sep or not host or not port.isdigit():
            raise ValueError(f"listen_address must be host:port, got {self.listen_address!r}")

    @property
    def host(self) -> str:
        return self.listen_address.rpartition(":")[0]

    @property
    def port(self) -> int:
        return int(self.listen_address.rpartition(":")[2])

    @classmethod
    def from_file(cls, path: Path) -> "ServiceConfig":
        doc = json.loads(Path(path).read_text())
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ServiceError("BAD_EVENT", f"unknown config keys: {sorted(unknown)}")
        if "cors_origins" in doc:
            doc["cors_origins"] = tuple(doc["cors_origins"])
        return cls(**doc)


class ReproService:
    """Everything behind the HTTP and CLI surfaces."""

    def __init__(self, config: ServiceConfig):
        self.config = config
        config.data_dir.mkdir(parents=True, exist_ok=True)
        config.workspaces_dir.mkdir(parents=True, exist_ok=True)
        self.transcripts = TranscriptStore(config.data_dir)
        self.ledger = Ledger(config.data_dir)
        self.registry = BenchmarkRegistry(
            ContentStore(config.data_dir, "models"), config.max_model_bytes
        )
        self.store = IngestStore(manifest_reader=self._read_manifest_at)
        self.pipeline = Pipeline(
            workspaces_root=config.workspaces_dir,
            transcripts=self.transcripts,
            dep_cache=DependencyCache(config.data_dir / "depcache"),
        )
        self.venues: dict[str, VenuePolicy] = {}
        # latest successful build per project: (workspace, manifest)
        self._retained: dict[str, tuple[Workspace, Manifest]] = {}
        # failed workspaces kept for post-mortem, oldest first
        self._failed: dict[str, list[Workspace]] = {}
        self._retain_lock = threading.Lock()
        self._state_lock = threading.Lock()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._load_state()

    # -- state persistence ----------------------------------------------------

    def _state_path(self) -> Path:
        return self.config.data_dir / "state.json"

    def _load_state(self) -> None:
        path = self._state_path()
        if not path.exists():
            return
        doc = json.loads(path.read_text())
        self.store.load_doc(doc.get("ingest", {}))
        self.registry.load_doc(doc.get("registry", {}))
        for vdoc in doc.get("venues", []):
            policy = VenuePolicy.from_doc(vdoc)
            self.venues[policy.venue_id] = policy

    def save_state(self) -> None:
        with self._state_lock:
            doc = {
                "ingest": self.store.to_doc(),
                "registry": self.registry.to_doc(),
                "venues": [p.to_doc() for p in self.venues.values()],
            }
            atomic_write_text(self._state_path(), json.dumps(doc, indent=1, sort_keys=True))

    # -- project and venue management -------------------------------------------

    def register_project(
        self,
        name: str,
        source: str,
        manifest_path: str = MANIFEST_FILENAME,
        venue_id: str = "default",
        project_id: str | None = None,
    ) -> Project:
        project = self.store.register_project(
            name=name,
            source=source,
            manifest_path=manifest_path,
            venue_id=venue_id,
            project_id=project_id,
        )
        self.venues.setdefault(venue_id, VenuePolicy(venue_id=venue_id, mode=report.MODE_OPTIONAL))
        self.save_state()
        return project

    def venue_policy(self, venue_id: str) -> VenuePolicy:
        try:
            return self.venues[venue_id]
        except KeyError:
            raise not_found(f"no venue {venue_id}") from None

    def set_venue_policy(self, venue_id: str, mode: str, label: str | None = None) -> VenuePolicy:
        current = self.venues.get(venue_id)
        if current is None:
            policy = VenuePolicy(venue_id=venue_id, mode=mode, label=label or "")
        else:
            policy = current.advanced_to(mode, label)
        self.venues[venue_id] = policy
        self.save_state()
        return policy

    # -- manifest access ---------------------------------------------------------

    def _read_manifest_at(self, project: Project, commit_id: str) -> Manifest:
        raw = sources.read_file(project.source, commit_id, project.manifest_path)
        return parse_manifest(raw)

    # -- job execution -------------------------------------------------------------

    def execute_job(self, job: Job) -> RunRecord | None:
        """Run one job to completion and record the outcome.

        Returns the appended RunRecord, or None when the job could not even
        be attempted (internal failure; the job state says so).
        """
        record = None
        ok = False
        try:
            record = self._run_pipeline(job.trigger)
            ok = True
        except Exception:
            log.exception("job %s failed internally", job.job_id)
        finally:
            self.store.finish_job(job.job_id, ok)
            self.save_state()
        return record

    def _run_pipeline(self, trigger: TriggerEvent) -> RunRecord:
        project = self.store.get_project(trigger.project_id)
        commit = trigger.commit
        started_at = utcnow()
        run_id = new_id("run")
        fingerprint = host_fingerprint(workers=self.config.cell_parallelism)

        if trigger.dependency is not None:
            dropped = self.pipeline.dep_cache.invalidate(trigger.dependency[0])
            if dropped:
                log.info("dropped %d cached artifacts of %s", dropped, trigger.dependency[0])

        ws, fetch = self.pipeline.prepare_workspace(project, commit)
        stages = [fetch]
        manifest: Manifest | None = None
        manifest_digest = ""
        test = None
        cells = None
        try:
            if fetch.ok:
                self.store.note_good_fetch(project.project_id, commit.commit_id)
                manifest, manifest_digest, stage_error = self._load_workspace_manifest(ws, project)
                if stage_error is not None:
                    stages.append(stage_error)
                else:
                    deps = self.pipeline.resolve_dependencies(ws, manifest)
                    stages.append(deps)
                    if deps.ok:
                        build = self.pipeline.compile(ws, manifest)
                        stages.append(build)
                        if build.ok:
                            test = run_sanity_tests(ws, manifest, self.transcripts)
                            if test.ok:
                                cells = tuple(
                                    run_matrix(
                                        ws,
                                        manifest,
                                        self._matrix_benchmarks(trigger),
                                        self.transcripts,
                                        max_attempts=self.config.max_attempts,
                                        parallel_width=self.config.cell_parallelism,
                                    )
                                )
            record = RunRecord(
                run_id=run_id,
                trigger=trigger,
                commit=commit,
                manifest_digest=manifest_digest,
                stages=tuple(stages),
                test=test,
                cells=cells,
                env_fingerprint=fingerprint,
                started_at=started_at,
                finished_at=utcnow(),
            )
            self.ledger.append_run(project.project_id, record)
        except BaseException:
            if ws.phase != "DESTROYED":
                ws.destroy()
            raise
        self._settle_workspace(project.project_id, ws, manifest, test)
        if trigger.kind == KIND_SUBMISSION_VALIDATION and trigger.benchmark_id:
            self._settle_submission(trigger.benchmark_id, record)
        return record

    def _load_workspace_manifest(
        self, ws: Workspace, project: Project
    ) -> tuple[Manifest | None, str, StageOutcome | None]:
        """Read and parse the manifest from the checked-out tree.

        A missing or invalid manifest is reported as a failed DEPS stage:
        nothing can be acquired or built without it, and the transcript
        carries the exact parse complaint for the developer.
        """
        path = ws.root / project.manifest_path
        raw = b""
        try:
            raw = path.read_bytes()
            manifest = parse_manifest(raw)
            return manifest, manifest.digest, None
        except FileNotFoundError:
            note = f"[deps] manifest {project.manifest_path} not found in tree\n"
        except ManifestError as exc:
            note = f"[deps] manifest invalid: {exc}\n"
        digest, rel = self.transcripts.put(note.encode())
        outcome = StageOutcome(
            stage=STAGE_DEPS, status=STATUS_FAILED, log_digest=digest, log_path=rel, wall_ms=0
        )
        return None, sha256_hex(raw) if raw else "", outcome

    def _matrix_benchmarks(self, trigger: TriggerEvent) -> list[Benchmark]:
        benchmarks = self.registry.active_for(trigger.project_id)
        if trigger.kind == KIND_SUBMISSION_VALIDATION and trigger.benchmark_id:
            pending = self.registry.get(trigger.benchmark_id)
            if pending.state == registry_mod.STATE_PENDING:
                benchmarks = benchmarks + [pending]
        return benchmarks

    def _settle_workspace(
        self, project_id: str, ws: Workspace, manifest: Manifest | None, test
    ) -> None:
        """Retain the workspace of a fully successful run for later validation.

        Failed workspaces stay on disk for post-mortem, oldest deleted beyond
        the configured retention count.
        """
        succeeded = ws.phase == "BUILT" and manifest is not None and test is not None and test.ok
        with self._retain_lock:
            if not succeeded:
                if ws.phase == "DESTROYED":
                    return
                kept = self._failed.setdefault(project_id, [])
                kept.append(ws)
                while len(kept) > self.config.retention_count:
                    kept.pop(0).destroy()
                return
            previous = self._retained.pop(project_id, None)
            if previous is not None:
                previous[0].destroy()
            self._retained[project_id] = (ws, manifest)

    def _settle_submission(self, benchmark_id: str, record: RunRecord) -> None:
        """Activate a pending benchmark once its validation run recorded cells."""
        try:
            benchmark = self.registry.get(benchmark_id)
        except ServiceError:
            return
        if benchmark.state != registry_mod.STATE_PENDING:
            return
        cells = [c for c in (record.cells or ()) if c.benchmark_id == benchmark_id]
        if cells:
            self.registry.activate(benchmark_id)
        else:
            self.registry.discard_pending(benchmark_id)
        self.save_state()

    # -- benchmark submission --------------------------------------------------------

    def submit_benchmark(
        self, project_id: str, model_blob: bytes, metadata: dict
    ) -> ValidationReport:
        """Validate and store a community benchmark.

        Uses the retained workspace of the latest successful build when one
        exists; otherwise falls back to a full validation run. Either way the
        benchmark becomes ACTIVE as soon as at least one cell was judged,
        whether it passed or not.
        """
        project = self.store.get_project(project_id)
        meta = registry_mod.parse_benchmark_metadata(metadata)
        baseline = self._latest_successful_run(project_id)
        if baseline is None:
            raise no_baseline(project_id)
        publication = meta.pop("publication")
        benchmark = self.registry.create(
            project_id=project_id,
            model_blob=model_blob,
            publication=publication,
            **meta,
        )
        try:
            with self._retain_lock:
                retained = self._retained.get(project_id)
                if retained is not None:
                    report_ = self._validate_in_workspace(benchmark, *retained)
                    self.save_state()
                    return report_
            return self._validate_with_run(project, benchmark, baseline)
        except BaseException:
            try:
                if self.registry.get(benchmark.benchmark_id).state == registry_mod.STATE_PENDING:
                    self.registry.discard_pending(benchmark.benchmark_id)
            except ServiceError:
                pass
            raise

    def _latest_successful_run(self, project_id: str) -> RunRecord | None:
        best = None
        for record in self.ledger.runs(project_id):
            if record.test is not None and record.test.ok:
                best = record
        return best

    def _validate_in_workspace(
        self, benchmark: Benchmark, ws: Workspace, manifest: Manifest
    ) -> ValidationReport:
        algorithms = harness.applicable_algorithms(manifest, benchmark)
        if not algorithms:
            self.registry.discard_pending(benchmark.benchmark_id)
            raise ServiceError(
                "REJECTED",
                "benchmark tags match none of the manifest's algorithms",
            )
        cells = [
            run_cell(
                ws,
                manifest,
                benchmark,
                algorithm,
                None,
                self.transcripts,
                max_attempts=self.config.max_attempts,
            )
            for algorithm in algorithms
        ]
        cells.sort(key=lambda c: (c.benchmark_id, c.algorithm))
        self.registry.activate(benchmark.benchmark_id)
        return ValidationReport(
            benchmark_id=benchmark.benchmark_id,
            validated_against=ws.commit,
            cells=tuple(cells),
            accepted=True,
        )

    def _validate_with_run(
        self, project: Project, benchmark: Benchmark, baseline: RunRecord
    ) -> ValidationReport:
        job = self.store.receive_submission_validation(
            project.project_id, baseline.commit.commit_id, benchmark.benchmark_id
        )
        self._drain_until_done(project.project_id, job.job_id)
        job = self.store.job(job.job_id)
        if job.state != "DONE":
            raise ServiceError("INTERNAL", "validation run failed; benchmark not stored")
        record = self._find_run_by_event(project.project_id, job.trigger.event_id)
        cells = tuple(
            c for c in (record.cells or ()) if c.benchmark_id == benchmark.benchmark_id
        ) if record else ()
        try:
            state = self.registry.get(benchmark.benchmark_id).state
        except ServiceError:
            state = None
        accepted = state == registry_mod.STATE_ACTIVE and bool(cells)
        return ValidationReport(
            benchmark_id=benchmark.benchmark_id,
            validated_against=record.commit if record else baseline.commit,
            cells=cells if accepted else (),
            accepted=accepted,
        )

    def _find_run_by_event(self, project_id: str, event_id: str) -> RunRecord | None:
        for record in reversed(self.ledger.runs(project_id)):
            if record.trigger.event_id == event_id:
                return record
        return None

    def _drain_until_done(self, project_id: str, job_id: str) -> None:
        """Process the project's queue in order until the given job finishes."""
        while True:
            state = self.store.job(job_id).state
            if state in ("DONE", "FAILED_INTERNAL"):
                return
            claimed = self.store.next_job(project_id)
            if claimed is not None:
                self.execute_job(claimed)
            else:
                time.sleep(0.05)

    def retire_benchmark(self, benchmark_id: str, reason: str, actor: str):
        tombstone = self.registry.retire(benchmark_id, reason, actor)
        self.save_state()
        return tombstone

    def link_publication(self, benchmark_id: str, link: registry_mod.PublicationLink) -> Benchmark:
        updated = self.registry.link_publication(benchmark_id, link)
        self.save_state()
        return updated

    # -- queries -----------------------------------------------------------------

    def hard_models(self, project_id: str, commit_id: str | None = None):
        self.store.get_project(project_id)
        if commit_id is not None:
            commit_id = normalize_commit_id(commit_id)
        record = self.ledger.latest_run(project_id, commit_id)
        if record is None:
            raise no_data(project_id if commit_id is None else f"{project_id}@{commit_id}")
        return record, registry_mod.hard_models(record.cells or ())

    def ranking(self, venue_id: str):
        self.venue_policy(venue_id)
        latest = []
        for project in self.store.projects():
            if project.venue_id != venue_id:
                continue
            record = self.ledger.latest_run(project.project_id)
            if record is not None:
                latest.append(record)
        return report.rank(latest)

    def badge(self, project_id: str, commit_id: str | None = None) -> dict:
        self.store.get_project(project_id)
        if commit_id is not None:
            commit_id = normalize_commit_id(commit_id)
        return report.render_badge(self.ledger, project_id, commit_id)

    # -- background machinery --------------------------------------------------------

    def poll_all(self) -> list[Job]:
        jobs = []
        for project in self.store.projects():
            try:
                job = self.store.poll_source(project)
            except ServiceError as exc:
                log.warning("poll of %s failed: %s", project.project_id, exc)
                continue
            if job is not None:
                jobs.append(job)
        return jobs

    def start_workers(self) -> None:
        if self._threads:
            return
        self._stop.clear()
        for i in range(max(1, self.config.worker_limit)):
            t = threading.Thread(target=self._worker_loop, name=f"runner-{i}", daemon=True)
            t.start()
            self._threads.append(t)
        if self.config.poll_seconds > 0:
            t = threading.Thread(target=self._poll_loop, name="poller", daemon=True)
            t.start()
            self._threads.append(t)

    def stop_workers(self) -> None:
        """Signal shutdown and wait for in-flight jobs to finish and record."""
        self._stop.set()
        for t in self._threads:
            t.join()
        self._threads.clear()

    def _worker_loop(self) -> None:
        while not self._stop.is_set():
            job = self.store.claim_any()
            if job is None:
                self._stop.wait(0.2)
                continue
            self.execute_job(job)

    def _poll_loop(self) -> None:
        while not self._stop.wait(self.config.poll_seconds):
            self.poll_all()


# -- one-shot evaluation (no registration, no persistence beyond the report) -----


def load_benchmark_dir(path: Path) -> list[Benchmark]:
    """Read ad hoc benchmarks from a directory of ``*.bench.json`` files.

    Each file names a model file (relative to itself) and an assertion; the
    resulting benchmarks exist only for this evaluation.
    """
    benchmarks = []
    for spec_path in sorted(Path(path).glob("*.bench.json")):
        doc = json.loads(spec_path.read_text())
        meta = registry_mod.parse_benchmark_metadata(doc)
        model_path = (spec_path.parent / doc["model_path"]).resolve()
        blob = model_path.read_bytes()
        benchmarks.append(
            Benchmark(
                benchmark_id=doc.get("benchmark_id", spec_path.stem.replace(".bench", "")),
                project_id="adhoc",
                model_blob=blob,
                model_digest=sha256_hex(blob),
                format_tag=meta["format_tag"],
                assertion=meta["assertion"],
                algorithm_tags=meta["algorithm_tags"],
                submitter=meta["submitter"],
                state=registry_mod.STATE_ACTIVE,
                wall_seconds=meta["wall_seconds"],
            )
        )
    return benchmarks


def evaluate_once(
    source_dir: Path,
    work_dir: Path,
    benchmarks: list[Benchmark] | None = None,
    manifest_path: str = MANIFEST_FILENAME,
) -> tuple[RunRecord, report.TrafficLight]:
    """Evaluate an unregistered source tree in place, once.

    The tree is copied (not moved) into a fresh workspace; its content hash
    stands in for a commit id so the resulting record reads like any other.
    """
    source_dir = Path(source_dir)
    work_dir = Path(work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)
    transcripts = TranscriptStore(work_dir)
    pipeline = Pipeline(
        workspaces_root=work_dir / "workspaces",
        transcripts=transcripts,
        dep_cache=DependencyCache(work_dir / "depcache"),
    )
    commit = CommitRef(project_id="adhoc", commit_id=tree_digest(source_dir))
    trigger = TriggerEvent(
        kind="MANUAL", project_id="adhoc", event_id=new_id("once"), commit=commit
    )
    started_at = utcnow()

    base = pipeline.workspaces_root / new_id("adhoc")
    ws = Workspace(base=base, commit=commit)
    shutil.copytree(source_dir, ws.root)
    ws._advance("FETCHED")
    for aux in (ws.deps_dir, ws.scratch_dir):
        aux.mkdir(parents=True, exist_ok=True)
    digest, rel = transcripts.put(f"[fetch] copied {source_dir}\n".encode())
    stages = [
        StageOutcome(stage=STAGE_FETCH, status=STATUS_OK, log_digest=digest, log_path=rel, wall_ms=0)
    ]

    manifest = None
    manifest_digest = ""
    test = None
    cells = None
    manifest_file = ws.root / manifest_path
    try:
        raw = manifest_file.read_bytes()
        manifest_digest = sha256_hex(raw)
        manifest = parse_manifest(raw)
    except (FileNotFoundError, ManifestError) as exc:
        note_digest, note_rel = transcripts.put(f"[deps] manifest unusable: {exc}\n".encode())
        stages.append(
            StageOutcome(
                stage=STAGE_DEPS,
                status=STATUS_FAILED,
                log_digest=note_digest,
                log_path=note_rel,
                wall_ms=0,
            )
        )
    if manifest is not None:
        deps = pipeline.resolve_dependencies(ws, manifest)
        stages.append(deps)
        if deps.ok:
            build = pipeline.compile(ws, manifest)
            stages.append(build)
            if build.ok:
                test = run_sanity_tests(ws, manifest, transcripts)
                if test.ok:
                    cells = tuple(
                        run_matrix(ws, manifest, benchmarks or [], transcripts)
                    )
    record = RunRecord(
        run_id=new_id("run"),
        trigger=trigger,
        commit=commit,
        manifest_digest=manifest_digest,
        stages=tuple(stages),
        test=test,
        cells=cells,
        env_fingerprint=host_fingerprint(),
        started_at=started_at,
        finished_at=utcnow(),
    )
    ws.destroy()
    return record, report.grade(record)
