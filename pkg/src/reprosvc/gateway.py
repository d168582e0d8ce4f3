"""HTTP boundary over the service, and the long-running `serve` entrypoint.

All mutation funnels through intake and registry operations; GET endpoints
only read recorded state. Responses are plain JSON documents.
"""

from __future__ import annotations

import json
import logging
import sys
import uuid
from pathlib import Path

from fastapi import FastAPI, File, Form, Query, Request, UploadFile
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, PlainTextResponse, Response
from starlette.concurrency import run_in_threadpool

from reprosvc import __version__, report, sources
from reprosvc.errors import ServiceError, source_unavailable
from reprosvc.harness import timings_comparable
from reprosvc.ledger import RunRecord
from reprosvc.registry import PublicationLink
from reprosvc.service import ReproService, ServiceConfig

log = logging.getLogger(__name__)

_HTTP_STATUS = {
    "NOT_REGISTERED": 404,
    "NOT_FOUND": 404,
    "NO_RUN": 404,
    "NO_DATA": 404,
    "BAD_EVENT": 400,
    "BAD_DOI": 400,
    "DUPLICATE": 409,
    "DUPLICATE_NAME": 409,
    "NO_BASELINE": 409,
    "MISSING_ARTIFACT": 409,
    "TOO_LARGE": 413,
    "REJECTED": 422,
    "SOURCE_UNAVAILABLE": 502,
    "INTERNAL": 500,
}


def summarize_run(record: RunRecord) -> dict:
    light = report.grade(record)
    passed, total = report.pass_counts(record)
    return {
        "run_id": record.run_id,
        "commit_id": record.commit.commit_id,
        "trigger_kind": record.trigger.kind,
        "color": light.color,
        "derivation": light.derivation,
        "pass_fraction": f"{passed}/{total}",
        "stages": [s.to_doc() for s in record.stages],
        "test": record.test.to_doc() if record.test else None,
        "cell_count": total,
        "started_at": record.to_doc()["started_at"],
        "finished_at": record.to_doc()["finished_at"],
    }


def run_doc(record: RunRecord) -> dict:
    doc = record.to_doc()
    doc["grade"] = report.grade(record).to_doc()
    return doc


def create_app(service: ReproService) -> FastAPI:
    app = FastAPI(title="reprosvc", version=__version__)
    if service.config.cors_origins:
        app.add_middleware(
            CORSMiddleware,
            allow_origins=list(service.config.cors_origins),
            allow_methods=["*"],
            allow_headers=["*"],
        )

    @app.exception_handler(ServiceError)
    async def service_error(_request: Request, exc: ServiceError):
        status = _HTTP_STATUS.get(exc.code, 500)
        return JSONResponse(
            status_code=status,
            content={"error": {"code": exc.code, "message": str(exc)}},
        )

    @app.exception_handler(ValueError)
    async def value_error(_request: Request, exc: ValueError):
        return JSONResponse(
            status_code=400,
            content={"error": {"code": "BAD_EVENT", "message": str(exc)}},
        )

    def check_token(request: Request) -> None:
        token = service.config.api_token
        if token and request.headers.get("X-Api-Token") != token:
            raise ServiceError("REJECTED", "missing or wrong API token")

    @app.on_event("startup")
    async def startup():
        service.start_workers()

    @app.on_event("shutdown")
    async def shutdown():
        await run_in_threadpool(service.stop_workers)

    @app.get("/")
    def root():
        return {"service": "reprosvc", "version": __version__}

    # -- projects ------------------------------------------------------------

    @app.post("/projects", status_code=201)
    async def register_project(request: Request):
        check_token(request)
        payload = await request.json()
        name = payload.get("name", "")
        source = payload.get("source", "")
        if not name:
            raise ServiceError("BAD_EVENT", "project name is required")
        if any(p.name == name for p in service.store.projects()):
            raise ServiceError("DUPLICATE_NAME", f"a project named {name!r} already exists")
        try:
            sources.head_commit(source)
        except sources.SourceError as exc:
            raise source_unavailable(str(exc)) from None
        project = await run_in_threadpool(
            service.register_project,
            name,
            source,
            payload.get("manifest_path", "repro.manifest.json"),
            payload.get("venue_id", "default"),
            payload.get("project_id"),
        )
        return project.to_doc()

    @app.get("/projects")
    def list_projects():
        out = []
        for project in service.store.projects():
            doc = project.to_doc()
            record = service.ledger.latest_run(project.project_id)
            doc["latest_run"] = summarize_run(record) if record else None
            out.append(doc)
        return out

    @app.get("/projects/{project_id}")
    def get_project(project_id: str):
        project = service.store.get_project(project_id)
        doc = project.to_doc()
        record = service.ledger.latest_run(project_id)
        doc["latest_run"] = summarize_run(record) if record else None
        doc["policy"] = service.venue_policy(project.venue_id).to_doc()
        doc["pending_jobs"] = service.store.pending_count(project_id)
        return doc

    # -- event intake -----------------------------------------------------------

    @app.post("/hooks/push", status_code=202)
    async def push_hook(request: Request):
        check_token(request)
        payload = await request.json()
        job = service.store.receive_push(payload)
        return _job_doc(job)

    @app.post("/hooks/dependency", status_code=202)
    async def dependency_hook(request: Request):
        check_token(request)
        payload = await request.json()
        try:
            name, version = payload["name"], payload["version"]
        except (KeyError, TypeError):
            raise ServiceError("BAD_EVENT", "dependency hook needs {name, version}") from None
        jobs = await run_in_threadpool(
            service.store.receive_dependency_update, str(name), str(version)
        )
        return {"jobs": [_job_doc(j) for j in jobs]}

    @app.get("/jobs/{job_id}")
    def job_status(job_id: str):
        try:
            return _job_doc(service.store.job(job_id))
        except KeyError:
            raise ServiceError("NOT_FOUND", f"no job {job_id}") from None

    # -- benchmarks ---------------------------------------------------------------

    @app.post("/projects/{project_id}/benchmarks", status_code=201)
    async def submit_benchmark(
        project_id: str,
        request: Request,
        model: UploadFile = File(...),
        metadata: str = Form(...),
    ):
        check_token(request)
        blob = await model.read()
        try:
            doc = json.loads(metadata)
        except ValueError as exc:
            raise ServiceError("BAD_EVENT", f"metadata is not valid JSON: {exc}") from None
        validation = await run_in_threadpool(
            service.submit_benchmark, project_id, blob, doc
        )
        return validation.to_doc()

    @app.get("/projects/{project_id}/benchmarks")
    def list_benchmarks(project_id: str):
        service.store.get_project(project_id)
        out = []
        for benchmark in service.registry.all_for(project_id):
            doc = benchmark.to_doc()
            tombstone = service.registry.tombstone(benchmark.benchmark_id)
            doc["tombstone"] = tombstone.to_doc() if tombstone else None
            out.append(doc)
        return out

    @app.delete("/projects/{project_id}/benchmarks/{benchmark_id}")
    def retire_benchmark(
        project_id: str,
        benchmark_id: str,
        request: Request,
        reason: str = Query(default="unspecified"),
        actor: str = Query(default="unknown"),
    ):
        check_token(request)
        _owned_benchmark(service, project_id, benchmark_id)
        return service.retire_benchmark(benchmark_id, reason, actor).to_doc()

    @app.post("/projects/{project_id}/benchmarks/{benchmark_id}/publications", status_code=201)
    async def link_benchmark_publication(project_id: str, benchmark_id: str, request: Request):
        check_token(request)
        _owned_benchmark(service, project_id, benchmark_id)
        payload = await request.json()
        link = PublicationLink.from_doc(payload)
        return service.link_publication(benchmark_id, link).to_doc()

    @app.post("/projects/{project_id}/publications", status_code=201)
    async def link_project_publication(project_id: str, request: Request):
        check_token(request)
        payload = await request.json()
        link = PublicationLink.from_doc(payload)
        project = service.store.add_publication(project_id, link)
        service.save_state()
        return project.to_doc()

    # -- recorded results ------------------------------------------------------------

    @app.get("/projects/{project_id}/runs")
    def list_runs(project_id: str):
        service.store.get_project(project_id)
        records = service.ledger.runs(project_id)
        return [summarize_run(r) for r in reversed(records)]

    @app.get("/projects/{project_id}/runs/{run_id}")
    def get_run(project_id: str, run_id: str):
        service.store.get_project(project_id)
        return run_doc(service.ledger.get_run(project_id, run_id))

    @app.get("/projects/{project_id}/commits/{sha}/run")
    def run_for_commit(project_id: str, sha: str):
        from reprosvc.errors import no_run
        from reprosvc.util import normalize_commit_id

        service.store.get_project(project_id)
        record = service.ledger.latest_run(project_id, normalize_commit_id(sha))
        if record is None:
            raise no_run(sha)
        return run_doc(record)

    @app.get("/projects/{project_id}/diff")
    def diff(
        project_id: str,
        from_commit: str = Query(alias="from"),
        to_commit: str = Query(alias="to"),
    ):
        from reprosvc.util import normalize_commit_id

        service.store.get_project(project_id)
        diff_ = service.ledger.diff_commits(
            project_id, normalize_commit_id(from_commit), normalize_commit_id(to_commit)
        )
        return diff_.to_doc()

    @app.get("/projects/{project_id}/benchmarks/{benchmark_id}/history")
    def history(project_id: str, benchmark_id: str, alg: str = Query(...)):
        service.store.get_project(project_id)
        entries = service.ledger.history(project_id, benchmark_id, alg)
        fingerprints = [e.env_fingerprint for e in entries]
        non_comparable = any(
            not timings_comparable(fingerprints[0], fp) for fp in fingerprints[1:]
        )
        return {
            "project_id": project_id,
            "benchmark_id": benchmark_id,
            "algorithm": alg,
            "entries": [e.to_doc() for e in entries],
            "non_comparable": non_comparable,
            "first_regression": service.ledger.first_regression(project_id, benchmark_id, alg),
        }

    @app.get("/projects/{project_id}/hard-models")
    def hard_models(project_id: str, commit: str | None = Query(default=None)):
        record, found = service.hard_models(project_id, commit)
        return {
            "project_id": project_id,
            "commit_id": record.commit.commit_id,
            "run_id": record.run_id,
            "hard_models": [h.to_doc() for h in found],
        }

    @app.get("/projects/{project_id}/badge")
    def badge(project_id: str, commit: str | None = Query(default=None)):
        doc = service.badge(project_id, commit)
        return Response(
            content=json.dumps(doc, sort_keys=True, separators=(",", ":")),
            media_type="application/json",
        )

    @app.get("/projects/{project_id}/transcripts/{digest}")
    def transcript(project_id: str, digest: str):
        service.store.get_project(project_id)
        data = service.transcripts.get(digest)
        return PlainTextResponse(data.decode("utf-8", errors="replace"))

    # -- venues -------------------------------------------------------------------

    @app.get("/venues/{venue_id}/ranking")
    def ranking(venue_id: str):
        entries = service.ranking(venue_id)
        return {"venue_id": venue_id, "entries": [e.to_doc() for e in entries]}

    @app.get("/venues/{venue_id}/policy")
    def get_policy(venue_id: str):
        return service.venue_policy(venue_id).to_doc()

    @app.put("/venues/{venue_id}/policy")
    async def set_policy(venue_id: str, request: Request):
        check_token(request)
        payload = await request.json()
        policy = service.set_venue_policy(
            venue_id, payload.get("mode", ""), payload.get("label")
        )
        return policy.to_doc()

    @app.get("/venues/{venue_id}/projects/{project_id}/annotation")
    def annotation(venue_id: str, project_id: str):
        policy = service.venue_policy(venue_id)
        service.store.get_project(project_id)
        record = service.ledger.latest_run(project_id)
        return report.apply_policy(policy, record)

    return app


def _job_doc(job) -> dict:
    return {
        "job_id": job.job_id,
        "state": job.state,
        "project_id": job.project_id,
        "kind": job.trigger.kind,
        "event_id": job.trigger.event_id,
        "commit_id": job.trigger.commit.commit_id if job.trigger.commit else None,
    }


def _owned_benchmark(service: ReproService, project_id: str, benchmark_id: str):
    service.store.get_project(project_id)
    benchmark = service.registry.get(benchmark_id)
    if benchmark.project_id != project_id:
        raise ServiceError("NOT_FOUND", f"benchmark {benchmark_id} is not part of {project_id}")
    return benchmark


def serve(config: ServiceConfig) -> int:
    """Run the HTTP service until terminated; returns a process exit code."""
    probe = Path(config.data_dir) / f".writable-{uuid.uuid4().hex[:8]}"
    try:
        probe.parent.mkdir(parents=True, exist_ok=True)
        probe.write_text("ok")
        probe.unlink()
    except OSError as exc:
        print(f"data_dir {config.data_dir} is not writable: {exc}", file=sys.stderr)
        return 3
    try:
        import uvicorn
    except ImportError:  # pragma: no cover - dependency declared, belt and braces
        print("uvicorn is required to serve", file=sys.stderr)
        return 3
    service = ReproService(config)
    app = create_app(service)
    try:
        uvicorn.run(app, host=config.host, port=config.port, log_level="info")
    except (OSError, SystemExit) as exc:
        print(f"server failed to start on {config.listen_address}: {exc}", file=sys.stderr)
        return 3
    return 0
