"""De novo build pipeline: fresh workspace, fetch, dependency resolution, build.

Each run gets a brand-new workspace directory; the only inputs that reach it
are the committed source tree, manifest-declared dependency artifacts and the
whitelisted environment variables. Network access exists solely while
dependencies are acquired.
"""

from __future__ import annotations

import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path

from reprosvc import sources
from reprosvc.errors import ServiceError
from reprosvc.ingest import CommitRef, Project
from reprosvc.manifest import Manifest, ResourceLimits
from reprosvc.sandbox import StepResult, project_environment, run_step
from reprosvc.util import ContentStore, digest_doc, new_id

log = logging.getLogger(__name__)

STAGE_FETCH = "FETCH"
STAGE_DEPS = "DEPS"
STAGE_BUILD = "BUILD"
STAGE_ORDER = (STAGE_FETCH, STAGE_DEPS, STAGE_BUILD)

STATUS_OK = "OK"
STATUS_FAILED = "FAILED"
STATUS_TIMEOUT = "TIMEOUT"

_PHASES = ("CREATED", "FETCHED", "DEPS_RESOLVED", "BUILT", "DESTROYED")


@dataclass(frozen=True)
class StageOutcome:
    stage: str
    status: str
    log_digest: str
    log_path: str
    wall_ms: int

    @property
    def ok(self) -> bool:
        return self.status == STATUS_OK

    def to_doc(self) -> dict:
        return {
            "stage": self.stage,
            "status": self.status,
            "log_digest": self.log_digest,
            "log_path": self.log_path,
            "wall_ms": self.wall_ms,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "StageOutcome":
        return cls(
            stage=doc["stage"],
            status=doc["status"],
            log_digest=doc["log_digest"],
            log_path=doc["log_path"],
            wall_ms=doc["wall_ms"],
        )


class TranscriptStore(ContentStore):
    """Content-addressed stage and cell transcripts."""

    def __init__(self, root: Path):
        super().__init__(root, "transcripts")

    def get(self, digest: str) -> bytes:
        try:
            return super().get(digest)
        except KeyError:
            raise ServiceError("NOT_FOUND", f"no transcript with digest {digest}") from None


@dataclass
class Workspace:
    """One run's private directory tree.

    ``root`` holds exactly the source tree at the commit; service-side areas
    (deps, scratch, tmp, home) live beside it under ``base`` so the checkout
    itself stays pristine.
    """

    base: Path
    commit: CommitRef
    phase: str = "CREATED"
    env_capture: list[tuple[str, str]] = field(default_factory=list)

    @property
    def root(self) -> Path:
        return self.base / "src"

    @property
    def deps_dir(self) -> Path:
        return self.base / "deps"

    @property
    def scratch_dir(self) -> Path:
        return self.base / "scratch"

    def _advance(self, phase: str) -> None:
        if _PHASES.index(phase) < _PHASES.index(self.phase):
            raise RuntimeError(f"workspace phase may not regress: {self.phase} -> {phase}")
        self.phase = phase

    def destroy(self) -> None:
        shutil.rmtree(self.base, ignore_errors=True)
        self.phase = "DESTROYED"

    def base_environment(self, network_allowed: bool = False) -> dict[str, str]:
        """The fixed minimal environment every sandboxed command starts from."""
        home = self.base / "home"
        tmp = self.base / "tmp"
        home.mkdir(exist_ok=True)
        tmp.mkdir(exist_ok=True)
        return {
            "PATH": f"{self.root / 'bin'}:{self.deps_dir / 'bin'}:/usr/local/bin:/usr/bin:/bin",
            "HOME": str(home),
            "TMPDIR": str(tmp),
            "LANG": "C.UTF-8",
            "PYTHONDONTWRITEBYTECODE": "1",
            "WORKSPACE": str(self.root),
            "DEPS_DIR": str(self.deps_dir),
        }

    def sandbox_env(self, manifest: Manifest, network_allowed: bool) -> dict[str, str]:
        return project_environment(
            whitelist=manifest.env_whitelist,
            base_env=self.base_environment(network_allowed),
            network_allowed=network_allowed,
        )

    def capture_environment(self, env: dict[str, str]) -> None:
        """Record the exported environment with the run-local base abstracted.

        Replacing the per-run base path with a token keeps the capture a pure
        function of (whitelist, service environment), comparable across runs.
        """
        base_str = str(self.base)
        self.env_capture = sorted(
            (name, value.replace(base_str, "$WS")) for name, value in env.items()
        )


class DependencyCache:
    """Artifact cache keyed by (name, version, acquisition-recipe digest).

    The recipe digest keeps a changed acquisition command from reusing stale
    artifacts, so caching never weakens the de novo property.
    """

    def __init__(self, root: Path):
        self.root = root

    def _entry(self, name: str, version: str, recipe_digest: str) -> Path:
        safe_version = version.replace("/", "_")
        return self.root / name / f"{safe_version}-{recipe_digest[:16]}"

    def fetch(self, name: str, version: str, recipe_digest: str, dest: Path) -> bool:
        entry = self._entry(name, version, recipe_digest)
        if not entry.is_dir():
            return False
        shutil.copytree(entry, dest, dirs_exist_ok=True)
        return True

    def store(self, name: str, version: str, recipe_digest: str, produced: Path) -> None:
        entry = self._entry(name, version, recipe_digest)
        if entry.exists():
            return
        entry.parent.mkdir(parents=True, exist_ok=True)
        tmp = entry.with_name(entry.name + ".partial")
        if tmp.exists():
            shutil.rmtree(tmp)
        shutil.copytree(produced, tmp)
        tmp.replace(entry)

    def invalidate(self, name: str) -> int:
        """Drop every cached artifact for a dependency name; returns count."""
        target = self.root / name
        if not target.is_dir():
            return 0
        count = sum(1 for child in target.iterdir() if child.is_dir())
        shutil.rmtree(target, ignore_errors=True)
        return count


class Pipeline:
    """Executes the fetch / deps / build stages for one workspace at a time."""

    def __init__(
        self,
        workspaces_root: Path,
        transcripts: TranscriptStore,
        dep_cache: DependencyCache | None = None,
    ):
        self.workspaces_root = workspaces_root
        self.transcripts = transcripts
        self.dep_cache = dep_cache

    def _outcome(self, stage: str, status: str, transcript: bytes, wall_ms: int) -> StageOutcome:
        digest, path = self.transcripts.put(transcript)
        return StageOutcome(stage=stage, status=status, log_digest=digest, log_path=path, wall_ms=wall_ms)

    def prepare_workspace(
        self, project: Project, commit: CommitRef
    ) -> tuple[Workspace, StageOutcome]:
        """Create a fresh workspace and check out exactly the tree at the commit.

        On fetch failure the workspace is destroyed and the returned outcome is
        the terminal record of the run.
        """
        base = self.workspaces_root / new_id(f"{project.project_id}-{commit.commit_id[:12]}")
        base.mkdir(parents=True)
        ws = Workspace(base=base, commit=commit)
        header = f"[fetch] source={project.source} commit={commit.commit_id}\n".encode()
        try:
            sources.export_tree(project.source, commit.commit_id, ws.root)
        except sources.SourceError as exc:
            transcript = header + f"[fetch] failed: {exc}\n".encode()
            ws.destroy()
            return ws, self._outcome(STAGE_FETCH, STATUS_FAILED, transcript, 0)
        ws._advance("FETCHED")
        for aux in (ws.deps_dir, ws.scratch_dir):
            aux.mkdir(exist_ok=True)
        return ws, self._outcome(STAGE_FETCH, STATUS_OK, header + b"[fetch] ok\n", 0)

    def resolve_dependencies(self, ws: Workspace, manifest: Manifest) -> StageOutcome:
        """Run each acquisition command in order; network is allowed here only."""
        if ws.phase != "FETCHED":
            raise RuntimeError(f"resolve_dependencies requires FETCHED, workspace is {ws.phase}")
        transcript = bytearray()
        total_ms = 0
        env = ws.sandbox_env(manifest, network_allowed=True)
        for dep in manifest.dependencies:
            recipe_digest = digest_doc(dep.acquisition.to_doc())
            target = ws.deps_dir / dep.name
            target.mkdir(parents=True, exist_ok=True)
            transcript += f"[deps] acquiring {dep.name} {dep.version}\n".encode()
            if self.dep_cache and self.dep_cache.fetch(dep.name, dep.version, recipe_digest, target):
                transcript += f"[deps] cache hit for {dep.name} {dep.version}\n".encode()
                continue
            result = run_step(
                dep.acquisition.argv,
                cwd=target,
                env=env,
                limits=manifest.limits,
                network_allowed=True,
            )
            transcript += result.transcript
            total_ms += result.wall_ms
            if result.timed_out:
                transcript += f"[deps] {dep.name} {dep.version} timed out\n".encode()
                self._fail_fast(ws)
                return self._outcome(STAGE_DEPS, STATUS_TIMEOUT, bytes(transcript), total_ms)
            if result.exit_status != 0:
                transcript += (
                    f"[deps] {dep.name} {dep.version} failed with {result.exit_status}\n".encode()
                )
                self._fail_fast(ws)
                return self._outcome(STAGE_DEPS, STATUS_FAILED, bytes(transcript), total_ms)
            if self.dep_cache:
                self.dep_cache.store(dep.name, dep.version, recipe_digest, target)
        ws._advance("DEPS_RESOLVED")
        transcript += b"[deps] ok\n"
        return self._outcome(STAGE_DEPS, STATUS_OK, bytes(transcript), total_ms)

    def compile(self, ws: Workspace, manifest: Manifest) -> StageOutcome:
        """Run the build steps in order with network denied."""
        if ws.phase != "DEPS_RESOLVED":
            raise RuntimeError(f"compile requires DEPS_RESOLVED, workspace is {ws.phase}")
        env = ws.sandbox_env(manifest, network_allowed=False)
        ws.capture_environment(env)
        transcript = bytearray()
        total_ms = 0
        for i, step in enumerate(manifest.build_steps):
            transcript += f"[build] step {i + 1}/{len(manifest.build_steps)}\n".encode()
            result = run_step(
                step.argv,
                cwd=ws.root,
                env=env,
                limits=manifest.limits,
                network_allowed=False,
            )
            transcript += result.transcript
            total_ms += result.wall_ms
            status = _step_status(result)
            if status != STATUS_OK:
                transcript += f"[build] step {i + 1} ended {status}\n".encode()
                return self._outcome(STAGE_BUILD, status, bytes(transcript), total_ms)
        ws._advance("BUILT")
        transcript += b"[build] ok\n"
        return self._outcome(STAGE_BUILD, STATUS_OK, bytes(transcript), total_ms)

    def run_step(
        self,
        ws: Workspace,
        manifest: Manifest,
        argv: list[str],
        cwd: Path | None = None,
        network_allowed: bool = False,
        wall_seconds: int | None = None,
        limits: ResourceLimits | None = None,
    ) -> StepResult:
        """Execute one command under this workspace's sandbox projection."""
        if ws.phase == "DESTROYED":
            raise RuntimeError("workspace already destroyed")
        return run_step(
            argv,
            cwd=cwd or ws.root,
            env=ws.sandbox_env(manifest, network_allowed),
            limits=limits or manifest.limits,
            network_allowed=network_allowed,
            wall_seconds=wall_seconds,
        )

    @staticmethod
    def _fail_fast(ws: Workspace) -> None:
        log.debug("stage failed for workspace %s; later stages skipped", ws.base.name)


def _step_status(result: StepResult) -> str:
    if result.timed_out:
        return STATUS_TIMEOUT
    if result.exit_status != 0:
        return STATUS_FAILED
    return STATUS_OK
