"""Two-stage testing on a built workspace.

Stage one runs the developer's own test command. Stage two runs the
community benchmark matrix: every manifest algorithm against every
applicable benchmark model, each cell judged by its stored assertion.
"""

from __future__ import annotations

import json
import platform
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import TYPE_CHECKING, Iterable

from reprosvc.manifest import Manifest
from reprosvc.pipeline import TranscriptStore, Workspace
from reprosvc.sandbox import SPAWN_ERROR
from reprosvc.util import canonical_json, new_id, sha256_hex

if TYPE_CHECKING:
    from reprosvc.registry import Benchmark

TEST_OK = "OK"
TEST_FAILED = "FAILED"
TEST_TIMEOUT = "TIMEOUT"

CELL_PASS = "PASS"
CELL_FAIL = "FAIL"
CELL_TIMEOUT = "TIMEOUT"
CELL_ERROR = "ERROR"
CELL_STATUSES = (CELL_PASS, CELL_FAIL, CELL_TIMEOUT, CELL_ERROR)

ASSERT_STATUS_ONLY = "STATUS_ONLY"
ASSERT_OUTPUT_DIGEST = "OUTPUT_DIGEST"
ASSERT_KEY_EQUALS = "KEY_EQUALS"

RESULT_FILENAME = "result.json"


@dataclass(frozen=True)
class Assertion:
    """What a benchmark expects from the tool under test.

    Exactly one field group is populated, matching ``kind``:
    an exit status, an output digest, or a list of key expectations.
    """

    kind: str
    expected_exit: int | None = None
    expected_digest: str | None = None
    expectations: tuple[tuple[str, str], ...] | None = None

    def __post_init__(self):
        populated = {
            "expected_exit": self.expected_exit is not None,
            "expected_digest": self.expected_digest is not None,
            "expectations": self.expectations is not None,
        }
        required = {
            ASSERT_STATUS_ONLY: "expected_exit",
            ASSERT_OUTPUT_DIGEST: "expected_digest",
            ASSERT_KEY_EQUALS: "expectations",
        }
        if self.kind not in required:
            raise ValueError(f"unknown assertion kind {self.kind!r}")
        for name, present in populated.items():
            if present != (name == required[self.kind]):
                raise ValueError(f"assertion of kind {self.kind} must carry exactly {required[self.kind]}")
        if self.kind == ASSERT_OUTPUT_DIGEST:
            digest = self.expected_digest
            if not digest or digest != digest.lower() or len(digest) != 64:
                raise ValueError("expected_digest must be 64 lowercase hex characters")
        if self.kind == ASSERT_KEY_EQUALS:
            if not self.expectations:
                raise ValueError("KEY_EQUALS requires at least one expectation")
            for key, value in self.expectations:
                if not isinstance(key, str) or not key:
                    raise ValueError("expectation keys must be non-empty strings")
                if not isinstance(value, str):
                    raise ValueError("expectation values are strings")

    def to_doc(self) -> dict:
        if self.kind == ASSERT_STATUS_ONLY:
            return {"kind": self.kind, "expected_exit": self.expected_exit}
        if self.kind == ASSERT_OUTPUT_DIGEST:
            return {"kind": self.kind, "expected_digest": self.expected_digest}
        return {"kind": self.kind, "expectations": [list(e) for e in self.expectations]}

    @classmethod
    def from_doc(cls, doc: dict) -> "Assertion":
        kind = doc.get("kind")
        if kind == ASSERT_STATUS_ONLY:
            return cls(kind=kind, expected_exit=int(doc["expected_exit"]))
        if kind == ASSERT_OUTPUT_DIGEST:
            return cls(kind=kind, expected_digest=doc["expected_digest"])
        if kind == ASSERT_KEY_EQUALS:
            return cls(
                kind=kind,
                expectations=tuple((str(k), str(v)) for k, v in doc["expectations"]),
            )
        raise ValueError(f"unknown assertion kind {kind!r}")


@dataclass(frozen=True)
class TestOutcome:
    status: str
    log_digest: str
    log_path: str
    wall_ms: int

    @property
    def ok(self) -> bool:
        return self.status == TEST_OK

    def to_doc(self) -> dict:
        return {
            "status": self.status,
            "log_digest": self.log_digest,
            "log_path": self.log_path,
            "wall_ms": self.wall_ms,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "TestOutcome":
        return cls(
            status=doc["status"],
            log_digest=doc["log_digest"],
            log_path=doc["log_path"],
            wall_ms=doc["wall_ms"],
        )


@dataclass(frozen=True)
class CellOutcome:
    benchmark_id: str
    algorithm: str
    status: str
    output_digest: str | None
    wall_ms: int
    attempt_count: int
    log_digest: str = ""
    log_path: str = ""

    def to_doc(self) -> dict:
        return {
            "benchmark_id": self.benchmark_id,
            "algorithm": self.algorithm,
            "status": self.status,
            "output_digest": self.output_digest,
            "wall_ms": self.wall_ms,
            "attempt_count": self.attempt_count,
            "log_digest": self.log_digest,
            "log_path": self.log_path,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "CellOutcome":
        return cls(
            benchmark_id=doc["benchmark_id"],
            algorithm=doc["algorithm"],
            status=doc["status"],
            output_digest=doc.get("output_digest"),
            wall_ms=doc["wall_ms"],
            attempt_count=doc["attempt_count"],
            log_digest=doc.get("log_digest", ""),
            log_path=doc.get("log_path", ""),
        )


def evaluate(assertion: Assertion, exit_status: int | str, output_doc) -> str:
    """Classify one executed cell as PASS, FAIL or ERROR.

    ``output_doc`` is the parsed structured output, or None when the tool
    produced none. Assertions that inspect the output treat its absence as
    ERROR (infrastructure or crash), not FAIL (a judged wrong answer).
    """
    if assertion.kind == ASSERT_STATUS_ONLY:
        return CELL_PASS if exit_status == assertion.expected_exit else CELL_FAIL
    if output_doc is None:
        return CELL_ERROR
    if assertion.kind == ASSERT_OUTPUT_DIGEST:
        digest = sha256_hex(canonical_json(output_doc).encode())
        return CELL_PASS if digest == assertion.expected_digest else CELL_FAIL
    # KEY_EQUALS: flat subset match; non-string output values are compared
    # through their canonical JSON rendering so "4" matches the number 4.
    if not isinstance(output_doc, dict):
        return CELL_FAIL
    for key, expected in assertion.expectations:
        if key not in output_doc:
            return CELL_FAIL
        actual = output_doc[key]
        rendered = actual if isinstance(actual, str) else canonical_json(actual)
        if rendered != expected:
            return CELL_FAIL
    return CELL_PASS


def run_sanity_tests(
    ws: Workspace, manifest: Manifest, transcripts: TranscriptStore
) -> TestOutcome:
    """Run the developer's test command; OK iff it exits 0 within limits."""
    if ws.phase != "BUILT":
        raise RuntimeError(f"sanity tests require a BUILT workspace, got {ws.phase}")
    from reprosvc.sandbox import run_step

    result = run_step(
        manifest.test_command.argv,
        cwd=ws.root,
        env=ws.sandbox_env(manifest, network_allowed=False),
        limits=manifest.limits,
        network_allowed=False,
    )
    if result.timed_out:
        status = TEST_TIMEOUT
    elif result.exit_status == 0:
        status = TEST_OK
    else:
        status = TEST_FAILED
    digest, path = transcripts.put(result.transcript)
    return TestOutcome(status=status, log_digest=digest, log_path=path, wall_ms=result.wall_ms)


def applicable_algorithms(manifest: Manifest, benchmark: "Benchmark") -> list[str]:
    """Algorithms this benchmark runs under: its tags, or all when untagged."""
    if not benchmark.algorithm_tags:
        return list(manifest.algorithms)
    wanted = set(benchmark.algorithm_tags)
    return [a for a in manifest.algorithms if a in wanted]


def run_matrix(
    ws: Workspace,
    manifest: Manifest,
    benchmarks: Iterable["Benchmark"],
    transcripts: TranscriptStore,
    max_attempts: int = 1,
    parallel_width: int = 1,
) -> list[CellOutcome]:
    """Execute every applicable (benchmark, algorithm) cell.

    Cells never influence each other: each gets a private scratch directory
    and any abnormality becomes that cell's status. Results are sorted by
    (benchmark_id, algorithm) so accumulation order is irrelevant.
    """
    if ws.phase != "BUILT":
        raise RuntimeError(f"matrix requires a BUILT workspace, got {ws.phase}")
    plan: list[tuple["Benchmark", str, Path]] = []
    for benchmark in benchmarks:
        model_path = _materialize_model(ws, benchmark)
        for algorithm in applicable_algorithms(manifest, benchmark):
            plan.append((benchmark, algorithm, model_path))

    def execute(item: tuple["Benchmark", str, Path]) -> CellOutcome:
        benchmark, algorithm, model_path = item
        return run_cell(ws, manifest, benchmark, algorithm, model_path, transcripts, max_attempts)

    if parallel_width > 1 and len(plan) > 1:
        with ThreadPoolExecutor(max_workers=parallel_width) as pool:
            outcomes = list(pool.map(execute, plan))
    else:
        outcomes = [execute(item) for item in plan]
    outcomes.sort(key=lambda c: (c.benchmark_id, c.algorithm))
    return outcomes


def run_cell(
    ws: Workspace,
    manifest: Manifest,
    benchmark: "Benchmark",
    algorithm: str,
    model_path: Path | None,
    transcripts: TranscriptStore,
    max_attempts: int = 1,
) -> CellOutcome:
    """One benchmark invocation, retried on ERROR only (never on FAIL)."""
    if model_path is None:
        model_path = _materialize_model(ws, benchmark)
    wall = benchmark.wall_seconds or manifest.limits.wall_seconds
    transcript = bytearray()
    attempts = 0
    status = CELL_ERROR
    output_digest: str | None = None
    wall_ms = 0
    while attempts < max(1, max_attempts):
        attempts += 1
        cell_dir = ws.scratch_dir / new_id(f"cell-{benchmark.benchmark_id}-{algorithm}")
        cell_dir.mkdir(parents=True)
        argv = manifest.benchmark_argv(algorithm, str(model_path))
        step = _run_benchmark_step(ws, manifest, argv, cell_dir, wall)
        transcript += f"[cell] benchmark={benchmark.benchmark_id} algorithm={algorithm} attempt={attempts}\n".encode()
        transcript += step.transcript
        wall_ms += step.wall_ms
        output_doc = _read_result(cell_dir, transcript)
        if step.timed_out:
            status = CELL_TIMEOUT
        elif step.exit_status == SPAWN_ERROR:
            status = CELL_ERROR
        else:
            status = evaluate(benchmark.assertion, step.exit_status, output_doc)
        if output_doc is not None:
            output_digest = sha256_hex(canonical_json(output_doc).encode())
        transcript += f"[cell] status={status}\n".encode()
        if status != CELL_ERROR:
            break
    digest, path = transcripts.put(bytes(transcript))
    return CellOutcome(
        benchmark_id=benchmark.benchmark_id,
        algorithm=algorithm,
        status=status,
        output_digest=output_digest,
        wall_ms=wall_ms,
        attempt_count=attempts,
        log_digest=digest,
        log_path=path,
    )


def _run_benchmark_step(ws: Workspace, manifest: Manifest, argv, cell_dir: Path, wall: int):
    from reprosvc.sandbox import run_step

    limits = manifest.limits
    if wall != limits.wall_seconds:
        limits = replace(limits, wall_seconds=wall, cpu_seconds=max(wall, limits.cpu_seconds))
    return run_step(
        argv,
        cwd=cell_dir,
        env=ws.sandbox_env(manifest, network_allowed=False),
        limits=limits,
        network_allowed=False,
        wall_seconds=wall,
    )


def _read_result(cell_dir: Path, transcript: bytearray):
    result_path = cell_dir / RESULT_FILENAME
    if not result_path.is_file():
        transcript += b"[cell] no result.json produced\n"
        return None
    try:
        return json.loads(result_path.read_text())
    except (ValueError, OSError) as exc:
        transcript += f"[cell] result.json unparseable: {exc}\n".encode()
        return None


def _materialize_model(ws: Workspace, benchmark: "Benchmark") -> Path:
    """Write the model bytes once per run; cells share it read-only."""
    models_dir = ws.scratch_dir / "models"
    models_dir.mkdir(exist_ok=True)
    path = models_dir / f"{benchmark.benchmark_id}.model"
    if not path.exists():
        path.write_bytes(benchmark.model_blob)
    return path


@lru_cache(maxsize=1)
def _cpu_model() -> str:
    try:
        with open("/proc/cpuinfo") as fh:
            for line in fh:
                if line.lower().startswith("model name"):
                    return line.split(":", 1)[1].strip()
    except OSError:
        pass
    return platform.processor() or platform.machine() or "unknown"


def host_fingerprint(workers: int = 1) -> dict:
    """Identity under which advisory timings were taken.

    Durations from different fingerprints are not comparable; consumers must
    check this before charting trends.
    """
    return {
        "os": f"{platform.system()} {platform.release()}",
        "cpu": _cpu_model(),
        "workers": workers,
    }


def timings_comparable(fp_a: dict, fp_b: dict) -> bool:
    return fp_a == fp_b
