"""The declarative build recipe: parsing and validation of repro.manifest.json.

A manifest is the only channel through which a project tells the service how
to acquire dependencies, compile, test and benchmark itself. Commands are
plain argv vectors, never shell strings: shell word splitting is a
reproducibility hazard.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from reprosvc.util import sha256_hex

MANIFEST_FILENAME = "repro.manifest.json"

_TOP_LEVEL_KEYS = {
    "schema_version",
    "dependencies",
    "build_steps",
    "test_command",
    "benchmark_command",
    "algorithms",
    "env_whitelist",
    "limits",
}
_ENV_NAME_RE = re.compile(r"^[A-Z_][A-Z0-9_]*$")

ALGORITHM_PLACEHOLDER = "{algorithm}"
MODEL_PATH_PLACEHOLDER = "{model_path}"

DEFAULT_WALL_SECONDS = 300
DEFAULT_MEMORY_BYTES = 2 * 1024**3
DEFAULT_MAX_PROCESSES = 64


class ManifestError(ValueError):
    """Raised when a manifest document is malformed or violates an invariant."""


@dataclass(frozen=True)
class CommandSpec:
    """One command to execute: argv only, no shell interpretation."""

    argv: tuple[str, ...]

    def __post_init__(self):
        if not self.argv:
            raise ManifestError("command argv must not be empty")
        for item in self.argv:
            if not isinstance(item, str):
                raise ManifestError(f"argv elements must be strings, got {item!r}")

    def to_doc(self) -> dict:
        return {"argv": list(self.argv)}


@dataclass(frozen=True)
class DependencyDecl:
    """A pinned external input plus the command that materializes it.

    The acquisition command runs inside the dependency's target directory in
    the workspace deps area; it is the only phase where network access is
    permitted.
    """

    name: str
    version: str
    acquisition: CommandSpec

    def to_doc(self) -> dict:
        return {
            "name": self.name,
            "version": self.version,
            "acquisition": self.acquisition.to_doc(),
        }


@dataclass(frozen=True)
class ResourceLimits:
    wall_seconds: int = DEFAULT_WALL_SECONDS
    cpu_seconds: int = DEFAULT_WALL_SECONDS
    memory_bytes: int = DEFAULT_MEMORY_BYTES
    max_processes: int = DEFAULT_MAX_PROCESSES
    network: str = "DEPS_ONLY"

    def __post_init__(self):
        for name in ("wall_seconds", "cpu_seconds", "memory_bytes", "max_processes"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ManifestError(f"limits.{name} must be a positive integer, got {value!r}")
        if self.network != "DEPS_ONLY":
            raise ManifestError(f"limits.network must be DEPS_ONLY, got {self.network!r}")

    def to_doc(self) -> dict:
        return {
            "wall_seconds": self.wall_seconds,
            "cpu_seconds": self.cpu_seconds,
            "memory_bytes": self.memory_bytes,
            "max_processes": self.max_processes,
            "network": self.network,
        }


@dataclass(frozen=True)
class Manifest:
    schema_version: int
    dependencies: tuple[DependencyDecl, ...]
    build_steps: tuple[CommandSpec, ...]
    test_command: CommandSpec
    benchmark_command: CommandSpec
    algorithms: tuple[str, ...]
    env_whitelist: tuple[str, ...]
    limits: ResourceLimits
    digest: str = field(default="", compare=False)

    def declares_dependency(self, name: str) -> bool:
        return any(dep.name == name for dep in self.dependencies)

    def benchmark_argv(self, algorithm: str, model_path: str) -> list[str]:
        """Substitute the two placeholders into the benchmark template."""
        return [
            item.replace(ALGORITHM_PLACEHOLDER, algorithm).replace(
                MODEL_PATH_PLACEHOLDER, model_path
            )
            for item in self.benchmark_command.argv
        ]

    def to_doc(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "dependencies": [dep.to_doc() for dep in self.dependencies],
            "build_steps": [step.to_doc() for step in self.build_steps],
            "test_command": self.test_command.to_doc(),
            "benchmark_command": self.benchmark_command.to_doc(),
            "algorithms": list(self.algorithms),
            "env_whitelist": list(self.env_whitelist),
            "limits": self.limits.to_doc(),
        }


def _parse_command(doc, where: str) -> CommandSpec:
    if not isinstance(doc, dict) or set(doc) != {"argv"}:
        raise ManifestError(f"{where} must be an object with exactly the key 'argv'")
    argv = doc["argv"]
    if not isinstance(argv, list) or not argv:
        raise ManifestError(f"{where}.argv must be a non-empty list of strings")
    for item in argv:
        if not isinstance(item, str):
            raise ManifestError(f"{where}.argv elements must be strings, got {item!r}")
    return CommandSpec(argv=tuple(argv))


def _parse_limits(doc) -> ResourceLimits:
    if not isinstance(doc, dict):
        raise ManifestError("limits must be an object")
    known = {"wall_seconds", "cpu_seconds", "memory_bytes", "max_processes", "network"}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ManifestError(f"limits has unknown keys: {unknown}")
    wall = doc.get("wall_seconds", DEFAULT_WALL_SECONDS)
    return ResourceLimits(
        wall_seconds=wall,
        cpu_seconds=doc.get("cpu_seconds", wall),
        memory_bytes=doc.get("memory_bytes", DEFAULT_MEMORY_BYTES),
        max_processes=doc.get("max_processes", DEFAULT_MAX_PROCESSES),
        network=doc.get("network", "DEPS_ONLY"),
    )


def parse_manifest(raw: bytes) -> Manifest:
    """Parse and validate a manifest document from raw file bytes."""
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"manifest is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ManifestError("manifest root must be a JSON object")

    missing = sorted(_TOP_LEVEL_KEYS - set(doc))
    if missing:
        raise ManifestError(f"manifest missing required keys: {missing}")
    unknown = sorted(set(doc) - _TOP_LEVEL_KEYS)
    if unknown:
        raise ManifestError(f"manifest has unknown top-level keys: {unknown}")

    schema_version = doc["schema_version"]
    if not isinstance(schema_version, int) or isinstance(schema_version, bool) or schema_version < 1:
        raise ManifestError(f"schema_version must be an integer >= 1, got {schema_version!r}")

    deps_doc = doc["dependencies"]
    if not isinstance(deps_doc, list):
        raise ManifestError("dependencies must be a list")
    deps: list[DependencyDecl] = []
    seen_deps: set[tuple[str, str]] = set()
    for i, dep in enumerate(deps_doc):
        where = f"dependencies[{i}]"
        if not isinstance(dep, dict) or set(dep) != {"name", "version", "acquisition"}:
            raise ManifestError(f"{where} must have exactly keys name, version, acquisition")
        name, version = dep["name"], dep["version"]
        if not isinstance(name, str) or not name:
            raise ManifestError(f"{where}.name must be a non-empty string")
        if not isinstance(version, str) or not version:
            raise ManifestError(f"{where}.version must be a non-empty string (exact version)")
        if (name, version) in seen_deps:
            raise ManifestError(f"duplicate dependency ({name}, {version})")
        seen_deps.add((name, version))
        deps.append(
            DependencyDecl(
                name=name,
                version=version,
                acquisition=_parse_command(dep["acquisition"], f"{where}.acquisition"),
            )
        )

    steps_doc = doc["build_steps"]
    if not isinstance(steps_doc, list):
        raise ManifestError("build_steps must be a list")
    build_steps = tuple(
        _parse_command(step, f"build_steps[{i}]") for i, step in enumerate(steps_doc)
    )

    test_command = _parse_command(doc["test_command"], "test_command")
    benchmark_command = _parse_command(doc["benchmark_command"], "benchmark_command")
    joined = "\x00".join(benchmark_command.argv)
    for placeholder in (ALGORITHM_PLACEHOLDER, MODEL_PATH_PLACEHOLDER):
        count = joined.count(placeholder)
        if count != 1:
            raise ManifestError(
                f"benchmark_command must contain {placeholder} exactly once, found {count}"
            )

    algorithms_doc = doc["algorithms"]
    if not isinstance(algorithms_doc, list) or not algorithms_doc:
        raise ManifestError("algorithms must be a non-empty list")
    algorithms: list[str] = []
    for tag in algorithms_doc:
        if not isinstance(tag, str) or not tag:
            raise ManifestError(f"algorithm tags must be non-empty strings, got {tag!r}")
        if tag in algorithms:
            raise ManifestError(f"duplicate algorithm tag {tag!r}")
        algorithms.append(tag)

    env_doc = doc["env_whitelist"]
    if not isinstance(env_doc, list):
        raise ManifestError("env_whitelist must be a list")
    for name in env_doc:
        if not isinstance(name, str) or not _ENV_NAME_RE.fullmatch(name):
            raise ManifestError(f"env_whitelist entry {name!r} must match [A-Z_][A-Z0-9_]*")

    return Manifest(
        schema_version=schema_version,
        dependencies=tuple(deps),
        build_steps=build_steps,
        test_command=test_command,
        benchmark_command=benchmark_command,
        algorithms=tuple(algorithms),
        env_whitelist=tuple(env_doc),
        limits=_parse_limits(doc["limits"]),
        digest=sha256_hex(raw),
    )


def load_manifest(path: Path) -> Manifest:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest at {path}: {exc}") from exc
    return parse_manifest(raw)
