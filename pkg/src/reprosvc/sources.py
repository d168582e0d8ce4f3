"""Read-only access to project sources: resolving heads and exporting trees.

A project source is a git repository, either a local path or a URL git can
clone. Exports go through ``git archive`` so a workspace receives exactly the
committed tree: no .git directory, no untracked files, no residue.
"""

from __future__ import annotations

import subprocess
import tempfile
from pathlib import Path

from reprosvc.util import normalize_commit_id


class SourceError(Exception):
    """Source unreachable or revision unknown."""


def _git(args: list[str], cwd: Path | None = None, timeout: int = 60) -> subprocess.CompletedProcess:
    try:
        return subprocess.run(
            ["git", *args],
            cwd=str(cwd) if cwd else None,
            capture_output=True,
            timeout=timeout,
        )
    except (OSError, subprocess.TimeoutExpired) as exc:
        raise SourceError(f"git {' '.join(args)} failed: {exc}") from exc


def _is_local(source: str) -> bool:
    return "://" not in source and not source.startswith("git@")


def head_commit(source: str) -> str:
    """The commit id of the source's current HEAD."""
    if _is_local(source):
        repo = Path(source)
        if not repo.exists():
            raise SourceError(f"source path {source} does not exist")
        result = _git(["rev-parse", "HEAD"], cwd=repo)
    else:
        result = _git(["ls-remote", source, "HEAD"])
    if result.returncode != 0:
        raise SourceError(f"cannot resolve HEAD of {source}: {result.stderr.decode(errors='replace').strip()}")
    first = result.stdout.decode().split()
    if not first:
        raise SourceError(f"source {source} has no HEAD commit")
    return normalize_commit_id(first[0])


def commit_exists(source: str, commit_id: str) -> bool:
    if _is_local(source):
        repo = Path(source)
        if not repo.exists():
            raise SourceError(f"source path {source} does not exist")
        result = _git(["cat-file", "-e", f"{commit_id}^{{commit}}"], cwd=repo)
        return result.returncode == 0
    with tempfile.TemporaryDirectory(prefix="reprosvc-probe-") as tmp:
        clone = _git(["clone", "--bare", "--quiet", source, tmp], timeout=300)
        if clone.returncode != 0:
            raise SourceError(f"cannot reach {source}")
        return _git(["cat-file", "-e", f"{commit_id}^{{commit}}"], cwd=Path(tmp)).returncode == 0


def export_tree(source: str, commit_id: str, dest: Path) -> None:
    """Materialize exactly the tree at ``commit_id`` into ``dest``."""
    dest.mkdir(parents=True, exist_ok=True)
    if _is_local(source):
        repo = Path(source)
        if not repo.exists():
            raise SourceError(f"source path {source} does not exist")
        _archive_into(repo, commit_id, dest)
        return
    with tempfile.TemporaryDirectory(prefix="reprosvc-fetch-") as tmp:
        clone = _git(["clone", "--bare", "--quiet", source, tmp], timeout=300)
        if clone.returncode != 0:
            raise SourceError(
                f"cannot clone {source}: {clone.stderr.decode(errors='replace').strip()}"
            )
        _archive_into(Path(tmp), commit_id, dest)


def _archive_into(repo: Path, commit_id: str, dest: Path) -> None:
    archive = subprocess.run(
        ["git", "archive", "--format=tar", commit_id],
        cwd=str(repo),
        capture_output=True,
        timeout=300,
    )
    if archive.returncode != 0:
        raise SourceError(
            f"unknown revision {commit_id}: {archive.stderr.decode(errors='replace').strip()}"
        )
    untar = subprocess.run(["tar", "-x", "-C", str(dest)], input=archive.stdout, capture_output=True)
    if untar.returncode != 0:
        raise SourceError(f"tree extraction failed: {untar.stderr.decode(errors='replace').strip()}")


def read_file(source: str, commit_id: str, relpath: str) -> bytes:
    """Read one file from the tree at a commit without a full export."""
    if _is_local(source):
        repo = Path(source)
        if not repo.exists():
            raise SourceError(f"source path {source} does not exist")
        result = _git(["show", f"{commit_id}:{relpath}"], cwd=repo)
        if result.returncode != 0:
            raise SourceError(f"no file {relpath} at {commit_id}")
        return result.stdout
    with tempfile.TemporaryDirectory(prefix="reprosvc-read-") as tmp:
        clone = _git(["clone", "--bare", "--quiet", source, tmp], timeout=300)
        if clone.returncode != 0:
            raise SourceError(f"cannot reach {source}")
        result = _git(["show", f"{commit_id}:{relpath}"], cwd=Path(tmp))
        if result.returncode != 0:
            raise SourceError(f"no file {relpath} at {commit_id}")
        return result.stdout
