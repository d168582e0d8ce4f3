"""Small shared helpers: digests, canonical JSON, timestamps, identifiers."""

from __future__ import annotations

import hashlib
import json
import re
import uuid
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

COMMIT_ID_RE = re.compile(r"^[0-9a-f]{1,64}$")


def sha256_hex(data: bytes) -> str:
    """Lowercase hex digest of a 256-bit cryptographic hash of ``data``."""
    return hashlib.sha256(data).hexdigest()


def canonical_json(doc: Any) -> str:
    """Serialize with sorted keys and no insignificant whitespace.

    Used wherever a digest of a structured document is taken, so that
    formatting-only changes do not look like behavioral changes.
    """
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def digest_doc(doc: Any) -> str:
    return sha256_hex(canonical_json(doc).encode("utf-8"))


def utcnow() -> datetime:
    """Current UTC time at second precision."""
    return datetime.now(timezone.utc).replace(microsecond=0)


def to_rfc3339(ts: datetime) -> str:
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")


def from_rfc3339(text: str) -> datetime:
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    parsed = datetime.fromisoformat(text)
    if parsed.tzinfo is None:
        parsed = parsed.replace(tzinfo=timezone.utc)
    return parsed.astimezone(timezone.utc)


def new_id(prefix: str) -> str:
    return f"{prefix}-{uuid.uuid4().hex[:12]}"


def normalize_commit_id(raw: str) -> str:
    """Lowercase and validate a content-hash style commit identifier.

    Raises ValueError when the id is not 1-64 characters of [0-9a-f].
    """
    commit = raw.strip().lower()
    if not COMMIT_ID_RE.fullmatch(commit):
        raise ValueError(f"malformed commit id {raw!r} (want 1-64 hex chars)")
    return commit


def tree_digest(root: Path) -> str:
    """Content hash of a directory tree: relative paths plus file bytes.

    Gives one-shot evaluations a commit-id-like identifier for an unversioned
    source snapshot.
    """
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        rel = path.relative_to(root).as_posix()
        h.update(rel.encode("utf-8"))
        h.update(b"\x00")
        h.update(path.read_bytes())
        h.update(b"\x00")
    return h.hexdigest()


def atomic_write_text(path: Path, text: str) -> None:
    """Write via a temp file + rename so readers never see a partial file."""
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


class ContentStore:
    """Digest-keyed byte storage under ``root/<category>/<d[:2]>/<digest>``.

    Identical content is stored once; writes go through a temp file so a
    stored digest always names complete bytes.
    """

    def __init__(self, root: Path, category: str):
        self.root = root
        self.category = category

    def _rel(self, digest: str) -> str:
        return f"{self.category}/{digest[:2]}/{digest}"

    def put(self, data: bytes) -> tuple[str, str]:
        """Store bytes; returns (digest, path relative to the store root)."""
        digest = sha256_hex(data)
        rel = self._rel(digest)
        target = self.root / rel
        if not target.exists():
            target.parent.mkdir(parents=True, exist_ok=True)
            tmp = target.with_name(target.name + ".tmp")
            tmp.write_bytes(data)
            tmp.replace(target)
        return digest, rel

    def get(self, digest: str) -> bytes:
        target = self.root / self._rel(digest)
        if not target.is_file():
            raise KeyError(digest)
        return target.read_bytes()

    def has(self, digest: str) -> bool:
        return (self.root / self._rel(digest)).is_file()
