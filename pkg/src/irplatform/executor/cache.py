"""Content-addressed output cache: ``cache/<key>/{output/, provenance.json, logs/}``."""

from __future__ import annotations

import json
import os
import shutil
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Mapping, Sequence

from filelock import FileLock

from ..errors import InvariantViolation
from ..store import atomic_write, canonical_json, make_readonly, pretty_json, remove_tree, sha256_bytes, tree_digest


@dataclass(frozen=True)
class CacheKey:
    digest: str
    constituents: Mapping[str, Any] = field(default_factory=dict, compare=False)

    def __str__(self) -> str:
        return self.digest


@dataclass(frozen=True)
class CacheEntry:
    key: str
    output_digest: str
    output_path: Path
    provenance: Mapping[str, Any]
    sealed: bool = True

    @property
    def root(self) -> Path:
        return self.output_path.parent


def make_key(constituents: Mapping[str, Any]) -> CacheKey:
    return CacheKey(sha256_bytes(canonical_json(constituents)), dict(constituents))


def component_key(
    component_id: str,
    version: int,
    kind: str,
    image_digest: str,
    command: str,
    dataset_digest: str,
    predecessors: Sequence[CacheEntry],
    extra: Mapping[str, Any] | None = None,
) -> CacheKey:
    for entry in predecessors:
        if not entry.sealed:
            raise InvariantViolation(f"predecessor output {entry.key} is not sealed", invariant="sealed predecessors")
    constituents = {
        "type": "component",
        "component_id": component_id,
        "version": version,
        "kind": kind,
        "image_digest": image_digest,
        "command": command,
        "dataset_digest": dataset_digest,
        "predecessor_outputs": [e.output_digest for e in predecessors],
    }
    if extra:
        constituents["extra"] = dict(extra)
    return make_key(constituents)


def upload_key(upload_id: str, version: int, payload_digest: str) -> CacheKey:
    return make_key({"type": "upload", "upload_id": upload_id, "version": version, "payload_digest": payload_digest})


class CacheStore:
    def __init__(self, root: str | os.PathLike) -> None:
        self.root = Path(root)
        self.dir = self.root / "cache"
        self.tmp = self.root / "tmp"
        self.replays = self.root / "replays"
        self.failures = self.root / "failures"

    def lock(self, key: CacheKey | str) -> FileLock:
        (self.root / "locks").mkdir(parents=True, exist_ok=True)
        return FileLock(str(self.root / "locks" / f"cache-{key}.lock"))

    def _load(self, path: Path) -> CacheEntry | None:
        prov_path = path / "provenance.json"
        if not prov_path.is_file():
            return None
        prov = json.loads(prov_path.read_text())
        return CacheEntry(prov["key"], prov["output_digest"], path / "output", prov)

    def lookup(self, key: CacheKey | str) -> CacheEntry | None:
        return self._load(self.dir / str(key))

    def entries(self) -> Iterator[CacheEntry]:
        if not self.dir.is_dir():
            return
        for path in sorted(self.dir.iterdir()):
            entry = self._load(path)
            if entry is not None:
                yield entry

    def new_staging(self, key: CacheKey | str) -> Path:
        staging = self.tmp / f"{key}-{uuid.uuid4().hex[:12]}"
        (staging / "output").mkdir(parents=True)
        (staging / "logs").mkdir()
        return staging

    def seal(self, key: CacheKey, staging: Path, provenance: Mapping[str, Any], into_cache: bool = True) -> CacheEntry:
        """Hash staging/output, record provenance and freeze the tree.

        With into_cache False the result is kept under ``replays/`` and any
        existing cache entry stays untouched (cache entries are write-once).
        """
        output_digest = tree_digest(staging / "output")
        prov = {**provenance, "key": str(key), "constituents": dict(key.constituents), "output_digest": output_digest}
        atomic_write(staging / "provenance.json", pretty_json(prov))
        make_readonly(staging)
        if into_cache:
            target = self.dir / str(key)
            if target.exists():
                raise InvariantViolation(f"cache entry {key} already sealed", invariant="write-once cache")
        else:
            target = self.replays / f"{key}-{staging.name.rsplit('-', 1)[-1]}"
        target.parent.mkdir(parents=True, exist_ok=True)
        staging.chmod(0o755)
        os.rename(staging, target)
        target.chmod(0o555)
        return CacheEntry(str(key), output_digest, target / "output", prov)

    def record_failure(self, key: CacheKey | str, staging: Path, details: Mapping[str, Any]) -> Path:
        target = self.failures / f"{key}-{staging.name.rsplit('-', 1)[-1]}"
        target.mkdir(parents=True, exist_ok=True)
        if (staging / "logs").is_dir():
            shutil.copytree(staging / "logs", target / "logs", dirs_exist_ok=True)
        atomic_write(target / "failure.json", pretty_json(dict(details)))
        remove_tree(staging)
        return target

    def consumers_of(self, node_ref: str) -> list[str]:
        """Cache keys whose computation used an output of node_ref as input."""
        users = []
        for entry in self.entries():
            for pred in entry.provenance.get("predecessors", []):
                if pred.get("node") == node_ref:
                    users.append(f"cache:{entry.key[:16]} ({entry.provenance.get('node', {}).get('ref', '?')})")
                    break
        return users

    def verify(self, entry: CacheEntry) -> bool:
        return tree_digest(entry.output_path) == entry.output_digest


def json_digest(obj: Any) -> str:
    return sha256_bytes(canonical_json(obj))
