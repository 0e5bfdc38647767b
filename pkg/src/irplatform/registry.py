"""Immutable, versioned software components and uploads composed into DAG pipelines.

State lives in an append-only JSON-lines log (``registry/components.log``);
``registry/snapshot.json`` caches the replayed state.  Every add, revise or
delete appends exactly one record.
"""

from __future__ import annotations

import datetime as _dt
import json
import os
import re
import shutil
import string
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Mapping, Union

from filelock import FileLock

from .errors import Conflict, InvariantViolation, NotFound, ReferencedNode
from .store import atomic_write, make_readonly, pretty_json, tree_digest

TEMPLATE_VARIABLES = ("inputDataset", "inputRun", "outputDir")
_ID = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")


class NodeKind(str, Enum):
    FULL_RANK = "full_rank"
    RE_RANK = "re_rank"
    GENERIC = "generic"
    UPLOAD = "upload"

    @property
    def produces_run(self) -> bool:
        return self in (NodeKind.FULL_RANK, NodeKind.RE_RANK)


@dataclass(frozen=True, order=True)
class NodeRef:
    node_id: str
    version: int

    def __str__(self) -> str:
        return f"{self.node_id}@{self.version}"

    @classmethod
    def parse(cls, text: str) -> tuple[str, int | None]:
        """Split ``id`` or ``id@version``; version is None when floating."""
        node_id, sep, version = str(text).partition("@")
        if not sep:
            return node_id, None
        try:
            return node_id, int(version)
        except ValueError:
            raise InvariantViolation(f"bad node reference {text!r}", invariant="id@version") from None


@dataclass(frozen=True)
class Component:
    component_id: str
    version: int
    image_ref: str
    command: str
    predecessors: tuple[NodeRef, ...] = ()
    kind: NodeKind = NodeKind.GENERIC

    @property
    def ref(self) -> NodeRef:
        return NodeRef(self.component_id, self.version)

    def to_dict(self) -> dict:
        return {
            "component_id": self.component_id,
            "version": self.version,
            "image_ref": self.image_ref,
            "command": self.command,
            "predecessors": [str(p) for p in self.predecessors],
            "kind": self.kind.value,
        }


@dataclass(frozen=True)
class Upload:
    upload_id: str
    version: int
    payload_digest: str
    files: tuple[str, ...]
    description: str = ""
    predecessors: tuple[NodeRef, ...] = field(default=(), init=False)
    kind: NodeKind = field(default=NodeKind.UPLOAD, init=False)

    @property
    def ref(self) -> NodeRef:
        return NodeRef(self.upload_id, self.version)

    def to_dict(self) -> dict:
        return {
            "upload_id": self.upload_id,
            "version": self.version,
            "payload_digest": self.payload_digest,
            "files": list(self.files),
            "description": self.description,
        }


Node = Union[Component, Upload]


@dataclass(frozen=True)
class Pipeline:
    terminal: NodeRef
    resolved_dag: tuple[Node, ...]

    def node(self, ref: NodeRef) -> Node:
        for n in self.resolved_dag:
            if n.ref == ref:
                return n
        raise NotFound(f"{ref} is not part of this pipeline")

    def to_dict(self) -> dict:
        return {"terminal": str(self.terminal), "nodes": [str(n.ref) for n in self.resolved_dag]}


def template_variables(command: str) -> list[str]:
    """Variable names referenced by a ``$name``/``${name}`` command template."""
    names = []
    for m in string.Template.pattern.finditer(command):
        if m.group("invalid") is not None:
            raise InvariantViolation(f"invalid '$' at offset {m.start('invalid')} in command", invariant="template syntax")
        name = m.group("named") or m.group("braced")
        if name:
            names.append(name)
    return names


def check_template(command: str, n_predecessors: int) -> None:
    names = template_variables(command)
    unknown = sorted(set(names) - set(TEMPLATE_VARIABLES))
    if unknown:
        raise InvariantViolation(f"unknown variable(s) {', '.join('$' + u for u in unknown)}", invariant="known variables")
    if "inputRun" in names and n_predecessors == 0:
        raise InvariantViolation("$inputRun used by a component without predecessors", invariant="$inputRun needs predecessors")


def _node_from_record(rec: Mapping) -> Node:
    if "upload_id" in rec:
        return Upload(rec["upload_id"], rec["version"], rec["payload_digest"], tuple(rec["files"]), rec.get("description", ""))
    preds = []
    for p in rec["predecessors"]:
        node_id, version = NodeRef.parse(p)
        preds.append(NodeRef(node_id, version))
    return Component(rec["component_id"], rec["version"], rec["image_ref"], rec["command"], tuple(preds), NodeKind(rec["kind"]))


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class Registry:
    def __init__(self, root: str | os.PathLike, in_use: Callable[[NodeRef], list[str]] | None = None) -> None:
        self.root = Path(root)
        self.dir = self.root / "registry"
        self.log_path = self.dir / "components.log"
        self.snapshot_path = self.dir / "snapshot.json"
        self.uploads_dir = self.dir / "uploads"
        self.in_use = in_use
        self._nodes: dict[NodeRef, Node] = {}
        self._order: list[NodeRef] = []
        self._deleted: set[NodeRef] = set()
        self._seq = 0
        self._offset = 0
        self._mutex = threading.RLock()

    # ---- log handling

    def _lock(self) -> FileLock:
        (self.root / "locks").mkdir(parents=True, exist_ok=True)
        return FileLock(str(self.root / "locks" / "registry.lock"))

    def _apply(self, rec: Mapping) -> None:
        event = rec["event"]
        if event in ("component", "upload"):
            node = _node_from_record(rec[event])
            self._nodes[node.ref] = node
            self._order.append(node.ref)
        elif event == "delete":
            node_id, version = NodeRef.parse(rec["ref"])
            self._deleted.add(NodeRef(node_id, version))
        else:
            raise InvariantViolation(f"unknown registry event {event!r}")
        self._seq = rec["seq"]

    def _refresh(self) -> None:
        with self._mutex:
            if not self.log_path.exists():
                return
            size = self.log_path.stat().st_size
            if size == self._offset:
                return
            if self._offset == 0 and self.snapshot_path.exists():
                snap = json.loads(self.snapshot_path.read_text())
                if snap.get("log_offset", 0) <= size:
                    for rec in snap["nodes"]:
                        node = _node_from_record(rec)
                        self._nodes[node.ref] = node
                        self._order.append(node.ref)
                    self._deleted = {NodeRef(*NodeRef.parse(r)) for r in snap["deleted"]}
                    self._seq = snap["seq"]
                    self._offset = snap["log_offset"]
            with open(self.log_path, "rb") as fh:
                fh.seek(self._offset)
                chunk = fh.read()
            complete = chunk[: chunk.rfind(b"\n") + 1]
            for line in complete.decode().splitlines():
                if line.strip():
                    self._apply(json.loads(line))
            self._offset += len(complete)

    def _append(self, rec: dict) -> None:
        rec = {"seq": self._seq + 1, "at": _now(), **rec}
        self.dir.mkdir(parents=True, exist_ok=True)
        with open(self.log_path, "ab") as fh:
            fh.write(json.dumps(rec, sort_keys=True).encode() + b"\n")
            fh.flush()
            os.fsync(fh.fileno())
        self._refresh()
        self._write_snapshot()

    def _write_snapshot(self) -> None:
        snap = {
            "seq": self._seq,
            "log_offset": self._offset,
            "nodes": [self._nodes[r].to_dict() for r in self._order],
            "deleted": sorted(str(r) for r in self._deleted),
        }
        atomic_write(self.snapshot_path, pretty_json(snap))

    def events(self) -> list[dict]:
        if not self.log_path.exists():
            return []
        return [json.loads(line) for line in self.log_path.read_text().splitlines() if line.strip()]

    # ---- queries

    def _versions(self, node_id: str) -> list[NodeRef]:
        return sorted(r for r in self._nodes if r.node_id == node_id)

    def resolve_ref(self, ref: str | NodeRef) -> NodeRef:
        """Pin a reference: ``id`` resolves to the latest live version."""
        self._refresh()
        if isinstance(ref, NodeRef):
            node_id, version = ref.node_id, ref.version
        else:
            node_id, version = NodeRef.parse(ref)
        if version is None:
            live = [r for r in self._versions(node_id) if r not in self._deleted]
            if not live:
                raise NotFound(f"node {node_id!r} does not exist", node=node_id)
            return live[-1]
        pinned = NodeRef(node_id, version)
        if pinned not in self._nodes or pinned in self._deleted:
            raise NotFound(f"node {pinned} does not exist", node=str(pinned))
        return pinned

    def get(self, ref: str | NodeRef) -> Node:
        return self._nodes[self.resolve_ref(ref)]

    def list(self, include_deleted: bool = False) -> list[Node]:
        self._refresh()
        return [self._nodes[r] for r in self._order if include_deleted or r not in self._deleted]

    def is_deleted(self, ref: NodeRef) -> bool:
        self._refresh()
        return ref in self._deleted

    def dependents(self, ref: NodeRef) -> list[NodeRef]:
        self._refresh()
        return [
            n.ref for r in self._order if r not in self._deleted
            for n in [self._nodes[r]] if ref in n.predecessors
        ]

    # ---- mutations

    def add_component(
        self,
        component_id: str,
        image_ref: str,
        command: str,
        predecessors: Iterable[str | NodeRef] = (),
        kind: NodeKind | str = NodeKind.GENERIC,
    ) -> Component:
        kind = NodeKind(kind)
        if kind is NodeKind.UPLOAD:
            raise InvariantViolation("use add_upload for uploads")
        if not _ID.match(component_id or ""):
            raise InvariantViolation(f"invalid component id {component_id!r}", invariant="component id")
        if not image_ref:
            raise InvariantViolation("image reference required", invariant="image_ref")
        with self._lock(), self._mutex:
            self._refresh()
            if self._versions(component_id):
                raise Conflict(f"node {component_id!r} already exists; revise it instead", node=component_id)
            preds = []
            for p in predecessors:
                try:
                    preds.append(self.resolve_ref(p))
                except NotFound as exc:
                    raise NotFound(f"missing predecessor {str(p)!r}", predecessor=str(p)) from exc
            if len(set(preds)) != len(preds):
                raise InvariantViolation("duplicate predecessor", invariant="distinct predecessors")
            check_template(command, len(preds))
            comp = Component(component_id, 1, image_ref, command, tuple(preds), kind)
            self._append({"event": "component", "action": "add", "component": comp.to_dict()})
            return comp

    def revise_component(self, component_id: str, command: str | None = None, image_ref: str | None = None) -> Component:
        with self._lock(), self._mutex:
            self._refresh()
            versions = self._versions(component_id)
            if not versions or not isinstance(self._nodes[versions[-1]], Component):
                raise NotFound(f"component {component_id!r} does not exist", node=component_id)
            prev = self._nodes[versions[-1]]
            for p in prev.predecessors:
                if p in self._deleted:
                    raise NotFound(f"predecessor {p} of {component_id!r} was deleted", predecessor=str(p))
            new_command = prev.command if command is None else command
            check_template(new_command, len(prev.predecessors))
            comp = Component(
                component_id,
                versions[-1].version + 1,
                image_ref or prev.image_ref,
                new_command,
                prev.predecessors,
                prev.kind,
            )
            self._append({"event": "component", "action": "revise", "component": comp.to_dict()})
            return comp

    def add_upload(self, upload_id: str, files: Mapping[str, bytes] | Iterable[str | os.PathLike], description: str = "") -> Upload:
        """Store a payload (name → bytes, or a list of file paths) as a new upload version."""
        if not _ID.match(upload_id or ""):
            raise InvariantViolation(f"invalid upload id {upload_id!r}", invariant="upload id")
        if not isinstance(files, Mapping):
            files = {Path(f).name: Path(f).read_bytes() for f in files}
        if not files:
            raise InvariantViolation("upload needs at least one file", invariant="non-empty payload")
        for name in files:
            if "/" in name or name in (".", "..") or not name:
                raise InvariantViolation(f"invalid upload file name {name!r}")
        with self._lock(), self._mutex:
            self._refresh()
            versions = self._versions(upload_id)
            if versions and not isinstance(self._nodes[versions[-1]], Upload):
                raise Conflict(f"{upload_id!r} names a component", node=upload_id)
            version = versions[-1].version + 1 if versions else 1
            target = self.uploads_dir / upload_id / str(version)
            if target.exists():
                shutil.rmtree(target)
            target.mkdir(parents=True)
            for name, data in sorted(files.items()):
                (target / name).write_bytes(data)
            digest = tree_digest(target)
            make_readonly(target)
            upload = Upload(upload_id, version, digest, tuple(sorted(files)), description)
            self._append({"event": "upload", "upload": upload.to_dict()})
            return upload

    def upload_payload(self, upload: Upload) -> Path:
        return self.uploads_dir / upload.upload_id / str(upload.version)

    def delete_node(self, node_id: str, version: int) -> None:
        ref = NodeRef(node_id, int(version))
        with self._lock(), self._mutex:
            self._refresh()
            if ref not in self._nodes or ref in self._deleted:
                raise NotFound(f"node {ref} does not exist", node=str(ref))
            referencing = [str(r) for r in self.dependents(ref)]
            if self.in_use is not None:
                referencing += [u for u in self.in_use(ref) if u not in referencing]
            if referencing:
                raise ReferencedNode(
                    f"{ref} is used as input by {', '.join(referencing)}", node=str(ref), referenced_by=referencing
                )
            self._append({"event": "delete", "ref": str(ref)})

    def import_events(self, events: list[dict], payloads: Path | None = None) -> int:
        """Replay an exported log into this registry; an identical prefix is skipped.

        Returns the number of events applied.
        """
        with self._lock(), self._mutex:
            self._refresh()
            mine = self.events()
            strip = lambda e: {k: v for k, v in e.items() if k != "at"}  # noqa: E731
            if [strip(e) for e in mine] != [strip(e) for e in events[: len(mine)]]:
                raise Conflict("registry history diverges from the archive; import into a fresh store")
            applied = 0
            for rec in events[len(mine):]:
                if rec["event"] == "upload" and payloads is not None:
                    up = rec["upload"]
                    src = payloads / up["upload_id"] / str(up["version"])
                    dst = self.uploads_dir / up["upload_id"] / str(up["version"])
                    if not dst.exists():
                        shutil.copytree(src, dst)
                        make_readonly(dst)
                self.dir.mkdir(parents=True, exist_ok=True)
                with open(self.log_path, "ab") as fh:
                    fh.write(json.dumps(rec, sort_keys=True).encode() + b"\n")
                applied += 1
            self._refresh()
            if applied:
                self._write_snapshot()
            return applied

    # ---- pipelines

    def resolve_pipeline(self, terminal: str | NodeRef) -> Pipeline:
        """Transitive predecessor closure of terminal in topological order.

        Predecessors are visited in definition order, so the order is a pure
        function of registry state.
        """
        term = self.resolve_ref(terminal)
        order: list[Node] = []
        done: set[NodeRef] = set()
        active: list[NodeRef] = []

        def visit(ref: NodeRef) -> None:
            if ref in done:
                return
            if ref in active:
                cycle = " -> ".join(str(r) for r in active[active.index(ref):] + [ref])
                raise InvariantViolation(f"cycle in pipeline: {cycle}", invariant="acyclic")
            if ref in self._deleted or ref not in self._nodes:
                raise NotFound(f"node {ref} does not exist", node=str(ref))
            active.append(ref)
            node = self._nodes[ref]
            for pred in node.predecessors:
                visit(pred)
            active.pop()
            done.add(ref)
            order.append(node)

        with self._mutex:
            visit(term)
        return Pipeline(term, tuple(order))
