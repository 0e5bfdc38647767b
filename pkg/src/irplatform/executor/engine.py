"""Pipeline execution: scheduling, cache lookup, sandboxed runs and sealing."""

from __future__ import annotations

import datetime as _dt
import logging
import os
import shutil
import threading
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .. import formats
from ..errors import DataWithheld, ExecutionError, PlatformError
from ..formats import RunFile
from ..hub import DatasetHub
from ..registry import Component, Node, NodeKind, NodeRef, Pipeline, Registry, Upload
from ..store import remove_tree
from .cache import CacheEntry, CacheKey, CacheStore, component_key, upload_key
from .sandbox import (
    INPUT_DIR,
    INPUT_RUN_DIR,
    OUTPUT_DIR,
    ContainerBackend,
    Mount,
    ResourceLimits,
    SandboxSpec,
    resolve_command,
)

log = logging.getLogger(__name__)

RUN_FILE = "run.txt"


@dataclass(frozen=True)
class ExecutionRequest:
    pipeline: Pipeline
    dataset_id: str
    limits: ResourceLimits = ResourceLimits()
    rerank_depth: int = 100
    lenient: bool = False
    use_cache: bool = True


@dataclass
class NodeStatus:
    node: str
    kind: str
    status: str  # cached | executed | materialized | failed | skipped
    key: str | None = None
    output_digest: str | None = None
    started: float | None = None
    finished: float | None = None
    error: str | None = None
    logs: str | None = None
    violations: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v not in (None, [])}


@dataclass
class ExecutionReport:
    terminal: CacheEntry | None
    nodes: list[NodeStatus]
    launches: int

    @property
    def ok(self) -> bool:
        return self.terminal is not None and all(n.status not in ("failed", "skipped") for n in self.nodes)

    @property
    def failures(self) -> list[NodeStatus]:
        return [n for n in self.nodes if n.status == "failed"]

    def status(self, node: str | NodeRef) -> NodeStatus:
        for n in self.nodes:
            if n.node == str(node) or n.node.split("@")[0] == str(node):
                return n
        raise KeyError(node)

    def raise_for_status(self) -> None:
        if not self.ok:
            failed = self.failures
            msg = "; ".join(f"{n.node}: {n.error}" for n in failed) or "pipeline did not complete"
            raise ExecutionError(msg, nodes=[n.to_dict() for n in self.nodes])

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "launches": self.launches,
            "terminal": None
            if self.terminal is None
            else {"key": self.terminal.key, "output_digest": self.terminal.output_digest, "output_path": str(self.terminal.output_path)},
            "nodes": [n.to_dict() for n in self.nodes],
        }


class NodeFailed(ExecutionError):
    code = "node_failed"


def verify_output(kind: NodeKind | str, output_dir: Path) -> RunFile | Path:
    """Parse the run file of retrieval-kind outputs; other kinds pass through unchanged."""
    kind = NodeKind(kind)
    if not kind.produces_run:
        return output_dir
    run_path = output_dir / RUN_FILE
    if not run_path.is_file():
        present = sorted(p.name for p in output_dir.iterdir()) if output_dir.is_dir() else []
        raise ExecutionError(
            f"{kind.value} component produced no {RUN_FILE} (output contains: {', '.join(present) or 'nothing'})",
            missing=RUN_FILE,
        )
    try:
        return formats.parse_run(run_path)
    except formats.FormatError as exc:
        raise ExecutionError(f"invalid {RUN_FILE}: {exc.message}", line=exc.line) from exc


def _now() -> float:
    return _dt.datetime.now(_dt.timezone.utc).timestamp()


def _iso(ts: float) -> str:
    return _dt.datetime.fromtimestamp(ts, _dt.timezone.utc).isoformat(timespec="milliseconds")


class Executor:
    def __init__(
        self,
        root: str | os.PathLike,
        hub: DatasetHub,
        registry: Registry,
        backend: ContainerBackend,
        parallelism: int = 1,
    ) -> None:
        if parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        self.root = Path(root)
        self.hub = hub
        self.registry = registry
        self.backend = backend
        self.parallelism = parallelism
        self.cache = CacheStore(self.root)
        self.launches = 0
        self._count_lock = threading.Lock()

    # ---- keys

    def cache_key(self, node: Node, dataset_digest: str, predecessors: list[CacheEntry], rerank_depth: int = 100) -> CacheKey:
        if isinstance(node, Upload):
            return upload_key(node.upload_id, node.version, node.payload_digest)
        extra = {"rerank_depth": rerank_depth} if node.kind is NodeKind.RE_RANK else None
        return component_key(
            node.component_id,
            node.version,
            node.kind.value,
            self.backend.image_digest(node.image_ref),
            node.command,
            dataset_digest,
            predecessors,
            extra,
        )

    # ---- per node

    def _materialize_upload(self, node: Upload, key: CacheKey, use_cache: bool) -> tuple[CacheEntry, str]:
        with self.cache.lock(key):
            entry = self.cache.lookup(key) if use_cache else None
            if entry is not None:
                return entry, "cached"
            staging = self.cache.new_staging(key)
            shutil.copytree(self.registry.upload_payload(node), staging / "output", dirs_exist_ok=True)
            prov = {"node": {"ref": str(node.ref), "kind": "upload", "payload_digest": node.payload_digest}, "predecessors": []}
            into = self.cache.lookup(key) is None
            return self.cache.seal(key, staging, prov, into_cache=into), "materialized"

    def _input_dir(self, node: Component, request: ExecutionRequest, preds: list[CacheEntry]) -> Path:
        if node.kind is not NodeKind.RE_RANK:
            return self.hub.full_rank_input(request.dataset_id)
        for entry in preds:
            if (entry.output_path / RUN_FILE).is_file():
                run = formats.parse_run(entry.output_path / RUN_FILE)
                return self.hub.build_rerank_file(request.dataset_id, run, request.rerank_depth, request.lenient)
        raise ExecutionError(f"re-rank component {node.ref} has no predecessor that produced a {RUN_FILE}")

    def _run_component(self, node: Component, request: ExecutionRequest, preds: list[CacheEntry], status: NodeStatus) -> CacheEntry:
        dataset = self.hub.get(request.dataset_id)
        input_dir = self._input_dir(node, request, preds)
        key = self.cache_key(node, dataset.content_digest, preds, request.rerank_depth)
        status.key = str(key)
        with self.cache.lock(key):
            if request.use_cache:
                entry = self.cache.lookup(key)
                if entry is not None:
                    status.status = "cached"
                    return entry
            if len(preds) == 1:
                run_dirs = [INPUT_RUN_DIR]
            else:
                run_dirs = [f"{INPUT_RUN_DIR}/{i}" for i in range(1, len(preds) + 1)]
            command, env = resolve_command(node.command, INPUT_DIR, OUTPUT_DIR, run_dirs if preds else [])
            staging = self.cache.new_staging(key)
            mounts = [Mount(input_dir, INPUT_DIR, True)]
            mounts += [Mount(entry.output_path, target, True) for entry, target in zip(preds, run_dirs)]
            mounts.append(Mount(staging / "output", OUTPUT_DIR, read_only=False))
            spec = SandboxSpec(node.image_ref, command, env, tuple(mounts), request.limits, hidden=(self.root.resolve(),))
            with self._count_lock:
                self.launches += 1
            started = _now()
            result = self.backend.run(spec, staging / "logs")
            finished = _now()
            status.violations = result.violations
            details: dict[str, Any] = {
                "node": str(node.ref),
                "command": command,
                "exit_code": result.exit_code,
                "timed_out": result.timed_out,
                "violations": result.violations,
                "started": _iso(started),
                "finished": _iso(finished),
            }
            try:
                if result.timed_out:
                    raise NodeFailed(f"timed out after {request.limits.timeout:g}s")
                if result.exit_code != 0:
                    tail = result.stderr_path.read_text(errors="replace")[-2000:] if result.stderr_path else ""
                    raise NodeFailed(f"container exited with status {result.exit_code}", stderr=tail)
                verify_output(node.kind, staging / "output")
            except ExecutionError as exc:
                details["error"] = exc.message
                failure = self.cache.record_failure(key, staging, details)
                status.logs = str(failure / "logs")
                raise
            prov = {
                "node": {
                    "ref": str(node.ref),
                    "component_id": node.component_id,
                    "version": node.version,
                    "kind": node.kind.value,
                    "image_ref": node.image_ref,
                    "image_digest": key.constituents["image_digest"],
                    "command": node.command,
                },
                "resolved_command": command,
                "dataset": {"id": request.dataset_id, "content_digest": dataset.content_digest},
                "predecessors": [
                    {"node": e.provenance.get("node", {}).get("ref"), "key": e.key, "output_digest": e.output_digest} for e in preds
                ],
                "backend": self.backend.name,
                "limits": request.limits.to_dict(),
                "started": _iso(started),
                "finished": _iso(finished),
                "exit_code": result.exit_code,
                "resource_usage": {**result.usage, "wall_s": round(result.duration, 3)},
                "violations": result.violations,
            }
            into = self.cache.lookup(key) is None
            entry = self.cache.seal(key, staging, prov, into_cache=into)
            status.status = "executed"
            status.logs = str(entry.root / "logs")
            return entry

    def _run_node(self, node: Node, request: ExecutionRequest, preds: list[CacheEntry]) -> tuple[CacheEntry | None, NodeStatus]:
        status = NodeStatus(str(node.ref), node.kind.value, "failed")
        status.started = _now()
        try:
            if isinstance(node, Upload):
                key = self.cache_key(node, "", preds)
                status.key = str(key)
                entry, status.status = self._materialize_upload(node, key, request.use_cache)
            else:
                entry = self._run_component(node, request, preds, status)
            status.output_digest = entry.output_digest
            return entry, status
        except DataWithheld:
            raise
        except PlatformError as exc:
            status.status = "failed"
            status.error = exc.message
            log.error("node %s failed: %s", node.ref, exc.message)
            return None, status
        finally:
            status.finished = _now()

    # ---- pipeline

    def execute(self, request: ExecutionRequest) -> ExecutionReport:
        dataset = self.hub.get(request.dataset_id)
        if dataset.withheld:
            raise DataWithheld(f"data withheld: {request.dataset_id!r} has no content in this store", dataset=request.dataset_id)
        launches_before = self.launches
        nodes = list(request.pipeline.resolved_dag)
        entries: dict[NodeRef, CacheEntry] = {}
        statuses: dict[NodeRef, NodeStatus] = {}
        blocked: set[NodeRef] = set()
        remaining = list(nodes)

        def ready_nodes() -> list[Node]:
            changed = True
            while changed:
                changed = False
                for n in list(remaining):
                    if any(p in blocked for p in n.predecessors):
                        remaining.remove(n)
                        blocked.add(n.ref)
                        statuses[n.ref] = NodeStatus(str(n.ref), n.kind.value, "skipped", error="predecessor failed")
                        changed = True
            out = [n for n in remaining if all(p in entries for p in n.predecessors)]
            for n in out:
                remaining.remove(n)
            return out

        with ThreadPoolExecutor(max_workers=self.parallelism, thread_name_prefix="irp-node") as pool:
            pending: dict[Future, Node] = {}
            for n in ready_nodes():
                pending[pool.submit(self._run_node, n, request, [entries[p] for p in n.predecessors])] = n
            while pending:
                done, _ = wait(pending, return_when=FIRST_COMPLETED)
                for fut in done:
                    n = pending.pop(fut)
                    entry, status = fut.result()
                    statuses[n.ref] = status
                    if entry is None:
                        blocked.add(n.ref)
                    else:
                        entries[n.ref] = entry
                for n in ready_nodes():
                    pending[pool.submit(self._run_node, n, request, [entries[p] for p in n.predecessors])] = n

        ordered = [statuses[n.ref] for n in nodes if n.ref in statuses]
        terminal = entries.get(request.pipeline.terminal)
        return ExecutionReport(terminal, ordered, self.launches - launches_before)

    def in_use(self, ref: NodeRef) -> list[str]:
        return self.cache.consumers_of(str(ref))

    def discard_staging(self) -> None:
        if self.cache.tmp.exists():
            for p in self.cache.tmp.iterdir():
                remove_tree(p)
