"""Sandboxed, cached execution of resolved pipelines."""

from .cache import CacheEntry, CacheKey, CacheStore, component_key, upload_key
from .engine import ExecutionReport, ExecutionRequest, Executor, NodeStatus, verify_output
from .sandbox import (
    ContainerBackend,
    MockBackend,
    Mount,
    OciBackend,
    ResourceLimits,
    RunResult,
    SandboxSpec,
    make_backend,
    namespaces_available,
    resolve_command,
)

__all__ = [
    "CacheEntry",
    "CacheKey",
    "CacheStore",
    "ContainerBackend",
    "ExecutionReport",
    "ExecutionRequest",
    "Executor",
    "MockBackend",
    "Mount",
    "NodeStatus",
    "OciBackend",
    "ResourceLimits",
    "RunResult",
    "SandboxSpec",
    "component_key",
    "make_backend",
    "namespaces_available",
    "resolve_command",
    "upload_key",
    "verify_output",
]
