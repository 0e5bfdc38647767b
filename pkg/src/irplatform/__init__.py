"""Reproducible shared-task style information retrieval experiments.

Datasets, immutable containerized components, cached sandboxed pipeline
execution, run evaluation, leaderboards, reproducibility analysis and
self-contained archives, all rooted in one store directory.
"""

from .archive import export_archive, fetch_run, import_archive, replay, verify_archive
from .core import Config, Platform, RunRecord, init_store
from .errors import (
    AccessDenied,
    Conflict,
    DataWithheld,
    EvaluationRefused,
    ExecutionError,
    FormatError,
    ImageNotFound,
    IntegrityMismatch,
    InvariantViolation,
    NotFound,
    PlatformError,
    ReferencedNode,
)
from .hub import DatasetHub, DefaultTextRule, Resource, Role
from .registry import NodeKind, Registry

__version__ = "0.1.0"

__all__ = [
    "AccessDenied",
    "Config",
    "Conflict",
    "DataWithheld",
    "DatasetHub",
    "DefaultTextRule",
    "EvaluationRefused",
    "ExecutionError",
    "FormatError",
    "ImageNotFound",
    "IntegrityMismatch",
    "InvariantViolation",
    "NodeKind",
    "NotFound",
    "Platform",
    "PlatformError",
    "ReferencedNode",
    "Registry",
    "Resource",
    "Role",
    "RunRecord",
    "export_archive",
    "fetch_run",
    "import_archive",
    "init_store",
    "replay",
    "verify_archive",
]
