"""Self-contained experiment archives: export, import, replay and run retrieval.

Layout::

    manifest.json
    datasets/<id>/{meta.json, documents.jsonl.gz, topics.jsonl.gz, qrels.txt}
    registry/components.log, registry/uploads/<id>/<version>/...
    runs/<approach>/<dataset>/{run.txt, evaluation.json, sanity.json, provenance.json}
    images/<name>/...            (only with embed_images)

Withheld files are replaced by ``<name>.withheld`` stubs holding the digest.
"""

from __future__ import annotations

import datetime as _dt
import json
import logging
import os
import shutil
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from . import evaluator, formats
from .core import Platform
from .errors import AccessDenied, Conflict, DataWithheld, ImageNotFound, IntegrityMismatch, InvariantViolation, NotFound, PlatformError
from .executor import CacheEntry, ExecutionReport, ExecutionRequest, MockBackend, OciBackend, ResourceLimits
from .executor.sandbox import image_dirname
from .hub import DOCUMENTS, META, QRELS, TOPICS, Role
from .registry import Component
from .store import atomic_write, canonical_json, iter_files, pretty_json, sha256_bytes, sha256_file

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
WITHHELD = ".withheld"
IMPORTS = "imports.json"


@dataclass(frozen=True)
class ArchiveManifest:
    data: dict

    @property
    def task_id(self) -> str:
        return self.data["task_id"]

    @property
    def runs(self) -> list[dict]:
        return self.data["runs"]

    @property
    def datasets(self) -> list[dict]:
        return self.data["datasets"]

    def without_timestamp(self) -> dict:
        return {k: v for k, v in self.data.items() if k != "created_at"}

    @classmethod
    def load(cls, archive: str | os.PathLike) -> "ArchiveManifest":
        path = Path(archive) / MANIFEST
        if not path.is_file():
            raise NotFound(f"{archive} is not an archive (no {MANIFEST})")
        data = json.loads(path.read_text())
        if data.get("format_version") != FORMAT_VERSION:
            raise InvariantViolation(f"unsupported archive format {data.get('format_version')!r}")
        return cls(data)


def _stub_path(path: Path) -> Path:
    return path.with_name(path.name + WITHHELD)


def _stub(dst: Path, digest: str) -> None:
    atomic_write(_stub_path(dst), pretty_json({"withheld": True, "sha256": digest}))


def _imports(platform: Platform) -> list[str]:
    path = platform.root / IMPORTS
    return json.loads(path.read_text()) if path.is_file() else []


def export_archive(
    platform: Platform,
    task_id: str,
    destination: str | os.PathLike,
    datasets: Sequence[str] | None = None,
    include_test_data: bool = False,
    role: Role | str = Role.ORGANIZER,
    withhold_confidential_runs: bool = False,
    embed_images: bool = False,
    created_at: str | None = None,
) -> ArchiveManifest:
    """Write a self-contained archive of every run on the task's datasets.

    By default the content of confidential datasets is withheld (digest stubs
    only) while runs, evaluations, component definitions and image references
    are always included.
    """
    role = Role(role)
    if include_test_data and role is not Role.ORGANIZER:
        raise AccessDenied("only organizers may export test data", role=role.value, resource="test data")
    dest = Path(destination)
    if dest.exists() and any(dest.iterdir()):
        raise Conflict(f"destination {dest} is not empty")
    dataset_ids = sorted(datasets) if datasets is not None else sorted(ds.dataset_id for ds in platform.hub.list())
    records = [r for r in platform.run_records() if r.dataset_id in dataset_ids]
    if not records:
        raise NotFound(f"task {task_id!r} has no runs to export", task=task_id)

    imported = set(_imports(platform))
    missing = []
    for rec in records:
        rel = f"{rec.approach}/{rec.dataset_id}"
        if rel in imported and _stub_path(rec.run_path).is_file():
            continue
        if not rec.run_path.is_file() or sha256_file(rec.run_path) != rec.provenance.get("run_sha256"):
            missing.append(f"{rel}: run file missing or modified")
        elif rel not in imported:
            entry = platform.executor.cache.lookup(rec.provenance["cache_key"])
            if entry is None or entry.output_digest != rec.provenance["output_digest"]:
                missing.append(f"{rel}: cache entry {rec.provenance['cache_key']}")
    if missing:
        raise NotFound("export aborted; unresolvable cache entries: " + "; ".join(missing), missing=missing)

    dest.mkdir(parents=True, exist_ok=True)
    ds_rows = []
    for ds_id in dataset_ids:
        ds = platform.hub.get(ds_id)
        include = (not ds.confidential or include_test_data) and not ds.withheld
        target = dest / "datasets" / ds_id
        target.mkdir(parents=True)
        meta = {k: v for k, v in ds.meta().items() if k != "withheld"}
        atomic_write(target / META, pretty_json(meta))
        for key, name in (("documents", DOCUMENTS), ("topics", TOPICS), ("qrels", QRELS)):
            digest = ds.digests.get(key)
            if not digest:
                continue
            if include and (ds.root / name).is_file():
                shutil.copyfile(ds.root / name, target / name)
            else:
                _stub(target / name, digest)
        ds_rows.append(
            {
                "id": ds_id,
                "corpus": ds.corpus,
                "confidential": ds.confidential,
                "digests": dict(ds.digests),
                "content_included": include,
            }
        )

    reg = dest / "registry"
    reg.mkdir()
    if platform.registry.log_path.is_file():
        shutil.copyfile(platform.registry.log_path, reg / "components.log")
    else:
        (reg / "components.log").write_bytes(b"")
    if platform.registry.uploads_dir.is_dir():
        shutil.copytree(platform.registry.uploads_dir, reg / "uploads")
        for dirpath, dirnames, filenames in os.walk(reg / "uploads"):
            os.chmod(dirpath, 0o755)
            for f in filenames:
                os.chmod(os.path.join(dirpath, f), 0o644)

    images: dict[str, dict] = {}
    for node in platform.registry.list(include_deleted=True):
        if isinstance(node, Component) and node.image_ref not in images:
            try:
                digest = platform.backend.image_digest(node.image_ref)
            except ImageNotFound:
                digest = None
            images[node.image_ref] = {"ref": node.image_ref, "digest": digest, "embedded": False}
    if embed_images:
        for ref, row in images.items():
            row["embedded"] = _embed_image(platform, ref, dest / "images")

    run_rows = []
    for rec in sorted(records, key=lambda r: (r.approach, r.dataset_id)):
        target = dest / "runs" / rec.approach / rec.dataset_id
        target.mkdir(parents=True)
        ds = platform.hub.get(rec.dataset_id)
        withhold = ds.confidential and withhold_confidential_runs and not include_test_data
        withhold = withhold or not rec.run_path.is_file()
        if withhold:
            _stub(target / "run.txt", rec.provenance["run_sha256"])
        else:
            shutil.copyfile(rec.run_path, target / "run.txt")
        for name in ("evaluation.json", "sanity.json", "provenance.json"):
            if (rec.path / name).is_file():
                shutil.copyfile(rec.path / name, target / name)
        ev = rec.path / "evaluation.json"
        run_rows.append(
            {
                "approach": rec.approach,
                "dataset": rec.dataset_id,
                "terminal": rec.provenance["terminal"],
                "cache_key": rec.provenance["cache_key"],
                "output_digest": rec.provenance["output_digest"],
                "evaluation_digest": sha256_file(ev) if ev.is_file() else None,
                "run_included": not withhold,
            }
        )

    files = {rel: sha256_file(p) for rel, p in iter_files(dest) if rel != MANIFEST}
    body = {
        "format_version": FORMAT_VERSION,
        "task_id": task_id,
        "datasets": ds_rows,
        "components": [n.to_dict() for n in platform.registry.list(include_deleted=True)],
        "deleted": sorted(str(n.ref) for n in platform.registry.list(include_deleted=True) if platform.registry.is_deleted(n.ref)),
        "images": [images[k] for k in sorted(images)],
        "runs": run_rows,
        "files": files,
    }
    body["manifest_digest"] = sha256_bytes(canonical_json(body))
    manifest = {**body, "created_at": created_at or _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")}
    atomic_write(dest / MANIFEST, pretty_json(manifest))
    log.info("exported task %s to %s (%d runs)", task_id, dest, len(run_rows))
    return ArchiveManifest(manifest)


def _embed_image(platform: Platform, ref: str, images_dir: Path) -> bool:
    backend = platform.backend
    images_dir.mkdir(parents=True, exist_ok=True)
    try:
        if isinstance(backend, MockBackend):
            shutil.copytree(backend.resolve_image(ref), images_dir / image_dirname(ref), ignore=shutil.ignore_patterns("__pycache__"))
            return True
        if isinstance(backend, OciBackend):
            out = images_dir / f"{image_dirname(ref)}.tar"
            res = subprocess.run([backend.cli, "save", "-o", str(out), ref], capture_output=True)
            return res.returncode == 0
    except (OSError, PlatformError) as exc:
        log.warning("could not embed image %s: %s", ref, exc)
    return False


def verify_archive(archive: str | os.PathLike) -> ArchiveManifest:
    """Check the manifest digest and every listed file; raise IntegrityMismatch naming the first bad file."""
    root = Path(archive)
    manifest = ArchiveManifest.load(root)
    body = {k: v for k, v in manifest.data.items() if k not in ("created_at", "manifest_digest")}
    if sha256_bytes(canonical_json(body)) != manifest.data.get("manifest_digest"):
        raise IntegrityMismatch("manifest.json was modified", file=MANIFEST)
    listed = manifest.data["files"]
    for rel, digest in sorted(listed.items()):
        path = root / rel
        if not path.is_file():
            raise IntegrityMismatch(f"archive file {rel} is missing", file=rel)
        if sha256_file(path) != digest:
            raise IntegrityMismatch(f"archive file {rel} does not match its digest", file=rel)
    extra = [rel for rel, _ in iter_files(root) if rel != MANIFEST and rel not in listed]
    if extra:
        raise IntegrityMismatch(f"archive contains unlisted file {extra[0]}", file=extra[0])
    return manifest


@dataclass(frozen=True)
class ImportResult:
    task_id: str
    datasets: tuple[str, ...]
    runs: tuple[str, ...]
    events_applied: int


def import_archive(platform: Platform, archive: str | os.PathLike) -> ImportResult:
    root = Path(archive)
    manifest = verify_archive(root)
    imported_ds = []
    for row in manifest.datasets:
        src = root / "datasets" / row["id"]
        meta = json.loads((src / META).read_text())
        try:
            existing = platform.hub.get(row["id"])
        except NotFound:
            existing = None
        if existing is not None:
            if dict(existing.digests) != dict(meta["digests"]):
                raise Conflict(f"dataset {row['id']!r} already exists with different content", dataset=row["id"])
            continue
        files = {name: (src / name).read_bytes() for name in (DOCUMENTS, TOPICS, QRELS) if (src / name).is_file()}
        meta = {**meta, "withheld": False}
        platform.hub.install_withheld(meta, files)
        imported_ds.append(row["id"])

    events = [json.loads(line) for line in (root / "registry" / "components.log").read_text().splitlines() if line.strip()]
    applied = platform.registry.import_events(events, payloads=root / "registry" / "uploads")

    images = root / "images"
    if images.is_dir() and isinstance(platform.backend, MockBackend):
        for d in images.iterdir():
            dst = platform.root / "images" / d.name
            if d.is_dir() and not dst.exists():
                shutil.copytree(d, dst)

    runs = []
    imports = _imports(platform)
    for row in manifest.runs:
        rel = f"{row['approach']}/{row['dataset']}"
        src = root / "runs" / row["approach"] / row["dataset"]
        dst = platform.runs_dir / row["approach"] / row["dataset"]
        if dst.exists():
            same = all(
                (dst / p.name).is_file() and sha256_file(dst / p.name) == sha256_file(p) for p in src.iterdir()
            )
            if not same:
                raise Conflict(f"run {rel} already exists with different content", run=rel)
            continue
        shutil.copytree(src, dst)
        runs.append(rel)
        if rel not in imports:
            imports.append(rel)
    atomic_write(platform.root / IMPORTS, pretty_json(sorted(imports)))
    return ImportResult(manifest.task_id, tuple(imported_ds), tuple(runs), applied)


def _run_row(manifest: ArchiveManifest, approach: str, dataset_id: str | None = None) -> dict:
    rows = [r for r in manifest.runs if r["approach"] == approach and (dataset_id is None or r["dataset"] == dataset_id)]
    if not rows:
        where = f" on {dataset_id!r}" if dataset_id else ""
        raise NotFound(f"archive has no run of approach {approach!r}{where}", approach=approach)
    return rows[0]


def fetch_run(archive: str | os.PathLike, approach: str, dataset_id: str) -> formats.RunFile:
    """Load an archived run without executing anything."""
    root = Path(archive)
    manifest = ArchiveManifest.load(root)
    row = _run_row(manifest, approach, dataset_id)
    path = root / "runs" / approach / dataset_id / "run.txt"
    if not row["run_included"] or not path.is_file():
        raise DataWithheld(
            f"run of {approach!r} on {dataset_id!r} is withheld (confidential dataset: scores only)",
            approach=approach,
            dataset=dataset_id,
        )
    if sha256_file(path) != manifest.data["files"].get(f"runs/{approach}/{dataset_id}/run.txt"):
        raise IntegrityMismatch(f"runs/{approach}/{dataset_id}/run.txt does not match its digest")
    return formats.parse_run(path)


@dataclass
class ReplayResult:
    entry: CacheEntry | None
    evaluation: evaluator.Evaluation | None
    report: ExecutionReport
    recorded_output_digest: str | None

    @property
    def reproduced(self) -> bool | None:
        if self.recorded_output_digest is None or self.entry is None:
            return None
        return self.entry.output_digest == self.recorded_output_digest


def replay(
    platform: Platform,
    archive: str | os.PathLike,
    approach: str,
    dataset_id: str,
    use_cache: bool = False,
    limits: ResourceLimits | None = None,
    measures: Iterable[str] = ("nDCG@10",),
) -> ReplayResult:
    """Re-execute an archived approach on any registered dataset (by default bypassing the cache)."""
    root = Path(archive)
    manifest = verify_archive(root)
    row = _run_row(manifest, approach)
    original = next((r for r in manifest.runs if r["approach"] == approach and r["dataset"] == dataset_id), row)
    prov = json.loads((root / "runs" / original["approach"] / original["dataset"] / "provenance.json").read_text())
    events = [json.loads(line) for line in (root / "registry" / "components.log").read_text().splitlines() if line.strip()]
    platform.registry.import_events(events, payloads=root / "registry" / "uploads")

    ds = platform.hub.get(dataset_id)
    if ds.withheld:
        raise DataWithheld(f"data withheld: {dataset_id!r} content is not part of this archive/store", dataset=dataset_id)
    pipeline = platform.registry.resolve_pipeline(original["terminal"])
    for node in pipeline.resolved_dag:
        if isinstance(node, Component):
            try:
                platform.backend.image_digest(node.image_ref)
            except ImageNotFound as exc:
                hint = "load the archived image (images/) or pull it" if (root / "images").is_dir() else "pull or build it"
                raise ImageNotFound(f"cannot replay {approach!r}: image {node.image_ref!r} unavailable; {hint}", image=node.image_ref) from exc

    request = ExecutionRequest(pipeline, dataset_id, limits or ResourceLimits(), prov.get("rerank_depth", 100), use_cache=use_cache)
    report = platform.executor.execute(request)
    evaluation = None
    if report.ok and ds.qrels_path is not None and ds.qrels_path.is_file() and (report.terminal.output_path / "run.txt").is_file():
        run = formats.parse_run(report.terminal.output_path / "run.txt")
        evaluation = evaluator.evaluate(run, platform.hub.qrels(dataset_id), measures, platform.hub.topics(dataset_id).values())
    recorded = original["output_digest"] if original["dataset"] == dataset_id else None
    return ReplayResult(report.terminal, evaluation, report, recorded)
