"""Command-line entry point.

Exit codes: 0 success, 1 domain error (JSON error object on stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

from . import analytics, archive, evaluator
from .core import Platform
from .errors import EvaluationRefused, PlatformError
from .executor import ResourceLimits
from .formats import serialize_run
from .hub import DefaultTextRule, Resource, Role, dataset_files_digest
from .registry import NodeKind, Upload
from .store import STORE_ENV, default_store_root


def _out(args, payload, text: str | None = None) -> None:
    if args.json:
        sys.stdout.write(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")
    else:
        sys.stdout.write((text if text is not None else str(payload)).rstrip("\n") + "\n")


def _platform(args) -> Platform:
    root = Path(args.store) if args.store else default_store_root()
    return Platform(root, backend=args.backend, parallelism=args.parallelism)


def _role(args, platform: Platform) -> Role:
    return Role(args.role or platform.config.default_role)


def _limits(args) -> ResourceLimits:
    return ResourceLimits(cpus=args.cpus, memory_bytes=int(args.memory_gb * 1024**3), timeout=args.timeout)


# ---- dataset


def cmd_dataset_register(args, p: Platform) -> int:
    rules = {}
    if args.doc_text:
        rules["documents"] = DefaultTextRule.parse(args.doc_text)
    if args.topic_text:
        rules["topics"] = DefaultTextRule.parse(args.topic_text)
    ds = p.hub.register_dataset(args.id, args.docs, args.topics, args.qrels, args.confidential, rules, args.corpus)
    digest = dataset_files_digest(ds)
    _out(args, {"dataset": ds.dataset_id, "digest": digest, "digests": dict(ds.digests)}, f"{ds.dataset_id} {digest}")
    return 0


def cmd_dataset_grant(args, p: Platform) -> int:
    g = p.hub.grant(args.id, args.resource, args.to, granted=not args.revoke, actor=_role(args, p))
    state = "granted" if g.granted else "revoked"
    _out(args, {"dataset": g.dataset_id, "resource": g.resource.value, "role": g.role.value, "granted": g.granted},
         f"{state} {g.resource.value} to {g.role.value} on {g.dataset_id}")
    return 0


def cmd_dataset_fetch(args, p: Platform) -> int:
    path = p.hub.fetch(args.id, args.resource, _role(args, p))
    if args.out:
        shutil.copyfile(path, args.out)
        path = Path(args.out)
    _out(args, {"dataset": args.id, "resource": args.resource, "path": str(path)}, str(path))
    return 0


# ---- components


def cmd_component_add(args, p: Platform) -> int:
    c = p.registry.add_component(args.id, args.image, args.command, args.predecessor or (), args.kind)
    _out(args, c.to_dict(), str(c.ref))
    return 0


def cmd_component_revise(args, p: Platform) -> int:
    c = p.registry.revise_component(args.id, command=args.command, image_ref=args.image)
    _out(args, c.to_dict(), str(c.ref))
    return 0


def cmd_component_delete(args, p: Platform) -> int:
    p.registry.delete_node(args.id, args.version)
    _out(args, {"deleted": f"{args.id}@{args.version}"}, f"deleted {args.id}@{args.version}")
    return 0


def cmd_component_list(args, p: Platform) -> int:
    nodes = p.registry.list(include_deleted=args.all)
    rows = []
    for n in nodes:
        row = n.to_dict()
        row["deleted"] = p.registry.is_deleted(n.ref)
        rows.append(row)
    lines = []
    for n, row in zip(nodes, rows):
        preds = ",".join(str(r) for r in n.predecessors) or "-"
        what = f"upload {n.payload_digest[:12]}" if isinstance(n, Upload) else f"{n.image_ref}  {n.command}"
        lines.append(f"{str(n.ref):<24} {n.kind.value:<10} <- {preds:<20} {what}{'  (deleted)' if row['deleted'] else ''}")
    _out(args, rows, "\n".join(lines) or "no components")
    return 0


def cmd_upload_add(args, p: Platform) -> int:
    u = p.registry.add_upload(args.id, args.files, args.description)
    _out(args, u.to_dict(), f"{u.ref} {u.payload_digest}")
    return 0


# ---- pipelines


def cmd_pipeline_resolve(args, p: Platform) -> int:
    pipe = p.registry.resolve_pipeline(args.terminal)
    _out(args, pipe.to_dict(), "\n".join(f"{i}. {n.ref} ({n.kind.value})" for i, n in enumerate(pipe.resolved_dag, 1)))
    return 0


_STATUS_TEXT = {"cached": "cache hit", "executed": "executed", "materialized": "materialized", "failed": "FAILED", "skipped": "skipped"}


def cmd_pipeline_run(args, p: Platform) -> int:
    report, record = p.run_pipeline(
        args.terminal,
        args.dataset,
        approach=args.approach,
        limits=_limits(args),
        rerank_depth=args.rerank_depth,
        lenient=args.lenient,
        use_cache=not args.no_cache,
        measures=args.measure,
    )
    payload = report.to_dict()
    if record is not None:
        payload["run"] = {"approach": record.approach, "path": str(record.run_path), "evaluation": record.evaluation}
    lines = [f"{n.node}: {_STATUS_TEXT[n.status]}" + (f" ({n.error})" if n.error else "") for n in report.nodes]
    if report.terminal is not None:
        lines.append(f"output {report.terminal.output_digest}")
    if record is not None and record.evaluation:
        lines += [f"{m} = {v['mean']:.4f}" for m, v in sorted(record.evaluation.items())]
    _out(args, payload, "\n".join(lines))
    report.raise_for_status()
    return 0


# ---- evaluation and analytics


def cmd_evaluate(args, p: Platform) -> int:
    result = p.evaluate_run(args.run, args.dataset, args.measure)
    payload = {"evaluation": result.to_dict(), "sanity": result.sanity.to_dict()}
    lines = [f"{m} = {r.mean:.4f} over {r.evaluated_query_count} topics" for m, r in sorted(result.reports.items())]
    lines += [f"[{f.severity}] {f.code} {f.qid or ''} {f.detail}".rstrip() for f in result.sanity.findings]
    _out(args, payload, "\n".join(lines))
    return 0


def cmd_leaderboard(args, p: Platform) -> int:
    board = p.leaderboard(args.measure, args.dataset)
    m = str(evaluator.Measure.parse(args.measure))
    _out(args, analytics.leaderboard_json(board), analytics.render_leaderboard(board, m) or "no evaluated runs")
    return 0


def cmd_repro(args, p: Platform) -> int:
    reports = p.repro(args.origin, args.target, args.measure)
    _out(args, analytics.repro_json(reports, args.origin), analytics.render_repro(reports, args.origin))
    return 0


# ---- archives


def cmd_archive_export(args, p: Platform) -> int:
    m = archive.export_archive(
        p,
        args.task,
        args.out,
        datasets=args.dataset,
        include_test_data=args.include_test_data,
        role=_role(args, p) if args.include_test_data else Role.ORGANIZER,
        withhold_confidential_runs=args.withhold_runs,
        embed_images=args.embed_images,
    )
    _out(args, {"archive": str(args.out), "manifest_digest": m.data["manifest_digest"], "runs": len(m.runs)},
         f"{args.out} {m.data['manifest_digest']}")
    return 0


def cmd_archive_import(args, p: Platform) -> int:
    r = archive.import_archive(p, args.path)
    payload = {"task": r.task_id, "datasets": list(r.datasets), "runs": list(r.runs), "registry_events": r.events_applied}
    _out(args, payload, f"imported task {r.task_id}: {len(r.datasets)} dataset(s), {len(r.runs)} run(s), {r.events_applied} registry event(s)")
    return 0


def cmd_archive_replay(args, p: Platform) -> int:
    r = archive.replay(p, args.archive, args.approach, args.dataset, use_cache=args.use_cache, limits=_limits(args), measures=args.measure)
    payload = {"execution": r.report.to_dict(), "reproduced": r.reproduced, "recorded_output_digest": r.recorded_output_digest}
    if r.evaluation is not None:
        payload["evaluation"] = r.evaluation.to_dict()
    lines = [f"{n.node}: {_STATUS_TEXT[n.status]}" for n in r.report.nodes]
    if r.entry is not None:
        lines.append(f"output {r.entry.output_digest}")
    if r.reproduced is not None:
        lines.append("reproduced recorded output" if r.reproduced else f"output differs from recorded {r.recorded_output_digest}")
    if r.evaluation is not None:
        lines += [f"{m} = {rep.mean:.4f}" for m, rep in sorted(r.evaluation.reports.items())]
    _out(args, payload, "\n".join(lines))
    r.report.raise_for_status()
    return 0


def cmd_archive_fetch_run(args, p: Platform | None) -> int:
    run = archive.fetch_run(args.archive, args.approach, args.dataset)
    data = serialize_run(run)
    if args.out:
        Path(args.out).write_bytes(data)
        _out(args, {"path": args.out, "tag": run.tag, "lines": len(run.lines)}, args.out)
    elif args.json:
        _out(args, {"tag": run.tag, "lines": len(run.lines), "queries": len(run.qids)})
    else:
        sys.stdout.write(data.decode())
    return 0


# ---- parser


def _add_limits(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--timeout", type=float, default=3600.0, help="wall-clock limit per container in seconds")
    sp.add_argument("--memory-gb", type=float, default=10.0, help="address-space limit per container")
    sp.add_argument("--cpus", type=float, default=1.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="irp", description="Reproducible shared-task style IR experiments.")
    parser.add_argument("--store", help=f"store root (default: ${STORE_ENV} or ./irp-store)")
    parser.add_argument("--role", choices=[r.value for r in Role], help="acting role for access decisions")
    parser.add_argument("--json", action="store_true", help="machine-readable output")
    parser.add_argument("--backend", choices=["mock", "oci"], help="container backend (default from store config)")
    parser.add_argument("--parallelism", type=int, help="concurrent containers per pipeline")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    ds = sub.add_parser("dataset", help="register datasets and manage access").add_subparsers(dest="action", required=True)
    sp = ds.add_parser("register", help="register an immutable dataset")
    sp.add_argument("--id", required=True)
    sp.add_argument("--docs", required=True, help="documents JSONL (gzip optional)")
    sp.add_argument("--topics", required=True, help="topics JSONL (gzip optional)")
    sp.add_argument("--qrels", help="TREC qrels file")
    sp.add_argument("--confidential", action="store_true", help="blind dataset: content stays in the sandbox")
    sp.add_argument("--corpus", help="corpus label used for leaderboard grouping (default: dataset id)")
    sp.add_argument("--doc-text", help="default_text rule for documents, e.g. title,abstract")
    sp.add_argument("--topic-text", help="default_text rule for topics")
    sp.set_defaults(func=cmd_dataset_register)
    sp = ds.add_parser("grant", help="open a withheld cell of the access matrix (organizers only)")
    sp.add_argument("--id", required=True)
    sp.add_argument("--resource", required=True, choices=[r.value for r in Resource])
    sp.add_argument("--to", required=True, choices=[r.value for r in Role], help="role receiving access")
    sp.add_argument("--revoke", action="store_true")
    sp.set_defaults(func=cmd_dataset_grant)
    sp = ds.add_parser("fetch", help="retrieve a dataset file if the role may see it")
    sp.add_argument("--id", required=True)
    sp.add_argument("--resource", required=True, choices=[r.value for r in Resource])
    sp.add_argument("--out", help="copy the file here instead of printing its path")
    sp.set_defaults(func=cmd_dataset_fetch)

    comp = sub.add_parser("component", help="define immutable components").add_subparsers(dest="action", required=True)
    sp = comp.add_parser("add")
    sp.add_argument("--id", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--command", required=True, help="template using $inputDataset, $inputRun, $outputDir")
    sp.add_argument("--predecessor", action="append", help="predecessor id or id@version (repeatable, ordered)")
    sp.add_argument("--kind", default=NodeKind.GENERIC.value, choices=[k.value for k in NodeKind if k is not NodeKind.UPLOAD])
    sp.set_defaults(func=cmd_component_add)
    sp = comp.add_parser("revise", help="publish a new version with a changed command or image")
    sp.add_argument("--id", required=True)
    sp.add_argument("--command")
    sp.add_argument("--image")
    sp.set_defaults(func=cmd_component_revise)
    sp = comp.add_parser("delete")
    sp.add_argument("--id", required=True)
    sp.add_argument("--version", type=int, required=True)
    sp.set_defaults(func=cmd_component_delete)
    sp = comp.add_parser("list")
    sp.add_argument("--all", action="store_true", help="include deleted versions")
    sp.set_defaults(func=cmd_component_list)

    up = sub.add_parser("upload", help="register uploaded outputs").add_subparsers(dest="action", required=True)
    sp = up.add_parser("add")
    sp.add_argument("--id", required=True)
    sp.add_argument("--description", default="")
    sp.add_argument("files", nargs="+")
    sp.set_defaults(func=cmd_upload_add)

    pipe = sub.add_parser("pipeline", help="resolve and execute pipelines").add_subparsers(dest="action", required=True)
    sp = pipe.add_parser("resolve")
    sp.add_argument("--terminal", required=True)
    sp.set_defaults(func=cmd_pipeline_resolve)
    sp = pipe.add_parser("run")
    sp.add_argument("--terminal", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--approach", help="name recorded for the run (default: terminal id)")
    sp.add_argument("--no-cache", action="store_true", help="execute every node even if cached")
    sp.add_argument("--rerank-depth", type=int, default=100)
    sp.add_argument("--lenient", action="store_true", help="skip run entries whose documents are unknown")
    sp.add_argument("--measure", action="append", default=None)
    _add_limits(sp)
    sp.set_defaults(func=cmd_pipeline_run)

    sp = sub.add_parser("evaluate", help="sanity-check and evaluate a run file")
    sp.add_argument("--run", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--measure", action="append", default=None)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("leaderboard", help="per-corpus macro-averaged leaderboard")
    sp.add_argument("--measure", default="nDCG@10")
    sp.add_argument("--dataset", action="append", help="restrict to these datasets")
    sp.set_defaults(func=cmd_leaderboard)

    sp = sub.add_parser("repro", help="reproducibility of system preferences across tasks")
    sp.add_argument("--origin", required=True)
    sp.add_argument("--target", action="append", required=True)
    sp.add_argument("--measure", default="nDCG@10")
    sp.set_defaults(func=cmd_repro)

    arc = sub.add_parser("archive", help="export, import and replay experiment archives").add_subparsers(dest="action", required=True)
    sp = arc.add_parser("export")
    sp.add_argument("--task", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--dataset", action="append", help="datasets of the task (default: all)")
    sp.add_argument("--include-test-data", action="store_true", help="embed confidential content (organizers only)")
    sp.add_argument("--withhold-runs", action="store_true", help="replace run files of confidential datasets by digest stubs")
    sp.add_argument("--embed-images", action="store_true")
    sp.set_defaults(func=cmd_archive_export)
    sp = arc.add_parser("import")
    sp.add_argument("path")
    sp.set_defaults(func=cmd_archive_import)
    sp = arc.add_parser("replay")
    sp.add_argument("--archive", required=True)
    sp.add_argument("--approach", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--use-cache", action="store_true")
    sp.add_argument("--measure", action="append", default=None)
    _add_limits(sp)
    sp.set_defaults(func=cmd_archive_replay)
    sp = arc.add_parser("fetch-run")
    sp.add_argument("--archive", required=True)
    sp.add_argument("--approach", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_archive_fetch_run, no_store=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "measure", False) is None:
        args.measure = ["nDCG@10"]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        platform = None if getattr(args, "no_store", False) else _platform(args)
        return args.func(args, platform)
    except EvaluationRefused as exc:
        sys.stderr.write(json.dumps(exc.to_dict(), indent=2, default=str) + "\n")
        return 1
    except PlatformError as exc:
        sys.stderr.write(json.dumps(exc.to_dict(), default=str) + "\n")
        return 1
    except (ValueError, OSError) as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
