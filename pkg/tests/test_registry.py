import threading

import pytest

from irplatform.errors import Conflict, InvariantViolation, NotFound, ReferencedNode
from irplatform.registry import NodeKind, NodeRef, Registry, check_template, template_variables

IMG = "irplatform/fixtures:1"


@pytest.fixture
def reg(tmp_path):
    return Registry(tmp_path)


def test_add_and_pin_predecessors(reg):
    a = reg.add_component("a", IMG, "run $inputDataset $outputDir")
    b = reg.add_component("b", IMG, "run $inputRun $outputDir", predecessors=["a"], kind="re_rank")
    assert b.predecessors == (NodeRef("a", 1),)
    reg.revise_component("a", command="run2 $inputDataset $outputDir")
    # b stays pinned to the version it was defined against.
    assert reg.get("b").predecessors == (a.ref,)
    assert reg.get("a").version == 2
    assert reg.get("a@1").command == "run $inputDataset $outputDir"


def test_components_are_immutable_and_ids_unique(reg):
    reg.add_component("a", IMG, "x")
    with pytest.raises(Conflict, match="already exists"):
        reg.add_component("a", IMG, "y")
    with pytest.raises(AttributeError):
        reg.get("a").command = "z"


def test_missing_predecessor(reg):
    with pytest.raises(NotFound, match="missing predecessor 'ghost'"):
        reg.add_component("b", IMG, "x", predecessors=["ghost"])
    with pytest.raises(NotFound):
        reg.add_component("c", IMG, "x", predecessors=["ghost@3"])


@pytest.mark.parametrize(
    "command, preds, fragment",
    [
        ("run $inputRun", 0, "without predecessors"),
        ("run $unknownVar", 0, "unknown variable"),
        ("run $", 0, "invalid"),
    ],
)
def test_template_checks(command, preds, fragment):
    with pytest.raises(InvariantViolation, match=fragment):
        check_template(command, preds)


def test_template_variables():
    assert template_variables("a ${inputDataset} $outputDir $$literal") == ["inputDataset", "outputDir"]


def test_delete_refused_while_referenced(reg):
    reg.add_component("a", IMG, "x")
    reg.add_component("b", IMG, "y $inputRun", predecessors=["a"])
    with pytest.raises(ReferencedNode) as err:
        reg.delete_node("a", 1)
    assert err.value.details["referenced_by"] == ["b@1"]
    reg.delete_node("b", 1)
    reg.delete_node("a", 1)
    with pytest.raises(NotFound):
        reg.get("a")
    assert reg.is_deleted(NodeRef("a", 1))


def test_in_use_callback_blocks_delete(tmp_path):
    reg = Registry(tmp_path, in_use=lambda ref: ["cache:abc"] if ref.node_id == "a" else [])
    reg.add_component("a", IMG, "x")
    with pytest.raises(ReferencedNode, match="cache:abc"):
        reg.delete_node("a", 1)


def test_resolution_is_deterministic_topological(reg):
    reg.add_component("src1", IMG, "x")
    reg.add_component("src2", IMG, "x")
    reg.add_component("mid", IMG, "x $inputRun", predecessors=["src2", "src1"])
    reg.add_component("top", IMG, "x $inputRun", predecessors=["mid", "src1"])
    order = [str(n.ref) for n in reg.resolve_pipeline("top").resolved_dag]
    assert order == ["src2@1", "src1@1", "mid@1", "top@1"]
    again = Registry(reg.root)
    assert [str(n.ref) for n in again.resolve_pipeline("top").resolved_dag] == order


def test_log_replay_from_disk(reg):
    reg.add_component("a", IMG, "x")
    reg.add_upload("u", {"run.txt": b"q Q0 d 1 1.0 t\n"})
    reg.revise_component("a", image_ref="other:2")
    fresh = Registry(reg.root)
    assert [str(n.ref) for n in fresh.list()] == ["a@1", "u@1", "a@2"]
    assert fresh.get("a").image_ref == "other:2"
    assert fresh.get("u").kind is NodeKind.UPLOAD


def test_uploads_version_and_are_readonly(reg):
    u1 = reg.add_upload("u", {"run.txt": b"one"})
    u2 = reg.add_upload("u", {"run.txt": b"two"})
    assert (u1.version, u2.version) == (1, 2)
    assert u1.payload_digest != u2.payload_digest
    path = reg.upload_payload(u1) / "run.txt"
    assert path.read_bytes() == b"one"
    assert path.stat().st_mode & 0o222 == 0


def test_import_events_skips_identical_prefix(tmp_path, reg):
    reg.add_component("a", IMG, "x")
    reg.add_upload("u", {"f": b"1"})
    other = Registry(tmp_path / "other")
    assert other.import_events(reg.events(), payloads=reg.uploads_dir) == 2
    assert other.import_events(reg.events(), payloads=reg.uploads_dir) == 0
    assert (other.upload_payload(other.get("u")) / "f").read_bytes() == b"1"
    other.add_component("b", IMG, "y")
    reg.add_component("c", IMG, "z")
    with pytest.raises(Conflict, match="diverges"):
        other.import_events(reg.events())


def test_concurrent_adds_are_serialized(tmp_path):
    regs = [Registry(tmp_path) for _ in range(4)]
    errors = []

    def worker(i):
        try:
            for j in range(5):
                regs[i].add_component(f"c{i}-{j}", IMG, "x")
        except Exception as exc:  # pragma: no cover - surfaced below
            errors.append(exc)

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    fresh = Registry(tmp_path)
    assert len(fresh.list()) == 20
    assert [e["seq"] for e in fresh.events()] == list(range(1, 21))
