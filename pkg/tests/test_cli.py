import json
import subprocess
import sys

import pytest

from conftest import FIXTURE_IMAGE, write_corpus
from irplatform.cli import main
from irplatform.executor.sandbox import namespaces_available
from irplatform.hub import DatasetHub, dataset_files_digest
from irplatform.store import store_digest

needs_sandbox = pytest.mark.skipif(not namespaces_available(), reason="user namespaces unavailable")


@pytest.fixture
def cli(tmp_path, capsys):
    store = tmp_path / "store"

    def run(*argv):
        code = main(["--store", str(store), *map(str, argv)])
        out, err = capsys.readouterr()
        return code, out, err

    run.store = store
    return run


@pytest.fixture
def registered(cli, tmp_path):
    data = write_corpus(tmp_path / "data", n_docs=40, n_topics=4)
    code, out, _ = cli("dataset", "register", "--id", "toy", "--docs", data["docs"], "--topics", data["topics"], "--qrels", data["qrels"])
    assert code == 0
    cli("component", "add", "--id", "index", "--image", FIXTURE_IMAGE, "--command", "python3 index.py $inputDataset $outputDir")
    cli(
        "component", "add", "--id", "overlap", "--image", FIXTURE_IMAGE, "--kind", "full_rank", "--predecessor", "index",
        "--command", "python3 overlap.py --input $inputDataset --output $outputDir --index $inputRun --tag overlap",
    )
    return data, out


def test_register_prints_id_and_digest(registered, cli):
    _, out = registered
    ds_id, digest = out.split()
    assert ds_id == "toy"
    assert digest == dataset_files_digest(DatasetHub(cli.store).get("toy"))


@needs_sandbox
def test_second_run_reports_cache_hits(registered, cli):
    code, first, _ = cli("pipeline", "run", "--terminal", "overlap", "--dataset", "toy")
    assert code == 0 and "index@1: executed" in first and "nDCG@10 = " in first
    code, second, _ = cli("pipeline", "run", "--terminal", "overlap", "--dataset", "toy")
    assert code == 0
    assert "index@1: cache hit" in second and "overlap@1: cache hit" in second
    assert first.splitlines()[2] == second.splitlines()[2]  # same output digest line


@needs_sandbox
def test_json_run_and_leaderboard(registered, cli):
    code, out, _ = cli("--json", "pipeline", "run", "--terminal", "overlap", "--dataset", "toy")
    payload = json.loads(out)
    assert code == 0 and payload["run"]["approach"] == "overlap"
    code, out, _ = cli("--json", "leaderboard")
    board = json.loads(out)
    assert code == 0 and "toy" in json.dumps(board)


def test_evaluate_nan_exits_nonzero_with_findings(registered, cli, tmp_path):
    data, _ = registered
    qid = data["topic_rows"][0]["qid"]
    run = tmp_path / "nan.txt"
    run.write_text(f"{qid} Q0 d1 1 nan t\n")
    code, out, err = cli("evaluate", "--run", run, "--dataset", "toy")
    assert code == 1 and out == ""
    error = json.loads(err)
    assert error["error"] == "evaluation_refused"
    assert "NAN_SCORE" in [f["code"] for f in error["sanity"]["findings"]]


def test_evaluate_clean_run(registered, cli, tmp_path):
    data, _ = registered
    run = tmp_path / "run.txt"
    lines = [f"{t['qid']} Q0 {data['documents'][i]['docno']} 1 1.0 t" for i, t in enumerate(data["topic_rows"])]
    run.write_text("\n".join(lines) + "\n")
    code, out, _ = cli("--json", "evaluate", "--run", run, "--dataset", "toy")
    assert code == 0
    assert json.loads(out)["evaluation"]["nDCG@10"]["evaluated_query_count"] == 4


def test_domain_errors_are_json_on_stderr(registered, cli):
    code, _, err = cli("--role", "participant", "dataset", "fetch", "--id", "toy", "--resource", "qrels")
    assert code == 1 and json.loads(err)["error"] == "access_denied"
    code, _, err = cli("component", "add", "--id", "x", "--image", FIXTURE_IMAGE, "--command", "run $inputRun")
    assert code == 1 and "predecessor" in json.loads(err)["message"]


def test_usage_errors_exit_2(cli):
    with pytest.raises(SystemExit) as err:
        cli("pipeline", "run", "--terminal")
    assert err.value.code == 2


def test_read_only_commands_leave_store_untouched(registered, cli):
    before = store_digest(cli.store)
    for argv in (
        ("component", "list"),
        ("--json", "component", "list", "--all"),
        ("pipeline", "resolve", "--terminal", "overlap"),
        ("leaderboard",),
        ("dataset", "fetch", "--id", "toy", "--resource", "topics"),
    ):
        code, _, err = cli(*argv)
        assert code == 0, err
    assert store_digest(cli.store) == before


def test_component_lifecycle(registered, cli):
    code, out, _ = cli("component", "revise", "--id", "index", "--command", "python3 index.py $inputDataset $outputDir --v2")
    assert code == 0 and out.strip() == "index@2"
    code, _, err = cli("component", "delete", "--id", "index", "--version", "1")
    assert code == 1 and json.loads(err)["error"] == "referenced"
    code, out, _ = cli("component", "delete", "--id", "index", "--version", "2")
    assert code == 0
    _, out, _ = cli("component", "list", "--all")
    assert "index@2" in out and "(deleted)" in out


def test_upload_and_grant(registered, cli, tmp_path):
    f = tmp_path / "features.json"
    f.write_text("{}")
    code, out, _ = cli("upload", "add", "--id", "feats", f)
    assert code == 0 and out.startswith("feats@1 ")
    code, out, _ = cli("--role", "organizer", "dataset", "grant", "--id", "toy", "--resource", "qrels", "--to", "participant")
    assert code == 0 and "granted" in out
    code, _, _ = cli("--role", "participant", "dataset", "fetch", "--id", "toy", "--resource", "qrels")
    assert code == 0


def test_console_script_usage_exit_code(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "irplatform.cli", "--store", str(tmp_path), "bogus"], capture_output=True, text=True)
    assert proc.returncode == 2 and "invalid choice" in proc.stderr
