import gzip
import json
import random
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from irplatform import Platform  # noqa: E402

WORDS = (
    "river bank loan money water fish goldfish grow tank bowl inches food light plant "
    "engine search index query rank score judge topic corpus token length model retrieval "
    "neural sparse dense vector graph cache build pipeline archive replay"
).split()

FIXTURE_IMAGE = "irplatform/fixtures:1"


def write_corpus(directory: Path, n_docs: int = 100, n_topics: int = 10, seed: int = 7, tag: str = "") -> dict:
    """Synthetic corpus with hand-shaped qrels: graded by query-term overlap plus noise."""
    rng = random.Random(seed)
    directory.mkdir(parents=True, exist_ok=True)
    docs = []
    for i in range(n_docs):
        words = rng.choices(WORDS, k=rng.randint(5, 40))
        docs.append({"docno": f"{tag}d{i:03d}", "text": " ".join(words), "original_document": {"title": words[0], "body": " ".join(words)}})
    topics = []
    for i in range(n_topics):
        terms = rng.sample(WORDS, 3)
        topics.append({"qid": f"{tag}q{i:02d}", "query": " ".join(terms), "original_topic": {"title": " ".join(terms)}})
    qrels = []
    for t in topics:
        terms = set(t["query"].split())
        for d in rng.sample(docs, 15):
            overlap = len(terms & set(d["text"].split()))
            grade = min(2, overlap) if rng.random() > 0.2 else rng.randint(0, 2)
            qrels.append(f"{t['qid']} 0 {d['docno']} {grade}\n")
    paths = {
        "docs": directory / "documents.jsonl.gz",
        "topics": directory / "topics.jsonl.gz",
        "qrels": directory / "qrels.txt",
    }
    paths["docs"].write_bytes(gzip.compress("".join(json.dumps(d) + "\n" for d in docs).encode(), mtime=0))
    paths["topics"].write_bytes(gzip.compress("".join(json.dumps(t) + "\n" for t in topics).encode(), mtime=0))
    paths["qrels"].write_text("".join(qrels))
    return {**paths, "documents": docs, "topic_rows": topics, "qrel_lines": qrels}


def add_toy_components(p: Platform) -> None:
    """Both pipeline shapes: index -> full-rank -> re-rank, and full-rank reading the index directly."""
    reg = p.registry
    reg.add_component("index", FIXTURE_IMAGE, "python3 index.py $inputDataset $outputDir")
    reg.add_component(
        "overlap",
        FIXTURE_IMAGE,
        "python3 overlap.py --input $inputDataset --output $outputDir --index $inputRun --tag overlap",
        predecessors=["index"],
        kind="full_rank",
    )
    reg.add_component(
        "lenpen",
        FIXTURE_IMAGE,
        "python3 rerank.py --input $inputDataset --output $outputDir --alpha 0.5 --tag lenpen",
        predecessors=["overlap"],
        kind="re_rank",
    )


@pytest.fixture
def store(tmp_path) -> Path:
    return tmp_path / "store"


@pytest.fixture
def platform(store) -> Platform:
    return Platform(store)


@pytest.fixture
def toy(tmp_path, platform):
    data = write_corpus(tmp_path / "toy-data")
    platform.hub.register_dataset("toy", data["docs"], data["topics"], data["qrels"])
    add_toy_components(platform)
    return data
