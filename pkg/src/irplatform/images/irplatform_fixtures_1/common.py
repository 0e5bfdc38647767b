import gzip
import json
import re

TOKEN = re.compile(r"[a-z0-9]+")


def tokens(text):
    return TOKEN.findall(text.lower())


def read_jsonl(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rt", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_run(path, scores, tag, depth):
    """scores: qid -> {docno: score}; ranks by score desc, docno asc."""
    with open(path, "w", encoding="utf-8") as fh:
        for qid in sorted(scores):
            ranked = sorted(scores[qid].items(), key=lambda kv: (-kv[1], kv[0]))[:depth]
            for rank, (docno, score) in enumerate(ranked, start=1):
                fh.write(f"{qid} Q0 {docno} {rank} {score:.6f} {tag}\n")
