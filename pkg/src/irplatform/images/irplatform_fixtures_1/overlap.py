"""Deterministic term-overlap full ranker.

score(q, d) = sum over distinct query terms t with tf(t, d) > 0 of 1 + ln tf(t, d)
Uses a prebuilt index from --index when given, otherwise indexes the corpus.
"""
import argparse
import json
import math
import os
from collections import Counter, defaultdict

from common import read_jsonl, tokens, write_run

p = argparse.ArgumentParser()
p.add_argument("--input", required=True)
p.add_argument("--output", required=True)
p.add_argument("--index")
p.add_argument("--depth", type=int, default=100)
p.add_argument("--tag", default="term-overlap")
args = p.parse_args()

if args.index:
    with open(os.path.join(args.index, "postings.json")) as fh:
        postings = json.load(fh)
else:
    postings = defaultdict(dict)
    for doc in read_jsonl(os.path.join(args.input, "documents.jsonl.gz")):
        for term, tf in Counter(tokens(doc["text"])).items():
            postings[term][doc["docno"]] = tf

scores = {}
for topic in read_jsonl(os.path.join(args.input, "topics.jsonl.gz")):
    acc = defaultdict(float)
    for term in sorted(set(tokens(topic["query"]))):
        for docno, tf in postings.get(term, {}).items():
            acc[docno] += 1.0 + math.log(tf)
    scores[topic["qid"]] = dict(acc)

write_run(os.path.join(args.output, "run.txt"), scores, args.tag, args.depth)
