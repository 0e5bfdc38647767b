"""Build a tiny inverted index: postings.json and lengths.json."""
import argparse
import json
import os
from collections import Counter, defaultdict

from common import read_jsonl, tokens

p = argparse.ArgumentParser()
p.add_argument("input")
p.add_argument("output")
args = p.parse_args()

postings = defaultdict(dict)
lengths = {}
for doc in read_jsonl(os.path.join(args.input, "documents.jsonl.gz")):
    toks = tokens(doc["text"])
    lengths[doc["docno"]] = len(toks)
    for term, tf in Counter(toks).items():
        postings[term][doc["docno"]] = tf

with open(os.path.join(args.output, "postings.json"), "w") as fh:
    json.dump(postings, fh, sort_keys=True)
with open(os.path.join(args.output, "lengths.json"), "w") as fh:
    json.dump(lengths, fh, sort_keys=True)
