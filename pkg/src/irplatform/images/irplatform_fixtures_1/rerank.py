"""Deterministic length-penalty re-ranker.

new_score = score / (1 + alpha * ln(1 + |tokens(text)|)); an optional
features file (qid -> {"alpha": float}) overrides alpha per query.
"""
import argparse
import json
import math
import os
from collections import defaultdict

from common import read_jsonl, tokens, write_run

p = argparse.ArgumentParser()
p.add_argument("--input", required=True)
p.add_argument("--output", required=True)
p.add_argument("--alpha", type=float, default=0.5)
p.add_argument("--features")
p.add_argument("--depth", type=int, default=1000)
p.add_argument("--tag", default="length-penalty")
args = p.parse_args()

features = {}
if args.features:
    with open(args.features) as fh:
        features = json.load(fh)

scores = defaultdict(dict)
for row in read_jsonl(os.path.join(args.input, "re-rank.jsonl.gz")):
    alpha = features.get(row["qid"], {}).get("alpha", args.alpha)
    length = len(tokens(row["text"]))
    scores[row["qid"]][row["docno"]] = row["score"] / (1.0 + alpha * math.log(1.0 + length))

write_run(os.path.join(args.output, "run.txt"), scores, args.tag, args.depth)
