"""Independent reference computations used as test oracles.

Nothing here imports the package under test.
"""

import itertools
import math


def read_run(path):
    """qid -> list of (docno, score) from a six-column run file."""
    out = {}
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if len(parts) == 6:
                out.setdefault(parts[0], []).append((parts[2], float(parts[4])))
    return out


def read_qrels(path):
    out = {}
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if len(parts) == 4:
                out.setdefault(parts[0], {})[parts[2]] = int(parts[3])
    return out


def _dcg(rels, k):
    total = 0.0
    for position, rel in enumerate(rels, start=1):
        if position > k:
            break
        total += (math.pow(2.0, max(rel, 0)) - 1.0) / math.log(position + 1, 2)
    return total


def ndcg_brute(ranked_docnos, judgments, k):
    """Ideal DCG found by trying every ordering of the judged documents (small inputs only)."""
    rels = [judgments.get(d, 0) for d in ranked_docnos]
    best = 0.0
    judged = list(judgments.values())
    if len(judged) <= 7:
        for perm in itertools.permutations(judged):
            best = max(best, _dcg(perm, k))
    else:
        best = _dcg(sorted(judged, reverse=True), k)
    return 0.0 if best == 0 else _dcg(rels, k) / best


def mean_ndcg_from_files(run_path, qrels_path, k=10):
    run = read_run(run_path)
    qrels = read_qrels(qrels_path)
    values = []
    for qid in sorted(qrels):
        lines = sorted(run.get(qid, []), key=lambda x: (-x[1], x[0]))
        values.append(ndcg_brute([d for d, _ in lines], qrels[qid], k))
    return sum(values) / len(values), dict(zip(sorted(qrels), values))


def quantile_sorted(values, p):
    """Linear interpolation between closest ranks, via an explicit sort."""
    xs = sorted(values)
    h = (len(xs) - 1) * p
    lo = math.floor(h)
    hi = min(lo + 1, len(xs) - 1)
    return xs[lo] + (h - lo) * (xs[hi] - xs[lo])
