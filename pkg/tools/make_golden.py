#!/usr/bin/env python3
"""Mint the frozen golden metrics file for the evaluation tests.

Deliberately standalone: this script parses the run and qrels files itself
and computes nDCG@10, MAP, and MRR@10 from their textbook definitions
(graded gain with a 1/log2(rank + 1) discount, precision averaged over all
judged-relevant documents, reciprocal rank cut at 10), so the numbers it
freezes do not depend on the package under test. Run it once when the
fixture files change:

    python3 tools/make_golden.py
"""

import json
import math
from pathlib import Path

DATA_DIR = Path(__file__).resolve().parent.parent / "tests" / "data"
CUTOFF = 10


def read_qrels(path):
    grades = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        parts = line.split()
        if not parts:
            continue
        qid, _, doc_id, grade = parts
        grades.setdefault(qid, {})[doc_id] = int(grade)
    return grades


def read_run(path):
    scored = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        parts = line.split()
        if not parts:
            continue
        qid, _, doc_id, _, score, _ = parts
        scored.setdefault(qid, []).append((doc_id, float(score)))
    # highest score first, ties by doc id ascending
    return {
        qid: [doc for doc, _ in sorted(docs, key=lambda item: (-item[1], item[0]))]
        for qid, docs in scored.items()
    }


def ndcg10(ranked, judged):
    dcg = 0.0
    for rank, doc_id in enumerate(ranked[:CUTOFF], start=1):
        dcg += judged.get(doc_id, 0) / math.log2(rank + 1)
    ideal = 0.0
    for rank, grade in enumerate(sorted(judged.values(), reverse=True)[:CUTOFF], start=1):
        ideal += grade / math.log2(rank + 1)
    return dcg / ideal if ideal > 0 else 0.0


def ap(ranked, judged):
    relevant = {doc for doc, grade in judged.items() if grade >= 1}
    if not relevant:
        return 0.0
    hits = 0
    total = 0.0
    for rank, doc_id in enumerate(ranked, start=1):
        if doc_id in relevant:
            hits += 1
            total += hits / rank
    return total / len(relevant)


def rr10(ranked, judged):
    relevant = {doc for doc, grade in judged.items() if grade >= 1}
    for rank, doc_id in enumerate(ranked[:CUTOFF], start=1):
        if doc_id in relevant:
            return 1.0 / rank
    return 0.0


def main():
    qrels = read_qrels(DATA_DIR / "golden_qrels.txt")
    run = read_run(DATA_DIR / "golden_run.txt")
    per_query = {}
    for qid in sorted(qrels):
        ranked = run.get(qid, [])
        judged = qrels[qid]
        per_query[qid] = {
            "ndcg10": ndcg10(ranked, judged),
            "map": ap(ranked, judged),
            "mrr10": rr10(ranked, judged),
        }
    count = len(per_query)
    means = {
        name: sum(scores[name] for scores in per_query.values()) / count
        for name in ("ndcg10", "map", "mrr10")
    }
    golden = {"per_query": per_query, "means": means}
    out = DATA_DIR / "golden_metrics.json"
    out.write_text(json.dumps(golden, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {out}")
    for qid, scores in per_query.items():
        print(f"  {qid}: {scores}")
    print(f"  means: {means}")


if __name__ == "__main__":
    main()
