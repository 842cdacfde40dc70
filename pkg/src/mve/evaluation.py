"""Retrieval effectiveness metrics, paired significance testing, and the
pruning sweep harness.

Metric conventions, declared once so results are reproducible: DCG gain is
the raw relevance grade (not 2^grade - 1) with a 1/log2(rank + 1) discount;
queries without judged-relevant documents score 0 for every metric and stay
in the means; Bonferroni corrects over every (strategy, p, metric)
comparison a sweep performs.
"""

from __future__ import annotations

import concurrent.futures
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy import stats as _scipy_stats

from .core import Lexicon, QueryEncoder
from .errors import InvalidConfigError, InvalidInputError
from .index import IvfIndex
from .retrieval import (
    CandidateSet,
    Ranking,
    Strategy,
    ann_candidates,
    order_embeddings,
    score_documents,
)

METRIC_NAMES = ("ndcg10", "map", "mrr10")


@dataclass(frozen=True)
class Qrels:
    """Graded relevance judgements; unjudged pairs implicitly grade 0."""

    judgments: dict[str, dict[str, int]]

    def __post_init__(self) -> None:
        for qid, docs in self.judgments.items():
            for doc_id, grade in docs.items():
                if grade < 0:
                    raise InvalidInputError(
                        f"negative grade for query {qid!r}, doc {doc_id!r}"
                    )

    def grade(self, query_id: str, doc_id: str) -> int:
        return self.judgments.get(query_id, {}).get(doc_id, 0)

    def judged(self, query_id: str) -> dict[str, int]:
        return self.judgments.get(query_id, {})

    def relevant(self, query_id: str) -> set[str]:
        return {d for d, g in self.judged(query_id).items() if g >= 1}

    def query_ids(self) -> list[str]:
        return sorted(self.judgments)


def load_qrels(path: str | Path) -> Qrels:
    """Read TREC qrels: ``qid 0 doc_id grade``, whitespace-separated."""
    judgments: dict[str, dict[str, int]] = {}
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise InvalidInputError(f"{path}:{lineno}: expected 'qid 0 doc_id grade'")
            qid, _, doc_id, grade_text = parts
            try:
                grade = int(grade_text)
            except ValueError as exc:
                raise InvalidInputError(f"{path}:{lineno}: non-integer grade") from exc
            judgments.setdefault(qid, {})[doc_id] = grade
    return Qrels(judgments)


def load_queries(path: str | Path) -> list[tuple[str, str]]:
    """Read a queries file: one ``qid<TAB>text`` line per query."""
    queries: list[tuple[str, str]] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise InvalidInputError(f"{path}:{lineno}: expected qid<TAB>text")
            qid, text = line.split("\t", 1)
            if qid in seen:
                raise InvalidInputError(f"{path}:{lineno}: duplicate query id {qid!r}")
            seen.add(qid)
            queries.append((qid, text))
    if not queries:
        raise InvalidInputError(f"{path}: no queries found")
    return queries


def write_run(rankings: Sequence[tuple[str, Ranking]], path: str | Path, tag: str = "mve") -> None:
    """Write rankings in TREC run format: ``qid Q0 doc_id rank score tag``."""
    with open(path, "w", encoding="utf-8") as handle:
        for qid, ranking in rankings:
            handle.write(format_run_lines(qid, ranking, tag))


def format_run_lines(query_id: str, ranking: Ranking, tag: str = "mve") -> str:
    return "".join(
        f"{query_id} Q0 {doc_id} {rank} {score:.6f} {tag}\n"
        for rank, (doc_id, score) in enumerate(ranking.entries, start=1)
    )


def read_run(path: str | Path) -> dict[str, Ranking]:
    """Read a TREC run file back into per-query rankings.

    Entries are reordered by (score descending, doc id ascending), the same
    tie rule the engine uses, so externally produced runs evaluate
    deterministically.
    """
    per_query: dict[str, dict[str, float]] = {}
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise InvalidInputError(
                    f"{path}:{lineno}: expected 'qid Q0 doc_id rank score tag'"
                )
            qid, _, doc_id, _, score_text, _ = parts
            try:
                score = float(score_text)
            except ValueError as exc:
                raise InvalidInputError(f"{path}:{lineno}: non-numeric score") from exc
            docs = per_query.setdefault(qid, {})
            if doc_id in docs:
                raise InvalidInputError(f"{path}:{lineno}: duplicate doc {doc_id!r}")
            docs[doc_id] = score
    rankings: dict[str, Ranking] = {}
    for qid, docs in per_query.items():
        ordered = sorted(docs.items(), key=lambda item: (-item[1], item[0]))
        rankings[qid] = Ranking(entries=tuple(ordered), k=len(ordered))
    return rankings


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------


def _dcg(gains: Iterable[int]) -> float:
    return sum(g / math.log2(rank + 1) for rank, g in enumerate(gains, start=1))


def ndcg_at(ranking: Ranking, qrels: Qrels, query_id: str, cutoff: int = 10) -> float:
    """Normalized DCG at a cutoff; 0 when the query has no relevant docs."""
    if cutoff < 1:
        raise InvalidConfigError(f"cutoff must be >= 1, got {cutoff}")
    judged = qrels.judged(query_id)
    dcg = _dcg(judged.get(doc_id, 0) for doc_id, _ in ranking.entries[:cutoff])
    ideal = _dcg(sorted(judged.values(), reverse=True)[:cutoff])
    return dcg / ideal if ideal > 0.0 else 0.0


def average_precision(ranking: Ranking, qrels: Qrels, query_id: str) -> float:
    """Mean precision at each relevant retrieved rank, over all relevant docs.

    Relevant documents never retrieved contribute 0; queries without judged
    relevant documents score 0.
    """
    relevant = qrels.relevant(query_id)
    if not relevant:
        return 0.0
    hits = 0
    precision_sum = 0.0
    for rank, (doc_id, _) in enumerate(ranking.entries, start=1):
        if doc_id in relevant:
            hits += 1
            precision_sum += hits / rank
    return precision_sum / len(relevant)


def rr_at(ranking: Ranking, qrels: Qrels, query_id: str, cutoff: int = 10) -> float:
    """Reciprocal rank of the first relevant doc within the cutoff, else 0."""
    if cutoff < 1:
        raise InvalidConfigError(f"cutoff must be >= 1, got {cutoff}")
    relevant = qrels.relevant(query_id)
    for rank, (doc_id, _) in enumerate(ranking.entries[:cutoff], start=1):
        if doc_id in relevant:
            return 1.0 / rank
    return 0.0


def candidate_counts(
    candidates: CandidateSet, qrels: Qrels, query_id: str
) -> tuple[int, int]:
    """(documents retrieved, judged-relevant documents retrieved)."""
    relevant = qrels.relevant(query_id)
    docs = candidates.docs
    return len(docs), len(docs & relevant)


# --------------------------------------------------------------------------
# Significance
# --------------------------------------------------------------------------


class TTestResult(NamedTuple):
    t: float
    p_value: float
    significant: bool


def paired_t_test_bonferroni(
    a: Sequence[float],
    b: Sequence[float],
    num_comparisons: int,
    alpha: float = 0.05,
) -> TTestResult:
    """Two-sided paired t-test with a Bonferroni-scaled significance level.

    The statistic is mean(d) / (sd(d) / sqrt(n)) over the paired differences
    d = a - b (sample standard deviation, n - 1 degrees of freedom), and the
    result is significant iff p < alpha / num_comparisons. All-zero
    differences yield (t=0, p=1, not significant); zero spread around a
    nonzero mean yields an infinite statistic and p = 0.
    """
    if num_comparisons < 1:
        raise InvalidConfigError(f"num_comparisons must be >= 1, got {num_comparisons}")
    xs = np.asarray(a, dtype=np.float64)
    ys = np.asarray(b, dtype=np.float64)
    if xs.ndim != 1 or xs.shape != ys.shape:
        raise InvalidInputError("paired samples must be 1-d and of equal length")
    n = xs.size
    if n < 2:
        raise InvalidInputError("need at least two paired observations")
    diffs = xs - ys
    mean = float(diffs.mean())
    sd = float(diffs.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0, False)
        t = math.inf if mean > 0 else -math.inf
        p_value = 0.0
    else:
        t = mean / (sd / math.sqrt(n))
        p_value = 2.0 * float(_scipy_stats.t.sf(abs(t), n - 1))
    return TTestResult(float(t), p_value, p_value < alpha / num_comparisons)


# --------------------------------------------------------------------------
# Sweep
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    strategy: str
    p: int
    ndcg10: float
    map: float
    mrr10: float
    mean_docs: float
    mean_rel_docs: float
    sig_ndcg10: bool
    sig_map: bool
    sig_mrr10: bool


CSV_HEADER = "strategy,p,ndcg10,map,mrr10,mean_docs,mean_rel_docs,sig_ndcg10,sig_map,sig_mrr10"


@dataclass(frozen=True)
class SweepTable:
    """One row per (strategy, p); the table behind the effectiveness-vs-p
    and retrieved-count-vs-p curves."""

    rows: tuple[SweepRow, ...]

    def row(self, strategy: Strategy | str, p: int) -> SweepRow:
        wanted = Strategy(strategy).value
        for row in self.rows:
            if row.strategy == wanted and row.p == p:
                return row
        raise KeyError(f"no sweep row for ({wanted}, {p})")

    def to_csv(self) -> str:
        lines = [CSV_HEADER]
        for r in self.rows:
            lines.append(
                f"{r.strategy},{r.p},{r.ndcg10:.6f},{r.map:.6f},{r.mrr10:.6f},"
                f"{r.mean_docs:.6f},{r.mean_rel_docs:.6f},"
                f"{int(r.sig_ndcg10)},{int(r.sig_map)},{int(r.sig_mrr10)}"
            )
        return "\n".join(lines) + "\n"

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(self.to_csv())


class _QueryOutcome(NamedTuple):
    """Per-query metrics for each (strategy, p) plus the unpruned baseline."""

    per_config: dict[tuple[str, int], tuple[float, float, float, int, int]]
    baseline: tuple[float, float, float]


def _evaluate_query(
    query_id: str,
    text: str,
    index: IvfIndex,
    lexicon: Lexicon,
    encoder: QueryEncoder,
    qrels: Qrels,
    strategies: Sequence[Strategy],
    p_values: Sequence[int],
    k: int,
    k_prime: int,
    n_probe: int,
) -> _QueryOutcome:
    """Evaluate every (strategy, p) cell for one query in a single pass.

    Candidate generation runs once per query position; each cell's candidate
    set is a prefix union over the strategy's ordering, and every ranking is
    read off one shared scoring of the full union, so all cells are mutually
    consistent by construction.
    """
    query = encoder.encode(text)
    store = index.store
    doc_sets = [
        ann_candidates(index, query.embeddings[position], k_prime, n_probe)[1]
        for position in range(query.q_len)
    ]
    union_all = sorted(set().union(*doc_sets))
    numbers = np.array([store.index_of(d) for d in union_all], dtype=np.int64)
    scores = score_documents(query, store, numbers)
    full_order = sorted(range(len(union_all)), key=lambda i: (-scores[i], union_all[i]))
    ranked_docs = [union_all[i] for i in full_order]
    ranked_scores = [float(scores[i]) for i in full_order]

    def metrics_for(member: set[str]) -> tuple[float, float, float]:
        entries = []
        for doc_id, score in zip(ranked_docs, ranked_scores):
            if doc_id in member:
                entries.append((doc_id, score))
                if len(entries) == k:
                    break
        ranking = Ranking(entries=tuple(entries), k=k)
        return (
            ndcg_at(ranking, qrels, query_id),
            average_precision(ranking, qrels, query_id),
            rr_at(ranking, qrels, query_id),
        )

    baseline = metrics_for(set(union_all))
    relevant = qrels.relevant(query_id)
    per_config: dict[tuple[str, int], tuple[float, float, float, int, int]] = {}
    for strategy in strategies:
        ordering = order_embeddings(query, lexicon, strategy)
        members: set[str] = set()
        consumed = 0
        for p in p_values:
            while consumed < p:
                members |= doc_sets[ordering[consumed]]
                consumed += 1
            ndcg, ap, rr = metrics_for(members)
            per_config[(strategy.value, p)] = (
                ndcg,
                ap,
                rr,
                len(members),
                len(members & relevant),
            )
    return _QueryOutcome(per_config=per_config, baseline=baseline)


def sweep(
    queries: Sequence[tuple[str, str]],
    qrels: Qrels,
    index: IvfIndex,
    lexicon: Lexicon,
    encoder: QueryEncoder,
    strategies: Sequence[Strategy | str],
    p_values: Sequence[int],
    *,
    k: int = 1000,
    k_prime: int = 1000,
    n_probe: int = 10,
    alpha: float = 0.05,
    threads: int = 1,
) -> SweepTable:
    """Run the full pruning sweep and aggregate per-(strategy, p) means.

    Each requested cell reports mean nDCG@10, MAP, MRR@10, mean documents
    retrieved, and mean relevant documents retrieved over all queries, plus
    per-metric significance of a paired t-test against the unpruned baseline
    (p = q_len, which is strategy-independent). Bonferroni corrects across
    all (strategy, p, metric) cells of this sweep. Queries are processed in
    ascending query-id order; ``threads`` only distributes per-query work and
    never changes the output.
    """
    if not queries:
        raise InvalidInputError("sweep needs at least one query")
    strategies = [Strategy(s) for s in strategies]
    if not strategies or len(set(strategies)) != len(strategies):
        raise InvalidConfigError("strategies must be non-empty and unique")
    p_values = sorted(set(int(p) for p in p_values))
    if not p_values:
        raise InvalidConfigError("p_values must be non-empty")
    if p_values[0] < 1 or p_values[-1] > encoder.q_len:
        raise InvalidConfigError(
            f"p_values must lie in [1, q_len={encoder.q_len}], got {p_values}"
        )
    if threads < 1:
        raise InvalidConfigError(f"threads must be >= 1, got {threads}")
    ordered_queries = sorted(queries, key=lambda pair: pair[0])
    if len({qid for qid, _ in ordered_queries}) != len(ordered_queries):
        raise InvalidInputError("duplicate query ids")

    def work(pair: tuple[str, str]) -> _QueryOutcome:
        qid, text = pair
        return _evaluate_query(
            qid, text, index, lexicon, encoder, qrels,
            strategies, p_values, k, k_prime, n_probe,
        )

    if threads == 1:
        outcomes = [work(pair) for pair in ordered_queries]
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(work, ordered_queries))

    num_queries = len(outcomes)
    baselines = {
        name: [o.baseline[i] for o in outcomes] for i, name in enumerate(METRIC_NAMES)
    }
    num_comparisons = len(strategies) * len(p_values) * len(METRIC_NAMES)
    rows = []
    for strategy in strategies:
        for p in p_values:
            cells = [o.per_config[(strategy.value, p)] for o in outcomes]
            means = [sum(cell[i] for cell in cells) / num_queries for i in range(5)]
            significant = {}
            for i, name in enumerate(METRIC_NAMES):
                result = paired_t_test_bonferroni(
                    [cell[i] for cell in cells], baselines[name], num_comparisons, alpha
                )
                significant[name] = result.significant
            rows.append(
                SweepRow(
                    strategy=strategy.value,
                    p=p,
                    ndcg10=means[0],
                    map=means[1],
                    mrr10=means[2],
                    mean_docs=means[3],
                    mean_rel_docs=means[4],
                    sig_ndcg10=significant["ndcg10"],
                    sig_map=significant["map"],
                    sig_mrr10=significant["mrr10"],
                )
            )
    return SweepTable(rows=tuple(rows))
