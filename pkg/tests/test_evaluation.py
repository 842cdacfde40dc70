import json
import math
from pathlib import Path

import numpy as np
import pytest

from mve.errors import InvalidConfigError, InvalidInputError
from mve.evaluation import (
    CSV_HEADER,
    Qrels,
    average_precision,
    candidate_counts,
    load_qrels,
    load_queries,
    ndcg_at,
    paired_t_test_bonferroni,
    read_run,
    rr_at,
    sweep,
    write_run,
)
from mve.retrieval import CandidateSet, Ranking, Strategy

DATA = Path(__file__).parent / "data"


def ranking_of(*doc_ids, start=10.0, k=50):
    return Ranking(
        entries=tuple((doc_id, start - i) for i, doc_id in enumerate(doc_ids)), k=k
    )


QRELS = Qrels(
    {
        "q1": {"good": 3, "ok": 1, "meh": 0},
        "q2": {"only": 1},
        "empty": {"meh": 0},
    }
)


# ---------------------------------------------------------------------------
# nDCG / AP / RR
# ---------------------------------------------------------------------------


def test_ndcg_of_ideal_ranking_is_one():
    assert ndcg_at(ranking_of("good", "ok"), QRELS, "q1") == pytest.approx(1.0)


def test_ndcg_zero_when_no_relevant_retrieved():
    assert ndcg_at(ranking_of("meh", "stranger"), QRELS, "q1") == 0.0


def test_ndcg_worked_example():
    # graded run [3, 0, 1] against judged grades {3, 1}
    qrels = Qrels({"q": {"a": 3, "b": 0, "c": 1}})
    ranking = ranking_of("a", "b", "c")
    dcg = 3 / math.log2(2) + 0 / math.log2(3) + 1 / math.log2(4)
    idcg = 3 / math.log2(2) + 1 / math.log2(3)
    assert dcg == pytest.approx(3.5)
    assert idcg == pytest.approx(3.6309297535714575)
    got = ndcg_at(ranking, qrels, "q")
    assert got == pytest.approx(dcg / idcg, abs=1e-12)
    assert got == pytest.approx(0.9639, abs=1e-4)


def test_ndcg_ignores_docs_below_cutoff():
    top = [f"t{i}" for i in range(10)]
    qrels = Qrels({"q": {top[0]: 2, top[3]: 1, "below": 3}})
    one = ranking_of(*top, "below", "x1", k=20)
    two = ranking_of(*top, "x2", "below", k=20)
    assert ndcg_at(one, qrels, "q") == ndcg_at(two, qrels, "q")
    assert rr_at(one, qrels, "q") == rr_at(two, qrels, "q")


def test_average_precision_examples():
    # all relevant docs at the top ranks
    assert average_precision(ranking_of("good", "ok"), QRELS, "q1") == pytest.approx(1.0)
    # one of two relevant docs, retrieved at rank 2
    qrels = Qrels({"q": {"a": 1, "b": 1}})
    assert average_precision(ranking_of("x", "a"), qrels, "q") == pytest.approx(0.25)
    # no judged-relevant docs at all
    assert average_precision(ranking_of("meh"), QRELS, "empty") == 0.0


def test_rr_examples():
    assert rr_at(ranking_of("good"), QRELS, "q1") == 1.0
    assert rr_at(ranking_of("x", "y", "z", "good"), QRELS, "q1") == pytest.approx(0.25)
    eleven = ranking_of(*[f"x{i}" for i in range(10)], "good")
    assert rr_at(eleven, QRELS, "q1") == 0.0
    with pytest.raises(InvalidConfigError):
        rr_at(ranking_of("good"), QRELS, "q1", cutoff=0)


def test_candidate_counts():
    assert candidate_counts(CandidateSet({}), QRELS, "q1") == (0, 0)
    candidates = CandidateSet({d: frozenset({1}) for d in ("good", "meh", "other")})
    assert candidate_counts(candidates, QRELS, "q1") == (3, 1)


def test_candidate_counts_against_independent_filter():
    rng = np.random.default_rng(41)
    docs = [f"d{i}" for i in range(40)]
    judgments = {"q": {d: int(rng.integers(0, 3)) for d in docs[:25]}}
    qrels = Qrels(judgments)
    member = {d for d in docs if rng.random() < 0.5}
    candidates = CandidateSet({d: frozenset({1}) for d in member})
    retrieved, relevant = candidate_counts(candidates, qrels, "q")
    oracle_relevant = sum(1 for d in member if judgments["q"].get(d, 0) >= 1)
    assert retrieved == len(member)
    assert relevant == oracle_relevant


# ---------------------------------------------------------------------------
# Golden fixture agreement
# ---------------------------------------------------------------------------


def test_metrics_match_frozen_golden_file():
    golden = json.loads((DATA / "golden_metrics.json").read_text())
    rankings = read_run(DATA / "golden_run.txt")
    qrels = load_qrels(DATA / "golden_qrels.txt")
    empty = Ranking(entries=(), k=1)
    means = {"ndcg10": 0.0, "map": 0.0, "mrr10": 0.0}
    for qid in qrels.query_ids():
        ranking = rankings.get(qid, empty)
        got = {
            "ndcg10": ndcg_at(ranking, qrels, qid),
            "map": average_precision(ranking, qrels, qid),
            "mrr10": rr_at(ranking, qrels, qid),
        }
        for name, value in got.items():
            assert value == pytest.approx(golden["per_query"][qid][name], abs=1e-4)
            means[name] += value
    for name in means:
        mean = means[name] / len(qrels.query_ids())
        assert mean == pytest.approx(golden["means"][name], abs=1e-4)


# ---------------------------------------------------------------------------
# Paired t-test with Bonferroni correction
# ---------------------------------------------------------------------------


def student_t_sf_oracle(t, dof):
    """Survival function via the regularized incomplete beta (mpmath)."""
    import mpmath

    x = mpmath.mpf(dof) / (dof + mpmath.mpf(t) ** 2)
    tail = mpmath.betainc(mpmath.mpf(dof) / 2, mpmath.mpf(1) / 2, 0, x, regularized=True) / 2
    return float(tail)


def fixed_samples():
    a = [0.52 + 0.015 * i + 0.11 * math.sin(3 * i) for i in range(30)]
    b = [0.47 + 0.013 * i + 0.09 * math.sin(3 * i + 1) for i in range(30)]
    return a, b


def test_t_test_identical_samples():
    a = [0.1, 0.4, 0.3, 0.9]
    result = paired_t_test_bonferroni(a, list(a), num_comparisons=1)
    assert result == (0.0, 1.0, False)


def test_t_test_constant_shift_is_significant():
    b = [0.2 + 0.01 * i for i in range(30)]
    a = [x + 0.1 for x in b]
    result = paired_t_test_bonferroni(a, b, num_comparisons=1)
    assert result.t > 100.0  # enormous statistic: near-zero spread, positive mean
    assert result.p_value < 1e-12
    assert result.significant


def test_t_test_zero_spread_guard():
    # exact binary fractions keep the paired differences bitwise constant
    b = [i / 64.0 for i in range(30)]
    a = [x + 0.125 for x in b]
    result = paired_t_test_bonferroni(a, b, num_comparisons=1)
    assert math.isinf(result.t) and result.t > 0
    assert result.p_value == 0.0
    assert result.significant
    flipped = paired_t_test_bonferroni(b, a, num_comparisons=1)
    assert math.isinf(flipped.t) and flipped.t < 0


def test_t_test_matches_closed_form_and_cdf_oracle():
    a, b = fixed_samples()
    result = paired_t_test_bonferroni(a, b, num_comparisons=1)
    # closed form: t = mean(d) / (sd(d) / sqrt(n)), computed independently
    diffs = [x - y for x, y in zip(a, b)]
    mean = math.fsum(diffs) / len(diffs)
    sd = math.sqrt(math.fsum((d - mean) ** 2 for d in diffs) / (len(diffs) - 1))
    expected_t = mean / (sd / math.sqrt(len(diffs)))
    assert result.t == pytest.approx(expected_t, rel=1e-12)
    assert result.p_value == pytest.approx(2 * student_t_sf_oracle(abs(expected_t), 29), rel=1e-9)


def test_t_test_antisymmetry():
    a, b = fixed_samples()
    forward = paired_t_test_bonferroni(a, b, num_comparisons=4)
    backward = paired_t_test_bonferroni(b, a, num_comparisons=4)
    assert backward.t == pytest.approx(-forward.t, rel=1e-12)
    assert backward.p_value == pytest.approx(forward.p_value, rel=1e-12)
    assert backward.significant == forward.significant


def test_t_test_bonferroni_threshold_scales_exactly():
    a, b = fixed_samples()
    p_value = paired_t_test_bonferroni(a, b, num_comparisons=1).p_value
    for num in (1, 2, 64, 4096, 10**7):
        result = paired_t_test_bonferroni(a, b, num_comparisons=num)
        assert result.significant == (p_value < 0.05 / num)


def test_t_test_input_validation():
    with pytest.raises(InvalidInputError):
        paired_t_test_bonferroni([1.0, 2.0], [1.0], num_comparisons=1)
    with pytest.raises(InvalidInputError):
        paired_t_test_bonferroni([1.0], [1.0], num_comparisons=1)
    with pytest.raises(InvalidConfigError):
        paired_t_test_bonferroni([1.0, 2.0], [1.0, 2.0], num_comparisons=0)


# ---------------------------------------------------------------------------
# Run and qrels files
# ---------------------------------------------------------------------------


def test_run_file_round_trip(tmp_path):
    rankings = [
        ("q1", ranking_of("a", "b", "c")),
        ("q2", ranking_of("x")),
    ]
    path = tmp_path / "run.txt"
    write_run(rankings, path, tag="test")
    lines = path.read_text().splitlines()
    assert lines[0] == "q1 Q0 a 1 10.000000 test"
    loaded = read_run(path)
    assert loaded["q1"].doc_ids() == ["a", "b", "c"]
    assert loaded["q2"].doc_ids() == ["x"]


def test_read_run_reorders_by_score_then_doc_id(tmp_path):
    path = tmp_path / "run.txt"
    path.write_text(
        "q1 Q0 zz 1 5.0 t\n"
        "q1 Q0 aa 2 5.0 t\n"
        "q1 Q0 top 3 9.0 t\n"
    )
    assert read_run(path)["q1"].doc_ids() == ["top", "aa", "zz"]


def test_qrels_and_queries_loaders_validate(tmp_path):
    bad_qrels = tmp_path / "qrels.txt"
    bad_qrels.write_text("q1 0 d1\n")
    with pytest.raises(InvalidInputError):
        load_qrels(bad_qrels)
    bad_queries = tmp_path / "queries.tsv"
    bad_queries.write_text("no-tab-here\n")
    with pytest.raises(InvalidInputError):
        load_queries(bad_queries)
    with pytest.raises(InvalidInputError):
        Qrels({"q": {"d": -1}})


# ---------------------------------------------------------------------------
# Sweep
# ---------------------------------------------------------------------------


def test_sweep_baseline_row_equals_itself_and_is_not_significant(
    small_planted_engine, small_planted, small_planted_qrels
):
    engine = small_planted_engine
    q_len = engine.config.q_len
    table = engine.sweep(
        small_planted.queries, small_planted_qrels,
        strategies=[Strategy.FIRST], p_values=[q_len],
    )
    assert len(table.rows) == 1
    row = table.rows[0]
    assert (row.strategy, row.p) == ("first", q_len)
    assert not (row.sig_ndcg10 or row.sig_map or row.sig_mrr10)


def test_sweep_mean_docs_non_decreasing_in_p(
    small_planted_engine, small_planted, small_planted_qrels
):
    engine = small_planted_engine
    table = engine.sweep(
        small_planted.queries, small_planted_qrels,
        strategies=[Strategy.FIRST, Strategy.ICF],
        p_values=[1, 2, 4, engine.config.q_len],
    )
    for strategy in ("first", "icf"):
        docs = [row.mean_docs for row in table.rows if row.strategy == strategy]
        assert docs == sorted(docs)


def test_sweep_rows_match_individual_searches(
    small_planted_engine, small_planted, small_planted_qrels
):
    engine = small_planted_engine
    p = 2
    table = engine.sweep(
        small_planted.queries, small_planted_qrels,
        strategies=[Strategy.ICF], p_values=[p, engine.config.q_len],
    )
    row = table.row(Strategy.ICF, p)
    sizes = []
    relevant_counts = []
    for qid, text in small_planted.queries:
        _, candidates = engine.search(text, strategy=Strategy.ICF, p=p)
        retrieved, relevant = candidate_counts(candidates, small_planted_qrels, qid)
        sizes.append(retrieved)
        relevant_counts.append(relevant)
    assert row.mean_docs == pytest.approx(sum(sizes) / len(sizes))
    assert row.mean_rel_docs == pytest.approx(sum(relevant_counts) / len(relevant_counts))


def test_sweep_full_p_rows_agree_across_strategies(
    small_planted_engine, small_planted, small_planted_qrels
):
    engine = small_planted_engine
    q_len = engine.config.q_len
    table = engine.sweep(
        small_planted.queries, small_planted_qrels,
        strategies=[Strategy.FIRST, Strategy.ICF], p_values=[q_len],
    )
    first = table.row(Strategy.FIRST, q_len)
    icf = table.row(Strategy.ICF, q_len)
    assert (first.ndcg10, first.map, first.mrr10) == (icf.ndcg10, icf.map, icf.mrr10)
    assert (first.mean_docs, first.mean_rel_docs) == (icf.mean_docs, icf.mean_rel_docs)


def test_sweep_icf_reaches_baseline_at_lower_cost_than_first(
    small_planted_engine, small_planted, small_planted_qrels
):
    """Frequency-ordered pruning keeps effectiveness with fewer candidates."""
    engine = small_planted_engine
    q_len = engine.config.q_len
    table = engine.sweep(
        small_planted.queries, small_planted_qrels,
        strategies=[Strategy.FIRST, Strategy.ICF], p_values=[1, 2, q_len],
    )
    baseline = table.row(Strategy.FIRST, q_len)
    icf_one = table.row(Strategy.ICF, 1)
    first_one = table.row(Strategy.FIRST, 1)
    assert icf_one.mrr10 >= 0.95 * baseline.mrr10
    assert first_one.mrr10 < icf_one.mrr10
    assert icf_one.mean_docs < baseline.mean_docs


def test_sweep_is_deterministic_across_thread_counts(
    small_planted_engine, small_planted, small_planted_qrels
):
    engine = small_planted_engine
    kwargs = dict(
        strategies=[Strategy.FIRST, Strategy.ICF], p_values=[1, 3, engine.config.q_len]
    )
    serial = engine.sweep(small_planted.queries, small_planted_qrels, **kwargs, threads=1)
    threaded = engine.sweep(small_planted.queries, small_planted_qrels, **kwargs, threads=4)
    assert serial == threaded
    assert serial.to_csv() == threaded.to_csv()


def test_sweep_csv_shape(small_planted_engine, small_planted, small_planted_qrels, tmp_path):
    engine = small_planted_engine
    table = engine.sweep(
        small_planted.queries, small_planted_qrels,
        strategies=[Strategy.FIRST], p_values=[1, 2],
    )
    text = table.to_csv()
    lines = text.splitlines()
    assert lines[0] == CSV_HEADER
    assert len(lines) == 3
    assert lines[1].startswith("first,1,")
    path = tmp_path / "sweep.csv"
    table.write_csv(path)
    assert path.read_text(encoding="utf-8") == text


def test_sweep_validates_inputs(small_planted_engine, small_planted, small_planted_qrels):
    engine = small_planted_engine
    with pytest.raises(InvalidConfigError):
        engine.sweep(small_planted.queries, small_planted_qrels, p_values=[0])
    with pytest.raises(InvalidConfigError):
        engine.sweep(small_planted.queries, small_planted_qrels, p_values=[engine.config.q_len + 1])
    with pytest.raises(InvalidInputError):
        sweep(
            [], small_planted_qrels, engine.index, engine.lexicon, engine.encoder,
            [Strategy.FIRST], [1],
        )
