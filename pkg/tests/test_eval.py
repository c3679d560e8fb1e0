import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bundlemage.data import GenerationInstance, InteractionMatrix, SplitResult
from bundlemage.errors import ContractError, ProtocolError
from bundlemage.eval import (
    MetricReport,
    PopScorer,
    RandomScorer,
    batch_metrics,
    evaluate_generation,
    evaluate_matching,
    ndcg_at_k,
    pop_generation_scorer,
    pop_matching_scorer,
    rank_candidates,
    recall_at_k,
)

import oracles


# -- ranking ----------------------------------------------------------------


def test_rank_candidates_examples():
    np.testing.assert_array_equal(rank_candidates([3, 1, 2]), [0, 2, 1])
    np.testing.assert_array_equal(rank_candidates([0.5] * 6), np.arange(6))
    with pytest.raises(ContractError):
        rank_candidates([1.0, np.nan])


def test_rank_candidates_matches_argsort_oracle():
    scores = np.random.default_rng(0).normal(size=100)
    expected = sorted(range(100), key=lambda i: (-scores[i], i))
    np.testing.assert_array_equal(rank_candidates(scores), expected)


# -- metrics ----------------------------------------------------------------


def test_ndcg_examples():
    assert ndcg_at_k([1, 0, 0, 0, 0], 1, 5) == 1.0
    assert abs(ndcg_at_k([0, 0, 1, 0, 0], 1, 5) - 0.5) < 1e-15
    assert abs(ndcg_at_k([1, 1, 1, 1, 1], 5, 5) - 1.0) < 1e-15
    assert abs(ndcg_at_k([0, 1] + [0] * 98, 1, 5) - 1 / math.log2(3)) < 1e-15
    with pytest.raises(ValueError):
        ndcg_at_k([0, 0], 0, 5)


def test_recall_examples():
    assert recall_at_k([0] * 5 + [1], 1, 5) == 0.0
    assert recall_at_k([0, 0, 0, 0, 1], 1, 5) == 1.0
    assert recall_at_k([1, 1, 0, 1, 1] + [1] * 6, 10, 5) == 0.8
    assert recall_at_k([1, 1, 0, 1, 1] + [1] * 6, 10, 5, mode="n") == 0.4
    with pytest.raises(ValueError):
        recall_at_k([1], 0, 5)


def test_metrics_match_brute_force_exhaustively():
    checked, worst = oracles.exhaustive_metric_errors(max_n=6)
    assert checked > 200_000
    assert worst < 1e-12


rel_lists = st.lists(st.integers(0, 1), min_size=1, max_size=30).filter(any)


@given(rel_lists, st.integers(1, 25))
def test_metrics_in_unit_interval_and_one_iff_ideal(rel, k):
    n_pos = sum(rel)
    nd, rc = ndcg_at_k(rel, n_pos, k), recall_at_k(rel, n_pos, k)
    assert 0.0 <= nd <= 1.0 + 1e-12 and 0.0 <= rc <= 1.0
    ideal = all(rel[: min(k, n_pos)])
    assert (abs(nd - 1.0) < 1e-12) == ideal
    # Recall ignores order inside the top k.
    assert (rc == 1.0) == (sum(rel[:k]) == min(k, n_pos))


@given(rel_lists, st.integers(1, 25), st.data())
def test_ndcg_monotone_under_upward_swap(rel, k, data):
    pos = [j for j in range(len(rel)) if rel[j]]
    neg = [j for j in range(len(rel)) if not rel[j]]
    if not neg:
        return
    p = data.draw(st.sampled_from(pos))
    above = [j for j in neg if j < p]
    if not above:
        return
    q = data.draw(st.sampled_from(above))
    swapped = list(rel)
    swapped[p], swapped[q] = swapped[q], swapped[p]
    assert ndcg_at_k(swapped, sum(rel), k) >= ndcg_at_k(rel, sum(rel), k) - 1e-15


def test_report_csv():
    r = MetricReport("matching", {5: (0.5, 0.25), 10: (0.75, 1.0)}, 7, seed=3, model="m")
    assert r.to_csv().splitlines() == [
        "task,k,ndcg,recall,n,seed,model",
        "matching,5,0.500000,0.250000,7,3,m",
        "matching,10,0.750000,1.000000,7,3,m",
    ]


# -- harnesses --------------------------------------------------------------


def _matching_split(n_pairs, n_cands=100, seed=0):
    rng = np.random.default_rng(seed)
    pairs = np.column_stack([np.arange(n_pairs), np.zeros(n_pairs, dtype=np.int64)])
    cands = np.array([rng.permutation(n_cands) for _ in range(n_pairs)])
    empty = np.zeros((0, 2), dtype=np.int64)
    return SplitResult(
        train_R=InteractionMatrix.empty(n_pairs, n_cands),
        heldout_bundles=np.array([], dtype=np.int64),
        matching_val=empty,
        matching_test=pairs,
        val_candidates=np.zeros((0, n_cands), dtype=np.int64),
        test_candidates=cands,
        generation_test=[],
        seed=seed,
    )


def _generation_split(n_instances, n_pos=1, n_neg=99, seed=0):
    rng = np.random.default_rng(seed)
    instances = []
    for k in range(n_instances):
        perm = rng.permutation(n_pos + n_neg + 1)
        pos, neg, inc = perm[:n_pos], perm[n_pos:n_pos + n_neg], perm[-1:]
        cands = rng.permutation(np.concatenate([pos, neg]))
        instances.append(GenerationInstance(k, 0, tuple(pos.tolist()), tuple(neg.tolist()),
                                            tuple(inc.tolist()), tuple(cands.tolist())))
    split = _matching_split(1, seed=seed)
    split.generation_test = instances
    split.heldout_bundles = np.array([0])
    return split


class RelevanceScorer:
    """Scores candidates by (signed) relevance."""

    name = "oracle"

    def __init__(self, split, sign=1.0, rank_of_positive=None):
        self.split, self.sign = split, sign

    def score_matching(self, users, candidates):
        return self.sign * (candidates == self.split.matching_test[:, 1:2]).astype(float)

    def score_generation(self, instances, candidates):
        return self.sign * np.array([np.isin(c, g.positives) for g, c in zip(instances, candidates)], dtype=float)


def test_matching_oracle_and_anti_oracle():
    split = _matching_split(50)
    best = evaluate_matching(RelevanceScorer(split), split)
    assert all(best.ndcg(k) == 1.0 and best.recall(k) == 1.0 for k in (5, 10, 20))
    worst = evaluate_matching(RelevanceScorer(split, -1.0), split)
    assert worst.ndcg(20) == 0.0 and worst.recall(20) == 0.0


def test_matching_random_scorer_recall():
    split = _matching_split(10_000, seed=1)
    report = evaluate_matching(RandomScorer(3), split)
    assert abs(report.recall(5) - 0.05) < 0.01
    expected_ndcg20 = sum(0.01 / math.log2(r + 1) for r in range(1, 21))
    assert abs(report.ndcg(20) - expected_ndcg20) < 0.01


def test_matching_protocol_errors():
    split = _matching_split(3)
    split.test_candidates = split.test_candidates[:2]
    with pytest.raises(ProtocolError):
        evaluate_matching(RandomScorer(0), split)
    with pytest.raises(ProtocolError):
        evaluate_matching(RandomScorer(0), _matching_split(3), which="val")


def test_generation_oracle_and_closed_form():
    split = _generation_split(20, n_pos=5, n_neg=20)
    report = evaluate_generation(RelevanceScorer(split), split)
    assert all(report.ndcg(k) == 1.0 and report.recall(k) == 1.0 for k in (5, 10, 20))

    split = _generation_split(1)
    g = split.generation_test[0]
    scores = np.zeros((1, 100))
    c = np.array(g.candidates)
    j = int(np.flatnonzero(c == g.positives[0])[0])
    scores[0, j] = 0.5
    scores[0, (j + 1) % 100] = 1.0

    class Fixed:
        name = "fixed"

        def score_generation(self, instances, candidates):
            return scores

    assert abs(evaluate_generation(Fixed(), split).ndcg(5) - 1 / math.log2(3)) < 1e-12


def test_generation_random_scorer():
    split = _generation_split(10_000, seed=2)
    report = evaluate_generation(RandomScorer(4), split)
    assert abs(report.recall(5) - 0.05) < 0.01
    assert abs(report.ndcg(20) - sum(0.01 / math.log2(r + 1) for r in range(1, 21))) < 0.01


def test_generation_rejects_non_heldout_bundle():
    split = _generation_split(3)
    split.heldout_bundles = np.array([7])
    with pytest.raises(ProtocolError):
        evaluate_generation(RandomScorer(0), split)
    split.generation_test = []
    with pytest.raises(ProtocolError):
        evaluate_generation(RandomScorer(0), split)


def test_random_scorer_is_seeded():
    split = _matching_split(200)
    a = evaluate_matching(RandomScorer(9), split).to_csv()
    b = evaluate_matching(RandomScorer(9), split).to_csv()
    c = evaluate_matching(RandomScorer(10), split).to_csv()
    assert a == b != c


def test_pop_scorers():
    R = InteractionMatrix.from_pairs(np.array([0, 1, 2, 0]), np.array([0, 0, 0, 1]), 3, 2)
    counts = pop_matching_scorer(R).score_matching(None, np.array([[1, 0]]))
    np.testing.assert_array_equal(counts, [[1, 3]])
    assert np.argmax(counts[0]) == 1
    V = InteractionMatrix.from_pairs(np.array([0, 1]), np.array([2, 2]), 2, 3)
    np.testing.assert_array_equal(pop_generation_scorer(V).score_generation(None, np.array([[0, 2]])), [[0, 2]])


def test_pop_ties_follow_frozen_candidate_order():
    split = _matching_split(500, seed=5)
    pop = PopScorer(bundle_counts=np.ones(100))
    report = evaluate_matching(pop, split)
    # All scores tie, so the positive's rank is its position in the frozen shuffle.
    pos = np.array([int(np.flatnonzero(c == 0)[0]) for c in split.test_candidates])
    assert abs(report.recall(5) - np.mean(pos < 5)) < 1e-12


def test_reports_are_deterministic():
    split = _generation_split(300, seed=6)
    assert evaluate_generation(RandomScorer(1), split).to_csv() == evaluate_generation(RandomScorer(1), split).to_csv()
