"""Ranking metrics, sampled-candidate evaluation harnesses and simple baselines."""

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import normalized_rows, submatrix_rows
from .errors import ContractError, ProtocolError
from .numerics import RngStream

log = logging.getLogger(__name__)

DEFAULT_KS = (5, 10, 20)
REPORT_HEADER = ("task", "k", "ndcg", "recall", "n", "seed", "model")


def rank_candidates(scores):
    """Stable descending order; ties keep the frozen candidate order."""
    scores = np.asarray(scores, dtype=np.float64)
    if np.isnan(scores).any():
        raise ContractError("rank_candidates: NaN score")
    return np.argsort(-scores, axis=-1, kind="stable")


def _discounts(k):
    return 1.0 / np.log2(np.arange(2, k + 2))


def ndcg_at_k(relevance, n_pos, k):
    if n_pos < 1:
        raise ValueError("ndcg_at_k: need at least one positive")
    if k < 1:
        raise ValueError("ndcg_at_k: k must be >= 1")
    rel = np.asarray(relevance, dtype=np.float64)[:k]
    disc = _discounts(k)
    return float(rel @ disc[:len(rel)] / disc[:min(k, n_pos)].sum())


def recall_at_k(relevance, n_pos, k, mode="min"):
    """Hits in the top ``k`` divided by ``min(k, n_pos)`` (or ``n_pos`` with mode="n")."""
    if n_pos < 1:
        raise ValueError("recall_at_k: need at least one positive")
    if k < 1:
        raise ValueError("recall_at_k: k must be >= 1")
    hits = float(np.sum(np.asarray(relevance)[:k]))
    return hits / (min(k, n_pos) if mode == "min" else n_pos)


def batch_metrics(ranked_relevance, n_pos, ks, recall_mode="min"):
    """Mean nDCG@k and Recall@k over rows of a ranked binary relevance matrix."""
    rel = np.asarray(ranked_relevance, dtype=np.float64)
    n_pos = np.broadcast_to(np.asarray(n_pos), (rel.shape[0],))
    if np.any(n_pos < 1):
        raise ValueError("every row needs at least one positive")
    out = {}
    for k in ks:
        disc = _discounts(k)
        kk = min(k, rel.shape[1])
        dcg = rel[:, :kk] @ disc[:kk]
        ideal = np.cumsum(disc)[np.minimum(k, n_pos) - 1]
        hits = rel[:, :kk].sum(axis=1)
        denom = np.minimum(k, n_pos) if recall_mode == "min" else n_pos
        out[k] = (float(np.mean(dcg / ideal)), float(np.mean(hits / denom)))
    return out


@dataclass
class MetricReport:
    task: str
    metrics: dict
    n_evaluated: int
    seed: int = 0
    model: str = "model"
    extra: dict = field(default_factory=dict)

    def ndcg(self, k):
        return self.metrics[k][0]

    def recall(self, k):
        return self.metrics[k][1]

    def rows(self):
        return [
            (self.task, k, f"{nd:.6f}", f"{rc:.6f}", self.n_evaluated, self.seed, self.model)
            for k, (nd, rc) in sorted(self.metrics.items())
        ]

    def to_csv(self, header=True):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(REPORT_HEADER)
        w.writerows(self.rows())
        return buf.getvalue()


# ---------------------------------------------------------------------------
# Scorers
# ---------------------------------------------------------------------------


class ModelScorer:
    """Scores candidates with a trained model in inference mode.

    User latents use the full training bundle interactions (no masking);
    users without any training bundle fall back to their item preference.
    """

    def __init__(self, model, dataset, split, batch_size=1024):
        self.model = model
        self.dataset = dataset
        self.split = split
        self.batch_size = batch_size
        self.name = f"bundlemage-{model.config.variant}"
        self.V_norm = dataset.V.row_normalized()
        self.X_norm = dataset.X.row_normalized()
        self.bundle_table = model.bundle_table(self.X_norm)

    def user_latents(self, users):
        users = np.asarray(users, dtype=np.int64)
        R = self.split.train_R
        out = np.empty((len(users), self.model.config.d))
        for s in range(0, len(users), self.batch_size):
            u = users[s:s + self.batch_size]
            ptr, idx = submatrix_rows(R.indptr, R.indices, u)
            Q_op = normalized_rows(ptr, idx, self.dataset.n_bundles)
            Z, _ = self.model.matching_forward(self.V_norm[u], Q_op, np.diff(ptr) == 0, self.bundle_table)
            out[s:s + len(u)] = Z
        return out

    def score_matching(self, users, candidates):
        Z = self.user_latents(users)
        return np.einsum("ncd,nd->nc", self.bundle_table[candidates], Z)

    def generation_logits(self, users, item_sets):
        """Full item logits for each (user, incomplete item set) pair."""
        Zu = self.user_latents(users)
        lengths = np.array([len(s) for s in item_sets], dtype=np.int64)
        if np.any(lengths == 0):
            raise ContractError("generation needs a non-empty incomplete bundle")
        ptr = np.concatenate([[0], np.cumsum(lengths)])
        idx = np.concatenate([np.asarray(s, dtype=np.int64) for s in item_sets])
        Xb = normalized_rows(ptr, idx, self.dataset.n_items)
        logits, _ = self.model.generation_forward(Zu, Xb)
        return logits

    def score_generation(self, instances, candidates):
        out = np.empty(candidates.shape)
        for s in range(0, len(instances), self.batch_size):
            chunk = instances[s:s + self.batch_size]
            logits = self.generation_logits([g.user for g in chunk], [g.incomplete_items for g in chunk])
            out[s:s + len(chunk)] = np.take_along_axis(logits, candidates[s:s + len(chunk)], axis=1)
        return out


class PopScorer:
    """Bundle counts from training interactions; item counts from user-item data."""

    name = "pop"

    def __init__(self, bundle_counts=None, item_counts=None):
        self.bundle_counts = None if bundle_counts is None else np.asarray(bundle_counts, dtype=np.float64)
        self.item_counts = None if item_counts is None else np.asarray(item_counts, dtype=np.float64)

    @classmethod
    def from_split(cls, dataset, split):
        return cls(split.train_R.col_counts(), dataset.V.col_counts())

    def score_matching(self, users, candidates):
        return self.bundle_counts[candidates]

    def score_generation(self, instances, candidates):
        return self.item_counts[candidates]


def pop_matching_scorer(train_R):
    return PopScorer(bundle_counts=train_R.col_counts())


def pop_generation_scorer(V):
    return PopScorer(item_counts=V.col_counts())


class RandomScorer:
    name = "random"

    def __init__(self, seed=0):
        self.seed = seed

    def score_matching(self, users, candidates):
        return RngStream(self.seed, "random_scorer/matching").generator.random(np.shape(candidates))

    def score_generation(self, instances, candidates):
        return RngStream(self.seed, "random_scorer/generation").generator.random(np.shape(candidates))


def random_scorer(rng_seed=0):
    return RandomScorer(rng_seed)


# ---------------------------------------------------------------------------
# Harnesses
# ---------------------------------------------------------------------------


def _ranked_relevance(scores, candidates, relevant):
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != candidates.shape:
        raise ContractError(f"scorer returned shape {scores.shape}, expected {candidates.shape}")
    if not np.all(np.isfinite(scores)):
        raise ContractError("scorer returned non-finite scores")
    order = rank_candidates(scores)
    return np.take_along_axis(relevant, order, axis=1)


def evaluate_matching(scorer, split, ks=DEFAULT_KS, which="test", recall_mode="min"):
    """Score each held-out (user, bundle) against its frozen negatives."""
    pairs, candidates = split.matching_pairs(which)
    if len(pairs) == 0:
        raise ProtocolError(f"no matching {which} pairs in split")
    if candidates is None or candidates.shape[0] != len(pairs) or candidates.shape[1] < 2:
        raise ProtocolError(f"frozen negatives missing for matching {which} pairs")
    relevant = candidates == pairs[:, 1:2]
    if not np.all(relevant.sum(axis=1) == 1):
        raise ProtocolError("each matching candidate list must contain its positive exactly once")
    scores = scorer.score_matching(pairs[:, 0], candidates)
    rel = _ranked_relevance(scores, candidates, relevant)
    metrics = batch_metrics(rel, 1, ks, recall_mode)
    return MetricReport("matching", metrics, len(pairs), split.seed, getattr(scorer, "name", "model"))


def generation_candidates(split):
    instances = split.generation_test
    if not instances:
        raise ProtocolError("no generation test instances in split")
    held = set(int(b) for b in split.heldout_bundles)
    for g in instances:
        if g.bundle not in held:
            raise ProtocolError(f"generation instance references non-held-out bundle {g.bundle}")
    candidates = np.array([g.candidates for g in instances], dtype=np.int64)
    relevant = np.zeros(candidates.shape, dtype=bool)
    for r, g in enumerate(instances):
        relevant[r] = np.isin(candidates[r], g.positives)
    return instances, candidates, relevant


def evaluate_generation(scorer, split, ks=DEFAULT_KS, recall_mode="min"):
    instances, candidates, relevant = generation_candidates(split)
    scores = scorer.score_generation(instances, candidates)
    rel = _ranked_relevance(scores, candidates, relevant)
    n_pos = relevant.sum(axis=1)
    metrics = batch_metrics(rel, n_pos, ks, recall_mode)
    return MetricReport("generation", metrics, len(instances), split.seed, getattr(scorer, "name", "model"))
