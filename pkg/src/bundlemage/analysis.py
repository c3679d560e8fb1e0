"""Dataset analyses: item/bundle preference similarity and popularity bias."""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class UserSimilarityRow:
    user: int
    cosine: float


def _rowwise_dot(A, B):
    return np.asarray(A.multiply(B).sum(axis=1)).ravel()


def preference_similarity(dataset, chunk=2048):
    """Per-user cosine between item-side and bundle-side preference vectors.

    Each item is represented by the multi-hot vector of users who interacted
    with it. A user's item preference averages those vectors over their
    interacted items; their bundle preference averages them over the union of
    items in their interacted bundles. Averaging scales do not affect the
    cosine, so both are computed through the item co-interaction Gram matrix.
    Users without any bundle are skipped. Returns rows sorted by descending
    cosine (ties by user index).
    """
    V = dataset.V.to_scipy()
    S = (dataset.R.to_scipy() @ dataset.X.to_scipy()).tocsr()
    S.data[:] = 1.0
    gram = (V.T @ V).tocsr()
    has_bundle = np.diff(S.indptr) > 0
    skipped = int((~has_bundle).sum())
    if skipped:
        log.info("preference_similarity: skipped %d users without bundle interactions", skipped)

    cos = np.full(dataset.n_users, np.nan)
    for start in range(0, dataset.n_users, chunk):
        sl = slice(start, min(start + chunk, dataset.n_users))
        Vc, Sc = V[sl], S[sl]
        VG, SG = Vc @ gram, Sc @ gram
        num = _rowwise_dot(VG, Sc)
        na = _rowwise_dot(VG, Vc)
        nb = _rowwise_dot(SG, Sc)
        denom = np.sqrt(na * nb)
        cos[sl] = np.divide(num, denom, out=np.zeros_like(num), where=denom > 0)
    users = np.flatnonzero(has_bundle)
    values = np.clip(cos[users], 0.0, 1.0)
    order = np.lexsort((users, -values))
    return [UserSimilarityRow(int(users[k]), float(values[k])) for k in order]


def item_popularity_percentiles(dataset):
    """Item percentile in [100/N_i, 100]: rank by descending user count over N_i.

    Tied items share the mean of their rank positions.
    """
    counts = dataset.V.col_counts()
    ranks = rankdata(-counts, method="average")
    return ranks / dataset.n_items * 100.0


def popularity_bias_score(dataset):
    """Mean over bundles of the mean popularity percentile of their items (in %)."""
    pct = item_popularity_percentiles(dataset)
    X = dataset.X
    per_bundle = np.add.reduceat(pct[X.indices], X.indptr[:-1]) / X.row_lengths()
    return float(per_bundle.mean())


def similarity_csv(rows, dataset=None):
    lines = ["user_rank,user_id,cosine"]
    for rank, row in enumerate(rows, start=1):
        uid = dataset.users.to_external[row.user] if dataset is not None else row.user
        lines.append(f"{rank},{uid},{row.cosine:.6f}")
    return "\n".join(lines) + "\n"


def popularity_csv(dataset, score=None):
    score = popularity_bias_score(dataset) if score is None else score
    return f"dataset,popularity_score_pct\n{dataset.name},{score:.4f}\n"
