"""Interaction ingestion, dense-ID datasets, evaluation splits and masking."""

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import DataError, IntegrityError, ParseError, SamplingError, SplitError
from .numerics import RngStream

log = logging.getLogger(__name__)

SPLIT_FORMAT_VERSION = 1
N_MATCHING_NEGATIVES = 99

# (n positives, m negatives) for generation test instances, keyed by dataset.
GENERATION_SAMPLES = {
    "steam": (1, 99),
    "youshu": (5, 495),
    "netease": (10, 990),
}


# ---------------------------------------------------------------------------
# Raw files and ID maps
# ---------------------------------------------------------------------------


@dataclass
class PairFile:
    pairs: list
    n_duplicates: int = 0
    path: str = None

    def __iter__(self):
        return iter(self.pairs)

    def __len__(self):
        return len(self.pairs)


def parse_pairs(lines, path="<memory>"):
    """Parse two-token lines into an ordered, de-duplicated pair list."""
    seen = set()
    pairs = []
    dups = 0
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if len(tokens) != 2:
            raise ParseError(path, lineno, f"expected 2 tokens, got {len(tokens)}: {line!r}")
        pair = (tokens[0], tokens[1])
        if pair in seen:
            dups += 1
            continue
        seen.add(pair)
        pairs.append(pair)
    if not pairs:
        raise DataError(f"{path}: no interaction pairs")
    if dups:
        log.info("%s: collapsed %d duplicate pairs", path, dups)
    return PairFile(pairs, dups, str(path))


def load_pairs(path):
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        return parse_pairs(fh, path)


class IdMap:
    """Bijection between external tokens and contiguous dense indices."""

    def __init__(self, tokens=()):
        self.to_dense = {}
        self.to_external = []
        for tok in tokens:
            self.add(tok)

    def add(self, token):
        idx = self.to_dense.get(token)
        if idx is None:
            idx = len(self.to_external)
            self.to_dense[token] = idx
            self.to_external.append(token)
        return idx

    def __len__(self):
        return len(self.to_external)

    def __getitem__(self, token):
        return self.to_dense[token]

    def __contains__(self, token):
        return token in self.to_dense

    def __eq__(self, other):
        return isinstance(other, IdMap) and self.to_external == other.to_external


# ---------------------------------------------------------------------------
# CSR storage
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class InteractionMatrix:
    """Binary sparse matrix in CSR layout with sorted, unique column indices."""

    n_rows: int
    n_cols: int
    indptr: np.ndarray
    indices: np.ndarray

    def __post_init__(self):
        self.indptr = np.ascontiguousarray(self.indptr, dtype=np.int64)
        self.indices = np.ascontiguousarray(self.indices, dtype=np.int64)
        if self.indptr.shape != (self.n_rows + 1,) or self.indptr[0] != 0 or self.indptr[-1] != len(self.indices):
            raise IntegrityError("malformed CSR row offsets")
        if len(self.indices) and (self.indices.min() < 0 or self.indices.max() >= self.n_cols):
            raise IntegrityError("CSR column index out of range")

    @classmethod
    def from_pairs(cls, rows, cols, n_rows, n_cols):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        if len(rows):
            keys = np.unique(rows * n_cols + cols)
            rows, cols = keys // n_cols, keys % n_cols
        indptr = np.zeros(n_rows + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=n_rows), out=indptr[1:])
        return cls(n_rows, n_cols, indptr, cols)

    @classmethod
    def empty(cls, n_rows, n_cols):
        return cls(n_rows, n_cols, np.zeros(n_rows + 1, dtype=np.int64), np.zeros(0, dtype=np.int64))

    @property
    def shape(self):
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self):
        return len(self.indices)

    def row(self, i):
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def row_lengths(self):
        return np.diff(self.indptr)

    def row_ids(self):
        return np.repeat(np.arange(self.n_rows, dtype=np.int64), self.row_lengths())

    def pairs(self):
        return np.column_stack([self.row_ids(), self.indices])

    def contains(self, i, j):
        r = self.row(i)
        k = np.searchsorted(r, j)
        return k < len(r) and r[k] == j

    def col_counts(self):
        return np.bincount(self.indices, minlength=self.n_cols)

    def to_scipy(self):
        data = np.ones(self.nnz, dtype=np.float64)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=self.shape)

    def row_normalized(self):
        """Scipy CSR with each non-empty row scaled to sum to 1."""
        lengths = self.row_lengths()
        scale = np.divide(1.0, lengths, out=np.zeros(self.n_rows), where=lengths > 0)
        data = np.repeat(scale, lengths)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=self.shape)

    def transpose(self):
        pairs = self.pairs()
        return InteractionMatrix.from_pairs(pairs[:, 1], pairs[:, 0], self.n_cols, self.n_rows)

    def __eq__(self, other):
        return (
            isinstance(other, InteractionMatrix)
            and self.shape == other.shape
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
        )

    def to_bytes(self):
        head = struct.pack("<QQQ", self.n_rows, self.n_cols, self.nnz)
        return head + self.indptr.astype("<u8").tobytes() + self.indices.astype("<u8").tobytes()

    @classmethod
    def from_bytes(cls, blob):
        n_rows, n_cols, nnz = struct.unpack_from("<QQQ", blob, 0)
        off = 24
        indptr = np.frombuffer(blob, dtype="<u8", count=n_rows + 1, offset=off).astype(np.int64)
        off += 8 * (n_rows + 1)
        indices = np.frombuffer(blob, dtype="<u8", count=nnz, offset=off).astype(np.int64)
        if off + 8 * nnz != len(blob):
            raise DataError("CSR blob has trailing bytes")
        return cls(n_rows, n_cols, indptr, indices)


def submatrix_rows(indptr, indices, rows):
    """Gather CSR rows; returns new ``(indptr, indices)`` arrays."""
    rows = np.asarray(rows, dtype=np.int64)
    starts = indptr[rows]
    lengths = indptr[rows + 1] - starts
    new_ptr = np.zeros(len(rows) + 1, dtype=np.int64)
    np.cumsum(lengths, out=new_ptr[1:])
    offsets = np.repeat(starts - new_ptr[:-1], lengths) + np.arange(new_ptr[-1])
    return new_ptr, indices[offsets]


def normalized_rows(indptr, indices, n_cols):
    """Scipy CSR with unit row sums from raw CSR arrays (empty rows stay zero)."""
    lengths = np.diff(indptr)
    scale = np.divide(1.0, lengths, out=np.zeros(len(lengths)), where=lengths > 0)
    return sp.csr_matrix((np.repeat(scale, lengths), indices, indptr), shape=(len(lengths), n_cols))


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Dataset:
    """Users, items and bundles with the three binary interaction matrices.

    ``V`` is user x item, ``R`` is user x bundle and ``X`` is bundle x item
    (row ``b`` holds the items of bundle ``b``).
    """

    V: InteractionMatrix
    R: InteractionMatrix
    X: InteractionMatrix
    users: IdMap
    items: IdMap
    bundles: IdMap
    name: str = "dataset"

    @property
    def n_users(self):
        return self.V.n_rows

    @property
    def n_items(self):
        return self.V.n_cols

    @property
    def n_bundles(self):
        return self.R.n_cols

    @property
    def bundle_sizes(self):
        return self.X.row_lengths()

    def validate(self):
        if self.V.n_rows != self.R.n_rows or self.X.shape != (self.R.n_cols, self.V.n_cols):
            raise IntegrityError(f"inconsistent shapes V{self.V.shape} R{self.R.shape} X{self.X.shape}")
        empty_bundles = np.flatnonzero(self.bundle_sizes == 0)
        if len(empty_bundles):
            raise IntegrityError(f"bundle {self.bundles.to_external[empty_bundles[0]]!r} has no items")
        no_items = np.flatnonzero(self.V.row_lengths() == 0)
        if len(no_items):
            raise IntegrityError(f"user {self.users.to_external[no_items[0]]!r} has no item interactions")
        return self

    def table_summary(self):
        def dens(nnz, a, b):
            return f"{nnz:,} ({100.0 * nnz / (a * b):.2f}%)"

        return {
            "users": self.n_users,
            "bundles": self.n_bundles,
            "items": self.n_items,
            "user_bundle": dens(self.R.nnz, self.n_users, self.n_bundles),
            "user_item": dens(self.V.nnz, self.n_users, self.n_items),
            "bundle_item": dens(self.X.nnz, self.n_bundles, self.n_items),
            "avg_items_in_bundle": f"{self.bundle_sizes.mean():.2f}",
        }


def build_dataset(ui, ub, bi, name="dataset"):
    """Assign dense IDs in first-appearance order and build the CSR matrices.

    Users are numbered over the user-item file then the user-bundle file;
    items over user-item then bundle-item; bundles over bundle-item then
    user-bundle.
    """
    ui, ub, bi = list(ui), list(ub), list(bi)
    users, items, bundles = IdMap(), IdMap(), IdMap()
    for u, i in ui:
        users.add(u)
        items.add(i)
    bundle_items = set()
    for b, i in bi:
        bundles.add(b)
        items.add(i)
        bundle_items.add(b)
    for u, b in ub:
        if b not in bundle_items:
            raise IntegrityError(f"bundle {b!r} has user interactions but no items")
        if u not in users:
            raise IntegrityError(f"user {u!r} has bundle interactions but no item interactions")
        bundles.add(b)

    def matrix(pairs, rmap, cmap):
        rows = np.fromiter((rmap[a] for a, _ in pairs), dtype=np.int64, count=len(pairs))
        cols = np.fromiter((cmap[b] for _, b in pairs), dtype=np.int64, count=len(pairs))
        return InteractionMatrix.from_pairs(rows, cols, len(rmap), len(cmap))

    ds = Dataset(
        V=matrix(ui, users, items),
        R=matrix(ub, users, bundles),
        X=matrix(bi, bundles, items),
        users=users,
        items=items,
        bundles=bundles,
        name=name,
    )
    return ds.validate()


def load_dataset(ui_path, ub_path, bi_path, name="dataset"):
    return build_dataset(load_pairs(ui_path), load_pairs(ub_path), load_pairs(bi_path), name=name)


# ---------------------------------------------------------------------------
# Masking and sampling
# ---------------------------------------------------------------------------


def _n_drop(lengths, ratio):
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must be in [0, 1], got {ratio}")
    # The epsilon guards floor() against products like 0.29 * 100 = 28.999...
    drop = np.floor(ratio * np.asarray(lengths, dtype=np.float64) + 1e-9).astype(np.int64)
    return np.minimum(drop, np.asarray(lengths) - 1)


def mask_rows(indptr, indices, ratio, rng):
    """Drop ``floor(ratio * len)`` entries uniformly from every CSR row.

    At least one entry always survives. Returns new ``(indptr, indices)``
    with surviving columns still sorted within each row.
    """
    lengths = np.diff(indptr)
    if np.any(lengths == 0):
        raise ValueError("mask_rows: cannot mask an empty row")
    drop = _n_drop(lengths, ratio)
    if not drop.any():
        return indptr.copy(), indices.copy()
    row_id = np.repeat(np.arange(len(lengths)), lengths)
    keys = rng.generator.random(len(indices))
    order = np.lexsort((keys, row_id))
    pos_in_row = np.arange(len(indices)) - indptr[row_id]
    keep = np.sort(order[pos_in_row >= drop[row_id]])
    new_ptr = np.zeros_like(indptr)
    np.cumsum(lengths - drop, out=new_ptr[1:])
    return new_ptr, indices[keep]


def mask_nonzeros(indices, ratio, rng):
    """Retain a uniform subset of size ``max(1, n - floor(ratio * n))``."""
    indices = np.sort(np.asarray(indices, dtype=np.int64))
    if len(indices) == 0:
        raise ValueError("mask_nonzeros: empty index set")
    _, kept = mask_rows(np.array([0, len(indices)]), indices, ratio, rng)
    return kept


def sample_negatives(universe_size, excluded, k, rng):
    """Draw ``k`` distinct indices uniformly from ``range(universe_size) - excluded``."""
    allowed = np.ones(universe_size, dtype=bool)
    excluded = np.asarray(list(excluded) if isinstance(excluded, (set, frozenset)) else excluded, dtype=np.int64)
    allowed[excluded] = False
    pool = np.flatnonzero(allowed)
    if len(pool) < k:
        raise SamplingError(
            f"need {k} negatives but only {len(pool)} candidates remain (deficit {k - len(pool)})",
            deficit=k - len(pool),
        )
    return rng.generator.choice(pool, size=k, replace=False)


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GenerationInstance:
    """One held-out (user, bundle) interaction turned into a completion task.

    ``candidates`` is the frozen, shuffled scoring order of positives and
    negatives; ties during ranking resolve by position in that list.
    """

    user: int
    bundle: int
    positives: tuple
    negatives: tuple
    incomplete_items: tuple
    candidates: tuple


@dataclass(eq=False)
class SplitResult:
    train_R: InteractionMatrix
    heldout_bundles: np.ndarray
    matching_val: np.ndarray
    matching_test: np.ndarray
    val_candidates: np.ndarray
    test_candidates: np.ndarray
    generation_test: list
    seed: int
    n_pos: int = 1
    n_neg: int = 99
    holdout_frac: float = 0.1
    skipped_generation: int = 0
    meta: dict = field(default_factory=dict)

    def matching_pairs(self, which):
        if which == "val":
            return self.matching_val, self.val_candidates
        if which == "test":
            return self.matching_test, self.test_candidates
        raise ValueError(f"unknown matching split {which!r}")

    def matching_negatives(self, which):
        """Per evaluated pair, the 99 frozen negatives in candidate order."""
        pairs, cands = self.matching_pairs(which)
        mask = cands != pairs[:, 1:2]
        return cands[mask].reshape(len(cands), -1)

    @property
    def training_bundles(self):
        keep = np.ones(self.train_R.n_cols, dtype=bool)
        keep[self.heldout_bundles] = False
        return np.flatnonzero(keep)


def generation_samples_for(name):
    return GENERATION_SAMPLES.get(str(name).lower(), GENERATION_SAMPLES["steam"])


def make_split(dataset, seed, holdout_frac=0.1, n_pos=None, n_neg=None, n_matching_neg=N_MATCHING_NEGATIVES):
    """Hold out bundles for generation, leave-one-out the rest for matching.

    Users keeping fewer than three bundle interactions after the bundle
    hold-out stay entirely in training and are not evaluated for matching.
    Each random step draws from its own labeled stream.
    """
    if n_pos is None or n_neg is None:
        dn, dm = generation_samples_for(dataset.name)
        n_pos = dn if n_pos is None else n_pos
        n_neg = dm if n_neg is None else n_neg
    n_b = dataset.n_bundles
    if n_b < 10:
        raise SplitError(f"need at least 10 bundles to split, got {n_b}")
    root = RngStream(seed, "split")
    R = dataset.R

    n_hold = max(1, int(math.floor(holdout_frac * n_b + 1e-9)))
    heldout = np.sort(root.child("heldout").generator.choice(n_b, size=n_hold, replace=False))
    is_held = np.zeros(n_b, dtype=bool)
    is_held[heldout] = True

    loo_rng = root.child("leave_one_out").generator
    train_rows, train_cols = [], []
    val, test = [], []
    held_pairs = []
    for u in range(dataset.n_users):
        row = R.row(u)
        held_pairs.extend((u, int(b)) for b in row[is_held[row]])
        remaining = row[~is_held[row]]
        if len(remaining) >= 3:
            pick = loo_rng.choice(len(remaining), size=2, replace=False)
            val.append((u, int(remaining[pick[0]])))
            test.append((u, int(remaining[pick[1]])))
            remaining = np.delete(remaining, pick)
        train_rows.append(np.full(len(remaining), u, dtype=np.int64))
        train_cols.append(remaining)
    train_R = InteractionMatrix.from_pairs(
        np.concatenate(train_rows), np.concatenate(train_cols), dataset.n_users, n_b
    )

    neg_rng = root.child("matching_negatives")

    def candidates_for(pairs):
        out = np.zeros((len(pairs), n_matching_neg + 1), dtype=np.int64)
        for k, (u, b) in enumerate(pairs):
            negs = sample_negatives(n_b, np.concatenate([heldout, R.row(u)]), n_matching_neg, neg_rng)
            cands = np.concatenate([[b], negs])
            neg_rng.generator.shuffle(cands)
            out[k] = cands
        return out

    val_arr = np.asarray(val, dtype=np.int64).reshape(-1, 2)
    test_arr = np.asarray(test, dtype=np.int64).reshape(-1, 2)
    val_cands = candidates_for(val_arr)
    test_cands = candidates_for(test_arr)

    gen_rng = root.child("generation")
    instances = []
    skipped = 0
    for u, b in held_pairs:
        items = dataset.X.row(b)
        if len(items) <= n_pos:
            skipped += 1
            continue
        pos = np.sort(gen_rng.generator.choice(items, size=n_pos, replace=False))
        negs = sample_negatives(dataset.n_items, items, n_neg, gen_rng)
        cands = np.concatenate([pos, negs])
        gen_rng.generator.shuffle(cands)
        instances.append(
            GenerationInstance(
                user=u,
                bundle=b,
                positives=tuple(int(i) for i in pos),
                negatives=tuple(int(i) for i in negs),
                incomplete_items=tuple(int(i) for i in np.setdiff1d(items, pos)),
                candidates=tuple(int(i) for i in cands),
            )
        )
    if skipped:
        log.info("skipped %d generation instances with bundles of <= %d items", skipped, n_pos)
    log.info(
        "split: %d held-out bundles, %d train pairs, %d val, %d test, %d generation instances",
        n_hold, train_R.nnz, len(val_arr), len(test_arr), len(instances),
    )
    return SplitResult(
        train_R=train_R,
        heldout_bundles=heldout,
        matching_val=val_arr,
        matching_test=test_arr,
        val_candidates=val_cands,
        test_candidates=test_cands,
        generation_test=instances,
        seed=int(seed),
        n_pos=int(n_pos),
        n_neg=int(n_neg),
        holdout_frac=float(holdout_frac),
        skipped_generation=skipped,
    )


# ---------------------------------------------------------------------------
# Split directory serialization
# ---------------------------------------------------------------------------


def _write_ids(path, idmap):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k, tok in enumerate(idmap.to_external):
            fh.write(f"{k}\t{tok}\n")


def _read_ids(path):
    idmap = IdMap()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            k, tok = line.rstrip("\n").split("\t")
            if int(k) != idmap.add(tok):
                raise ParseError(path, lineno, "id map indices are not contiguous")
    return idmap


def _ints(seq):
    return ",".join(str(int(x)) for x in seq)


def _parse_ints(text):
    return tuple(int(x) for x in text.split(",")) if text else ()


def write_meta(path, meta):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key, value in meta.items():
            fh.write(f"{key}={value}\n")


def read_meta(path):
    meta = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError(path, lineno, "expected key=value")
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    return meta


def _summary_text(dataset, split):
    s = dataset.table_summary()
    lines = [
        f"dataset: {dataset.name}",
        f"users: {s['users']:,}",
        f"bundles: {s['bundles']:,}",
        f"items: {s['items']:,}",
        f"user-bundle (dens.): {s['user_bundle']}",
        f"user-item (dens.): {s['user_item']}",
        f"bundle-item (dens.): {s['bundle_item']}",
        f"avg. items in bundle: {s['avg_items_in_bundle']}",
        "",
        f"seed: {split.seed}",
        f"held-out bundles: {len(split.heldout_bundles):,}",
        f"training user-bundle pairs: {split.train_R.nnz:,}",
        f"matching validation pairs: {len(split.matching_val):,}",
        f"matching test pairs: {len(split.matching_test):,}",
        f"generation test instances: {len(split.generation_test):,} (n={split.n_pos}, m={split.n_neg})",
        f"generation instances skipped: {split.skipped_generation:,}",
    ]
    return "\n".join(lines) + "\n"


def save_split(out_dir, dataset, split, extra_meta=None):
    """Write the dataset and its split as a self-contained directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": SPLIT_FORMAT_VERSION,
        "dataset": dataset.name,
        "n_users": dataset.n_users,
        "n_items": dataset.n_items,
        "n_bundles": dataset.n_bundles,
        "seed": split.seed,
        "holdout_frac": repr(split.holdout_frac),
        "n_pos": split.n_pos,
        "n_neg": split.n_neg,
        "n_matching_negatives": split.val_candidates.shape[1] - 1 if len(split.val_candidates) else N_MATCHING_NEGATIVES,
        "skipped_generation": split.skipped_generation,
    }
    meta.update(extra_meta or {})
    write_meta(out / "dataset.meta", meta)
    for name, mat in (("V", dataset.V), ("R", dataset.R), ("X", dataset.X), ("train_R", split.train_R)):
        (out / f"{name}.csr").write_bytes(mat.to_bytes())
    _write_ids(out / "users.tsv", dataset.users)
    _write_ids(out / "items.tsv", dataset.items)
    _write_ids(out / "bundles.tsv", dataset.bundles)
    (out / "heldout_bundles.txt").write_text("".join(f"{int(b)}\n" for b in split.heldout_bundles), encoding="utf-8")

    # negatives.bin: u64 n_rows, u64 width, then int64 rows of
    # [split (0=val, 1=test), user, positive bundle, candidates...].
    rows = []
    for flag, (pairs, cands) in enumerate((split.matching_pairs("val"), split.matching_pairs("test"))):
        if len(pairs):
            rows.append(np.column_stack([np.full(len(pairs), flag), pairs, cands]))
    width = 3 + (split.val_candidates.shape[1] if split.val_candidates.size else N_MATCHING_NEGATIVES + 1)
    table = np.concatenate(rows) if rows else np.zeros((0, width), dtype=np.int64)
    with open(out / "negatives.bin", "wb") as fh:
        fh.write(struct.pack("<QQ", table.shape[0], width))
        fh.write(table.astype("<i8").tobytes())

    with open(out / "generation_instances.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("user\tbundle\tpositives\tnegatives\tincomplete_items\tcandidates\n")
        for g in split.generation_test:
            fh.write(
                f"{g.user}\t{g.bundle}\t{_ints(g.positives)}\t{_ints(g.negatives)}\t"
                f"{_ints(g.incomplete_items)}\t{_ints(g.candidates)}\n"
            )
    (out / "summary.txt").write_text(_summary_text(dataset, split), encoding="utf-8")
    return out


def load_split(split_dir):
    """Inverse of :func:`save_split`; returns ``(dataset, split)``."""
    d = Path(split_dir)
    if not (d / "dataset.meta").exists():
        raise DataError(f"{d}: not a split directory (dataset.meta missing)")
    meta = read_meta(d / "dataset.meta")
    if int(meta.get("format_version", -1)) != SPLIT_FORMAT_VERSION:
        raise DataError(f"{d}: unsupported split format {meta.get('format_version')}")
    mats = {n: InteractionMatrix.from_bytes((d / f"{n}.csr").read_bytes()) for n in ("V", "R", "X", "train_R")}
    dataset = Dataset(
        V=mats["V"], R=mats["R"], X=mats["X"],
        users=_read_ids(d / "users.tsv"), items=_read_ids(d / "items.tsv"), bundles=_read_ids(d / "bundles.tsv"),
        name=meta.get("dataset", "dataset"),
    ).validate()
    heldout = np.array(
        [int(x) for x in (d / "heldout_bundles.txt").read_text(encoding="utf-8").split()], dtype=np.int64
    )
    blob = (d / "negatives.bin").read_bytes()
    n_rows, width = struct.unpack_from("<QQ", blob, 0)
    table = np.frombuffer(blob, dtype="<i8", count=n_rows * width, offset=16).astype(np.int64).reshape(n_rows, width)
    val_t, test_t = table[table[:, 0] == 0], table[table[:, 0] == 1]

    instances = []
    with open(d / "generation_instances.tsv", encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            u, b, pos, neg, inc, cands = line.rstrip("\n").split("\t")
            instances.append(
                GenerationInstance(int(u), int(b), _parse_ints(pos), _parse_ints(neg), _parse_ints(inc), _parse_ints(cands))
            )
    split = SplitResult(
        train_R=mats["train_R"],
        heldout_bundles=heldout,
        matching_val=val_t[:, 1:3].copy(),
        matching_test=test_t[:, 1:3].copy(),
        val_candidates=val_t[:, 3:].copy(),
        test_candidates=test_t[:, 3:].copy(),
        generation_test=instances,
        seed=int(meta["seed"]),
        n_pos=int(meta["n_pos"]),
        n_neg=int(meta["n_neg"]),
        holdout_frac=float(meta["holdout_frac"]),
        skipped_generation=int(meta.get("skipped_generation", 0)),
        meta=meta,
    )
    return dataset, split
