import filecmp
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bundlemage.data import (
    IdMap,
    InteractionMatrix,
    build_dataset,
    load_pairs,
    load_split,
    make_split,
    mask_nonzeros,
    mask_rows,
    parse_pairs,
    sample_negatives,
    save_split,
)
from bundlemage.errors import DataError, IntegrityError, ParseError, SamplingError, SplitError
from bundlemage.numerics import RngStream

from synthetic import synthetic_pairs


def _dataset(seed=0, **kw):
    ui, ub, bi = synthetic_pairs(seed=seed, **kw)
    return build_dataset(ui, ub, bi, name="steam")


@pytest.fixture(scope="module")
def medium():
    return _dataset(n_users=150, n_items=300, n_bundles=160, n_groups=4)


# -- raw files --------------------------------------------------------------


def test_load_pairs_direct(tmp_path):
    f = tmp_path / "ub.tsv"
    f.write_text("u1\tb1\nu1\tb2\n", encoding="utf-8")
    assert list(load_pairs(f)) == [("u1", "b1"), ("u1", "b2")]


def test_load_pairs_dedup_and_comments(tmp_path):
    f = tmp_path / "ub.tsv"
    f.write_text("# header\nu1\tb1\n\nu1\tb1\nu2 b1\n", encoding="utf-8")
    pf = load_pairs(f)
    assert pf.pairs == [("u1", "b1"), ("u2", "b1")]
    assert pf.n_duplicates == 1


def test_parse_error_reports_line():
    with pytest.raises(ParseError) as info:
        parse_pairs(["a\tb", "a b c"], "x.tsv")
    assert info.value.lineno == 2


def test_empty_file_is_data_error(tmp_path):
    f = tmp_path / "empty.tsv"
    f.write_text("# nothing\n", encoding="utf-8")
    with pytest.raises(DataError):
        load_pairs(f)


def test_idmap_bijection():
    m = IdMap(["x", "y", "x", "z"])
    assert len(m) == 3
    assert [m[t] for t in "xyz"] == [0, 1, 2]
    assert m.to_external == ["x", "y", "z"]


# -- matrices --------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 9)), max_size=40))
def test_interaction_matrix_invariants_and_blob_roundtrip(pairs):
    rows = np.array([p[0] for p in pairs], dtype=np.int64)
    cols = np.array([p[1] for p in pairs], dtype=np.int64)
    M = InteractionMatrix.from_pairs(rows, cols, 7, 10)
    assert M.nnz == len(set(pairs))
    for r in range(7):
        row = M.row(r)
        assert np.all(np.diff(row) > 0)
        assert set(row.tolist()) == {c for rr, c in pairs if rr == r}
    back = InteractionMatrix.from_bytes(M.to_bytes())
    assert back == M
    assert back.to_bytes() == M.to_bytes()


def test_blob_layout_is_little_endian_u64():
    M = InteractionMatrix.from_pairs(np.array([0, 1]), np.array([2, 0]), 2, 3)
    blob = M.to_bytes()
    header = np.frombuffer(blob[:24], dtype="<u8")
    np.testing.assert_array_equal(header, [2, 3, 2])
    assert len(blob) == 24 + 8 * 3 + 8 * 2


# -- dataset ----------------------------------------------------------------


def test_minimal_dataset():
    ds = build_dataset([("u", "i")], [("u", "b")], [("b", "i")])
    assert (ds.n_users, ds.n_items, ds.n_bundles) == (1, 1, 1)
    np.testing.assert_array_equal(ds.bundle_sizes, [1])


def test_first_appearance_ids():
    ds = build_dataset([("u2", "i9"), ("u1", "i3")], [("u1", "bB")], [("bA", "i3"), ("bB", "i7")])
    assert ds.users.to_external == ["u2", "u1"]
    assert ds.items.to_external == ["i9", "i3", "i7"]
    assert ds.bundles.to_external == ["bA", "bB"]


def test_bundle_without_items_rejected():
    with pytest.raises(IntegrityError, match="b2"):
        build_dataset([("u", "i")], [("u", "b2")], [("b1", "i")])


def test_user_without_items_rejected():
    with pytest.raises(IntegrityError, match="u9"):
        build_dataset([("u", "i")], [("u9", "b1")], [("b1", "i")])


# -- masking ----------------------------------------------------------------


@pytest.mark.parametrize("size,ratio,kept", [(4, 0.5, 2), (1, 0.5, 1), (3, 0.5, 2), (10, 0.0, 10), (5, 1.0, 1)])
def test_mask_counts(size, ratio, kept):
    out = mask_nonzeros(np.arange(size) * 3, ratio, RngStream(0, "m"))
    assert len(out) == kept
    assert set(out.tolist()) <= set((np.arange(size) * 3).tolist())


def test_mask_empty_rejected():
    with pytest.raises(ValueError):
        mask_nonzeros([], 0.5, RngStream(0))


@settings(max_examples=80, deadline=None)
@given(st.lists(st.integers(1, 12), min_size=1, max_size=10), st.floats(0, 1), st.integers(0, 2**31))
def test_mask_rows_subset_and_size(lengths, ratio, seed):
    indptr = np.concatenate([[0], np.cumsum(lengths)])
    indices = np.concatenate([np.sort(np.random.default_rng(seed).choice(50, n, replace=False)) for n in lengths])
    ptr, idx = mask_rows(indptr, indices, ratio, RngStream(seed, "m"))
    for r, n in enumerate(lengths):
        kept = idx[ptr[r]:ptr[r + 1]]
        orig = indices[indptr[r]:indptr[r + 1]]
        assert len(kept) == max(1, n - math.floor(ratio * n + 1e-9))
        assert set(kept.tolist()) <= set(orig.tolist())
        assert np.all(np.diff(kept) > 0)


def test_mask_is_uniform():
    counts = np.zeros(6)
    for s in range(3000):
        counts[mask_nonzeros(np.arange(6), 0.5, RngStream(s, "u"))] += 1
    expected = 3000 * 0.5
    assert np.all(np.abs(counts - expected) < 4 * math.sqrt(3000 * 0.25))


# -- negatives --------------------------------------------------------------


def test_negatives_forced_complement():
    out = sample_negatives(100, [17], 99, RngStream(1, "n"))
    assert sorted(out.tolist()) == [i for i in range(100) if i != 17]


def test_negatives_exhaustion_reports_deficit():
    with pytest.raises(SamplingError) as info:
        sample_negatives(5, np.arange(5), 1, RngStream(0))
    assert info.value.deficit == 1


def test_negatives_uniform_chi_square():
    n, k, trials = 10_000, 99, 10_000
    rng = RngStream(7, "chi")
    counts = np.zeros(n)
    for _ in range(trials):
        counts[sample_negatives(n, [], k, rng)] += 1
    p = k / n
    expected = trials * p
    sigma = math.sqrt(trials * p * (1 - p))
    z = (counts - expected) / sigma
    # Each count within 3 sigma for the bulk; overall chi-square near its dof.
    assert np.mean(np.abs(z) < 3) > 0.99
    chi2 = float(np.sum(z ** 2))
    assert abs(chi2 - n) < 5 * math.sqrt(2 * n)


# -- splits -----------------------------------------------------------------


def _leave_one_out_dataset(user_bundles, n_bundles=12):
    ui = [(u, "i0") for u in user_bundles]
    ub = [(u, f"b{b}") for u, bs in user_bundles.items() for b in bs]
    bi = [(f"b{b}", f"i{b % 3}") for b in range(n_bundles)]
    return build_dataset(ui, ub, bi)


def test_leave_one_out_arithmetic():
    ds = _leave_one_out_dataset({"a": [0, 1, 2, 3, 4], "b": [5, 6]}, n_bundles=12)
    # The user's own bundles must survive the hold-out for the rule to be visible.
    split = None
    for seed in range(200):
        split = make_split(ds, seed, n_matching_neg=3)
        if not np.isin(np.arange(7), split.heldout_bundles).any():
            break
    a, b = ds.users["a"], ds.users["b"]
    assert len(split.train_R.row(a)) == 3
    assert (split.matching_val[:, 0] == a).sum() == 1
    assert (split.matching_test[:, 0] == a).sum() == 1
    assert len(split.train_R.row(b)) == 2
    assert b not in split.matching_val[:, 0] and b not in split.matching_test[:, 0]


def test_split_needs_ten_bundles():
    ds = _leave_one_out_dataset({"a": [0, 1, 2]}, n_bundles=9)
    with pytest.raises(SplitError):
        make_split(ds, 0)


def test_heldout_count_is_floor_of_ten_percent():
    ds = _dataset(n_users=400, n_items=3000, n_bundles=615, n_groups=5)
    assert ds.n_bundles == 615
    split = make_split(ds, 42)
    assert len(split.heldout_bundles) == 61


def _pairs(M):
    return {tuple(p) for p in M.pairs().tolist()}


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_split_invariants(medium, seed):
    split = make_split(medium, seed, n_matching_neg=20, n_neg=30)
    R = _pairs(medium.R)
    train = _pairs(split.train_R)
    val = {tuple(p) for p in split.matching_val.tolist()}
    test = {tuple(p) for p in split.matching_test.tolist()}
    held = set(split.heldout_bundles.tolist())
    held_pairs = {p for p in R if p[1] in held}
    parts = [train, val, test, held_pairs]
    assert sum(len(p) for p in parts) == len(R)
    assert set().union(*parts) == R
    assert not any(b in held for _, b in train)
    assert not any(b in held for _, b in val | test)
    for which in ("val", "test"):
        pairs, cands = split.matching_pairs(which)
        negs = split.matching_negatives(which)
        assert negs.shape == (len(pairs), 20)
        for (u, b), row, neg in zip(pairs, cands, negs):
            assert (row == b).sum() == 1
            assert len(set(row.tolist())) == len(row)
            assert not set(neg.tolist()) & set(medium.R.row(u).tolist())
            assert not set(neg.tolist()) & held
    for g in split.generation_test:
        items = set(medium.X.row(g.bundle).tolist())
        assert g.bundle in held
        assert (g.user, g.bundle) in R
        assert set(g.positives) | set(g.incomplete_items) == items
        assert not set(g.positives) & set(g.incomplete_items)
        assert g.incomplete_items
        assert len(g.positives) == split.n_pos and len(g.negatives) == 30
        assert not set(g.negatives) & items
        assert sorted(g.candidates) == sorted(g.positives + g.negatives)


def test_generation_skips_small_bundles():
    ds = _dataset(n_users=80, n_items=60, n_bundles=40)
    split = make_split(ds, 3, n_pos=3, n_neg=10, n_matching_neg=10)
    held = set(split.heldout_bundles.tolist())
    eligible = sum(1 for u, b in ds.R.pairs().tolist() if b in held and len(ds.X.row(b)) > 3)
    assert len(split.generation_test) == eligible
    assert split.skipped_generation == sum(1 for u, b in ds.R.pairs().tolist() if b in held) - eligible


def test_generation_sample_sizes_by_dataset_name():
    from bundlemage.data import generation_samples_for

    assert generation_samples_for("steam") == (1, 99)
    assert generation_samples_for("Youshu") == (5, 495)
    assert generation_samples_for("netease") == (10, 990)


def test_same_seed_same_split(medium):
    a = make_split(medium, 11, n_matching_neg=20, n_neg=30)
    b = make_split(medium, 11, n_matching_neg=20, n_neg=30)
    assert a.train_R == b.train_R
    np.testing.assert_array_equal(a.val_candidates, b.val_candidates)
    np.testing.assert_array_equal(a.test_candidates, b.test_candidates)
    assert a.generation_test == b.generation_test
    c = make_split(medium, 12, n_matching_neg=20, n_neg=30)
    assert not np.array_equal(a.heldout_bundles, c.heldout_bundles) or a.train_R != c.train_R


def test_split_directory_roundtrip(tmp_path, medium):
    split = make_split(medium, 5, n_matching_neg=20, n_neg=30)
    save_split(tmp_path / "s", medium, split)
    ds2, split2 = load_split(tmp_path / "s")
    for name in ("V", "R", "X"):
        assert getattr(ds2, name).to_bytes() == getattr(medium, name).to_bytes()
    assert split2.train_R.to_bytes() == split.train_R.to_bytes()
    assert ds2.users == medium.users and ds2.items == medium.items and ds2.bundles == medium.bundles
    np.testing.assert_array_equal(split2.heldout_bundles, split.heldout_bundles)
    np.testing.assert_array_equal(split2.matching_val, split.matching_val)
    np.testing.assert_array_equal(split2.test_candidates, split.test_candidates)
    assert split2.generation_test == split.generation_test
    # Saving the reloaded split reproduces every file byte for byte.
    save_split(tmp_path / "t", ds2, split2)
    names = sorted(p.name for p in (tmp_path / "s").iterdir())
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "s", tmp_path / "t", names, shallow=False)
    assert not mismatch and not errors


def test_load_split_rejects_non_split(tmp_path):
    with pytest.raises(DataError):
        load_split(tmp_path)
