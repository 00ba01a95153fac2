import csv

import numpy as np
import pytest

from policyprune.adapters import MergedAdapterSet, SiteFactors
from policyprune.errors import DegenerateScaleError, DimensionError, UsageError
from policyprune.masking import (
    ImportanceScale,
    build_mask,
    estimate_scale,
    importance_scores,
    mask_apply,
    newly_pruned,
    prune_threshold,
    write_mask_csv,
)


def _merged_from_flat(values):
    """One site whose A factor is the given 1 x d row; B is a dummy 1x1."""
    a = np.asarray(values, dtype=np.float64).reshape(1, -1)
    return MergedAdapterSet([SiteFactors("q", a, np.array([[1.0]]))])


def test_estimate_scale_hand_value():
    got = estimate_scale([np.array([3.0, 4.0]), np.array([0.0, 0.0])])
    assert got.s == 2.5  # mean of norms 5 and 0


def test_estimate_scale_unit_and_constant_cases():
    assert estimate_scale([np.array([1.0, 0.0, 0.0])]).s == 1.0
    v = np.array([1.0, 2.0, 2.0])  # norm 3
    assert estimate_scale([v, v, v, v]).s == 3.0


def test_estimate_scale_errors():
    with pytest.raises(UsageError):
        estimate_scale([])
    with pytest.raises(DegenerateScaleError):
        estimate_scale([np.zeros(3), np.zeros(3)])
    with pytest.raises(DimensionError):
        estimate_scale([np.zeros(3), np.zeros(4)])
    with pytest.raises(DegenerateScaleError):
        ImportanceScale(-1.0)


def test_importance_scores_hand_value():
    got = importance_scores(np.array([-2.0, 1.0, 0.0]), ImportanceScale(2.0))
    np.testing.assert_array_equal(got, [4.0, 2.0, 0.0])


def test_importance_ordering_independent_of_scale():
    rng = np.random.default_rng(17)
    vals = rng.normal(size=64)
    base = np.argsort(importance_scores(vals, ImportanceScale(1.0)))
    for s in (1e-6, 0.5, 3.0, 1e6):
        np.testing.assert_array_equal(
            np.argsort(importance_scores(vals, ImportanceScale(s))), base
        )


def test_prune_threshold_hand_values():
    scores = np.array([0.1, 0.5, 0.3, 0.9])
    assert prune_threshold(scores, 0.5) == (2, 0.3)
    assert prune_threshold(scores, 0.0) == (0, float("-inf"))
    assert prune_threshold(scores, 1.0) == (4, 0.9)
    with pytest.raises(UsageError):
        prune_threshold(scores, 1.5)
    with pytest.raises(UsageError):
        prune_threshold(np.array([]), 0.5)


def test_build_mask_hand_value():
    merged = _merged_from_flat([0.1, 0.5, 0.3, 0.9])
    mask = build_mask(merged, 0.5, ImportanceScale(1.0))
    np.testing.assert_array_equal(mask.per_tensor[1], [0, 1, 0, 1])
    st = mask.stats[1]
    assert (st.d, st.k, st.tau, st.fraction) == (4, 2, 0.3, 0.5)


def test_build_mask_ties_prune_all_tied_entries():
    merged = _merged_from_flat([0.3, 0.3, 0.5, 0.9])
    mask = build_mask(merged, 0.25, ImportanceScale(1.0))
    # k=1 but both entries tied at tau=0.3 go
    np.testing.assert_array_equal(mask.per_tensor[1], [0, 0, 1, 1])
    assert mask.stats[1].k == 1
    assert mask.stats[1].fraction == 0.5


def test_build_mask_low_ratio_floor():
    merged = _merged_from_flat(np.arange(1.0, 11.0))
    mask = build_mask(merged, 0.10, ImportanceScale(1.0))
    assert int(10 - mask.per_tensor[1].sum()) == 1


def test_mask_scale_invariance():
    rng = np.random.default_rng(23)
    merged = MergedAdapterSet(
        [SiteFactors("q", rng.normal(size=(4, 7)), rng.normal(size=(5, 4)))]
    )
    base = build_mask(merged, 0.4, ImportanceScale(1.0))
    for c in (1e-3, 0.7, 42.0, 1e5):
        other = build_mask(merged, 0.4, ImportanceScale(c))
        for tid in base.per_tensor:
            np.testing.assert_array_equal(base.per_tensor[tid], other.per_tensor[tid])


def test_mask_nestedness():
    rng = np.random.default_rng(31)
    merged = MergedAdapterSet(
        [SiteFactors("q", rng.normal(size=(3, 11)), rng.normal(size=(6, 3)))]
    )
    scale = ImportanceScale(1.0)
    ratios = np.linspace(0.0, 1.0, 9)
    masks = [build_mask(merged, p, scale) for p in ratios]
    for lo, hi in zip(masks, masks[1:]):
        for tid in lo.per_tensor:
            pruned_lo = lo.per_tensor[tid] == 0
            pruned_hi = hi.per_tensor[tid] == 0
            assert np.all(pruned_hi[pruned_lo]), "pruned sets must be nested in p"


def test_realized_fraction_bounds():
    rng = np.random.default_rng(37)
    for trial in range(20):
        vals = rng.normal(size=rng.integers(5, 40))
        if trial % 3 == 0:
            vals[rng.integers(0, vals.size)] = vals[0]  # induce a tie
        merged = _merged_from_flat(vals)
        p = float(rng.uniform(0.0, 1.0))
        mask = build_mask(merged, p, ImportanceScale(1.0))
        st = mask.stats[1]
        assert st.fraction >= st.k / st.d
        n_tied = int(np.sum(importance_scores(vals, ImportanceScale(1.0)) == st.tau))
        assert st.fraction <= (st.k + n_tied) / st.d


def test_mask_apply_zeroes_exactly_and_is_idempotent():
    rng = np.random.default_rng(41)
    merged = MergedAdapterSet(
        [SiteFactors("q", rng.normal(size=(2, 8)), rng.normal(size=(4, 2)))]
    )
    mask = build_mask(merged, 0.5, ImportanceScale(2.0))
    once = mask_apply(merged, mask)
    twice = mask_apply(once, mask)
    assert once.checksum() == twice.checksum()
    originals = {tid: arr.ravel() for tid, _, _, arr in merged.tensors()}
    for tid, _, _, arr in once.tensors():
        bits = mask.per_tensor[tid]
        flat = arr.ravel()
        assert np.all(flat[bits == 0] == 0.0)
        np.testing.assert_array_equal(flat[bits == 1], originals[tid][bits == 1])


def test_mask_apply_identity_and_annihilation():
    rng = np.random.default_rng(43)
    merged = MergedAdapterSet(
        [SiteFactors("q", rng.normal(size=(2, 4)), rng.normal(size=(3, 2)))]
    )
    keep_all = build_mask(merged, 0.0, ImportanceScale(1.0))
    same = mask_apply(merged, keep_all)
    assert same.checksum() == merged.checksum()
    drop_all = build_mask(merged, 1.0, ImportanceScale(1.0))
    gone = mask_apply(merged, drop_all)
    for _, _, _, arr in gone.tensors():
        assert np.all(arr == 0.0)


def test_zero_weights_always_pruned_first():
    merged = _merged_from_flat([0.0, 2.0, 0.0, 3.0, 1.0])
    mask = build_mask(merged, 0.2, ImportanceScale(1.0))  # k=1, tau=0
    np.testing.assert_array_equal(mask.per_tensor[1], [0, 1, 0, 1, 1])


def test_rebuild_at_same_ratio_after_apply_is_stable():
    # zeros created by pruning sort first, so rebuilding at the same p
    # reproduces the same mask
    rng = np.random.default_rng(47)
    merged = MergedAdapterSet(
        [SiteFactors("q", rng.normal(size=(3, 9)), rng.normal(size=(5, 3)))]
    )
    scale = ImportanceScale(1.3)
    m1 = build_mask(merged, 0.45, scale)
    applied = mask_apply(merged, m1)
    m2 = build_mask(applied, 0.45, scale)
    for tid in m1.per_tensor:
        np.testing.assert_array_equal(m1.per_tensor[tid], m2.per_tensor[tid])


def test_newly_pruned_sets():
    merged = _merged_from_flat([0.1, 0.5, 0.3, 0.9, 0.7])
    scale = ImportanceScale(1.0)
    low = build_mask(merged, 0.2, scale)   # prunes 0.1
    high = build_mask(merged, 0.6, scale)  # prunes 0.1, 0.3, 0.5
    fresh = newly_pruned(low, high)
    np.testing.assert_array_equal(fresh[1], [False, True, True, False, False])


def test_mask_csv_export(tmp_path):
    merged = _merged_from_flat([0.1, 0.5, 0.3, 0.9])
    mask = build_mask(merged, 0.5, ImportanceScale(1.0))
    path = tmp_path / "mask.csv"
    write_mask_csv(path, mask)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["tensor_id", "d", "k", "tau", "fraction"]
    assert rows[1] == ["1", "4", "2", "0.3", "0.5"]
    # the dummy B tensor: single entry, k=0, sentinel threshold
    assert rows[2] == ["2", "1", "0", "-inf", "0.0"]
