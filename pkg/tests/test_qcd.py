import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cva.data import Dataset, FeatureSequence, MomentSpan, SyntheticConfig, TextQueryRecord, generate_synthetic
from cva.qcd import (
    AugmentationError, CandidatePool, DomainError, PreservingMask, StatisticsError, augment_pair,
    build_candidate_pool, build_preserving_mask, compute_similarity_stats, cosine_similarity, extended_context, mix,
    percentile, population_stats,
)


def naive_percentile(values, q):
    pos = q / 100 * (len(values) - 1)
    lo = math.floor(pos)
    hi = min(lo + 1, len(values) - 1)
    return values[lo] + (pos - lo) * (values[hi] - values[lo])


def _query(pooled, video_id="a", spans=(MomentSpan(1, 2),), L=6):
    pooled = np.asarray(pooled, dtype=np.float32)
    return TextQueryRecord("q", video_id, pooled[None], pooled, list(spans), np.zeros(L, dtype=np.int64))


# --- cosine / percentile / population stats ---------------------------------

def test_cosine_examples():
    assert cosine_similarity([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([1, 1], [1, 0]) == pytest.approx(0.70711, abs=1e-5)


def test_cosine_zero_vector():
    with pytest.raises(DomainError):
        cosine_similarity([0, 0], [1, 0])


def test_percentile_examples():
    assert percentile([1, 2, 3, 4, 5], 10) == pytest.approx(1.4)
    assert percentile([2.0, 7.0, 9.0], 0) == 2.0
    assert percentile([4.2], 37) == 4.2
    with pytest.raises(DomainError):
        percentile([], 50)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=50), st.floats(0, 100))
def test_percentile_interpolation_rule(vals, q):
    v = sorted(vals)
    assert percentile(v, q) == pytest.approx(naive_percentile(v, q), abs=1e-12)
    assert v[0] - 1e-12 <= percentile(v, q) <= v[-1] + 1e-12


def test_population_stats_example():
    mu, sd = population_stats(np.array([0.8, 0.6]))
    assert mu == pytest.approx(0.7) and sd == pytest.approx(0.1)


# --- dataset statistics -----------------------------------------------------

def _tiny_dataset():
    """Two 3-clip videos, queries aligned with hand-chosen directions."""
    va = FeatureSequence("a", np.array([[1, 0], [1, 1], [0, 1]], dtype=np.float32))
    vb = FeatureSequence("b", np.array([[0, 1], [1, 0], [-1, 0]], dtype=np.float32))
    qa = TextQueryRecord("qa", "a", np.array([[1, 0]], np.float32), np.array([1, 0], np.float32),
                         [MomentSpan(0, 0)], np.array([3, 0, 0]))
    qb = TextQueryRecord("qb", "b", np.array([[0, 1]], np.float32), np.array([0, 1], np.float32),
                         [MomentSpan(0, 0)], np.array([3, 0, 0]))
    return Dataset({"a": va, "b": vb}, [qa, qb], 2.0, 2, 2)


def test_stats_partition_by_hand():
    st_ = compute_similarity_stats(_tiny_dataset(), alpha=0, beta=100)
    r = 1 / math.sqrt(2)
    # qa vs a: [1, r, 0] (GT idx 0); qa vs b: [0, 1, -1]; qb vs a: [0, r, 1]; qb vs b: [1, 0, 0] (GT idx 0)
    assert st_.s_gt.tolist() == pytest.approx([1.0, 1.0])
    assert st_.s_non.tolist() == pytest.approx(sorted([r, 0, 0, 1, -1, 0, r, 1, 0, 0]))
    assert st_.theta_min == pytest.approx(-1.0) and st_.theta_max == pytest.approx(1.0)


def test_stats_recompute_from_populations():
    ds = generate_synthetic(SyntheticConfig(n_train=30), 0)
    st_ = compute_similarity_stats(ds)
    assert st_.mu_gt == pytest.approx(st_.s_gt.mean(), abs=1e-6)
    assert st_.sigma_non == pytest.approx(st_.s_non.std(), abs=1e-6)
    assert np.all(np.diff(st_.s_gt) >= 0) and np.all(np.diff(st_.s_non) >= 0)
    assert st_.theta_min == pytest.approx(naive_percentile(st_.s_non, 10))
    assert st_.theta_max == pytest.approx(naive_percentile(st_.s_gt, 60))
    # every (clip, query) pair lands in exactly one population
    n_clips = sum(v.clip_count for v in ds.videos.values())
    assert len(st_.s_gt) + len(st_.s_non) == n_clips * len(ds.queries)


def test_stats_noise_zero_orthogonal_mu_gt_one():
    cfg = SyntheticConfig(n_train=12, clip_count=16, dim=8, noise=0.0, orthogonal=True)
    st_ = compute_similarity_stats(generate_synthetic(cfg, 0))
    assert st_.mu_gt == pytest.approx(1.0, abs=1e-5)


def test_stats_empty_partition():
    ds = _tiny_dataset()
    ds.queries = []
    with pytest.raises(StatisticsError):
        compute_similarity_stats(ds)


def test_thresholds_monotone_in_alpha_beta():
    st_ = compute_similarity_stats(generate_synthetic(SyntheticConfig(n_train=20), 1), 10, 60)
    alphas = [percentile(st_.s_non, a) for a in range(0, 101, 5)]
    betas = [percentile(st_.s_gt, b) for b in range(0, 101, 5)]
    assert all(x <= y for x, y in zip(alphas, alphas[1:]))
    assert all(x <= y for x, y in zip(betas, betas[1:]))


# --- candidate pools --------------------------------------------------------

def _stats_with_band(lo, hi):
    base = compute_similarity_stats(_tiny_dataset())
    return base.with_band(lo, hi)


def test_pool_full_band_keeps_all():
    vb = FeatureSequence("b", np.random.default_rng(0).standard_normal((7, 2)).astype(np.float32))
    pool = build_candidate_pool(vb, _query([1, 0]), _stats_with_band(-1, 1))
    assert pool.indices.tolist() == list(range(7))


def test_pool_impossible_band_empty():
    vb = FeatureSequence("b", np.random.default_rng(0).standard_normal((7, 2)).astype(np.float32))
    assert len(build_candidate_pool(vb, _query([1, 0]), _stats_with_band(2, 3))) == 0


def test_pool_hand_example():
    sims = [0.1, 0.3, 0.5, 0.9]
    feats = np.array([[s, math.sqrt(1 - s * s)] for s in sims], dtype=np.float64)
    vb = FeatureSequence("b", feats)
    pool = build_candidate_pool(vb, _query([1.0, 0.0]), _stats_with_band(0.25, 0.6))
    assert pool.indices.tolist() == [1, 2]
    assert pool.sims.tolist() == pytest.approx([0.3, 0.5])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pool_equals_naive_filter(seed):
    rng = np.random.default_rng(seed)
    vb = FeatureSequence("b", rng.standard_normal((int(rng.integers(1, 20)), 5)))
    q = _query(rng.standard_normal(5))
    lo, hi = np.sort(rng.uniform(-1, 1, 2))
    pool = build_candidate_pool(vb, q, _stats_with_band(lo, hi))
    naive = [k for k in range(vb.clip_count) if lo <= cosine_similarity(vb.features[k], q.pooled_feature) <= hi]
    assert pool.indices.tolist() == naive
    assert np.all((pool.sims >= lo) & (pool.sims <= hi))


def test_widening_beta_never_shrinks_pools():
    ds = generate_synthetic(SyntheticConfig(n_train=20), 3)
    base = compute_similarity_stats(ds, 10, 60)
    q = ds.queries[0]
    for vid in list(ds.videos)[1:6]:
        prev = None
        for beta in (40, 60, 80, 100):
            pool = set(build_candidate_pool(ds.videos[vid], q, base.with_band(base.theta_min,
                                                                            percentile(base.s_gt, beta))).indices)
            if prev is not None:
                assert prev <= pool
            prev = pool


# --- preserving mask --------------------------------------------------------

def test_extended_context_dilation():
    assert extended_context([MomentSpan(5, 7)], 12, 1).tolist() == [4, 5, 6, 7, 8]
    assert extended_context([MomentSpan(0, 1)], 12, 2).tolist() == [0, 1, 2, 3]


def test_mask_saturation():
    m = build_preserving_mask([MomentSpan(2, 3)], 8, 1, 0.9, np.random.default_rng(0))
    assert m.bits.tolist() == [False, True, True, True, True, False, False, False]


def test_mask_count_example():
    m = build_preserving_mask([MomentSpan(4, 5)], 10, 1, 0.3, np.random.default_rng(123))
    zeros = m.zeros.tolist()
    assert len(zeros) == 3
    assert not set(zeros) & {3, 4, 5, 6}


def test_mask_rejects_bad_args():
    with pytest.raises(ValueError):
        build_preserving_mask([MomentSpan(0, 0)], 5, -1, 0.3, np.random.default_rng(0))
    with pytest.raises(ValueError):
        build_preserving_mask([MomentSpan(0, 0)], 5, 1, 1.0, np.random.default_rng(0))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 60), st.integers(0, 4), st.floats(0.01, 0.99), st.integers(0, 2**32 - 1))
def test_mask_invariants(L, p, r, seed):
    rng = np.random.default_rng(seed)
    a = int(rng.integers(L))
    b = int(rng.integers(a, L))
    span = MomentSpan(a, b)
    m = build_preserving_mask([span], L, p, r, rng)
    ext = set(range(max(0, a - p), min(L, b + p + 1)))
    assert all(m.bits[i] for i in ext)
    n_zero = int((~m.bits).sum())
    assert n_zero <= r * L + 1e-9
    assert n_zero == min(math.floor(r * L + 1e-9), L - len(ext))


# --- mixing -----------------------------------------------------------------

def test_mix_all_ones_identity():
    va = FeatureSequence("a", np.arange(12, dtype=np.float32).reshape(4, 3))
    vb = FeatureSequence("b", -np.ones((4, 3), np.float32))
    mask = PreservingMask(np.ones(4, bool), 0.3, 1)
    out = mix(va, mask, CandidatePool("b", np.array([0]), np.array([0.5])), vb, np.random.default_rng(0))
    assert np.array_equal(out.video.features, va.features)


def test_mix_empty_pool_fallback():
    va = FeatureSequence("a", np.arange(12, dtype=np.float32).reshape(4, 3))
    vb = FeatureSequence("b", -np.ones((4, 3), np.float32))
    mask = PreservingMask(np.array([True, False, True, False]), 0.3, 1)
    out = mix(va, mask, CandidatePool("b", np.array([], int), np.array([])), vb, np.random.default_rng(0))
    assert np.array_equal(out.video.features, va.features)
    assert out.fallbacks == 2 and out.bits.all()


def test_mix_forced_single_clip():
    va = FeatureSequence("a", np.array([[1.0], [2.0], [3.0]], np.float32))
    vb = FeatureSequence("b", np.array([[7.0], [9.0]], np.float32))
    mask = PreservingMask(np.array([True, True, False]), 0.3, 1)
    out = mix(va, mask, CandidatePool("b", np.array([1]), np.array([0.4])), vb, np.random.default_rng(0))
    assert out.video.features[:, 0].tolist() == [1.0, 2.0, 9.0]
    assert out.sources == {2: 1}


def test_mix_length_mismatch():
    va = FeatureSequence("a", np.zeros((3, 1), np.float32))
    with pytest.raises(ValueError):
        mix(va, PreservingMask(np.ones(4, bool), 0.3, 1), CandidatePool("b", np.array([0]), np.array([0])), va,
            np.random.default_rng(0))


# --- augment_pair -----------------------------------------------------------

def test_augment_single_video_refused():
    ds = generate_synthetic(SyntheticConfig(n_train=1), 0)
    st_ = compute_similarity_stats(ds)
    with pytest.raises(AugmentationError):
        augment_pair(ds, ds.queries[0], st_, rng=np.random.default_rng(0))


def test_augment_empty_band_refused():
    ds = generate_synthetic(SyntheticConfig(n_train=4), 0)
    st_ = compute_similarity_stats(ds).with_band(0.5, 0.1)
    with pytest.raises(AugmentationError):
        augment_pair(ds, ds.queries[0], st_, rng=np.random.default_rng(0))


def test_augment_large_p_is_identity():
    ds = generate_synthetic(SyntheticConfig(n_train=4), 0)
    st_ = compute_similarity_stats(ds).with_band(-1, 1)
    a, b = augment_pair(ds, ds.queries[0], st_, p=100, r=0.3, rng=np.random.default_rng(0))
    orig = ds.videos[ds.queries[0].video_id].features
    assert np.array_equal(a.video.features, orig) and np.array_equal(b.video.features, orig)


def test_augment_deterministic_and_views_independent():
    ds = generate_synthetic(SyntheticConfig(n_train=10), 0)
    st_ = compute_similarity_stats(ds).with_band(-1, 1)
    q = ds.queries[3]
    a1, b1 = augment_pair(ds, q, st_, rng=np.random.default_rng(9))
    a2, b2 = augment_pair(ds, q, st_, rng=np.random.default_rng(9))
    assert np.array_equal(a1.video.features, a2.video.features)
    assert np.array_equal(b1.video.features, b2.video.features)
    assert a1.source_video == b1.source_video != q.video_id
    assert not np.array_equal(a1.bits, b1.bits)


def test_augment_band_excluding_own_concept():
    cfg = SyntheticConfig(n_train=20, clip_count=16, dim=8, noise=0.0, orthogonal=True, moment_len=(3, 6))
    ds = generate_synthetic(cfg, 5)
    st_ = compute_similarity_stats(ds).with_band(-1.0, 0.5)  # own concept has cosine 1
    for i, q in enumerate(ds.queries):
        a, b = augment_pair(ds, q, st_, rng=np.random.default_rng(i))
        for view in (a, b):
            for idx in view.sources:
                assert cosine_similarity(view.video.features[idx], q.pooled_feature) <= st_.theta_max + 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.95), st.integers(0, 3))
def test_augment_gt_preserved_and_band_safe(seed, r, p):
    rng = np.random.default_rng(seed)
    ds = _AUG_DS
    q = ds.queries[int(rng.integers(len(ds.queries)))]
    a, b = augment_pair(ds, q, _AUG_STATS, p=p, r=r, rng=rng)
    orig = ds.videos[q.video_id].features
    ext = extended_context(q.gt_spans, len(orig), p)
    for view in (a, b):
        assert np.array_equal(view.video.features[ext], orig[ext])
        src = ds.videos[view.source_video].features
        for i, k in view.sources.items():
            assert np.array_equal(view.video.features[i], src[k])
            s = cosine_similarity(src[k], q.pooled_feature)
            assert _AUG_STATS.theta_min - 1e-9 <= s <= _AUG_STATS.theta_max + 1e-9
        untouched = [i for i in range(len(orig)) if i not in view.sources]
        assert np.array_equal(view.video.features[untouched], orig[untouched])


_AUG_DS = generate_synthetic(SyntheticConfig(n_train=15), 11)
_AUG_STATS = compute_similarity_stats(_AUG_DS)
