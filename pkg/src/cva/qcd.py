"""Query-aware context diversification.

Background clips of a training video are replaced by clips of another video
whose similarity to the query sits inside a percentile band
``[theta_min, theta_max]`` computed once over the training set.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, Sequence, Tuple

import numpy as np

from .data import Dataset, FeatureSequence, MomentSpan, TextQueryRecord


class DomainError(ValueError):
    pass


class StatisticsError(ValueError):
    pass


class AugmentationError(RuntimeError):
    pass


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise DomainError("cosine similarity of a zero-norm vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def percentile(values: Sequence[float], q: float) -> float:
    """Linear interpolation between closest ranks of an already sorted list."""
    n = len(values)
    if n == 0:
        raise DomainError("percentile of an empty list")
    if not 0 <= q <= 100:
        raise DomainError(f"percentile q={q} outside [0, 100]")
    pos = q / 100 * (n - 1)
    lo = int(math.floor(pos))
    if lo >= n - 1:
        return float(values[n - 1])
    frac = pos - lo
    return float(values[lo] + frac * (values[lo + 1] - values[lo]))


@dataclass
class SimilarityStats:
    s_gt: np.ndarray
    s_non: np.ndarray
    mu_gt: float
    sigma_gt: float
    mu_non: float
    sigma_non: float
    theta_min: float
    theta_max: float
    alpha: float
    beta: float

    @property
    def band_valid(self) -> bool:
        return self.theta_min <= self.theta_max

    def with_band(self, theta_min: float, theta_max: float) -> "SimilarityStats":
        return replace(self, theta_min=float(theta_min), theta_max=float(theta_max))

    def report(self) -> dict:
        return {
            "mu_gt": self.mu_gt, "sigma_gt": self.sigma_gt,
            "mu_non": self.mu_non, "sigma_non": self.sigma_non,
            "theta_min": self.theta_min, "theta_max": self.theta_max,
            "alpha": self.alpha, "beta": self.beta,
            "n_gt": int(len(self.s_gt)), "n_non": int(len(self.s_non)),
        }


def population_stats(values: np.ndarray) -> Tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    mu = float(v.mean())
    return mu, float(np.sqrt(((v - mu) ** 2).mean()))


def visual_part(features: np.ndarray, d_t: int) -> np.ndarray:
    # video features may be [CLIP | other] concatenations; similarity uses the leading d_t dims
    return features[..., :d_t]


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise DomainError("cosine similarity of a zero-norm vector")
    return x / n


def similarity_matrix(clips: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Cosine similarity of every clip row against every query row."""
    return np.clip(_normalize_rows(clips) @ _normalize_rows(queries).T, -1.0, 1.0)


def compute_similarity_stats(dataset: Dataset, alpha: float = 10, beta: float = 60) -> SimilarityStats:
    vids = list(dataset.videos)
    if not vids or not dataset.queries:
        raise StatisticsError("dataset has no videos or no queries")
    d_t = dataset.d_t
    clips = np.concatenate([visual_part(dataset.videos[v].features, d_t) for v in vids])
    offsets = np.cumsum([0] + [dataset.videos[v].clip_count for v in vids])
    where = {v: offsets[i] for i, v in enumerate(vids)}
    pooled = np.stack([q.pooled_feature for q in dataset.queries])
    sims = similarity_matrix(clips, pooled)  # [N_C, N_T]
    gt = np.zeros_like(sims, dtype=bool)
    for j, q in enumerate(dataset.queries):
        base = where[q.video_id]
        for i in q.gt_indices():
            gt[base + i, j] = True
    s_gt = np.sort(sims[gt])
    s_non = np.sort(sims[~gt])
    if len(s_gt) == 0 or len(s_non) == 0:
        raise StatisticsError(f"empty partition: |S_gt|={len(s_gt)}, |S_non|={len(s_non)}")
    mu_gt, sd_gt = population_stats(s_gt)
    mu_non, sd_non = population_stats(s_non)
    return SimilarityStats(
        s_gt=s_gt, s_non=s_non, mu_gt=mu_gt, sigma_gt=sd_gt, mu_non=mu_non, sigma_non=sd_non,
        theta_min=percentile(s_non, alpha), theta_max=percentile(s_gt, beta), alpha=alpha, beta=beta,
    )


@dataclass
class CandidatePool:
    video_id: str
    indices: np.ndarray
    sims: np.ndarray

    def __len__(self):
        return len(self.indices)


def build_candidate_pool(video_b: FeatureSequence, query: TextQueryRecord,
                         stats: SimilarityStats) -> CandidatePool:
    d_t = query.pooled_feature.shape[-1]
    sims = similarity_matrix(visual_part(video_b.features, d_t), query.pooled_feature[None, :])[:, 0]
    keep = np.nonzero((sims >= stats.theta_min) & (sims <= stats.theta_max))[0]
    return CandidatePool(video_b.video_id, keep, sims[keep])


@dataclass
class PreservingMask:
    bits: np.ndarray  # bool [L]; True = keep the original clip
    replace_ratio: float
    context_p: int
    extended: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def zeros(self) -> np.ndarray:
        return np.nonzero(~self.bits)[0]


def extended_context(gt_spans: Sequence[MomentSpan], clip_count: int, p: int) -> np.ndarray:
    keep = np.zeros(clip_count, dtype=bool)
    for s in gt_spans:
        keep[max(0, s.start_clip - p):min(clip_count, s.end_clip + p + 1)] = True
    return np.nonzero(keep)[0]


def build_preserving_mask(gt_spans: Sequence[MomentSpan], clip_count: int, p: int, r: float,
                          rng: np.random.Generator) -> PreservingMask:
    if p < 0:
        raise ValueError(f"context window p must be >= 0, got {p}")
    if not 0 < r < 1:
        raise ValueError(f"replacement ratio must be in (0, 1), got {r}")
    ext = extended_context(gt_spans, clip_count, p)
    outside = np.setdiff1d(np.arange(clip_count), ext)
    n_replace = min(int(math.floor(r * clip_count + 1e-9)), len(outside))
    bits = np.ones(clip_count, dtype=bool)
    if n_replace:
        bits[rng.choice(outside, size=n_replace, replace=False)] = False
    return PreservingMask(bits, r, p, ext)


@dataclass
class MixedVideo:
    video: FeatureSequence
    bits: np.ndarray  # effective mask after empty-pool fallback
    sources: Dict[int, int]  # replaced index in A -> clip index in B
    source_video: str
    fallbacks: int = 0


def mix(video_a: FeatureSequence, mask: PreservingMask, pool: CandidatePool, video_b: FeatureSequence,
        rng: np.random.Generator) -> MixedVideo:
    """``M * V_A + (1 - M) * V_B`` with V_B clips drawn (with replacement) from the pool."""
    if len(mask.bits) != video_a.clip_count:
        raise ValueError(f"mask length {len(mask.bits)} != clip count {video_a.clip_count}")
    out = video_a.features.copy()
    bits = mask.bits.copy()
    zeros = mask.zeros
    sources: Dict[int, int] = {}
    fallbacks = 0
    if len(zeros) and len(pool) == 0:
        bits[zeros] = True
        fallbacks = len(zeros)
    elif len(zeros):
        if video_b.features.shape[1] != out.shape[1]:
            raise ValueError("replacement video has a different feature dim")
        picks = pool.indices[rng.integers(0, len(pool), size=len(zeros))]
        out[zeros] = video_b.features[picks]
        sources = {int(i): int(k) for i, k in zip(zeros, picks)}
    mixed = FeatureSequence(video_a.video_id, out, video_a.clip_seconds)
    return MixedVideo(mixed, bits, sources, pool.video_id, fallbacks)


def augment_pair(dataset: Dataset, record: TextQueryRecord, stats: SimilarityStats, p: int = 1, r: float = 0.3,
                 rng: np.random.Generator | None = None) -> Tuple[MixedVideo, MixedVideo]:
    """Two independently mixed views of the record's video sharing one source video and pool."""
    if not stats.band_valid:
        raise AugmentationError(f"empty similarity band [{stats.theta_min}, {stats.theta_max}]")
    others = sorted(v for v in dataset.videos if v != record.video_id)
    if not others:
        raise AugmentationError("augmentation needs at least two videos")
    rng = rng if rng is not None else np.random.default_rng()
    video_a = dataset.videos[record.video_id]
    video_b = dataset.videos[others[int(rng.integers(len(others)))]]
    pool = build_candidate_pool(video_b, record, stats)
    views = []
    for _ in range(2):
        m = build_preserving_mask(record.gt_spans, video_a.clip_count, p, r, rng)
        views.append(mix(video_a, m, pool, video_b, rng))
    return views[0], views[1]
