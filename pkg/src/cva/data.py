"""Feature files, dataset manifests and the synthetic grounding task."""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

MAGIC = b"CVAF0001"
MANIFEST_VERSION = 1
MAX_ELEMENTS = 1 << 31


class FormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


class DatasetError(ValueError):
    pass


# --- tensor files -----------------------------------------------------------

def write_tensor_file(path, array) -> None:
    arr = np.asarray(array, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"refusing to write non-finite values to {path}")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:8] != MAGIC:
        raise FormatError("bad magic", 0)
    if len(buf) < 12:
        raise FormatError("truncated header: missing rank", 8)
    (rank,) = struct.unpack_from("<I", buf, 8)
    dims_end = 12 + 4 * rank
    if len(buf) < dims_end:
        raise FormatError(f"truncated header: rank {rank} needs {4 * rank} dim bytes", 12)
    dims = struct.unpack_from(f"<{rank}I", buf, 12)
    n = 1
    for i, d in enumerate(dims):
        n *= d
        if n > MAX_ELEMENTS:
            raise FormatError(f"dim overflow: element count exceeds {MAX_ELEMENTS}", 12 + 4 * i)
    payload = len(buf) - dims_end
    if payload < 4 * n:
        raise FormatError(f"truncated payload: expected {n} floats, found {payload // 4}", dims_end + payload)
    if payload > 4 * n:
        raise FormatError(f"trailing bytes after {n} floats", dims_end + 4 * n)
    return np.frombuffer(buf, dtype="<f4", count=n, offset=dims_end).astype(np.float32).reshape(dims)


def read_tensor_file(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# --- records ----------------------------------------------------------------

@dataclass(frozen=True)
class MomentSpan:
    """Inclusive clip-index interval ``[start_clip, end_clip]``."""

    start_clip: int
    end_clip: int

    def __post_init__(self):
        if self.start_clip > self.end_clip:
            raise ValueError(f"span end {self.end_clip} < start {self.start_clip}")

    @property
    def length(self) -> int:
        return self.end_clip - self.start_clip + 1

    def indices(self) -> range:
        return range(self.start_clip, self.end_clip + 1)

    def to_normalized(self, clip_count: int) -> Tuple[float, float]:
        return (self.start_clip + self.end_clip + 1) / (2 * clip_count), self.length / clip_count

    @classmethod
    def from_normalized(cls, center: float, width: float, clip_count: int) -> "MomentSpan":
        start = int(round((center - width / 2) * clip_count))
        end = int(round((center + width / 2) * clip_count)) - 1
        start = min(max(start, 0), clip_count - 1)
        end = min(max(end, start), clip_count - 1)
        return cls(start, end)

    def to_seconds(self, clip_seconds: float) -> Tuple[float, float]:
        return self.start_clip * clip_seconds, (self.end_clip + 1) * clip_seconds


@dataclass
class FeatureSequence:
    video_id: str
    features: np.ndarray  # [L, D_v]
    clip_seconds: float = 2.0

    @property
    def clip_count(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class TextQueryRecord:
    query_id: str
    video_id: str
    token_features: np.ndarray  # [N_t, D_t]
    pooled_feature: np.ndarray  # [D_t]
    gt_spans: List[MomentSpan]
    saliency_labels: np.ndarray  # [L] ints in 0..4

    def gt_indices(self) -> List[int]:
        return sorted({i for s in self.gt_spans for i in s.indices()})


@dataclass
class Dataset:
    videos: Dict[str, FeatureSequence]
    queries: List[TextQueryRecord]
    clip_seconds: float = 2.0
    d_v: int = 0
    d_t: int = 0
    seed: Optional[int] = None
    splits: Dict[str, str] = field(default_factory=dict)

    def video(self, video_id: str) -> FeatureSequence:
        return self.videos[video_id]

    def split_of(self, video_id: str) -> str:
        if video_id in self.splits:
            return self.splits[video_id]
        return hash_split(video_id)

    def records(self, split: Optional[str] = None) -> List[TextQueryRecord]:
        if split is None:
            return list(self.queries)
        return [q for q in self.queries if self.split_of(q.video_id) == split]

    def subset(self, split: str) -> "Dataset":
        keep = {vid for vid in self.videos if self.split_of(vid) == split}
        return Dataset(
            videos={v: self.videos[v] for v in self.videos if v in keep},
            queries=[q for q in self.queries if q.video_id in keep],
            clip_seconds=self.clip_seconds, d_v=self.d_v, d_t=self.d_t, seed=self.seed,
            splits={v: s for v, s in self.splits.items() if v in keep},
        )


def hash_split(video_id: str, eval_fraction: float = 0.2) -> str:
    bucket = zlib.crc32(video_id.encode("utf-8")) % 100
    return "eval" if bucket < int(round(eval_fraction * 100)) else "train"


# --- validation / manifest I/O ---------------------------------------------

def validate_record(rec: TextQueryRecord, clip_count: int, d_t: int, require_gt: bool = True) -> None:
    qid = rec.query_id
    if require_gt and not rec.gt_spans:
        raise DatasetError(f"query {qid}: no GT spans")
    for s in rec.gt_spans:
        if s.start_clip > s.end_clip:
            raise DatasetError(f"query {qid}: span end {s.end_clip} < start {s.start_clip}")
        if s.start_clip < 0 or s.end_clip >= clip_count:
            raise DatasetError(f"query {qid}: span [{s.start_clip}, {s.end_clip}] outside [0, {clip_count})")
    ordered = sorted(rec.gt_spans, key=lambda s: s.start_clip)
    for a, b in zip(ordered, ordered[1:]):
        if b.start_clip <= a.end_clip:
            raise DatasetError(f"query {qid}: overlapping GT spans {a} and {b}")
    if rec.token_features.ndim != 2 or rec.token_features.shape[1] != d_t or rec.token_features.shape[0] < 1:
        raise DatasetError(f"query {qid}: token features shape {rec.token_features.shape} vs d_t {d_t}")
    if rec.pooled_feature.shape != (d_t,):
        raise DatasetError(f"query {qid}: pooled feature shape {rec.pooled_feature.shape} vs d_t {d_t}")
    if not (np.all(np.isfinite(rec.token_features)) and np.all(np.isfinite(rec.pooled_feature))):
        raise DatasetError(f"query {qid}: non-finite text features")
    sal = np.asarray(rec.saliency_labels)
    if sal.shape != (clip_count,):
        raise DatasetError(f"query {qid}: saliency length {sal.shape} vs clip count {clip_count}")
    if sal.size and (sal.min() < 0 or sal.max() > 4):
        raise DatasetError(f"query {qid}: saliency labels outside 0..4")


def validate_video(video: FeatureSequence, d_v: int) -> None:
    f = video.features
    if f.ndim != 2 or f.shape[0] < 1:
        raise DatasetError(f"video {video.video_id}: features must be [L>=1, D], got {f.shape}")
    if f.shape[1] != d_v:
        raise DatasetError(f"video {video.video_id}: shape mismatch, manifest d_v {d_v} vs file dim {f.shape[1]}")
    if not np.all(np.isfinite(f)):
        raise DatasetError(f"video {video.video_id}: non-finite features")


def save_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "tensors").mkdir(parents=True, exist_ok=True)
    by_video: Dict[str, List[TextQueryRecord]] = {v: [] for v in ds.videos}
    for q in ds.queries:
        by_video[q.video_id].append(q)
    entries = []
    for vid, video in ds.videos.items():
        vpath = f"tensors/{vid}.cvaf"
        write_tensor_file(out / vpath, video.features)
        qs = []
        for q in by_video[vid]:
            tpath, ppath = f"tensors/{q.query_id}.tokens.cvaf", f"tensors/{q.query_id}.pooled.cvaf"
            write_tensor_file(out / tpath, q.token_features)
            write_tensor_file(out / ppath, q.pooled_feature)
            qs.append({
                "query_id": q.query_id,
                "tokens_path": tpath,
                "pooled_path": ppath,
                "gt_spans": [[s.start_clip, s.end_clip] for s in q.gt_spans],
                "saliency": [int(x) for x in q.saliency_labels],
            })
        entry = {"video_id": vid, "features_path": vpath, "queries": qs}
        if vid in ds.splits:
            entry["split"] = ds.splits[vid]
        entries.append(entry)
    manifest = {
        "version": MANIFEST_VERSION,
        "clip_seconds": ds.clip_seconds,
        "d_v": ds.d_v,
        "d_t": ds.d_t,
        "seed": ds.seed,
        "videos": entries,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DatasetError(f"manifest not found: {manifest_path}")
    try:
        m = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"manifest is not valid JSON: {e}") from e
    for key in ("version", "clip_seconds", "d_v", "d_t", "videos"):
        if key not in m:
            raise DatasetError(f"manifest missing key '{key}'")
    if m["version"] != MANIFEST_VERSION:
        raise DatasetError(f"unsupported manifest version {m['version']}")
    if not m["clip_seconds"] > 0:
        raise DatasetError("clip_seconds must be positive")
    root = manifest_path.parent
    d_v, d_t = int(m["d_v"]), int(m["d_t"])

    def read(rel, owner):
        p = root / rel
        if not p.exists():
            raise DatasetError(f"{owner}: missing tensor file {p}")
        try:
            return read_tensor_file(p)
        except FormatError as e:
            raise DatasetError(f"{owner}: {p}: {e}") from e

    videos, queries, splits = {}, [], {}
    for v in m["videos"]:
        vid = v["video_id"]
        if vid in videos:
            raise DatasetError(f"duplicate video_id {vid}")
        video = FeatureSequence(vid, read(v["features_path"], f"video {vid}"), float(m["clip_seconds"]))
        validate_video(video, d_v)
        videos[vid] = video
        if "split" in v:
            splits[vid] = v["split"]
        for q in v.get("queries", []):
            qid = q["query_id"]
            spans = []
            for s, e in q["gt_spans"]:
                if e < s:
                    raise DatasetError(f"query {qid}: span end {e} < start {s}")
                spans.append(MomentSpan(int(s), int(e)))
            rec = TextQueryRecord(
                query_id=qid, video_id=vid,
                token_features=read(q["tokens_path"], f"query {qid}"),
                pooled_feature=read(q["pooled_path"], f"query {qid}"),
                gt_spans=spans,
                saliency_labels=np.asarray(q["saliency"], dtype=np.int64),
            )
            validate_record(rec, video.clip_count, d_t, require_gt=splits.get(vid, "train") != "test")
            queries.append(rec)
    return Dataset(videos, queries, float(m["clip_seconds"]), d_v, d_t, m.get("seed"), splits)


# --- synthetic data ---------------------------------------------------------

@dataclass
class SyntheticConfig:
    n_train: int = 100
    n_eval: int = 0
    clip_count: int = 32
    dim: int = 16
    n_concepts: int = 4
    moment_len: Tuple[int, int] = (4, 12)
    noise: float = 0.1
    clip_seconds: float = 2.0
    orthogonal: bool = False
    # cosine between the prototypes of concepts 0 and 1 (the "confusable" pair)
    confusable_similarity: Optional[float] = None
    # each video gets its own query and background concepts (needs n_concepts >= 2 * videos)
    exclusive_concepts: bool = False


def make_prototypes(cfg: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    k, d = cfg.n_concepts, cfg.dim
    if cfg.orthogonal:
        if k > d:
            raise DatasetError(f"cannot draw {k} orthogonal prototypes in {d} dims")
        q, _ = np.linalg.qr(rng.standard_normal((d, k)))
        protos = q.T
    else:
        protos = rng.standard_normal((k, d))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    if cfg.confusable_similarity is not None:
        c = cfg.confusable_similarity
        p0 = protos[0]
        u = protos[1] - (protos[1] @ p0) * p0
        u /= np.linalg.norm(u)
        protos[1] = c * p0 + np.sqrt(max(0.0, 1 - c * c)) * u
    return protos


def saliency_for(span: MomentSpan, clip_count: int) -> np.ndarray:
    sal = np.zeros(clip_count, dtype=np.int64)
    sal[span.start_clip:span.end_clip + 1] = 4
    sal[span.start_clip] = 3
    sal[span.end_clip] = 3
    return sal


def generate_synthetic(cfg: SyntheticConfig, seed: int) -> Dataset:
    """Videos are a background concept with one embedded moment of the query concept.

    Clips are ``prototype + N(0, noise^2)``, the query is a noisy copy of its
    concept prototype (one token, identical to the pooled feature).
    """
    lo, hi = cfg.moment_len
    if not 1 <= lo <= hi:
        raise DatasetError(f"invalid moment length range {cfg.moment_len}")
    if hi > cfg.clip_count:
        raise DatasetError(f"moment length {hi} > video length {cfg.clip_count}")
    if cfg.n_concepts < 2:
        raise DatasetError("need at least 2 concept prototypes")
    n_videos = cfg.n_train + cfg.n_eval
    if cfg.exclusive_concepts and cfg.n_concepts < 2 * n_videos:
        raise DatasetError("exclusive_concepts needs n_concepts >= 2 * number of videos")
    rng = np.random.default_rng(seed)
    protos = make_prototypes(cfg, rng)
    L, D = cfg.clip_count, cfg.dim
    videos, queries, splits = {}, [], {}
    for i in range(n_videos):
        vid = f"v{i:04d}"
        if cfg.exclusive_concepts:
            qc, bc = 2 * i, 2 * i + 1
        else:
            qc = int(rng.integers(cfg.n_concepts))
            bc = int(rng.choice([c for c in range(cfg.n_concepts) if c != qc]))
        m = int(rng.integers(lo, hi + 1))
        start = int(rng.integers(0, L - m + 1))
        span = MomentSpan(start, start + m - 1)
        concept = np.full(L, bc)
        concept[span.start_clip:span.end_clip + 1] = qc
        feats = protos[concept] + cfg.noise * rng.standard_normal((L, D))
        pooled = protos[qc] + cfg.noise * rng.standard_normal(D)
        videos[vid] = FeatureSequence(vid, feats.astype(np.float32), cfg.clip_seconds)
        queries.append(TextQueryRecord(
            query_id=f"q{i:04d}", video_id=vid,
            token_features=pooled[None, :].astype(np.float32),
            pooled_feature=pooled.astype(np.float32),
            gt_spans=[span],
            saliency_labels=saliency_for(span, L),
        ))
        splits[vid] = "train" if i < cfg.n_train else "eval"
    return Dataset(videos, queries, cfg.clip_seconds, D, D, seed, splits)


def record_rng(seed: int, key: str, *extra: int) -> np.random.Generator:
    """Independent stream per (seed, record key, extra ints) so results don't depend on worker count."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(key.encode("utf-8")), *extra]))
