"""Moment-retrieval / highlight-detection metrics, Boundary-IoU and the target-masking diagnostic."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .data import Dataset, FeatureSequence, TextQueryRecord, record_rng
from .losses import iou_1d
from .model import GroundingModel, apply_target_mask

Span = Tuple[float, float]
Pred = Tuple[float, float, float]  # start, end, score

R1_THRESHOLDS = (0.3, 0.5, 0.7, 0.9)
MAP_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
VERY_GOOD = 3


def best_iou(span: Span, gts: Sequence[Span]) -> float:
    return max(iou_1d(span, g) for g in gts)


def recall_at_1(preds: Sequence[Sequence[Pred]], gts: Sequence[Sequence[Span]], threshold: float) -> float:
    hits = [best_iou(top1(p), g) >= threshold for p, g in zip(preds, gts)]
    return float(np.mean(hits)) if hits else 0.0


def top1(preds: Sequence[Pred]) -> Span:
    best = max(range(len(preds)), key=lambda i: (preds[i][2], -i))
    return preds[best][0], preds[best][1]


def average_precision(preds: Sequence[Pred], gts: Sequence[Span], threshold: float) -> float:
    """Precision at each correct rank, summed over greedy one-to-one matches and divided by the GT count."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i][2], i))
    used = set()
    tp, total = 0, 0.0
    for rank, i in enumerate(order, start=1):
        span = preds[i][:2]
        cands = [(iou_1d(span, g), j) for j, g in enumerate(gts) if j not in used]
        if not cands:
            break
        iou, j = max(cands, key=lambda c: (c[0], -c[1]))
        if iou >= threshold:
            used.add(j)
            tp += 1
            total += tp / rank
    return total / len(gts)


def mean_ap(preds: Sequence[Sequence[Pred]], gts: Sequence[Sequence[Span]],
            thresholds: Sequence[float] = MAP_THRESHOLDS) -> Tuple[float, Dict[float, float]]:
    per_thr = {t: float(np.mean([average_precision(p, g, t) for p, g in zip(preds, gts)])) if preds else 0.0
               for t in thresholds}
    return float(np.mean(list(per_thr.values()))), per_thr


def miou(preds: Sequence[Sequence[Pred]], gts: Sequence[Sequence[Span]]) -> float:
    vals = [best_iou(top1(p), g) for p, g in zip(preds, gts)]
    return float(np.mean(vals)) if vals else 0.0


def hit_at_1(scores, labels, cutoff: int = VERY_GOOD) -> int:
    i = int(np.argmax(np.asarray(scores)))  # first index on ties
    return int(np.asarray(labels)[i] >= cutoff)


def saliency_ap(scores, labels, cutoff: int = VERY_GOOD) -> Optional[float]:
    scores, rel = np.asarray(scores, dtype=np.float64), np.asarray(labels) >= cutoff
    if not rel.any():
        return None
    order = np.argsort(-scores, kind="stable")
    hits = rel[order]
    prec = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(prec[hits].mean())


def _window_iou(a: Span, b: Span) -> float:
    return iou_1d(a, b)


def boundary_windows(span: Span, w: float) -> Tuple[Span, Span]:
    s, e = span
    return (s, min(s + w, e)), (max(e - w, s), e)


def boundary_iou(gt: Span, pred: Span, w: float = 2.0) -> Tuple[float, float, float]:
    """IoU of the start windows, of the end windows, and their mean (spans in seconds)."""
    if w <= 0:
        raise ValueError("boundary width must be positive")
    gs, ge = boundary_windows(gt, w)
    ps, pe = boundary_windows(pred, w)
    start, end = _window_iou(gs, ps), _window_iou(ge, pe)
    return start, end, (start + end) / 2


@dataclass
class EvalReport:
    r1: Dict[str, float]
    map_at_05: float
    map_at_075: float
    map_avg: float
    miou: float
    hd_map: float
    hit_at_1: float
    boundary_iou: Dict[str, float]
    boundary_iou_all: Dict[str, float]
    n_queries: int
    per_query: List[dict] = field(default_factory=list)

    def to_dict(self, per_query: bool = True) -> dict:
        d = asdict(self)
        if not per_query:
            d.pop("per_query")
        return d

    def table(self) -> str:
        cols = [("R1@0.5", self.r1["0.5"]), ("R1@0.7", self.r1["0.7"]), ("mAP@0.5", self.map_at_05),
                ("mAP@0.75", self.map_at_075), ("mAP", self.map_avg), ("mIoU", self.miou),
                ("HD mAP", self.hd_map), ("HIT@1", self.hit_at_1), ("B-IoU", self.boundary_iou["combined"])]
        head = " | ".join(f"{n:>8}" for n, _ in cols)
        row = " | ".join(f"{100 * v:8.2f}" for _, v in cols)
        return f"{head}\n{row}"


def _mean_triplets(rows: List[Tuple[float, float, float]]) -> Dict[str, float]:
    if not rows:
        return {"start": 0.0, "end": 0.0, "combined": 0.0, "n": 0}
    a = np.asarray(rows)
    return {"start": float(a[:, 0].mean()), "end": float(a[:, 1].mean()), "combined": float(a[:, 2].mean()),
            "n": len(rows)}


def evaluate(preds: Sequence[Sequence[Pred]], records: Sequence[TextQueryRecord], saliency: Sequence[np.ndarray],
             clip_counts: Sequence[int], clip_seconds: float = 2.0, w: float = 2.0,
             boundary_min_iou: float = 0.7) -> EvalReport:
    """``preds`` are normalized (start, end, score) lists per record."""
    gts = [[(s.start_clip / L, (s.end_clip + 1) / L) for s in r.gt_spans] for r, L in zip(records, clip_counts)]
    r1 = {str(t): recall_at_1(preds, gts, t) for t in R1_THRESHOLDS}
    m_avg, per_thr = mean_ap(preds, gts)
    hits, saps, per_query, b_all, b_filt = [], [], [], [], []
    for rec, p, g, sal, L in zip(records, preds, gts, saliency, clip_counts):
        span = top1(p)
        iou = best_iou(span, g)
        hits.append(hit_at_1(sal, rec.saliency_labels))
        ap = saliency_ap(sal, rec.saliency_labels)
        if ap is not None:
            saps.append(ap)
        dur = L * clip_seconds
        gi = max(range(len(g)), key=lambda j: iou_1d(span, g[j]))
        bi = boundary_iou((g[gi][0] * dur, g[gi][1] * dur), (span[0] * dur, span[1] * dur), w)
        b_all.append(bi)
        if iou >= boundary_min_iou:
            b_filt.append(bi)
        per_query.append({"query_id": rec.query_id, "top1": [span[0], span[1]], "iou": iou,
                          "hit_at_1": hits[-1], "boundary_iou": bi[2]})
    return EvalReport(
        r1=r1, map_at_05=per_thr[0.5], map_at_075=per_thr[0.75], map_avg=m_avg, miou=miou(preds, gts),
        hd_map=float(np.mean(saps)) if saps else 0.0, hit_at_1=float(np.mean(hits)) if hits else 0.0,
        boundary_iou=_mean_triplets(b_filt), boundary_iou_all=_mean_triplets(b_all),
        n_queries=len(records), per_query=per_query,
    )


@torch.no_grad()
def predict(model: GroundingModel, videos: Sequence[FeatureSequence], records: Sequence[TextQueryRecord],
            batch_size: int = 64):
    """Run the model on (video, query) pairs, batching records of equal shape."""
    model.eval()
    dtype = next(model.parameters()).dtype
    groups = defaultdict(list)
    for i, (v, r) in enumerate(zip(videos, records)):
        groups[(v.clip_count, r.token_features.shape[0])].append(i)
    preds: List = [None] * len(records)
    sal: List = [None] * len(records)
    for key in sorted(groups):
        idx = groups[key]
        for k in range(0, len(idx), batch_size):
            chunk = idx[k:k + batch_size]
            v = torch.as_tensor(np.stack([videos[i].features for i in chunk]), dtype=dtype)
            t = torch.as_tensor(np.stack([records[i].token_features for i in chunk]), dtype=dtype)
            out = model(v, t)
            for b, i in enumerate(chunk):
                preds[i] = out.ranked(b)
                sal[i] = out.saliency[b].numpy().copy()
    model.train()
    return preds, sal


def evaluate_model(model: GroundingModel, dataset: Dataset, records: Optional[Sequence[TextQueryRecord]] = None,
                   mask_mode: Optional[str] = None, seed: int = 0, w: float = 2.0) -> EvalReport:
    records = list(records) if records is not None else dataset.records("eval")
    videos = []
    for r in records:
        v = dataset.videos[r.video_id]
        if mask_mode is not None:
            v = apply_target_mask(v, r.gt_spans, mask_mode, record_rng(seed, r.query_id))
        videos.append(v)
    preds, sal = predict(model, videos, records)
    return evaluate(preds, records, sal, [v.clip_count for v in videos], dataset.clip_seconds, w)


SPURIOUS_KEYS = ("r1@0.7", "r1@0.9", "map@0.75", "map_avg")


def _spurious_view(rep: EvalReport) -> Dict[str, float]:
    return {"r1@0.7": rep.r1["0.7"], "r1@0.9": rep.r1["0.9"], "map@0.75": rep.map_at_075, "map_avg": rep.map_avg}


def spurious_diagnostic(model: GroundingModel, dataset: Dataset, mode: str, seed: int = 0,
                        records: Optional[Sequence[TextQueryRecord]] = None) -> dict:
    """Evaluate with and without GT clips masked; lower masked scores mean less background reliance."""
    clean = _spurious_view(evaluate_model(model, dataset, records))
    masked = _spurious_view(evaluate_model(model, dataset, records, mask_mode=mode, seed=seed))
    return {"mode": mode, "seed": seed, "unmasked": clean, "spurious": masked,
            "delta": {k: masked[k] - clean[k] for k in SPURIOUS_KEYS}}
