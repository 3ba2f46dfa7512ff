"""Set-prediction matching, moment/highlight losses and the boundary contrastive loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .data import MomentSpan
from .numerics import ContractError

Interval = Union[MomentSpan, Tuple[float, float]]


@dataclass
class LossWeights:
    l1: float = 10.0
    giou: float = 1.0
    hd: float = 1.0
    cbd: float = 0.005
    margin: float = 0.2
    tau: float = 0.07
    # BCE on decoder confidences (matched -> 1); 0 disables it
    conf: float = 1.0
    # weight of -sigmoid(logit) in the matching cost; 0 matches on span geometry only
    match_conf: float = 4.0

    def validate(self):
        for k in ("l1", "giou", "hd", "cbd", "conf", "match_conf"):
            if getattr(self, k) < 0:
                raise ValueError(f"loss weight {k} must be >= 0")
        if self.tau <= 0:
            raise ValueError("temperature must be > 0")


@dataclass
class CbdConfig:
    n_adj: int = 2
    n_hard: int = 5
    # "boundary" (start/end clips), "all" (every GT clip) or "center" (middle clip)
    anchors: str = "boundary"

    def validate(self):
        if self.n_adj < 0 or self.n_hard < 0 or (self.n_adj == 0 and self.n_hard == 0):
            raise ValueError(f"invalid negative counts n_adj={self.n_adj}, n_hard={self.n_hard}")
        if self.anchors not in ("boundary", "all", "center"):
            raise ValueError(f"unknown anchor mode {self.anchors!r}")


# --- interval geometry ------------------------------------------------------

def _extent(x: Interval) -> Tuple[float, float]:
    if isinstance(x, MomentSpan):
        return float(x.start_clip), float(x.end_clip + 1)
    return float(x[0]), float(x[1])


def iou_1d(a: Interval, b: Interval) -> float:
    (s1, e1), (s2, e2) = _extent(a), _extent(b)
    inter = max(0.0, min(e1, e2) - max(s1, s2))
    union = (e1 - s1) + (e2 - s2) - inter
    if union <= 0:
        return 1.0 if (s1, e1) == (s2, e2) else 0.0
    return inter / union


def giou_1d(a: Interval, b: Interval) -> float:
    (s1, e1), (s2, e2) = _extent(a), _extent(b)
    inter = max(0.0, min(e1, e2) - max(s1, s2))
    union = (e1 - s1) + (e2 - s2) - inter
    hull = max(e1, e2) - min(s1, s2)
    if hull <= 0:
        return 1.0
    iou = inter / union if union > 0 else 0.0
    return iou - (hull - union) / hull


def cw_to_se(cw: torch.Tensor) -> torch.Tensor:
    return torch.stack([cw[..., 0] - cw[..., 1] / 2, cw[..., 0] + cw[..., 1] / 2], dim=-1)


def pairwise_iou_giou(pred_cw: torch.Tensor, gt_cw: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """IoU and gIoU for every (prediction, GT) pair; inputs are ``[N, 2]`` and ``[K, 2]`` (center, width)."""
    p, g = cw_to_se(pred_cw)[:, None, :], cw_to_se(gt_cw)[None, :, :]
    inter = (torch.minimum(p[..., 1], g[..., 1]) - torch.maximum(p[..., 0], g[..., 0])).clamp(min=0)
    union = (p[..., 1] - p[..., 0]) + (g[..., 1] - g[..., 0]) - inter
    hull = torch.maximum(p[..., 1], g[..., 1]) - torch.minimum(p[..., 0], g[..., 0])
    iou = inter / union
    return iou, iou - (hull - union) / hull


def spans_to_cw(spans: Sequence[MomentSpan], clip_count: int, dtype=torch.float32) -> torch.Tensor:
    return torch.tensor([s.to_normalized(clip_count) for s in spans], dtype=dtype).reshape(-1, 2)


# --- matching ---------------------------------------------------------------

def hungarian_match(cost) -> List[Tuple[int, int]]:
    cost = np.asarray(cost, dtype=np.float64)
    if not np.all(np.isfinite(cost)):
        raise ValueError("matching cost must be finite")
    rows, cols = linear_sum_assignment(cost)
    return sorted(zip(rows.tolist(), cols.tolist()))


def match_cost(pred_cw: torch.Tensor, gt_cw: torch.Tensor, w: LossWeights,
               logits: Optional[torch.Tensor] = None) -> torch.Tensor:
    l1 = torch.cdist(pred_cw, gt_cw, p=1)
    _, giou = pairwise_iou_giou(pred_cw, gt_cw)
    cost = w.l1 * l1 + w.giou * (1 - giou)
    if logits is not None and w.match_conf > 0:
        cost = cost - w.match_conf * torch.sigmoid(logits)[:, None]
    return cost


# --- moment retrieval ---------------------------------------------------------

def mr_loss(spans: torch.Tensor, logits: torch.Tensor, gt_cw: torch.Tensor,
            w: LossWeights) -> Tuple[torch.Tensor, Dict[str, float]]:
    """Matched L1 + gIoU regression averaged over GT count, plus confidence BCE."""
    if gt_cw.numel() == 0:
        raise ContractError("mr_loss needs at least one GT span")
    with torch.no_grad():
        pairs = hungarian_match(match_cost(spans, gt_cw, w, logits).cpu().numpy())
    pi = torch.tensor([i for i, _ in pairs], dtype=torch.long)
    gi = torch.tensor([j for _, j in pairs], dtype=torch.long)
    matched, target = spans[pi], gt_cw[gi].to(spans.dtype)
    l1 = (matched - target).abs().sum() / len(gt_cw)
    _, giou = pairwise_iou_giou(matched, target)
    giou_loss = (1 - torch.diagonal(giou)).sum() / len(gt_cw)
    loss = w.l1 * l1 + w.giou * giou_loss
    conf = torch.zeros((), dtype=spans.dtype)
    if w.conf > 0:
        labels = torch.zeros_like(logits)
        labels[pi] = 1.0
        conf = F.binary_cross_entropy_with_logits(logits, labels)
        loss = loss + w.conf * conf
    return loss, {"l1": l1.item(), "giou": giou_loss.item(), "conf": conf.item()}


# --- highlight detection ----------------------------------------------------

def hd_loss(saliency: torch.Tensor, labels, gt_spans: Sequence[MomentSpan], rng: np.random.Generator,
            w: LossWeights) -> Tuple[torch.Tensor, Dict[str, float]]:
    """Margin term on one sampled (inside-GT, outside-GT) clip pair plus a rank-aware hinge inside GT."""
    labels = np.asarray(labels)
    L = saliency.shape[-1]
    inside = sorted({i for s in gt_spans for i in s.indices()})
    outside = sorted(set(range(L)) - set(inside))
    info = {"margin": 0.0, "rank": 0.0, "skipped": 0}
    zero = saliency.sum() * 0
    if not inside:
        info["skipped"] = 1
        return zero, info
    margin = zero
    if outside:
        hi = int(rng.choice(inside))
        lo = int(rng.choice(outside))
        margin = F.relu(w.margin + saliency[lo] - saliency[hi])
    else:
        info["skipped"] = 1
    idx = torch.tensor(inside)
    lab = torch.as_tensor(labels[inside])
    s = saliency[idx]
    ordered = lab[:, None] < lab[None, :]  # (a, b) with label(a) < label(b)
    if bool(ordered.any()):
        hinge = F.relu(w.margin + s[:, None] - s[None, :])
        rank = hinge[ordered].mean()
    else:
        rank = zero
    info["margin"], info["rank"] = margin.item(), rank.item()
    return w.hd * (margin + rank), info


# --- boundary contrastive loss ---------------------------------------------

class EmptyBackground(RuntimeError):
    pass


def select_boundary_anchors(gt_spans: Sequence[MomentSpan]) -> List[int]:
    return sorted({i for s in gt_spans for i in (s.start_clip, s.end_clip)})


def select_anchors(gt_spans: Sequence[MomentSpan], mode: str = "boundary") -> List[int]:
    if mode == "boundary":
        return select_boundary_anchors(gt_spans)
    if mode == "all":
        return sorted({i for s in gt_spans for i in s.indices()})
    if mode == "center":
        return sorted({(s.start_clip + s.end_clip) // 2 for s in gt_spans})
    raise ValueError(f"unknown anchor mode {mode!r}")


def _cos_rows(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return F.normalize(a, dim=-1, eps=1e-12) @ F.normalize(b, dim=-1, eps=1e-12).T


def mine_negatives(f_m: torch.Tensor, b: int, gt_all, n_adj: int, n_hard: int) -> List[int]:
    """Background clips within ``n_adj`` of the anchor plus the ``n_hard`` most similar remaining ones."""
    L = f_m.shape[0]
    gt_all = set(gt_all)
    bg = [j for j in range(L) if j not in gt_all]
    if not bg:
        raise EmptyBackground("no background clips to mine negatives from")
    adj = [j for j in bg if abs(j - b) <= n_adj]
    rem = [j for j in bg if abs(j - b) > n_adj]
    hard: List[int] = []
    if rem and n_hard > 0:
        with torch.no_grad():
            sims = _cos_rows(f_m[b:b + 1], f_m[rem])[0]
        order = sorted(range(len(rem)), key=lambda k: (-float(sims[k]), rem[k]))
        hard = [rem[k] for k in order[:n_hard]]
    return sorted(set(adj) | set(hard))


def info_nce(s_pos: torch.Tensor, s_neg: torch.Tensor) -> torch.Tensor:
    """-log(exp(s_pos) / (exp(s_pos) + sum exp(s_neg))) per row; inputs already divided by tau."""
    logits = torch.cat([s_pos[..., None], s_neg], dim=-1)
    return torch.logsumexp(logits, dim=-1) - s_pos


def cbd_loss(f_m_1: torch.Tensor, f_m_2: torch.Tensor, gt_spans: Sequence[MomentSpan], cfg: CbdConfig,
             tau: float, head=None) -> Optional[torch.Tensor]:
    """Contrastive loss at GT boundary clips across two augmented views.

    Negatives are mined from the first view and pooled over all anchors into
    one shared set.  Returns None when the sample has no background clips.
    """
    project = head if head is not None else (lambda x: x)
    anchors = select_anchors(gt_spans, cfg.anchors)
    gt_all = {i for s in gt_spans for i in s.indices()}
    try:
        negs = sorted(set().union(*(mine_negatives(f_m_1, b, gt_all, cfg.n_adj, cfg.n_hard) for b in anchors)))
    except EmptyBackground:
        return None
    a_idx = torch.tensor(anchors)
    z = project(f_m_1[a_idx])
    z_pos = project(f_m_2[a_idx])
    z_neg = project(f_m_1[torch.tensor(negs, dtype=torch.long)])
    s_pos = F.cosine_similarity(z, z_pos, dim=-1, eps=1e-12) / tau
    s_neg = _cos_rows(z, z_neg) / tau
    return info_nce(s_pos, s_neg).mean()


# --- total objective --------------------------------------------------------

@dataclass
class Target:
    """Per-record supervision shared by both augmented views."""

    gt_spans: List[MomentSpan]
    saliency_labels: np.ndarray
    clip_count: int
    rng: np.random.Generator


def total_loss(out1, out2, targets: Sequence[Target], w: LossWeights, cbd_cfg: Optional[CbdConfig],
               head=None) -> Tuple[torch.Tensor, Dict[str, float]]:
    """MR + HD averaged over the two views and over records, plus weighted CBD.

    ``out2`` may be None for single-view training, in which case CBD is skipped.
    """
    views = [out1] if out2 is None else [out1, out2]
    mr_sum = hd_sum = cbd_sum = 0
    logs = {"l1": 0.0, "giou": 0.0, "conf": 0.0, "margin": 0.0, "rank": 0.0, "hd_skipped": 0, "cbd_skipped": 0}
    n_cbd = 0
    for b, t in enumerate(targets):
        gt_cw = spans_to_cw(t.gt_spans, t.clip_count, dtype=out1.spans.dtype)
        for out in views:
            mr, info = mr_loss(out.spans[b], out.logits[b], gt_cw, w)
            hd, hinfo = hd_loss(out.saliency[b], t.saliency_labels, t.gt_spans, t.rng, w)
            mr_sum = mr_sum + mr / len(views)
            hd_sum = hd_sum + hd / len(views)
            for k in ("l1", "giou", "conf"):
                logs[k] += info[k] / len(views)
            logs["margin"] += hinfo["margin"] / len(views)
            logs["rank"] += hinfo["rank"] / len(views)
            logs["hd_skipped"] += hinfo["skipped"]
        if out2 is not None and cbd_cfg is not None and w.cbd > 0:
            c = cbd_loss(out1.f_m[b], out2.f_m[b], t.gt_spans, cbd_cfg, w.tau, head)
            if c is None:
                logs["cbd_skipped"] += 1
            else:
                cbd_sum = cbd_sum + c
                n_cbd += 1
    n = len(targets)
    mr_mean, hd_mean = mr_sum / n, hd_sum / n
    cbd_mean = cbd_sum / n_cbd if n_cbd else out1.spans.sum() * 0
    total = mr_mean + hd_mean + w.cbd * cbd_mean
    logs.update({k: v / n for k, v in logs.items() if k in ("l1", "giou", "conf", "margin", "rank")})
    logs.update({"mr": float(mr_mean.detach()), "hd": float(hd_mean.detach()), "cbd": float(cbd_mean.detach()), "total": float(total.detach())})
    return total, logs
