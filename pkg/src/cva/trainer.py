"""Seeded training loop: QCD views -> dual forward -> total loss -> AdamW with cosine decay."""
from __future__ import annotations

import json
import logging
import math
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .data import Dataset, TextQueryRecord, read_tensor_file, record_rng, write_tensor_file
from .losses import CbdConfig, LossWeights, Target, total_loss
from .metrics import EvalReport, evaluate_model
from .model import GroundingModel, ModelConfig, ModelOutput, build_model
from .numerics import backward
from .qcd import SimilarityStats, augment_pair, compute_similarity_stats

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class QcdConfig:
    enabled: bool = True
    alpha: float = 10.0
    beta: float = 60.0
    replace_ratio: float = 0.3
    context: int = 1
    # explicit [theta_min, theta_max]; [-1, 1] is the query-agnostic baseline
    band: Optional[List[float]] = None


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 1e-4
    betas: List[float] = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    grad_clip: Optional[float] = 0.1
    seed: int = 0
    eval_every: int = 10
    use_cbd: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    cbd: CbdConfig = field(default_factory=CbdConfig)
    qcd: QcdConfig = field(default_factory=QcdConfig)

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be >= 0")
        self.loss.validate()
        self.cbd.validate()
        self.model.cte.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "loss" in d:
            d["loss"] = LossWeights(**d["loss"])
        if "cbd" in d:
            d["cbd"] = CbdConfig(**d["cbd"])
        if "qcd" in d:
            d["qcd"] = QcdConfig(**d["qcd"])
        return cls(**d)


# --- optimizer --------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay: ``p -= lr * (wd * p + m_hat / (sqrt(v_hat) + eps))``."""

    def __init__(self, params: Dict[str, torch.nn.Parameter], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-2):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: torch.zeros_like(p) for k, p in params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in params.items()}

    @torch.no_grad()
    def step(self, lr: Optional[float] = None):
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        bc1 = 1 - self.beta1 ** t
        bc2 = 1 - self.beta2 ** t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[k], self.v[k]
            m.mul_(self.beta1).add_(g, alpha=1 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1 - self.beta2)
            p.mul_(1 - lr * self.weight_decay)
            denom = (v / bc2).sqrt_().add_(self.eps)
            p.addcdiv_(m, denom, value=-lr / bc1)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    if total_steps <= 0:
        return base_lr
    return base_lr * 0.5 * (1 + math.cos(math.pi * min(step, total_steps) / total_steps))


@torch.no_grad()
def clip_grad_norm(params: Sequence[torch.Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    norm = float(torch.sqrt(sum((g.double() ** 2).sum() for g in grads)))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for g in grads:
            g.mul_(scale)
    return norm


# --- training state / checkpoints -------------------------------------------

@dataclass
class TrainState:
    model: GroundingModel
    optimizer: AdamW
    cfg: TrainConfig
    stats: SimilarityStats
    step: int = 0
    total_steps: int = 0


def new_state(cfg: TrainConfig, train_set: Dataset, total_steps: int) -> TrainState:
    cfg.validate()
    model = build_model(cfg.model, seed=cfg.seed)
    opt = AdamW(dict(model.named_parameters()), cfg.lr, tuple(cfg.betas), cfg.eps, cfg.weight_decay)
    stats = compute_similarity_stats(train_set, cfg.qcd.alpha, cfg.qcd.beta)
    if cfg.qcd.band is not None:
        stats = stats.with_band(*cfg.qcd.band)
    return TrainState(model, opt, cfg, stats, 0, total_steps)


def save_checkpoint(state: TrainState, out_dir, extra: Optional[dict] = None) -> Path:
    out = Path(out_dir)
    (out / "tensors").mkdir(parents=True, exist_ok=True)
    names = []
    for name, p in state.model.named_parameters():
        write_tensor_file(out / "tensors" / f"{name}.cvaf", p.detach().cpu().numpy())
        write_tensor_file(out / "tensors" / f"adam_m.{name}.cvaf", state.optimizer.m[name].cpu().numpy())
        write_tensor_file(out / "tensors" / f"adam_v.{name}.cvaf", state.optimizer.v[name].cpu().numpy())
        names.append(name)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": state.cfg.to_dict(),
        "step": state.step,
        "total_steps": state.total_steps,
        "optimizer_step": state.optimizer.step_count,
        "seed": state.cfg.seed,
        "theta": [state.stats.theta_min, state.stats.theta_max],
        "parameters": names,
    }
    if extra:
        header.update(extra)
    path = out / "checkpoint.json"
    path.write_text(json.dumps(header, indent=1) + "\n")
    return path


class CheckpointError(ValueError):
    pass


def load_model(ckpt_dir) -> tuple:
    """Returns (model, header)."""
    ckpt = Path(ckpt_dir)
    header_path = ckpt / "checkpoint.json" if ckpt.is_dir() else ckpt
    ckpt = header_path.parent
    if not header_path.exists():
        raise CheckpointError(f"no checkpoint header at {header_path}")
    header = json.loads(header_path.read_text())
    cfg = TrainConfig.from_dict(header["config"])
    model = build_model(cfg.model, seed=cfg.seed)
    params = dict(model.named_parameters())
    if sorted(params) != sorted(header["parameters"]):
        raise CheckpointError("checkpoint parameter names do not match the model")
    with torch.no_grad():
        for name, p in params.items():
            arr = read_tensor_file(ckpt / "tensors" / f"{name}.cvaf")
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(f"parameter {name}: checkpoint shape {arr.shape} vs model {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr))
    return model, header


def restore_state(ckpt_dir, train_set: Dataset) -> TrainState:
    model, header = load_model(ckpt_dir)
    ckpt = Path(ckpt_dir)
    cfg = TrainConfig.from_dict(header["config"])
    opt = AdamW(dict(model.named_parameters()), cfg.lr, tuple(cfg.betas), cfg.eps, cfg.weight_decay)
    for name in opt.params:
        opt.m[name] = torch.from_numpy(read_tensor_file(ckpt / "tensors" / f"adam_m.{name}.cvaf"))
        opt.v[name] = torch.from_numpy(read_tensor_file(ckpt / "tensors" / f"adam_v.{name}.cvaf"))
    opt.step_count = header["optimizer_step"]
    stats = compute_similarity_stats(train_set, cfg.qcd.alpha, cfg.qcd.beta)
    if cfg.qcd.band is not None:
        stats = stats.with_band(*cfg.qcd.band)
    return TrainState(model, opt, cfg, stats, header["step"], header["total_steps"])


# --- steps --------------------------------------------------------------------

def _slice(out: ModelOutput, sl: slice) -> ModelOutput:
    return ModelOutput(out.spans[sl], out.logits[sl], out.saliency[sl], out.f_m[sl])


def make_views(dataset: Dataset, rec: TextQueryRecord, state: TrainState, epoch: int):
    cfg = state.cfg
    video = dataset.videos[rec.video_id]
    if not cfg.qcd.enabled:
        return video.features, video.features, {"replaced": 0, "fallbacks": 0}
    rng = record_rng(cfg.seed, rec.query_id, epoch, 0)
    a, b = augment_pair(dataset, rec, state.stats, cfg.qcd.context, cfg.qcd.replace_ratio, rng)
    tele = {"replaced": len(a.sources) + len(b.sources), "fallbacks": a.fallbacks + b.fallbacks}
    return a.video.features, b.video.features, tele


def train_step(batch: Sequence[TextQueryRecord], dataset: Dataset, state: TrainState, epoch: int) -> dict:
    """One optimizer update over ``batch``; returns loss components and augmentation telemetry."""
    cfg = state.cfg
    model = state.model
    dtype = next(model.parameters()).dtype
    groups = defaultdict(list)
    for rec in batch:
        groups[(dataset.videos[rec.video_id].clip_count, rec.token_features.shape[0])].append(rec)
    state.optimizer.zero_grad()
    loss_sum = 0
    logs: Dict[str, float] = defaultdict(float)
    tele = {"replaced": 0, "fallbacks": 0}
    for key in sorted(groups):
        recs = groups[key]
        v1, v2, targets = [], [], []
        for rec in recs:
            a, b, t = make_views(dataset, rec, state, epoch)
            v1.append(a)
            v2.append(b)
            for k in tele:
                tele[k] += t[k]
            targets.append(Target(rec.gt_spans, rec.saliency_labels, key[0],
                                  record_rng(cfg.seed, rec.query_id, epoch, 1)))
        n = len(recs)
        video = torch.as_tensor(np.stack(v1 + v2), dtype=dtype)
        text = torch.as_tensor(np.stack([r.token_features for r in recs] * 2), dtype=dtype)
        out = model(video, text)
        out1, out2 = _slice(out, slice(0, n)), _slice(out, slice(n, 2 * n))
        loss, parts = total_loss(out1, out2, targets, cfg.loss, cfg.cbd if cfg.use_cbd else None,
                                 head=model.contrastive_head)
        if not torch.isfinite(loss):
            raise TrainingError(
                f"non-finite loss at step {state.step} (epoch {epoch}) for records "
                f"{[r.query_id for r in recs]}: components {parts}"
            )
        loss_sum = loss_sum + loss * (n / len(batch))
        for k, v in parts.items():
            logs[k] += v * n / len(batch)
    backward(loss_sum)
    params = list(model.parameters())
    gnorm = clip_grad_norm(params, cfg.grad_clip) if cfg.grad_clip else float("nan")
    lr = cosine_lr(cfg.lr, state.step, state.total_steps)
    state.optimizer.step(lr)
    state.step += 1
    return {"step": state.step, "epoch": epoch, "loss": float(loss_sum.detach()), "lr": lr, "grad_norm": gnorm,
            **{k: float(v) for k, v in logs.items()}, **tele}


def epoch_batches(records: Sequence[TextQueryRecord], cfg: TrainConfig, epoch: int) -> List[List[TextQueryRecord]]:
    order = record_rng(cfg.seed, "shuffle", epoch).permutation(len(records))
    recs = [records[i] for i in order]
    return [recs[i:i + cfg.batch_size] for i in range(0, len(recs), cfg.batch_size)]


@dataclass
class FitResult:
    state: TrainState
    history: List[dict]
    report: Optional[EvalReport]


def fit(dataset: Dataset, cfg: TrainConfig, out_dir=None, resume=None, max_steps: Optional[int] = None,
        progress=None) -> FitResult:
    """Train on the "train" split and evaluate on "eval".

    Writes ``metrics.jsonl`` and ``ckpt/`` under ``out_dir`` when given.
    ``max_steps`` stops early (used for resume checks) without changing the schedule.
    """
    train_set = dataset.subset("train")
    train_recs = train_set.records()
    eval_recs = dataset.records("eval")
    if not train_recs:
        raise TrainingError("no training records")
    spe = math.ceil(len(train_recs) / cfg.batch_size)
    total = cfg.epochs * spe
    state = restore_state(resume, train_set) if resume else new_state(cfg, train_set, total)
    cfg = state.cfg
    out = Path(out_dir) if out_dir else None
    metrics_fh = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.jsonl", "a" if resume else "w")
    history: List[dict] = []

    def emit(rec):
        history.append(rec)
        if metrics_fh:
            metrics_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            metrics_fh.flush()

    def run_eval(epoch):
        if not eval_recs:
            return None
        rep = evaluate_model(state.model, dataset, eval_recs)
        emit({"type": "eval", "epoch": epoch, "step": state.step, **rep.to_dict(per_query=False)})
        return rep

    report = None
    try:
        if cfg.epochs == 0:
            report = run_eval(0)
        start_epoch = state.step // spe if spe else 0
        t0 = time.time()
        for epoch in range(start_epoch, cfg.epochs):
            batches = epoch_batches(train_recs, cfg, epoch)
            for bi, batch in enumerate(batches):
                if epoch * spe + bi < state.step:
                    continue
                if max_steps is not None and state.step >= max_steps:
                    break
                m = train_step(batch, train_set, state, epoch)
                emit({"type": "train", **m})
            if max_steps is not None and state.step >= max_steps:
                break
            done = epoch + 1
            if progress:
                progress(done, history[-1], time.time() - t0)
            if done % cfg.eval_every == 0 or done == cfg.epochs:
                report = run_eval(done)
                if out:
                    save_checkpoint(state, out / "ckpt")
        if out:
            save_checkpoint(state, out / "ckpt")
    finally:
        if metrics_fh:
            metrics_fh.close()
    return FitResult(state, history, report)
