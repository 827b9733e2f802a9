"""Adversarial training loop for the baseline and action-aware run modes."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import model as M
from .data import FrameFeatureSet, LabelSet

logger = logging.getLogger(__name__)

LAMBDA_SCHEDULES = ("constant", "ramp")
DIVERGENCE_LIMIT = 1e6


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    run_mode: str = "ada"
    D: int = 512
    L: int = 2
    H: int = 256
    lambda_grl: float = 1.0
    lambda_schedule: str = "constant"
    loss_weight_domain: float = 1.0
    lr0: float = 3e-3
    momentum: float = 0.9
    epochs: int = 60
    lr_drop_epochs: tuple[int, ...] = (30, 45)
    lr_drop_factor: float = 0.1
    batch_size: int = 32
    rng_seed: int = 0
    combine_rule: str = "avg"
    rectify: bool = False

    def __post_init__(self):
        self.lr_drop_epochs = tuple(int(e) for e in self.lr_drop_epochs)

    def validate(self) -> None:
        if self.run_mode not in M.RUN_MODES:
            raise ValueError(f"run_mode must be one of {M.RUN_MODES}, got {self.run_mode!r}")
        if self.combine_rule not in M.COMBINE_RULES:
            raise ValueError(f"combine_rule must be one of {M.COMBINE_RULES}")
        if self.lambda_schedule not in LAMBDA_SCHEDULES:
            raise ValueError(f"lambda_schedule must be one of {LAMBDA_SCHEDULES}")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        drops = self.lr_drop_epochs
        if any(b <= a for a, b in zip(drops, drops[1:])):
            raise ValueError("lr_drop_epochs must be strictly increasing")
        if drops and self.epochs and drops[-1] >= self.epochs:
            raise ValueError("lr_drop_epochs must be below epochs")
        if min(self.D, self.H, self.batch_size) < 1 or self.L < 0:
            raise ValueError("D, H and batch_size must be >= 1, L >= 0")
        if self.lambda_grl < 0 or self.loss_weight_domain < 0:
            raise ValueError("lambda_grl and loss_weight_domain must be >= 0")


@dataclass
class EpochReport:
    epoch: int
    lr: float
    cls_loss: float
    domain_loss: float
    source_acc: float
    target_acc: Optional[float] = None
    target_verb_acc: Optional[float] = None
    target_noun_acc: Optional[float] = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    n_drops = sum(1 for e in cfg.lr_drop_epochs if e <= epoch)
    return cfg.lr0 * cfg.lr_drop_factor**n_drops


def lambda_at(progress: float, cfg: TrainConfig) -> float:
    """GRL coefficient; ``progress`` runs from 0 to 1 over training."""
    if cfg.lambda_schedule == "ramp":
        return cfg.lambda_grl * (2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0)
    return cfg.lambda_grl


def total_loss(verb_loss, noun_loss, domain_losses, cfg: TrainConfig) -> float:
    """Mean source classification loss plus weighted mean domain loss.

    ``verb_loss``/``noun_loss`` are per-source-sample arrays (or scalars that
    are already means); ``domain_losses`` covers source and target samples.
    """
    cls = float(np.mean(verb_loss)) + float(np.mean(noun_loss))
    dom = np.asarray(domain_losses, dtype=np.float64)
    d = float(dom.mean()) if dom.size else 0.0
    return cls + cfg.loss_weight_domain * d


class SGDMomentum:
    """``v <- mu*v + g;  p <- p - lr*v`` applied in place, no weight decay."""

    def __init__(self, params: M.ModelParams, momentum: float):
        self.momentum = momentum
        self.velocity = [np.zeros_like(t) for t in params.tensors()]

    def step(self, params: M.ModelParams, grads: M.ModelParams, lr: float) -> None:
        for p, g, v in zip(params.tensors(), grads.tensors(), self.velocity):
            v *= self.momentum
            v += g
            p -= lr * v
        params.version += 1


@dataclass
class StepStats:
    cls_loss: float
    domain_loss: float
    total: float
    source_correct: int
    source_count: int


def train_step(
    params: M.ModelParams,
    source_videos,
    verb_gt,
    noun_gt,
    target_videos,
    cfg: TrainConfig,
    optimizer: SGDMomentum,
    lr: float,
    lambda_grl: Optional[float] = None,
    step_index: int = 0,
) -> StepStats:
    """One forward/backward/update on a paired source+target batch.

    Updates ``params`` in place and returns the pre-update losses.
    """
    lam = cfg.lambda_grl if lambda_grl is None else lambda_grl
    cache = M.forward(
        params, source_videos, verb_gt, noun_gt, target_videos,
        cfg.run_mode, cfg.combine_rule, cfg.rectify,
    )
    loss = total_loss(cache.verb_loss, cache.noun_loss, cache.domain_loss, cfg)
    cls = float(np.mean(cache.verb_loss) + np.mean(cache.noun_loss))
    dom = float(np.mean(cache.domain_loss)) if cache.domain_loss.size else 0.0
    if not math.isfinite(loss) or loss > DIVERGENCE_LIMIT:
        raise DivergenceError(f"loss {loss!r} at step {step_index}")
    grads = M.backward(cache, params, lam, cfg.loss_weight_domain)
    optimizer.step(params, grads, lr)
    for t in params.tensors():
        if not np.all(np.isfinite(t)):
            raise DivergenceError(f"non-finite parameter after step {step_index}")
    correct = int(np.sum(
        (cache.verb_logits.argmax(axis=1) == cache.verb_gt)
        & (cache.noun_logits.argmax(axis=1) == cache.noun_gt)
    ))
    return StepStats(cls, dom, loss, correct, len(verb_gt))


class _Stream:
    """Endless shuffled index stream; reshuffles every time it wraps."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n) if n else np.zeros(0, dtype=np.int64)
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        if self.n == 0:
            return np.zeros(0, dtype=np.int64)
        out = []
        while k > 0:
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            chunk = self.order[self.pos : self.pos + k]
            out.append(chunk)
            self.pos += len(chunk)
            k -= len(chunk)
        return np.concatenate(out)


def init_for(source: FrameFeatureSet, labels: LabelSet, cfg: TrainConfig) -> M.ModelParams:
    return M.init_params(
        source.d_in, cfg.D, cfg.L, labels.num_verbs, labels.num_nouns, cfg.H, seed=cfg.rng_seed
    )


def fit(
    source: FrameFeatureSet,
    source_labels: LabelSet,
    target: Optional[FrameFeatureSet],
    cfg: TrainConfig,
    target_labels: Optional[LabelSet] = None,
    params: Optional[M.ModelParams] = None,
    on_epoch: Optional[Callable[[EpochReport], None]] = None,
) -> tuple[M.ModelParams, list[EpochReport]]:
    """Train for ``cfg.epochs`` passes over the source set.

    Each step pairs ``batch_size`` source videos with the same number of target
    videos drawn from an independent shuffled stream that wraps (and
    reshuffles) whenever it runs out. Passing ``target=None`` trains on source
    alone with identical batching. ``target_labels`` are only read by the
    per-epoch evaluation.
    """
    from .inference import evaluate_params

    cfg.validate()
    if target is not None and target.d_in != source.d_in:
        raise M.DimensionError(f"source d_in={source.d_in} but target d_in={target.d_in}")
    if params is None:
        params = init_for(source, source_labels, cfg)
    if params.embed_w.shape[0] != source.d_in:
        raise M.DimensionError(f"features have d_in={source.d_in}, model expects {params.embed_w.shape[0]}")

    src_frames = source.frames
    verb_all, noun_all = source_labels.arrays_for(source.ids)
    tgt_frames = target.frames if target is not None else []

    src_stream = _Stream(len(src_frames), np.random.default_rng([cfg.rng_seed, 1]))
    tgt_stream = _Stream(len(tgt_frames), np.random.default_rng([cfg.rng_seed, 2]))
    opt = SGDMomentum(params, cfg.momentum)
    steps_per_epoch = math.ceil(len(src_frames) / cfg.batch_size)
    total_steps = max(1, steps_per_epoch * cfg.epochs)

    reports: list[EpochReport] = []
    step = 0
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        cls_sum = dom_sum = 0.0
        correct = seen = 0
        remaining = len(src_frames)
        for _ in range(steps_per_epoch):
            k = min(cfg.batch_size, remaining)
            remaining -= k
            si = src_stream.take(k)
            ti = tgt_stream.take(k)
            stats = train_step(
                params,
                [src_frames[i] for i in si],
                verb_all[si],
                noun_all[si],
                [tgt_frames[i] for i in ti],
                cfg,
                opt,
                lr,
                lambda_grl=lambda_at(step / total_steps, cfg),
                step_index=step,
            )
            cls_sum += stats.cls_loss * k
            dom_sum += stats.domain_loss * k
            correct += stats.source_correct
            seen += k
            step += 1
        report = EpochReport(
            epoch=epoch,
            lr=lr,
            cls_loss=cls_sum / seen if seen else 0.0,
            domain_loss=dom_sum / seen if seen else 0.0,
            source_acc=correct / seen if seen else 0.0,
        )
        if target is not None and target_labels is not None and len(target):
            m = evaluate_params(params, target, target_labels)
            report.target_acc = m.action_top1
            report.target_verb_acc = m.verb_top1
            report.target_noun_acc = m.noun_top1
        logger.info("epoch %d: %s", epoch, report)
        reports.append(report)
        if on_epoch is not None:
            on_epoch(report)
    return params, reports
