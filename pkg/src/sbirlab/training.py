"""Multi-task triplet training of independent photo and sketch encoders."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor
from .dataset import DatasetIndex
from .encoders import (EmbeddingPool, EncoderConfig, CnnEncoderConfig, Params, forward,
                       init_params, validate_params)
from .sampling import BatchSpec, TripletBatch, sample_batch

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class LossConfig:
    margin: float = 3.0
    classification_weight: float = 1.0

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError("margin must be positive")
        if self.classification_weight < 0:
            raise ValueError("classification_weight must be non-negative")


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 100
    initial_lr: float = 1e-4
    drop_epoch: int = 30
    dropped_lr: float = 1e-5
    finetune_lr: float = 1e-6
    batch_size: int = 128
    steps_per_epoch: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("epochs must be >= 1 and batch_size >= 2")
        if not self.drop_epoch < self.epochs:
            raise ValueError("drop_epoch must be smaller than epochs")
        if not self.initial_lr > self.dropped_lr > self.finetune_lr > 0:
            raise ValueError("learning rates must be positive and strictly decreasing")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be positive")

    def lr_at(self, epoch: int) -> float:
        return self.initial_lr if epoch < self.drop_epoch else self.dropped_lr

    def steps_for(self, num_instances: int) -> int:
        if self.steps_per_epoch is not None:
            return self.steps_per_epoch
        return max(1, math.ceil(num_instances / self.batch_size))


@dataclass
class Checkpoint:
    photo_config: EncoderConfig
    sketch_config: EncoderConfig
    photo_params: dict[str, np.ndarray]
    sketch_params: dict[str, np.ndarray]
    photo_opt: AdamState
    sketch_opt: AdamState
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def photo_tensors(self) -> Params:
        return _to_tensors(self.photo_params)

    def sketch_tensors(self) -> Params:
        return _to_tensors(self.sketch_params)

    @property
    def num_classes(self) -> int:
        return self.photo_config.num_classes


def _to_tensors(arrays: dict[str, np.ndarray]) -> Params:
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}


# -- losses --------------------------------------------------------------------


def triplet_terms(anchor: Tensor, positive: Tensor, negative: Tensor, margin: float) -> Tensor:
    """Per-triplet hinge ``[|a-p|^2 - |a-n|^2 + margin]_+`` on (N, D) embeddings."""
    if not (anchor.shape == positive.shape == negative.shape):
        raise ValueError(f"embedding shapes differ: {anchor.shape}, {positive.shape}, "
                         f"{negative.shape}")
    to_pos = ad.sub(anchor, positive)
    to_neg = ad.sub(anchor, negative)
    dp = ad.sum(ad.mul(to_pos, to_pos), axis=-1)
    dn = ad.sum(ad.mul(to_neg, to_neg), axis=-1)
    return ad.relu(ad.add(ad.sub(dp, dn), margin))


def triplet_loss(anchor: Tensor, positive: Tensor, negative: Tensor, margin: float = 3.0) -> Tensor:
    """Batch mean of the triplet hinge; the gradient is zero for satisfied triplets."""
    return ad.mean(triplet_terms(anchor, positive, negative, margin))


def multitask_loss(triplet: Tensor, photo_logits: Tensor, sketch_logits: Tensor,
                   photo_labels, sketch_labels=None, weight: float = 1.0) -> Tensor:
    """``triplet + weight * (CE(photo) + CE(sketch)) / 2``.

    ``sketch_labels`` defaults to ``photo_labels`` when both logit sets are aligned.
    """
    if weight == 0:
        return triplet
    if sketch_labels is None:
        sketch_labels = photo_labels
    ce = ad.add(ad.cross_entropy(photo_logits, photo_labels),
                ad.cross_entropy(sketch_logits, sketch_labels))
    return ad.add(triplet, ad.scale(ce, 0.5 * weight))


def batch_loss(photo_params: Params, photo_config: EncoderConfig, sketch_params: Params,
               sketch_config: EncoderConfig, batch: TripletBatch, loss: LossConfig):
    """Forward one batch; returns (total loss tensor, triplet loss tensor, hinge terms)."""
    n = len(batch)
    p_out = forward(photo_params, photo_config, batch.anchors)
    s_out = forward(sketch_params, sketch_config, np.concatenate([batch.positives, batch.negatives]))
    pos_emb, neg_emb = s_out.embedding[:n], s_out.embedding[n:]
    terms = triplet_terms(p_out.embedding, pos_emb, neg_emb, loss.margin)
    trip = ad.mean(terms)
    total = multitask_loss(trip, p_out.logits, s_out.logits, batch.anchor_labels,
                           np.concatenate([batch.positive_labels, batch.negative_labels]),
                           loss.classification_weight)
    return total, trip, terms


# -- loop ----------------------------------------------------------------------


def _check_compat(ds: DatasetIndex, *configs: EncoderConfig) -> None:
    if len(ds) < 2:
        raise ValueError("training split needs at least 2 instances")
    c, h, w = ds.image_shape
    for cfg in configs:
        if (cfg.in_channels, *cfg.input_size) != (c, h, w):
            raise ValueError(f"encoder expects {(cfg.in_channels, *cfg.input_size)}, "
                             f"dataset holds {(c, h, w)} images")
        if cfg.num_classes != ds.num_categories:
            raise ValueError(f"encoder has {cfg.num_classes} classes, dataset has "
                             f"{ds.num_categories} categories")


def _run_epochs(ckpt: Checkpoint, ds: DatasetIndex, spec: BatchSpec, loss: LossConfig,
                epochs: int, lr_for_epoch, steps: int, rng: np.random.Generator,
                phase: str) -> Checkpoint:
    photo, sketch = ckpt.photo_tensors(), ckpt.sketch_tensors()
    p_names, s_names = list(photo), list(sketch)
    p_opt, s_opt = ckpt.photo_opt, ckpt.sketch_opt
    history = list(ckpt.history)
    epoch = ckpt.epoch
    for _ in range(epochs):
        lr = lr_for_epoch(epoch)
        totals, trips, active = [], [], []
        for step in range(steps):
            batch = sample_batch(ds, spec, rng)
            ad.zero_grad(photo.values())
            ad.zero_grad(sketch.values())
            with ad.Tape() as tape:
                total, trip, terms = batch_loss(photo, ckpt.photo_config, sketch,
                                                ckpt.sketch_config, batch, loss)
            value = total.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch} step {step} "
                                       f"(triplet={trip.item()}, lr={lr})")
            ad.backward(total, tape)
            if lr > 0:
                new_p, p_opt = ad.adam_step([photo[k].data for k in p_names],
                                            [photo[k].grad for k in p_names], p_opt, lr)
                new_s, s_opt = ad.adam_step([sketch[k].data for k in s_names],
                                            [sketch[k].grad for k in s_names], s_opt, lr)
                for k, v in zip(p_names, new_p):
                    photo[k].data = v
                for k, v in zip(s_names, new_s):
                    sketch[k].data = v
            totals.append(value)
            trips.append(trip.item())
            active.append(float((terms.data > 0).mean()))
        epoch += 1
        rec = {"epoch": epoch, "phase": phase, "strategy": spec.strategy.value, "lr": lr,
               "loss": float(np.mean(totals)), "triplet": float(np.mean(trips)),
               "active_fraction": float(np.mean(active))}
        history.append(rec)
        log.debug("epoch %d %s loss=%.4f triplet=%.4f", epoch, phase, rec["loss"], rec["triplet"])
    return replace(ckpt,
                   photo_params={k: t.data for k, t in photo.items()},
                   sketch_params={k: t.data for k, t in sketch.items()},
                   photo_opt=p_opt, sketch_opt=s_opt, epoch=epoch, history=history)


def _seeds(seed: int, *extra: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence([seed, *extra]).generate_state(3)]


def train(ds: DatasetIndex, photo_config: EncoderConfig, sketch_config: EncoderConfig,
          spec: BatchSpec = BatchSpec(), loss: LossConfig = LossConfig(),
          sched: TrainSchedule = TrainSchedule()) -> Checkpoint:
    """Train both encoders from scratch; a pure function of its arguments.

    The photo encoder embeds anchors and the sketch encoder embeds positives and
    negatives. The batch size comes from ``sched``; the learning rate drops once,
    at ``sched.drop_epoch``.
    """
    _check_compat(ds, photo_config, sketch_config)
    if photo_config.embedding_dim != sketch_config.embedding_dim:
        raise ValueError("photo and sketch encoders must produce equal embedding sizes")
    spec = replace(spec, batch_size=sched.batch_size)
    photo_seed, sketch_seed, sampler_seed = _seeds(sched.seed)
    photo = init_params(photo_config, photo_seed)
    sketch = init_params(sketch_config, sketch_seed)
    ckpt = Checkpoint(
        photo_config, sketch_config,
        {k: t.data for k, t in photo.items()}, {k: t.data for k, t in sketch.items()},
        AdamState.zeros_like([t.data for t in photo.values()]),
        AdamState.zeros_like([t.data for t in sketch.values()]),
        meta=_json_plain({"loss": asdict(loss), "schedule": asdict(sched),
                          "batch": {**asdict(spec), "strategy": spec.strategy.value}}),
    )
    rng = np.random.default_rng(sampler_seed)
    return _run_epochs(ckpt, ds, spec, loss, sched.epochs, sched.lr_at,
                       sched.steps_for(len(ds)), rng, "train")


def _json_plain(value):
    """Tuples become lists so metadata survives a JSON round trip unchanged."""
    if isinstance(value, dict):
        return {k: _json_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_plain(v) for v in value]
    return value


def finetune(ckpt: Checkpoint, ds: DatasetIndex, spec: BatchSpec,
             sched: TrainSchedule = TrainSchedule(), loss: Optional[LossConfig] = None,
             lr: Optional[float] = None, epochs: Optional[int] = None,
             embedding_pool: Optional[EmbeddingPool] = None) -> Checkpoint:
    """Continue training a checkpoint with another sampler at a constant rate.

    ``lr`` defaults to ``sched.finetune_lr``; ``lr=0`` runs the batches but
    leaves every parameter untouched. ``embedding_pool`` swaps the CNN
    embedding head (it has no parameters) before continuing.
    """
    _check_compat(ds, ckpt.photo_config, ckpt.sketch_config)
    for params, cfg in ((ckpt.photo_params, ckpt.photo_config),
                        (ckpt.sketch_params, ckpt.sketch_config)):
        validate_params(_to_tensors(params), cfg)
    lr = sched.finetune_lr if lr is None else float(lr)
    if lr < 0:
        raise ValueError("finetune learning rate must be non-negative")
    if loss is None:
        loss = LossConfig(**ckpt.meta.get("loss", {}))
    if embedding_pool is not None:
        cfgs = []
        for cfg in (ckpt.photo_config, ckpt.sketch_config):
            if not isinstance(cfg, CnnEncoderConfig):
                raise ValueError("embedding_pool only applies to CNN encoders")
            cfgs.append(replace(cfg, embedding_pool=EmbeddingPool(embedding_pool)))
        ckpt = replace(ckpt, photo_config=cfgs[0], sketch_config=cfgs[1])
    spec = replace(spec, batch_size=sched.batch_size)
    *_, sampler_seed = _seeds(sched.seed, ckpt.epoch, 1)
    rng = np.random.default_rng(sampler_seed)
    return _run_epochs(ckpt, ds, spec, loss, epochs or sched.epochs, lambda _: lr,
                       sched.steps_for(len(ds)), rng, "finetune")
