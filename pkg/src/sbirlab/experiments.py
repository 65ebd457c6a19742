"""Glue between training checkpoints and retrieval evaluation, plus the
seeded finetuning comparisons run by the acceptance suite and the demos."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dataset import DatasetIndex
from .encoders import CnnEncoderConfig, EmbeddingPool, VitEncoderConfig, embed
from .retrieval import EmbeddingIndex, RetrievalReport, evaluate, improvement_percentage
from .sampling import BatchSpec, Strategy
from .synth import SynthSpec, generate_dataset, split
from .training import Checkpoint, LossConfig, TrainSchedule, finetune, train

log = logging.getLogger(__name__)


@dataclass
class SplitEmbeddings:
    photo_ids: np.ndarray
    photo_vectors: np.ndarray
    photo_categories: np.ndarray
    sketch_ids: np.ndarray
    sketch_vectors: np.ndarray
    sketch_instances: np.ndarray
    sketch_categories: np.ndarray
    mirror: dict[int, int] = field(default_factory=dict)


def embed_split(ckpt: Checkpoint, ds: DatasetIndex) -> SplitEmbeddings:
    """Photos keyed by instance id, sketches keyed by their raster index."""
    photo_ids = np.array([r.instance_id for r in ds], dtype=np.int64)
    photo_refs = np.array([r.photo_ref for r in ds], dtype=np.int64)
    sk_ids, sk_inst, sk_cat = [], [], []
    for r in ds:
        for s in r.sketch_refs:
            sk_ids.append(s)
            sk_inst.append(r.instance_id)
            sk_cat.append(r.category_id)
    sk_ids = np.array(sk_ids, dtype=np.int64)
    mirror = {r.instance_id: r.mirror_sibling_id for r in ds
              if r.mirror_sibling_id is not None and r.mirror_sibling_id in ds}
    return SplitEmbeddings(
        photo_ids,
        embed(ckpt.photo_tensors(), ckpt.photo_config, ds.photos[photo_refs]),
        np.array([r.category_id for r in ds], dtype=np.int64),
        sk_ids,
        embed(ckpt.sketch_tensors(), ckpt.sketch_config, ds.sketches[sk_ids]),
        np.array(sk_inst, dtype=np.int64),
        np.array(sk_cat, dtype=np.int64),
        mirror,
    )


def evaluate_embeddings(emb: SplitEmbeddings, ks=(1, 2), provenance=None) -> RetrievalReport:
    index = EmbeddingIndex(emb.photo_ids, emb.photo_vectors, emb.photo_categories,
                           emb.mirror or None)
    return evaluate(index, emb.sketch_ids, emb.sketch_vectors, emb.sketch_instances,
                    emb.sketch_categories, ks, provenance)


def evaluate_checkpoint(ckpt: Checkpoint, ds: DatasetIndex, ks=(1, 2), provenance=None) -> RetrievalReport:
    return evaluate_embeddings(embed_split(ckpt, ds), ks, provenance)


# ---------------------------------------------------------------------------
# seeded direction-of-effect studies

@dataclass(frozen=True)
class StudySettings:
    """Desk recipe shared by the pooling, flip and category comparisons."""
    stage_channels: tuple[int, ...] = (8, 16, 32)
    epochs: int = 60
    drop_epoch: int = 45
    initial_lr: float = 1e-3
    dropped_lr: float = 5e-4
    finetune_lr: float = 2e-4
    finetune_epochs: int = 30
    batch_size: int = 32
    test_fraction: float = 0.1

    def schedule(self, seed: int) -> TrainSchedule:
        return TrainSchedule(epochs=self.epochs, initial_lr=self.initial_lr,
                             drop_epoch=self.drop_epoch, dropped_lr=self.dropped_lr,
                             finetune_lr=self.finetune_lr, batch_size=self.batch_size, seed=seed)


# name -> (sampler strategy, embedding pool swap)
VARIANTS: dict[str, tuple[Strategy, Optional[EmbeddingPool]]] = {
    "continued": (Strategy.BASELINE, None),
    "flip": (Strategy.FLIP, None),
    "category": (Strategy.CATEGORY, None),
    "spatial2x2": (Strategy.BASELINE, EmbeddingPool.SPATIAL_2X2),
}


def study_seed(seed: int, settings: StudySettings = StudySettings(),
               variants: Sequence[str] = tuple(VARIANTS)) -> dict[str, RetrievalReport]:
    """Train one baseline on the default synthetic set, finetune each variant
    from it and evaluate everything on the held-out split.

    The result always contains ``"base"`` next to the requested variants.
    """
    ds = generate_dataset(SynthSpec(seed=seed))
    train_ds, test_ds = split(ds, settings.test_fraction, seed=seed)
    c, h, w = ds.image_shape
    enc = CnnEncoderConfig(stage_channels=settings.stage_channels, input_size=(h, w),
                           in_channels=c, num_classes=ds.num_categories)
    sched = settings.schedule(seed)
    base = train(train_ds, enc, enc, BatchSpec(), LossConfig(), sched)
    out = {"base": evaluate_checkpoint(base, test_ds)}
    for name in variants:
        strategy, pool = VARIANTS[name]
        tuned = finetune(base, train_ds, BatchSpec(strategy=strategy), sched,
                         epochs=settings.finetune_epochs, embedding_pool=pool)
        out[name] = evaluate_checkpoint(tuned, test_ds)
        log.info("seed %d %s recall@1 %.3f flip %.3f", seed, name,
                 out[name].recall[1], out[name].flip_confusion_rate)
    return out


@dataclass
class StudySummary:
    seeds: list[int]
    reports: list[dict[str, RetrievalReport]]

    def _mean(self, name: str, metric) -> float:
        return float(np.mean([metric(r[name]) for r in self.reports]))

    def mean_recall(self, name: str, k: int = 1) -> float:
        return self._mean(name, lambda r: r.recall[k])

    def mean_flip(self, name: str) -> float:
        return self._mean(name, lambda r: r.flip_confusion_rate)

    def recall_gain(self, name: str, reference: str = "continued", k: int = 1) -> float:
        """Mean over seeds of recall@k(name) - recall@k(reference)."""
        return self._mean(name, lambda r: r.recall[k]) - self.mean_recall(reference, k)

    def mismatch_improvements(self, name: str = "category",
                              reference: str = "continued") -> list[Optional[float]]:
        """Per-seed improvement percentage of category-mismatch errors; None where
        the reference made no such error (the percentage is undefined)."""
        out = []
        for r in self.reports:
            base = r[reference].category_mismatch_count
            out.append(improvement_percentage(base, r[name].category_mismatch_count)
                       if base > 0 else None)
        return out

    def to_dict(self) -> dict:
        names = list(self.reports[0]) if self.reports else []
        return {
            "seeds": self.seeds,
            "mean_recall@1": {n: self.mean_recall(n) for n in names},
            "mean_flip_confusion": {n: self.mean_flip(n) for n in names},
            "category_mismatch_counts": {
                n: [r[n].category_mismatch_count for r in self.reports] for n in names},
        }


def direction_study(seeds: Sequence[int] = (0, 1, 2, 3, 4),
                    settings: StudySettings = StudySettings(),
                    variants: Sequence[str] = tuple(VARIANTS)) -> StudySummary:
    seeds = [int(s) for s in seeds]
    return StudySummary(seeds, [study_seed(s, settings, variants) for s in seeds])


# ---------------------------------------------------------------------------
# toy transformer sanity run

# seed offset of the freshly generated retrieval gallery
HELD_OUT_OFFSET = 1000


@dataclass
class VitSanity:
    loss_history: list[float]
    check_epoch: int
    recall_at_1: float
    gallery_size: int

    @property
    def loss_ratio(self) -> float:
        """Mean loss after ``check_epoch`` epochs over the first epoch's mean loss."""
        return self.loss_history[self.check_epoch - 1] / self.loss_history[0]

    @property
    def chance(self) -> float:
        return 1.0 / self.gallery_size


def vit_sanity(seed: int = 0, epochs: int = 120, check_epoch: int = 20,
               lr: float = 1e-3, batch_size: int = 8,
               config: Optional[VitEncoderConfig] = None) -> VitSanity:
    """Train ViT photo and sketch encoders on the default synthetic set and
    retrieve on a freshly generated set of the same size (a held-out gallery
    of N photos, so chance recall@1 is 1/N)."""
    if not 1 <= check_epoch <= epochs:
        raise ValueError("check_epoch must lie within the run")
    ds = generate_dataset(SynthSpec(seed=seed))
    held_out = generate_dataset(SynthSpec(seed=seed + HELD_OUT_OFFSET))
    c, h, w = ds.image_shape
    cfg = config or VitEncoderConfig(input_size=(h, w), in_channels=c, num_classes=ds.num_categories)
    sched = TrainSchedule(epochs=epochs, initial_lr=lr, drop_epoch=epochs - 1,
                          dropped_lr=lr / 2, finetune_lr=lr / 10, batch_size=batch_size, seed=seed)
    ckpt = train(ds, cfg, cfg, BatchSpec(), LossConfig(), sched)
    report = evaluate_checkpoint(ckpt, held_out, ks=(1,))
    return VitSanity([h["loss"] for h in ckpt.history], check_epoch,
                     report.recall[1], len(held_out))

