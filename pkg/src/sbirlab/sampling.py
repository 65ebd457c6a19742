"""Mini-batch triplet samplers.

A slot is one (anchor photo, positive sketch, negative sketch) triplet.
Horizontal flipping is the only augmentation and is applied to the whole slot,
so an anchor is flipped iff its positive is.

Four strategies are available:

* ``baseline``: random instances, negatives uniform over other instances.
* ``flip``: part of the batch is made of duplicated pairs, the same
  photo/sketch once as-is and once mirrored. Each copy uses the other
  copy's sketch as its negative, so orientation alone separates the two.
* ``category``: the batch is filled with groups of 2-5 instances from one
  category, and negatives come from the anchor's own category.
* ``flip_category``: category groups first, then flip duplication inside them.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .dataset import DatasetIndex


class Strategy(str, enum.Enum):
    BASELINE = "baseline"
    FLIP = "flip"
    CATEGORY = "category"
    FLIP_CATEGORY = "flip_category"


@dataclass(frozen=True)
class BatchSpec:
    batch_size: int = 128
    strategy: Strategy = Strategy.BASELINE
    flip_duplicate_fraction: float = 0.5
    category_repeat_range: tuple[int, int] = (2, 5)
    flip_probability: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        object.__setattr__(self, "category_repeat_range", tuple(self.category_repeat_range))
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if not 0.0 < self.flip_duplicate_fraction <= 1.0:
            raise ValueError("flip_duplicate_fraction must lie in (0, 1]")
        lo, hi = self.category_repeat_range
        if not 2 <= lo <= hi <= 5:
            raise ValueError("category_repeat_range must lie within [2, 5]")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ValueError("flip_probability must lie in [0, 1]")

    @property
    def duplicate_pairs(self) -> int:
        return int(self.flip_duplicate_fraction * self.batch_size) // 2


@dataclass
class TripletBatch:
    """Aligned slots. ``*_refs`` index ``ds.photos`` (anchors) or ``ds.sketches``."""

    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    anchor_ids: np.ndarray
    positive_ids: np.ndarray
    negative_ids: np.ndarray
    anchor_labels: np.ndarray
    positive_labels: np.ndarray
    negative_labels: np.ndarray
    flip_flags: np.ndarray
    negative_flip_flags: np.ndarray
    anchor_refs: np.ndarray
    positive_refs: np.ndarray
    negative_refs: np.ndarray
    group_ids: np.ndarray
    partner: np.ndarray

    def __len__(self) -> int:
        return len(self.anchor_ids)


# slot tables are built first as plain int/bool columns, rasters attached at the end
_COLUMNS = ("anchor_ids", "pos_ref", "neg_ids", "neg_ref", "flip", "neg_flip", "group", "partner")


def _empty_slots() -> dict[str, list]:
    return {k: [] for k in _COLUMNS}


def _pick_sketch(ds: DatasetIndex, iid: int, rng: np.random.Generator) -> int:
    refs = ds.record(iid).sketch_refs
    return int(refs[rng.integers(len(refs))])


def _check_dataset(ds: DatasetIndex) -> None:
    if len(ds) < 2:
        raise ValueError("need at least 2 instances to form negatives")


def _choose_instances(ds: DatasetIndex, n: int, rng: np.random.Generator,
                      exclude: set[int] = frozenset()) -> list[int]:
    pool = [r.instance_id for r in ds if r.instance_id not in exclude]
    if not pool:
        pool = [r.instance_id for r in ds]
    replace = n > len(pool)
    return [int(pool[i]) for i in rng.choice(len(pool), size=n, replace=replace)]


def _other_instance(ds: DatasetIndex, iid: int, rng: np.random.Generator,
                    same_category: bool = False) -> int:
    rec = ds.record(iid)
    if same_category:
        pool = [r.instance_id for r in ds.by_category()[rec.category_id] if r.instance_id != iid]
    else:
        pool = [r.instance_id for r in ds if r.instance_id != iid]
    if not pool:
        raise ValueError(f"no negative available for instance {iid}")
    return int(pool[rng.integers(len(pool))])


def _add_slot(slots, ds, rng, iid, flip_p, group=-1, same_category=False) -> None:
    flip = bool(rng.random() < flip_p)
    neg = _other_instance(ds, iid, rng, same_category)
    slots["anchor_ids"].append(iid)
    slots["pos_ref"].append(_pick_sketch(ds, iid, rng))
    slots["neg_ids"].append(neg)
    slots["neg_ref"].append(_pick_sketch(ds, neg, rng))
    slots["flip"].append(flip)
    slots["neg_flip"].append(flip)
    slots["group"].append(group)
    slots["partner"].append(-1)


def _duplicate(slots, i: int) -> dict:
    """Insert a mirrored copy of slot ``i``; each copy's negative is the other's positive."""
    flip = slots["flip"][i]
    pos_ref = slots["pos_ref"][i]
    iid = slots["anchor_ids"][i]
    copy = {"anchor_ids": iid, "pos_ref": pos_ref, "neg_ids": iid, "neg_ref": pos_ref,
            "flip": not flip, "neg_flip": flip, "group": slots["group"][i], "partner": i}
    slots["neg_ids"][i] = iid
    slots["neg_ref"][i] = pos_ref
    slots["neg_flip"][i] = not flip
    return copy


def _materialise(ds: DatasetIndex, slots: dict[str, list]) -> TripletBatch:
    aid = np.asarray(slots["anchor_ids"], dtype=np.int64)
    nid = np.asarray(slots["neg_ids"], dtype=np.int64)
    flip = np.asarray(slots["flip"], dtype=bool)
    nflip = np.asarray(slots["neg_flip"], dtype=bool)
    a_ref = np.array([ds.record(i).photo_ref for i in aid], dtype=np.int64)
    p_ref = np.asarray(slots["pos_ref"], dtype=np.int64)
    n_ref = np.asarray(slots["neg_ref"], dtype=np.int64)
    labels = np.array([ds.record(i).category_id for i in aid], dtype=np.int64)
    n_labels = np.array([ds.record(i).category_id for i in nid], dtype=np.int64)
    return TripletBatch(
        anchors=apply_flips(ds.photos[a_ref], flip),
        positives=apply_flips(ds.sketches[p_ref], flip),
        negatives=apply_flips(ds.sketches[n_ref], nflip),
        anchor_ids=aid, positive_ids=aid.copy(), negative_ids=nid,
        anchor_labels=labels, positive_labels=labels.copy(), negative_labels=n_labels,
        flip_flags=flip, negative_flip_flags=nflip,
        anchor_refs=a_ref, positive_refs=p_ref, negative_refs=n_ref,
        group_ids=np.asarray(slots["group"], dtype=np.int64),
        partner=np.asarray(slots["partner"], dtype=np.int64),
    )


def apply_flips(images: np.ndarray, flags: np.ndarray) -> np.ndarray:
    """Mirror the images (N, C, H, W) whose flag is set."""
    out = np.array(images, copy=True)
    out[flags] = out[flags][..., ::-1]
    return out


# -- strategies ----------------------------------------------------------------


def _baseline_slots(ds, n, rng, flip_p, exclude=frozenset()):
    slots = _empty_slots()
    for iid in _choose_instances(ds, n, rng, exclude):
        _add_slot(slots, ds, rng, iid, flip_p)
    return slots


def sample_baseline_batch(ds: DatasetIndex, spec: BatchSpec, rng: np.random.Generator) -> TripletBatch:
    _check_dataset(ds)
    return _materialise(ds, _baseline_slots(ds, spec.batch_size, rng, spec.flip_probability))


def sample_flip_batch(ds: DatasetIndex, spec: BatchSpec, rng: np.random.Generator) -> TripletBatch:
    _check_dataset(ds)
    pairs = spec.duplicate_pairs
    if pairs < 1:
        raise ValueError("batch too small for one flip-duplicated pair")
    rest_size = spec.batch_size - 2 * pairs
    if pairs > len(ds) or (rest_size > 0 and pairs == len(ds)):
        raise ValueError(f"{pairs} flip pairs need {pairs} distinct instances "
                         f"(plus others for the rest of the batch), dataset has {len(ds)}")
    dup_ids = _choose_instances(ds, pairs, rng)
    slots = _empty_slots()
    for iid in dup_ids:
        _add_slot(slots, ds, rng, iid, spec.flip_probability)
        copy = _duplicate(slots, len(slots["anchor_ids"]) - 1)
        for k, v in copy.items():
            slots[k].append(v)
    rest = _baseline_slots(ds, rest_size, rng, spec.flip_probability,
                           exclude=set(dup_ids))
    for k in _COLUMNS:
        slots[k].extend(rest[k])
    return _materialise(ds, slots)


def draw_group_size(rng: np.random.Generator, repeat_range: tuple[int, int] = (2, 5)) -> int:
    lo, hi = repeat_range
    return int(rng.integers(lo, hi + 1))


def partitionable(total: int, lo: int, hi: int) -> bool:
    """Whether ``total`` slots split into groups whose sizes all lie in [lo, hi]."""
    return total == 0 or -(-total // hi) <= total // lo


def _fit_group(k: int, remaining: int, lo: int, hi: int, available: int) -> int:
    """The admissible group size closest to the drawn ``k`` that leaves a
    partitionable remainder (ties go to the smaller size); 0 if there is none."""
    options = [j for j in range(lo, min(hi, remaining, available) + 1)
               if partitionable(remaining - j, lo, hi)]
    return min(options, key=lambda j: (abs(j - k), j)) if options else 0


def _category_slots(ds, n, spec, rng):
    if not partitionable(n, *spec.category_repeat_range):
        raise ValueError(f"{n} category slots cannot be split into groups of "
                         f"{spec.category_repeat_range[0]}-{spec.category_repeat_range[1]} instances")
    groups = ds.by_category()
    cats = sorted(groups)
    slots = _empty_slots()
    group = 0
    while len(slots["anchor_ids"]) < n:
        # one round visits every category at most once
        for ci in rng.permutation(len(cats)):
            if len(slots["anchor_ids"]) >= n:
                break
            members = groups[cats[ci]]
            k = _fit_group(draw_group_size(rng, spec.category_repeat_range),
                           n - len(slots["anchor_ids"]), *spec.category_repeat_range, len(members))
            if k == 0:
                raise ValueError(f"category {cats[ci]} has {len(members)} instances, too few "
                                 f"for a group of {spec.category_repeat_range[0]}")
            for j in rng.choice(len(members), size=k, replace=False):
                _add_slot(slots, ds, rng, members[j].instance_id, spec.flip_probability,
                          group=group, same_category=True)
            group += 1
    return slots


def sample_category_batch(ds: DatasetIndex, spec: BatchSpec, rng: np.random.Generator) -> TripletBatch:
    _check_dataset(ds)
    return _materialise(ds, _category_slots(ds, spec.batch_size, spec, rng))


def sample_flip_category_batch(ds: DatasetIndex, spec: BatchSpec,
                               rng: np.random.Generator) -> TripletBatch:
    _check_dataset(ds)
    pairs = spec.duplicate_pairs
    if pairs < 1:
        raise ValueError("batch too small for one flip-duplicated pair")
    base = _category_slots(ds, spec.batch_size - pairs, spec, rng)
    n = len(base["anchor_ids"])
    # one slot per distinct instance; prefer instances that occur once so the
    # duplicated pair is the only place that instance shows up
    ids = np.asarray(base["anchor_ids"])
    first = {}
    for i, iid in enumerate(ids.tolist()):
        first.setdefault(iid, i)
    single = [i for iid, i in first.items() if (ids == iid).sum() == 1]
    repeated = [i for iid, i in first.items() if (ids == iid).sum() > 1]
    if len(first) < pairs:
        raise ValueError(f"{pairs} flip pairs need {pairs} distinct instances, batch has {len(first)}")
    take = min(pairs, len(single))
    chosen = set(int(i) for i in rng.choice(single, size=take, replace=False)) if take else set()
    if pairs > take:
        chosen |= set(int(i) for i in rng.choice(repeated, size=pairs - take, replace=False))
    slots = _empty_slots()
    for i in range(n):
        row = {k: base[k][i] for k in _COLUMNS}
        for k in _COLUMNS:
            slots[k].append(row[k])
        if i in chosen:
            here = len(slots["anchor_ids"]) - 1
            copy = _duplicate(slots, here)
            for k, v in copy.items():
                slots[k].append(v)
    return _materialise(ds, slots)


SAMPLERS = {
    Strategy.BASELINE: sample_baseline_batch,
    Strategy.FLIP: sample_flip_batch,
    Strategy.CATEGORY: sample_category_batch,
    Strategy.FLIP_CATEGORY: sample_flip_category_batch,
}


def sample_batch(ds: DatasetIndex, spec: BatchSpec, rng: np.random.Generator) -> TripletBatch:
    return SAMPLERS[spec.strategy](ds, spec, rng)


# -- validation ----------------------------------------------------------------


def triplet_violations(batch: TripletBatch, ds: DatasetIndex) -> list[str]:
    """Contract checks shared by every strategy; returns human-readable violations.

    A negative must differ from its anchor as an oriented view: either another
    instance, or (for flip-duplicated slots only) the same instance mirrored.
    """
    out = []
    n = len(batch.anchor_ids)
    cols = [batch.anchors, batch.positives, batch.negatives, batch.positive_ids,
            batch.negative_ids, batch.flip_flags, batch.negative_flip_flags,
            batch.anchor_labels, batch.positive_labels, batch.negative_labels]
    if any(len(c) != n for c in cols):
        return ["columns have unequal length"]
    for i in range(n):
        a, neg = int(batch.anchor_ids[i]), int(batch.negative_ids[i])
        rec = ds.record(a)
        if batch.positive_ids[i] != a or batch.positive_refs[i] not in rec.sketch_refs:
            out.append(f"slot {i}: positive is not a sketch of the anchor instance")
        if batch.negative_refs[i] not in ds.record(neg).sketch_refs:
            out.append(f"slot {i}: negative sketch does not belong to its instance id")
        if batch.anchor_refs[i] != rec.photo_ref:
            out.append(f"slot {i}: anchor is not the instance photo")
        same_view = neg == a and batch.negative_flip_flags[i] == batch.flip_flags[i]
        if same_view or (neg == a and batch.partner[i] < 0 and
                         not np.any(batch.partner == i)):
            out.append(f"slot {i}: negative matches the anchor instance")
        if batch.anchor_labels[i] != rec.category_id or batch.positive_labels[i] != rec.category_id:
            out.append(f"slot {i}: anchor/positive label mismatch")
        if batch.negative_labels[i] != ds.record(neg).category_id:
            out.append(f"slot {i}: negative label mismatch")
    if not np.array_equal(batch.anchors, apply_flips(ds.photos[batch.anchor_refs], batch.flip_flags)):
        out.append("anchor rasters do not match refs and flip flags")
    if not np.array_equal(batch.positives,
                          apply_flips(ds.sketches[batch.positive_refs], batch.flip_flags)):
        out.append("positive rasters are not flipped jointly with their anchors")
    if not np.array_equal(batch.negatives,
                          apply_flips(ds.sketches[batch.negative_refs], batch.negative_flip_flags)):
        out.append("negative rasters do not match refs and flip flags")
    return out


def duplicate_pairs(batch: TripletBatch) -> list[tuple[int, int]]:
    return [(int(p), i) for i, p in enumerate(batch.partner) if p >= 0]


def flip_violations(batch: TripletBatch, spec: BatchSpec) -> list[str]:
    out = []
    pairs = duplicate_pairs(batch)
    if len(pairs) != spec.duplicate_pairs:
        out.append(f"expected {spec.duplicate_pairs} duplicated pairs, found {len(pairs)}")
    for i, j in pairs:
        if batch.anchor_ids[i] != batch.anchor_ids[j]:
            out.append(f"pair ({i},{j}) mixes instances")
        if batch.flip_flags[i] == batch.flip_flags[j]:
            out.append(f"pair ({i},{j}) does not hold both orientations")
        if batch.positive_refs[i] != batch.positive_refs[j]:
            out.append(f"pair ({i},{j}) uses different sketches")
    in_pair = {k for p in pairs for k in p}
    dup_ids = [int(batch.anchor_ids[i]) for i, _ in pairs]
    if len(set(dup_ids)) != len(dup_ids):
        out.append("an instance is duplicated more than once")
    if spec.strategy is Strategy.FLIP:
        for k in range(len(batch)):
            if k not in in_pair and int(batch.anchor_ids[k]) in dup_ids:
                out.append(f"slot {k}: duplicated instance reappears outside its pair")
    return out


def group_sizes(batch: TripletBatch) -> list[tuple[int, int, int]]:
    """(group id, category, distinct instances) in batch order."""
    out = []
    for g in dict.fromkeys(int(x) for x in batch.group_ids if x >= 0):
        mask = batch.group_ids == g
        cats = set(batch.anchor_labels[mask].tolist())
        out.append((g, cats.pop() if len(cats) == 1 else -1,
                    len(set(batch.anchor_ids[mask].tolist()))))
    return out


def category_violations(batch: TripletBatch, spec: BatchSpec) -> list[str]:
    out = []
    lo, hi = spec.category_repeat_range
    if np.any(batch.group_ids < 0):
        out.append("ungrouped slot in a category batch")
    sizes = group_sizes(batch)
    for g, cat, k in sizes:
        if cat < 0:
            out.append(f"group {g} mixes categories")
        if not lo <= k <= hi:
            out.append(f"group {g} has {k} distinct instances")
    grouped = batch.group_ids >= 0
    if np.any(batch.negative_labels[grouped] != batch.anchor_labels[grouped]):
        out.append("grouped slot with a negative from another category")
    return out


def batch_violations(batch: TripletBatch, ds: DatasetIndex, spec: BatchSpec) -> list[str]:
    out = triplet_violations(batch, ds)
    if len(batch) != spec.batch_size:
        out.append(f"batch has {len(batch)} slots, expected {spec.batch_size}")
    if spec.strategy in (Strategy.FLIP, Strategy.FLIP_CATEGORY):
        out += flip_violations(batch, spec)
    else:
        if np.any(batch.partner >= 0):
            out.append("duplicated pair in a non-flip batch")
        if np.any(batch.negative_ids == batch.anchor_ids):
            out.append("negative matches the anchor instance")
    if spec.strategy in (Strategy.CATEGORY, Strategy.FLIP_CATEGORY):
        out += category_violations(batch, spec)
    return out
