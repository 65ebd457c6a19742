"""In-memory catalogue of photo/sketch instances and its raster store."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

import numpy as np


@dataclass(frozen=True)
class InstanceRecord:
    instance_id: int
    category_id: int
    photo_ref: int
    sketch_refs: tuple[int, ...]
    mirror_sibling_id: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "sketch_refs", tuple(int(r) for r in self.sketch_refs))
        if not self.sketch_refs:
            raise ValueError(f"instance {self.instance_id} has no sketches")


@dataclass
class DatasetIndex:
    """Records plus their rasters.

    ``photos[r.photo_ref]`` and ``sketches[s]`` for ``s in r.sketch_refs`` are
    C×H×W float arrays in [0, 1]. Splits share the raster arrays with their parent.
    """

    items: list[InstanceRecord]
    num_categories: int
    photos: np.ndarray
    sketches: np.ndarray
    split: str = "all"
    _by_id: dict[int, InstanceRecord] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self._by_id = {r.instance_id: r for r in self.items}
        if len(self._by_id) != len(self.items):
            raise ValueError("instance ids must be unique")
        for r in self.items:
            if not 0 <= r.category_id < self.num_categories:
                raise ValueError(f"category {r.category_id} outside [0, {self.num_categories})")

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def record(self, instance_id: int) -> InstanceRecord:
        return self._by_id[instance_id]

    def __contains__(self, instance_id: int) -> bool:
        return instance_id in self._by_id

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.photos.shape[1:])

    @property
    def has_mirror_map(self) -> bool:
        return any(r.mirror_sibling_id is not None for r in self.items)

    def by_category(self) -> dict[int, list[InstanceRecord]]:
        groups: dict[int, list[InstanceRecord]] = {}
        for r in self.items:
            groups.setdefault(r.category_id, []).append(r)
        return groups

    def subset(self, instance_ids: Iterable[int], split: str) -> "DatasetIndex":
        keep = set(instance_ids)
        items = [r for r in self.items if r.instance_id in keep]
        return DatasetIndex(items, self.num_categories, self.photos, self.sketches, split)

    def photo(self, instance_id: int) -> np.ndarray:
        return self.photos[self._by_id[instance_id].photo_ref]

    def validate(self) -> None:
        """Raise if categories are not dense or mirror links are inconsistent."""
        seen = {r.category_id for r in self.items}
        if self.split == "all" and seen != set(range(self.num_categories)):
            raise ValueError("category ids are not dense in [0, num_categories)")
        for r in self.items:
            if r.mirror_sibling_id is None or r.mirror_sibling_id not in self._by_id:
                continue
            if self._by_id[r.mirror_sibling_id].mirror_sibling_id != r.instance_id:
                raise ValueError(f"mirror link of instance {r.instance_id} is not symmetric")

    def with_split(self, split: str) -> "DatasetIndex":
        return replace(self, split=split)
