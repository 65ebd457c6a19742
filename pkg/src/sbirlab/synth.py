"""Procedural photo/sketch pairs with controlled mirror siblings.

Every category is a left-right symmetric polygon family. Each instance is a
rescaled, shifted variant carrying an off-centre circular hole (the "eye") so
that its horizontal mirror is a visibly different object. Photos are filled,
anti-aliased renders with Gaussian noise; sketches are jittered outlines.
A mirror sibling reuses its partner's geometry and is rendered as the exact
left-right flip of it.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .dataset import DatasetIndex, InstanceRecord

SUPERSAMPLE = 4
MIN_ASYMMETRY = 0.01
# constant fill: contrast changes would scale every post-ReLU photo feature
PHOTO_FILL = 0.9


@dataclass(frozen=True)
class SynthSpec:
    num_categories: int = 10
    instances_per_category: int = 20
    sketches_per_instance: int = 3
    image_size: tuple[int, int] = (32, 32)
    mirror_fraction: float = 0.5
    stroke_jitter: float = 0.5
    background_noise: float = 0.05
    stroke_width: float = 1.2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))
        if min(self.num_categories, self.instances_per_category, self.sketches_per_instance) < 1:
            raise ValueError("all counts must be positive")
        if not 0.0 <= self.mirror_fraction <= 1.0:
            raise ValueError("mirror_fraction must lie in [0, 1]")
        if self.stroke_jitter < 0 or self.background_noise < 0 or self.stroke_width <= 0:
            raise ValueError("noise levels must be non-negative and stroke width positive")
        if min(self.image_size) < max(16, 8 * self.stroke_width):
            raise ValueError(f"image {self.image_size} too small for stroke width {self.stroke_width}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d


@dataclass(frozen=True)
class Geometry:
    """Outline vertices and eye disk in pixel coordinates (x right, y down)."""

    vertices: np.ndarray
    eye_center: tuple[float, float]
    eye_radius: float
    fill: float


# -- shape families ------------------------------------------------------------


def _regular(n: int, inner: float | None = None) -> np.ndarray:
    if inner is None:
        ang = np.pi / 2 + 2 * np.pi * np.arange(n) / n
        return np.stack([np.cos(ang), -np.sin(ang)], axis=1)
    ang = np.pi / 2 + np.pi * np.arange(2 * n) / n
    rad = np.where(np.arange(2 * n) % 2 == 0, 1.0, inner)
    return np.stack([rad * np.cos(ang), -rad * np.sin(ang)], axis=1)


def _poly(points) -> np.ndarray:
    return np.asarray(points, dtype=float)


# Every outline is left-right symmetric, so an instance's orientation lives
# only in its layout: the off-centre eye and the horizontal offset.
FAMILIES = [
    lambda: _regular(3),
    lambda: _regular(4),
    lambda: _regular(5),
    lambda: _regular(6),
    lambda: _regular(5, inner=0.6),
    lambda: _poly([(-1, 1), (-1, -0.2), (0, -1), (1, -0.2), (1, 1)]),
    lambda: _poly([(-1, -1), (1, -1), (1, -0.4), (0.35, -0.4), (0.35, 1), (-0.35, 1),
                   (-0.35, -0.4), (-1, -0.4)]),
    lambda: _poly([(-0.5, -0.8), (0.5, -0.8), (1, 0.8), (-1, 0.8)]),
    lambda: _poly([(-0.35, -1), (0.35, -1), (0.35, -0.35), (1, -0.35), (1, 0.35), (0.35, 0.35),
                   (0.35, 1), (-0.35, 1), (-0.35, 0.35), (-1, 0.35), (-1, -0.35), (-0.35, -0.35)]),
    lambda: _poly([(-1, -1), (1, -1), (0.3, 0), (1, 1), (-1, 1), (-0.3, 0)]),
]


def family_template(category: int) -> np.ndarray:
    """Unit-scale outline for a category; categories past the fixed list cycle
    through regular polygons and stars with growing vertex counts."""
    if category < len(FAMILIES):
        return FAMILIES[category]()
    k = category - len(FAMILIES)
    n = 7 + k // 2
    return _regular(n) if k % 2 == 0 else _regular(n, inner=0.65)


def sample_geometry(category: int, size: tuple[int, int], rng: np.random.Generator) -> Geometry:
    h, w = size
    half = min(h, w) / 2.0
    base = family_template(category)
    base = base / np.abs(base).max()
    radius = half * rng.uniform(0.55, 0.78)
    aspect = rng.uniform(0.8, 1.2)
    cx = w / 2.0 + rng.uniform(-0.08, 0.08) * w
    cy = h / 2.0 + rng.uniform(-0.08, 0.08) * h
    # no shear or rotation: either would hand every local filter an orientation cue
    pts = base * [aspect, 1.0 / aspect] * radius + [cx, cy]

    side = rng.choice([-1.0, 1.0])
    off = np.array([side * rng.uniform(0.25, 0.4), rng.uniform(-0.2, 0.1)]) * radius
    eye_r = max(1.6, radius * rng.uniform(0.12, 0.17))
    return Geometry(pts, (cx + off[0], cy + off[1]), eye_r, PHOTO_FILL)


# -- rasterisation -------------------------------------------------------------


def _inside_polygon(px: np.ndarray, py: np.ndarray, verts: np.ndarray) -> np.ndarray:
    inside = np.zeros(px.shape, dtype=bool)
    x1, y1 = verts[:, 0], verts[:, 1]
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
    for a, b, c, d in zip(x1, y1, x2, y2):
        crosses = (b > py) != (d > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = a + (py - b) * (c - a) / (d - b)
        inside ^= crosses & (px < xint)
    return inside


def coverage(geom: Geometry, size: tuple[int, int]) -> np.ndarray:
    """Fraction of each pixel covered by polygon-minus-eye (supersampled)."""
    h, w = size
    s = SUPERSAMPLE
    ys = (np.arange(h * s) + 0.5) / s
    xs = (np.arange(w * s) + 0.5) / s
    px, py = np.meshgrid(xs, ys)
    mask = _inside_polygon(px, py, geom.vertices)
    ex, ey = geom.eye_center
    mask &= (px - ex) ** 2 + (py - ey) ** 2 > geom.eye_radius ** 2
    return mask.reshape(h, s, w, s).mean(axis=(1, 3))


def render_photo_clean(geom: Geometry, size: tuple[int, int], background: float = 0.15) -> np.ndarray:
    cov = coverage(geom, size)
    return background + (geom.fill - background) * cov


def _segment_distance(px, py, a, b) -> np.ndarray:
    d = b - a
    t = ((px - a[0]) * d[0] + (py - a[1]) * d[1]) / max(float(d @ d), 1e-12)
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * d[0]), py - (a[1] + t * d[1]))


def render_sketch(geom: Geometry, size: tuple[int, int], jitter: float, width: float,
                  rng: np.random.Generator) -> np.ndarray:
    """Stroked outline of the polygon and eye, with per-vertex jitter clipped at 2σ."""
    h, w = size
    py, px = np.mgrid[0:h, 0:w] + 0.5
    verts = geom.vertices + np.clip(rng.normal(0.0, jitter, geom.vertices.shape),
                                    -2 * jitter, 2 * jitter)
    dist = np.full((h, w), np.inf)
    for a, b in zip(verts, np.roll(verts, -1, axis=0)):
        dist = np.minimum(dist, _segment_distance(px, py, a, b))
    ex, ey = np.asarray(geom.eye_center) + np.clip(rng.normal(0.0, jitter / 2, 2), -jitter, jitter)
    dist = np.minimum(dist, np.abs(np.hypot(px - ex, py - ey) - geom.eye_radius))
    return np.clip(width / 2.0 + 0.5 - dist, 0.0, 1.0)


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so rasters survive a graymap round trip bit-exactly."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def asymmetry(img: np.ndarray) -> float:
    return float(np.abs(img - img[..., ::-1]).mean())


# -- dataset assembly ----------------------------------------------------------


def _draw_geometry(category: int, size: tuple[int, int], rng: np.random.Generator) -> Geometry:
    # rejection keeps every instance visibly different from its own mirror image
    while True:
        g = sample_geometry(category, size, rng)
        if asymmetry(render_photo_clean(g, size)) >= MIN_ASYMMETRY:
            return g


def _instance_plan(spec: SynthSpec) -> list[tuple[int, int, int | None, int]]:
    """(instance_id, category, sibling_id, geometry_owner) in id order."""
    plan = []
    n = spec.instances_per_category
    n_pairs = int(spec.mirror_fraction * n) // 2
    iid = 0
    for c in range(spec.num_categories):
        for _ in range(n_pairs):
            plan.append((iid, c, iid + 1, iid))
            plan.append((iid + 1, c, iid, iid))
            iid += 2
        for _ in range(n - 2 * n_pairs):
            plan.append((iid, c, None, iid))
            iid += 1
    return plan


def generate_dataset(spec: SynthSpec) -> DatasetIndex:
    """Render the whole catalogue. Deterministic per ``spec.seed``.

    Each instance draws from its own child RNG stream (derived from the seed
    and instance id), so instances could be rendered in any order.
    """
    size = spec.image_size
    root = np.random.SeedSequence(spec.seed)
    plan = _instance_plan(spec)
    streams = root.spawn(len(plan))

    photos, sketches, items = [], [], []
    geoms: dict[int, Geometry] = {}
    for (iid, cat, sib, owner), ss in zip(plan, streams):
        rng = np.random.default_rng(ss)
        mirrored = owner != iid
        if not mirrored:
            geoms[iid] = _draw_geometry(cat, size, rng)
        g = geoms[owner]
        clean = render_photo_clean(g, size)
        if mirrored:
            clean = clean[:, ::-1]
        photo = quantize(clean + rng.normal(0.0, spec.background_noise, size))
        refs = []
        for _ in range(spec.sketches_per_instance):
            sk = render_sketch(g, size, spec.stroke_jitter, spec.stroke_width, rng)
            if mirrored:
                sk = sk[:, ::-1]
            refs.append(len(sketches))
            sketches.append(quantize(sk))
        items.append(InstanceRecord(iid, cat, len(photos), tuple(refs), sib))
        photos.append(photo)

    ds = DatasetIndex(items, spec.num_categories,
                      np.stack(photos)[:, None].astype(np.float64),
                      np.stack(sketches)[:, None].astype(np.float64))
    ds.validate()
    return ds


def instance_geometry(spec: SynthSpec, instance_id: int) -> Geometry:
    """Geometry of one instance in pixel coordinates; siblings get the mirrored
    geometry of their partner. Reproduces the generator's draws."""
    plan = _instance_plan(spec)
    streams = np.random.SeedSequence(spec.seed).spawn(len(plan))
    _, cat, _, owner = plan[instance_id]
    g = _draw_geometry(cat, spec.image_size, np.random.default_rng(streams[owner]))
    if owner == instance_id:
        return g
    w = spec.image_size[1]
    verts = g.vertices.copy()
    verts[:, 0] = w - verts[:, 0]
    return Geometry(verts[::-1], (w - g.eye_center[0], g.eye_center[1]), g.eye_radius, g.fill)


def clean_photo(spec: SynthSpec, instance_id: int) -> np.ndarray:
    """Noise-free render of one instance, before quantisation."""
    return render_photo_clean(instance_geometry(spec, instance_id), spec.image_size)


def split(ds: DatasetIndex, test_fraction: float = 0.1, seed: int = 0,
          prefer_mirror_pairs: bool = True) -> tuple[DatasetIndex, DatasetIndex]:
    """Category-stratified train/test split at instance granularity.

    Mirror siblings always land on the same side. With ``prefer_mirror_pairs``
    the test side is filled with whole pairs first so the test gallery is
    mirror-rich.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    test_ids: list[int] = []
    for cat, recs in sorted(ds.by_category().items()):
        n_test = int(round(test_fraction * len(recs)))
        if n_test < 1 or n_test >= len(recs):
            raise ValueError(f"category {cat} has too few instances ({len(recs)}) to stratify")
        ids = {r.instance_id for r in recs}
        units, seen = [], set()
        for r in recs:
            if r.instance_id in seen:
                continue
            unit = [r.instance_id]
            if r.mirror_sibling_id is not None and r.mirror_sibling_id in ids:
                unit.append(r.mirror_sibling_id)
            seen.update(unit)
            units.append(unit)
        order = rng.permutation(len(units))
        units = [units[i] for i in order]
        if prefer_mirror_pairs:
            units.sort(key=lambda u: -len(u))
        remaining = n_test
        for unit in units:
            if len(unit) <= remaining:
                test_ids.extend(unit)
                remaining -= len(unit)
            if remaining == 0:
                break
        if remaining:
            raise ValueError(f"category {cat}: cannot pick {n_test} test instances "
                             "without separating mirror siblings")
    test_set = set(test_ids)
    train_ids = [r.instance_id for r in ds if r.instance_id not in test_set]
    return ds.subset(train_ids, "train"), ds.subset(test_ids, "test")
