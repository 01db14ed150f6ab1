"""Dataset preparation: scene tiling, labeled/unlabeled partitioning, synthetic scenes."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
from PIL import Image

from .core import BiTemporalPair, DatasetManifest, PairRecord, PartitionSpec, save_pair, write_manifests


# -- tiling -------------------------------------------------------------------


@dataclass(frozen=True)
class TilingSpec:
    patch: int = 256

    def __post_init__(self):
        if self.patch <= 0 or self.patch % 32:
            raise ValueError(f"patch size must be a positive multiple of 32, got {self.patch}")


class Tile(NamedTuple):
    pair: BiTemporalPair
    source: str
    row: int
    col: int


def tile_scene(image_a, image_b, mask=None, spec: TilingSpec = TilingSpec(), scene_id="scene") -> list[Tile]:
    """Non-overlapping grid of patch x patch tiles; partial edge tiles are dropped."""
    if image_a.shape != image_b.shape:
        raise ValueError(f"scene images differ in shape: {image_a.shape} vs {image_b.shape}")
    h, w = image_a.shape[:2]
    if mask is not None and mask.shape != (h, w):
        raise ValueError(f"mask shape {mask.shape} does not match scene {(h, w)}")
    p = spec.patch
    if h < p or w < p:
        warnings.warn(f"{scene_id}: scene {h}x{w} is smaller than patch {p}; no tiles produced")
        return []
    tiles = []
    for r in range(h // p):
        for c in range(w // p):
            win = (slice(r * p, (r + 1) * p), slice(c * p, (c + 1) * p))
            pair = BiTemporalPair(
                image_a[win], image_b[win], None if mask is None else mask[win], f"{scene_id}_r{r}_c{c}"
            )
            tiles.append(Tile(pair, scene_id, r, c))
    return tiles


def write_tiles(tiles: list[Tile], root, split_name="train", patch_size=256) -> DatasetManifest:
    """Write tiles in the A/B/label layout; grid provenance goes to tiles.json."""
    root = Path(root)
    labeled, unlabeled, provenance = [], [], {}
    for t in tiles:
        rec = save_pair(t.pair, root)
        (labeled if rec.label is not None else unlabeled).append(rec)
        provenance[rec.id] = {"source": t.source, "row": t.row, "col": t.col}
    (root / "tiles.json").write_text(json.dumps(provenance, indent=1))
    return DatasetManifest(tuple(labeled), tuple(unlabeled), patch_size, split_name)


# -- partitioning ---------------------------------------------------------------


def num_labeled(total: int, ratio: float) -> int:
    # tolerate float noise such as 0.1 * 30 = 3.0000000000000004
    return math.ceil(ratio * total - 1e-9)


def partition(manifest: DatasetManifest, spec: PartitionSpec) -> tuple[DatasetManifest, DatasetManifest]:
    """Seeded shuffle; the first ceil(ratio * M) pairs keep labels, the rest become unlabeled."""
    records = list(manifest.labeled)
    if any(r.label is None for r in records):
        raise ValueError("partition needs a label for every training pair")
    k = num_labeled(len(records), spec.labeled_ratio)
    if k < 1:
        raise ValueError(f"labeled_ratio={spec.labeled_ratio} yields no labeled pairs out of {len(records)}")
    order = np.random.default_rng(spec.seed).permutation(len(records))
    chosen = [records[i] for i in order]
    labeled = DatasetManifest(tuple(chosen[:k]), (), manifest.patch_size, manifest.split_name)
    unlabeled = DatasetManifest(
        (), tuple(r.without_label() for r in chosen[k:]) + tuple(manifest.unlabeled), manifest.patch_size,
        manifest.split_name,
    )
    return labeled, unlabeled


def merge(labeled: DatasetManifest, unlabeled: DatasetManifest) -> DatasetManifest:
    return DatasetManifest(
        labeled.labeled, labeled.unlabeled + unlabeled.unlabeled, labeled.patch_size, labeled.split_name
    )


# -- synthetic scenes -----------------------------------------------------------


@dataclass
class SyntheticSpec:
    num_pairs: int = 500
    patch_size: int = 64
    shapes_per_scene: tuple = (3, 7)
    shape_size: tuple = (6, 18)
    change_prob: float = 0.35
    illumination_drift: float = 0.25  # max per-image gain deviation
    shading_drift: float = 0.15  # amplitude of a smooth per-image shading field
    persistent_color_drift: float = 0.12  # colour shift of unchanged shapes between dates
    noise_sigma: float = 0.04
    texture_strength: float = 0.12
    splits: dict = field(default_factory=lambda: {"train": 0.8, "val": 0.1, "test": 0.1})
    seed: int = 0

    def __post_init__(self):
        if self.num_pairs < 1:
            raise ValueError("num_pairs must be >= 1")
        if self.patch_size % 32:
            raise ValueError(f"patch_size must be a multiple of 32, got {self.patch_size}")
        if not 0.0 <= self.change_prob <= 1.0:
            raise ValueError(f"change_prob must be in [0, 1], got {self.change_prob}")
        lo, hi = self.shapes_per_scene
        if not 0 <= lo <= hi:
            raise ValueError(f"shapes_per_scene must be an ordered non-negative range, got {self.shapes_per_scene}")
        lo, hi = self.shape_size
        if not 1 <= lo <= hi <= self.patch_size:
            raise ValueError(f"shape_size must lie in [1, patch_size], got {self.shape_size}")
        if abs(sum(self.splits.values()) - 1.0) > 1e-6:
            raise ValueError(f"split fractions must sum to 1, got {self.splits}")


@dataclass
class Shape:
    kind: str  # rect | ellipse
    top: int
    left: int
    height: int
    width: int
    color: tuple
    in_a: bool
    in_b: bool

    @property
    def changed(self):
        return self.in_a != self.in_b


@dataclass
class Scene:
    size: int
    background: np.ndarray  # (H, W, 3) clean textured background
    shapes: list


def shape_mask(shape: Shape, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if shape.kind == "rect":
        m = (yy >= shape.top) & (yy < shape.top + shape.height) & (xx >= shape.left) & (xx < shape.left + shape.width)
    else:
        cy, cx = shape.top + (shape.height - 1) / 2, shape.left + (shape.width - 1) / 2
        ry, rx = shape.height / 2, shape.width / 2
        m = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return m


def _smooth_field(rng, size, cells, channels):
    coarse = rng.uniform(-1, 1, size=(cells, cells, channels)).astype(np.float32)
    out = np.empty((size, size, channels), dtype=np.float32)
    for c in range(channels):
        out[..., c] = np.asarray(Image.fromarray(coarse[..., c], "F").resize((size, size), Image.BICUBIC))
    return out


def sample_scene(rng: np.random.Generator, spec: SyntheticSpec) -> Scene:
    size = spec.patch_size
    base = rng.uniform(0.25, 0.75, size=3).astype(np.float32)
    texture = spec.texture_strength * (
        0.6 * _smooth_field(rng, size, 6, 3) + 0.4 * rng.uniform(-1, 1, (size, size, 3)).astype(np.float32)
    )
    background = np.clip(base + texture, 0, 1)
    shapes, occupied = [], np.zeros((size, size), dtype=bool)
    target = int(rng.integers(spec.shapes_per_scene[0], spec.shapes_per_scene[1] + 1))
    attempts = 0
    while len(shapes) < target and attempts < 50 * max(target, 1):
        attempts += 1
        h, w = (int(rng.integers(spec.shape_size[0], spec.shape_size[1] + 1)) for _ in range(2))
        top, left = int(rng.integers(0, size - h + 1)), int(rng.integers(0, size - w + 1))
        kind = "rect" if rng.random() < 0.5 else "ellipse"
        # contrast against the mean background colour
        color = np.clip(base + rng.choice([-1, 1], size=3) * rng.uniform(0.2, 0.45, size=3), 0, 1)
        s = Shape(kind, top, left, h, w, tuple(float(c) for c in color), True, True)
        m = shape_mask(s, size)
        # one pixel of clearance so shapes never touch
        grown = m.copy()
        grown[1:] |= m[:-1]
        grown[:-1] |= m[1:]
        grown[:, 1:] |= m[:, :-1]
        grown[:, :-1] |= m[:, 1:]
        if (grown & occupied).any():
            continue
        if rng.random() < spec.change_prob:
            if rng.random() < 0.5:
                s.in_b = False
            else:
                s.in_a = False
        shapes.append(s)
        occupied |= m
    return Scene(size, background, shapes)


def occupancy(scene: Scene, date: str) -> np.ndarray:
    out = np.zeros((scene.size, scene.size), dtype=bool)
    for s in scene.shapes:
        if (s.in_a if date == "a" else s.in_b):
            out |= shape_mask(s, scene.size)
    return out


def change_mask(scene: Scene) -> np.ndarray:
    out = np.zeros((scene.size, scene.size), dtype=bool)
    for s in scene.shapes:
        if s.changed:
            out |= shape_mask(s, scene.size)
    return out.astype(np.uint8)


def render(scene: Scene, date: str, rng: Optional[np.random.Generator] = None, spec: Optional[SyntheticSpec] = None):
    """Render one date; with rng=None the clean image is returned (no drift, no noise)."""
    img = scene.background.copy()
    clean = rng is None
    for s in scene.shapes:
        if not (s.in_a if date == "a" else s.in_b):
            continue
        color = np.asarray(s.color, dtype=np.float32)
        if not clean and not s.changed:
            color = color + rng.uniform(-1, 1, 3).astype(np.float32) * spec.persistent_color_drift
        img[shape_mask(s, scene.size)] = color
    if not clean:
        gain = 1 + rng.uniform(-1, 1, 3).astype(np.float32) * spec.illumination_drift
        shading = spec.shading_drift * _smooth_field(rng, scene.size, 3, 1)
        img = img * gain + shading
        img = img + rng.normal(0, spec.noise_sigma, img.shape).astype(np.float32)
    return np.clip(img, 0, 1).astype(np.float32)


def synthetic_pair(rng: np.random.Generator, spec: SyntheticSpec, pair_id: str) -> tuple[BiTemporalPair, Scene]:
    scene = sample_scene(rng, spec)
    a = render(scene, "a", rng, spec)
    b = render(scene, "b", rng, spec)
    return BiTemporalPair(a, b, change_mask(scene), pair_id), scene


def split_counts(n: int, fractions: dict) -> dict:
    names = list(fractions)
    counts = {k: int(math.floor(n * fractions[k] + 1e-9)) for k in names}
    counts[names[0]] += n - sum(counts.values())
    return counts


def generate_synthetic(spec: SyntheticSpec, out_dir) -> dict[str, DatasetManifest]:
    """Write num_pairs synthetic pairs plus manifest.json and synthetic_spec.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    counts = split_counts(spec.num_pairs, spec.splits)
    manifests, i = {}, 0
    for split, n in counts.items():
        recs = []
        for _ in range(n):
            pair, _ = synthetic_pair(rng, spec, f"{i:05d}")
            recs.append(save_pair(pair, out))
            i += 1
        manifests[split] = DatasetManifest(tuple(recs), (), spec.patch_size, split)
    write_manifests(out, manifests)
    (out / "synthetic_spec.json").write_text(json.dumps(asdict(spec), indent=1))
    return manifests
