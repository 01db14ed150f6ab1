"""Shared data model: bi-temporal pairs, dataset manifests and partitions."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

MANIFEST_NAME = "manifest.json"


class ManifestError(ValueError):
    """Raised when a manifest file cannot be parsed."""


class PairLoadError(ValueError):
    """Raised when an image pair cannot be decoded into a valid BiTemporalPair."""


@dataclass(frozen=True, eq=False)
class BiTemporalPair:
    """Co-registered pre/post images (H, W, 3) in [0, 1] plus an optional binary mask."""

    image_a: np.ndarray
    image_b: np.ndarray
    label: Optional[np.ndarray] = None
    id: str = ""

    def __post_init__(self):
        a, b = self.image_a, self.image_b
        if a.ndim != 3 or a.shape[2] != 3 or b.ndim != 3 or b.shape[2] != 3:
            raise PairLoadError(f"{self.id}: images must be (H, W, 3), got {a.shape} and {b.shape}")
        if a.shape != b.shape:
            raise PairLoadError(f"{self.id}: image sizes differ: {a.shape[:2]} vs {b.shape[:2]}")
        for name, img in (("image_a", a), ("image_b", b)):
            if img.size and (img.min() < 0.0 or img.max() > 1.0):
                raise PairLoadError(f"{self.id}: {name} values outside [0, 1]")
        if self.label is not None:
            if self.label.shape != a.shape[:2]:
                raise PairLoadError(f"{self.id}: label size {self.label.shape} != image size {a.shape[:2]}")
            if not np.isin(self.label, (0, 1)).all():
                raise PairLoadError(f"{self.id}: label values must be in {{0, 1}}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.image_a.shape[0], self.image_a.shape[1]


@dataclass(frozen=True)
class PairRecord:
    id: str
    a: str
    b: str
    label: Optional[str] = None

    def to_dict(self) -> dict:
        d = {"id": self.id, "a": self.a, "b": self.b}
        if self.label is not None:
            d["label"] = self.label
        return d

    def without_label(self) -> "PairRecord":
        return PairRecord(self.id, self.a, self.b, None)


@dataclass(frozen=True)
class DatasetManifest:
    labeled: tuple[PairRecord, ...] = ()
    unlabeled: tuple[PairRecord, ...] = ()
    patch_size: int = 256
    split_name: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "labeled", tuple(self.labeled))
        object.__setattr__(self, "unlabeled", tuple(self.unlabeled))

    @property
    def records(self) -> tuple[PairRecord, ...]:
        return self.labeled + self.unlabeled

    def to_dict(self) -> dict:
        return {
            "split_name": self.split_name,
            "patch_size": self.patch_size,
            "labeled": [r.to_dict() for r in self.labeled],
            "unlabeled": [r.to_dict() for r in self.unlabeled],
        }

    @classmethod
    def from_dict(cls, d: dict, context: str = "manifest") -> "DatasetManifest":
        try:
            labeled = tuple(_record_from_dict(r, f"{context}.labeled[{i}]") for i, r in enumerate(d.get("labeled", [])))
            unlabeled = tuple(
                _record_from_dict(r, f"{context}.unlabeled[{i}]") for i, r in enumerate(d.get("unlabeled", []))
            )
            patch_size = int(d.get("patch_size", 256))
            split_name = str(d.get("split_name", "train"))
        except (TypeError, AttributeError, ValueError) as e:
            if isinstance(e, ManifestError):
                raise
            raise ManifestError(f"{context}: {e}") from e
        return cls(labeled, unlabeled, patch_size, split_name)


@dataclass(frozen=True)
class PartitionSpec:
    labeled_ratio: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.labeled_ratio <= 1.0:
            raise ValueError(f"labeled_ratio must be in (0, 1], got {self.labeled_ratio}")


@dataclass(frozen=True)
class Violation:
    kind: str  # missing-file | size-mismatch | duplicate-id | missing-label | unexpected-label | unreadable
    pair_id: str
    detail: str = ""
    path: Optional[str] = None


def _record_from_dict(r: dict, context: str) -> PairRecord:
    if not isinstance(r, dict):
        raise ManifestError(f"{context}: expected an object, got {type(r).__name__}")
    for key in ("id", "a", "b"):
        if key not in r:
            raise ManifestError(f"{context}: missing field '{key}'")
    label = r.get("label")
    return PairRecord(str(r["id"]), str(r["a"]), str(r["b"]), None if label is None else str(label))


# -- manifest files ---------------------------------------------------------
#
# A manifest file holds one or more splits:
#   {"patch_size": 256, "splits": {"train": {...}, "val": {...}, "test": {...}}}
# A bare DatasetManifest dict (no "splits" key) is accepted as a single split.


def write_manifests(path: str | Path, manifests: dict[str, DatasetManifest], extra: Optional[dict] = None) -> Path:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    patch_sizes = {m.patch_size for m in manifests.values()}
    doc = {"patch_size": patch_sizes.pop() if len(patch_sizes) == 1 else None}
    if extra:
        doc.update(extra)
    doc["splits"] = {name: m.to_dict() for name, m in manifests.items()}
    path.write_text(json.dumps(doc, indent=1))
    return path


def read_manifests(path: str | Path) -> dict[str, DatasetManifest]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        text = path.read_text()
    except OSError as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from e
    if not isinstance(doc, dict):
        raise ManifestError(f"{path}: top level must be an object")
    if "splits" not in doc:
        m = DatasetManifest.from_dict(doc, context=str(path))
        return {m.split_name: m}
    out = {}
    for name, d in doc["splits"].items():
        d = dict(d)
        d.setdefault("split_name", name)
        if d.get("patch_size") is None and doc.get("patch_size") is not None:
            d["patch_size"] = doc["patch_size"]
        out[name] = DatasetManifest.from_dict(d, context=f"{path}:splits.{name}")
    return out


def read_manifest(path: str | Path, split: str = "train") -> DatasetManifest:
    manifests = read_manifests(path)
    if split not in manifests:
        raise ManifestError(f"split '{split}' not in manifest (have {sorted(manifests)})")
    return manifests[split]


# -- validation and loading -------------------------------------------------


def _image_size(path: Path) -> tuple[int, int]:
    with Image.open(path) as im:
        return im.height, im.width


def validate_manifest(manifest: DatasetManifest, root: str | Path) -> list[Violation]:
    """Check files, label presence, mask sizes and id uniqueness. Reads headers only."""
    root = Path(root)
    violations = []
    seen = set()
    for rec in manifest.labeled:
        if rec.label is None:
            violations.append(Violation("missing-label", rec.id, "labeled record has no label path"))
    for rec in manifest.unlabeled:
        if rec.label is not None:
            violations.append(Violation("unexpected-label", rec.id, "unlabeled record has a label path", rec.label))
    for rec in manifest.records:
        if rec.id in seen:
            violations.append(Violation("duplicate-id", rec.id, "id appears more than once"))
        seen.add(rec.id)
        sizes = {}
        for key in ("a", "b", "label"):
            rel = getattr(rec, key)
            if rel is None:
                continue
            p = root / rel
            if not p.is_file():
                violations.append(Violation("missing-file", rec.id, f"{key} file not found", str(p)))
                continue
            try:
                sizes[key] = _image_size(p)
            except Exception as e:  # undecodable header
                violations.append(Violation("unreadable", rec.id, f"{key}: {e}", str(p)))
        if "a" in sizes and "b" in sizes and sizes["a"] != sizes["b"]:
            violations.append(Violation("size-mismatch", rec.id, f"A {sizes['a']} vs B {sizes['b']}", rec.b))
        if "label" in sizes and "a" in sizes and sizes["label"] != sizes["a"]:
            violations.append(
                Violation("size-mismatch", rec.id, f"label {sizes['label']} vs image {sizes['a']}", rec.label)
            )
    return violations


def _read_rgb(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in ("RGB", "RGBA"):
                raise PairLoadError(f"{path}: expected a 3-channel image, got mode {im.mode}")
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except PairLoadError:
        raise
    except Exception as e:
        raise PairLoadError(f"{path}: {e}") from e
    return arr / 255.0


def _read_mask(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "1", "P", "I", "I;16"):
                raise PairLoadError(f"{path}: expected a 1-channel mask, got mode {im.mode}")
            arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    except PairLoadError:
        raise
    except Exception as e:
        raise PairLoadError(f"{path}: {e}") from e
    return (arr > 0.5).astype(np.uint8)


def load_pair(record: PairRecord, root: str | Path) -> BiTemporalPair:
    root = Path(root)
    a = _read_rgb(root / record.a)
    b = _read_rgb(root / record.b)
    label = _read_mask(root / record.label) if record.label is not None else None
    return BiTemporalPair(a, b, label, record.id)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def save_pair(pair: BiTemporalPair, root: str | Path, name: Optional[str] = None) -> PairRecord:
    """Write a pair in the A/ B/ label/ layout and return its manifest record."""
    root = Path(root)
    name = name or pair.id
    rec = PairRecord(pair.id, f"A/{name}.png", f"B/{name}.png", None if pair.label is None else f"label/{name}.png")
    (root / "A").mkdir(parents=True, exist_ok=True)
    (root / "B").mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(pair.image_a), "RGB").save(root / rec.a)
    Image.fromarray(to_uint8(pair.image_b), "RGB").save(root / rec.b)
    if pair.label is not None:
        (root / "label").mkdir(parents=True, exist_ok=True)
        Image.fromarray((pair.label > 0).astype(np.uint8) * 255, "L").save(root / rec.label)
    return rec
