"""Change-class IoU, overall accuracy, split evaluation and TP/TN/FP/FN colour maps."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

from .core import DatasetManifest, load_pair

# TP white, TN black, FP red, FN green
COLORS = {
    "tp": (255, 255, 255),
    "tn": (0, 0, 0),
    "fp": (255, 0, 0),
    "fn": (0, 255, 0),
}


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn

    def to_dict(self):
        return {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn}


def _as_binary(x, name):
    x = x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else np.asarray(x)
    if x.dtype != bool:
        if not np.isin(x, (0, 1)).all():
            raise ValueError(f"{name} must be binary")
        x = x.astype(bool)
    return x


def confusion(pred, truth) -> ConfusionCounts:
    pred, truth = _as_binary(pred, "pred"), _as_binary(truth, "truth")
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    counts = np.bincount(2 * truth.ravel().astype(np.int64) + pred.ravel(), minlength=4)
    tn, fp, fn, tp = (int(c) for c in counts)
    return ConfusionCounts(tp, tn, fp, fn)


def iou_c(counts: ConfusionCounts) -> float:
    denom = counts.tp + counts.fp + counts.fn
    if denom == 0:
        return 1.0  # no change predicted and none present
    return counts.tp / denom


def oa(counts: ConfusionCounts) -> float:
    if counts.total == 0:
        return 1.0
    return (counts.tp + counts.tn) / counts.total


def color_map(pred, truth) -> np.ndarray:
    pred, truth = _as_binary(pred, "pred"), _as_binary(truth, "truth")
    out = np.zeros(pred.shape + (3,), dtype=np.uint8)
    out[pred & truth] = COLORS["tp"]
    out[pred & ~truth] = COLORS["fp"]
    out[~pred & truth] = COLORS["fn"]
    return out


def metrics_dict(counts: ConfusionCounts) -> dict:
    return {"iou_c": iou_c(counts), "oa": oa(counts), **counts.to_dict()}


@torch.no_grad()
def predict_masks(network, image_a, image_b, batch_size=16):
    """Hard change masks (B, H, W) for float image batches (B, 3, H, W)."""
    was_training = network.training
    network.eval()
    try:
        masks = []
        for i in range(0, image_a.shape[0], batch_size):
            logits = network(image_a[i : i + batch_size], image_b[i : i + batch_size])
            masks.append(logits.argmax(dim=1))
        return torch.cat(masks)
    finally:
        network.train(was_training)


def evaluate_arrays(network, image_a, image_b, labels, ids=None, export_dir: Optional[str | Path] = None,
                    batch_size=16) -> dict:
    """Evaluate on in-memory tensors; labels (B, H, W) binary."""
    if labels is None:
        raise ValueError("evaluation split has no labels")
    preds = predict_masks(network, image_a, image_b, batch_size)
    total = ConfusionCounts()
    per_tile = []
    ids = ids if ids is not None else [str(i) for i in range(len(preds))]
    if export_dir is not None:
        export_dir = Path(export_dir)
        export_dir.mkdir(parents=True, exist_ok=True)
    for pid, p, t in zip(ids, preds, labels):
        c = confusion(p, t)
        total = total + c
        per_tile.append({"id": pid, **metrics_dict(c)})
        if export_dir is not None:
            Image.fromarray(color_map(p, t), "RGB").save(export_dir / f"{pid}.png")
    return {**metrics_dict(total), "num_tiles": len(per_tile), "per_tile": per_tile}


def evaluate(network, manifest: DatasetManifest, root, export_dir=None, batch_size=16) -> dict:
    """Per-tile and aggregate IoU^c / OA on every record of a split (labels required)."""
    records = manifest.records
    missing = [r.id for r in records if r.label is None]
    if missing:
        raise ValueError(f"split '{manifest.split_name}' has {len(missing)} records without labels, e.g. {missing[0]}")
    pairs = [load_pair(r, root) for r in records]
    dtype = next(network.parameters()).dtype
    a = torch.stack([torch.as_tensor(p.image_a, dtype=dtype).permute(2, 0, 1) for p in pairs])
    b = torch.stack([torch.as_tensor(p.image_b, dtype=dtype).permute(2, 0, 1) for p in pairs])
    y = torch.stack([torch.as_tensor(p.label) for p in pairs])
    report = evaluate_arrays(network, a, b, y, [p.id for p in pairs], export_dir, batch_size)
    report["split"] = manifest.split_name
    return report
