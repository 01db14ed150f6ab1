"""Weak (geometric) and strong (photometric + CutMix) augmentation for bi-temporal pairs.

All functions take channel-first float tensors in [0, 1] and an explicit
``numpy.random.Generator``; nothing reads global random state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torchvision.transforms.v2 import functional as TF


@dataclass
class WeakSpec:
    resize_scale_range: tuple = (0.5, 2.0)
    hflip_prob: float = 0.5


@dataclass
class StrongSpec:
    jitter_prob: float = 0.8
    brightness: float = 0.5
    contrast: float = 0.5
    saturation: float = 0.5
    hue: float = 0.25
    blur_prob: float = 0.5
    blur_sigma: tuple = (0.1, 2.0)
    cutmix_prob: float = 0.5
    cutmix_area: tuple = (0.1, 0.4)
    independent_temporal: bool = True  # separate photometric draws for image A and image B


@dataclass
class AugmentSpec:
    weak: WeakSpec = field(default_factory=WeakSpec)
    strong: StrongSpec = field(default_factory=StrongSpec)
    seed: int = 0

    def __post_init__(self):
        s = self.strong
        for name in ("hflip_prob",):
            _check_prob(name, getattr(self.weak, name))
        for name in ("jitter_prob", "blur_prob", "cutmix_prob"):
            _check_prob(name, getattr(s, name))
        lo, hi = self.weak.resize_scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"resize_scale_range must be positive and ordered, got {self.weak.resize_scale_range}")
        lo, hi = s.cutmix_area
        if not 0 <= lo <= hi <= 1:
            raise ValueError(f"cutmix_area must lie in [0, 1], got {s.cutmix_area}")


def _check_prob(name, p):
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"{name} must be in [0, 1], got {p}")


# -- weak -------------------------------------------------------------------


@dataclass(frozen=True)
class GeometryRecord:
    """Everything needed to replay a weak transform on another map of the input size."""

    in_size: tuple
    resized: tuple
    flip: bool
    top: int
    left: int
    out_size: tuple


def draw_geometry(in_size, rng: np.random.Generator, spec: WeakSpec, out_size=None) -> GeometryRecord:
    h, w = in_size
    out_size = tuple(out_size or in_size)
    lo, hi = spec.resize_scale_range
    scale = float(rng.uniform(lo, hi))
    rh, rw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    flip = bool(rng.random() < spec.hflip_prob)
    ph, pw = max(rh, out_size[0]), max(rw, out_size[1])
    top = int(rng.integers(0, ph - out_size[0] + 1))
    left = int(rng.integers(0, pw - out_size[1] + 1))
    return GeometryRecord((h, w), (rh, rw), flip, top, left, out_size)


def apply_geometry(x, record: GeometryRecord, is_mask=False):
    """Resize -> optional horizontal flip -> zero-pad to output size -> crop.

    Images are (3, H, W) or (B, 3, H, W); masks are (H, W) or (B, H, W).
    """
    if tuple(x.shape[-2:]) != tuple(record.in_size):
        raise ValueError(f"record was drawn for {record.in_size}, map is {tuple(x.shape[-2:])}")
    unbatched = x.dim() == (2 if is_mask else 3)
    y = x[None] if unbatched else x
    if is_mask:
        y = y[:, None]
    if tuple(record.resized) != tuple(record.in_size):
        if is_mask:
            y = F.interpolate(y.float(), size=record.resized, mode="nearest").to(x.dtype)
        else:
            y = F.interpolate(y, size=record.resized, mode="bilinear", align_corners=False).clamp(0, 1)
    if record.flip:
        y = y.flip(-1)
    oh, ow = record.out_size
    ph, pw = max(0, oh - y.shape[-2]), max(0, ow - y.shape[-1])
    if ph or pw:
        y = F.pad(y, (0, pw, 0, ph), value=0)
    y = y[..., record.top : record.top + oh, record.left : record.left + ow]
    if is_mask:
        y = y[:, 0]
    return y[0] if unbatched else y


def hflip(x):
    return x.flip(-1)


def weak_augment(image_a, image_b, label=None, rng=None, spec: Optional[WeakSpec] = None, out_size=None):
    """Same geometry on A, B and label. Returns (a, b, label, record)."""
    spec = spec or WeakSpec()
    rng = rng if rng is not None else np.random.default_rng()
    record = draw_geometry(image_a.shape[-2:], rng, spec, out_size)
    a = apply_geometry(image_a, record)
    b = apply_geometry(image_b, record)
    y = apply_geometry(label, record, is_mask=True) if label is not None else None
    return a, b, y, record


# -- strong -----------------------------------------------------------------


def _photometric(img, rng: np.random.Generator, spec: StrongSpec):
    if rng.random() < spec.jitter_prob:
        factors = {
            "brightness": rng.uniform(max(0.0, 1 - spec.brightness), 1 + spec.brightness),
            "contrast": rng.uniform(max(0.0, 1 - spec.contrast), 1 + spec.contrast),
            "saturation": rng.uniform(max(0.0, 1 - spec.saturation), 1 + spec.saturation),
            "hue": rng.uniform(-spec.hue, spec.hue),
        }
        for op in rng.permutation(["brightness", "contrast", "saturation", "hue"]):
            f = float(factors[op])
            if op == "brightness":
                img = TF.adjust_brightness(img, f)
            elif op == "contrast":
                img = TF.adjust_contrast(img, f)
            elif op == "saturation":
                img = TF.adjust_saturation(img, f)
            elif f != 0.0:
                img = TF.adjust_hue(img, f)
    if rng.random() < spec.blur_prob:
        sigma = float(rng.uniform(*spec.blur_sigma))
        k = 2 * math.ceil(3 * sigma) + 1
        k = min(k, 2 * ((min(img.shape[-2:]) - 1) // 2) + 1)
        if k >= 3:
            img = TF.gaussian_blur(img, [k, k], [sigma, sigma])
    return img.clamp(0.0, 1.0)


def strong_augment(image_a, image_b, rng: np.random.Generator, spec: Optional[StrongSpec] = None):
    """Photometric jitter and blur only; pixel positions are never moved."""
    spec = spec or StrongSpec()
    if spec.independent_temporal:
        return _photometric(image_a, rng, spec), _photometric(image_b, rng, spec)
    state = rng.bit_generator.state
    a = _photometric(image_a, rng, spec)
    rng.bit_generator.state = state
    return a, _photometric(image_b, rng, spec)


# -- CutMix -----------------------------------------------------------------


class CutMixResult(NamedTuple):
    image_a: torch.Tensor
    image_b: torch.Tensor
    labels: torch.Tensor
    valid: Optional[torch.Tensor]
    boxes: list  # (top, left, height, width) per sample, or None
    warnings: list


def draw_box(h, w, rng: np.random.Generator, area_range):
    area = float(rng.uniform(*area_range)) * h * w
    if area <= 0:
        return None
    ratio = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
    bh = int(round(min(h, math.sqrt(area * ratio))))
    bw = int(round(min(w, area / max(bh, 1))))
    if bh == 0 or bw == 0:
        return None
    top = int(rng.integers(0, h - bh + 1))
    left = int(rng.integers(0, w - bw + 1))
    return top, left, bh, bw


def cutmix_batch(image_a, image_b, labels, rng: np.random.Generator, spec: Optional[StrongSpec] = None,
                 valid=None, boxes=None) -> CutMixResult:
    """Paste a box from the next sample (cyclically) into A, B and the pseudo labels alike."""
    spec = spec or StrongSpec()
    n, _, h, w = image_a.shape
    if n < 2:
        return CutMixResult(image_a, image_b, labels, valid, [None] * n, ["cutmix skipped: batch of 1"])
    if boxes is None:
        boxes = []
        for _ in range(n):
            apply = rng.random() < spec.cutmix_prob
            box = draw_box(h, w, rng, spec.cutmix_area)
            boxes.append(box if apply else None)
    a, b, y = image_a.clone(), image_b.clone(), labels.clone()
    v = valid.clone() if valid is not None else None
    for i, box in enumerate(boxes):
        if box is None:
            continue
        j = (i + 1) % n
        t, l, bh, bw = box
        region = (slice(t, t + bh), slice(l, l + bw))
        a[i, :, region[0], region[1]] = image_a[j, :, region[0], region[1]]
        b[i, :, region[0], region[1]] = image_b[j, :, region[0], region[1]]
        y[i, region[0], region[1]] = labels[j, region[0], region[1]]
        if v is not None:
            v[i, region[0], region[1]] = valid[j, region[0], region[1]]
    return CutMixResult(a, b, y, v, boxes, [])
