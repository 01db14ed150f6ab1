"""Semi-supervised training: supervised CE, thresholded pseudo labels, two strong views, cosine AdamW."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugmentSpec, cutmix_batch, strong_augment, weak_augment
from .core import DatasetManifest, load_pair
from .metrics import evaluate_arrays
from .network import save_checkpoint

LOW_CONF_MODES = ("label-zero", "ignore")


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, step=None, checkpoint=None):
        super().__init__(message)
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    tau: float = 0.95
    lambda1: float = 0.5
    lambda2: float = 0.5
    lr_init: float = 3e-4
    lr_final: float = 1e-6
    epochs: int = 80
    batch_size: int = 4  # per stream: 4 labeled + 4 unlabeled pairs per step
    weight_decay: float = 1e-6
    momentum_beta: float = 0.9
    beta2: float = 0.999
    low_conf_mode: str = "label-zero"
    seed: int = 0
    iters_per_epoch: Optional[int] = None  # None: derived from the dataset sizes
    max_steps: Optional[int] = None  # hard stop, mainly for smoke and determinism runs
    unsup_warmup_steps: int = 0  # supervised-only steps before the consistency term starts

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            # tau = 1 is allowed as the "no pseudo positives" ceiling
            raise ValueError(f"tau must be in (0, 1], got {self.tau}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError(f"loss weights must be >= 0, got {self.lambda1}, {self.lambda2}")
        if not 0 < self.lr_final <= self.lr_init:
            raise ValueError(f"need 0 < lr_final <= lr_init, got {self.lr_final}, {self.lr_init}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.low_conf_mode not in LOW_CONF_MODES:
            raise ValueError(f"low_conf_mode must be one of {LOW_CONF_MODES}, got {self.low_conf_mode!r}")

    @property
    def unsupervised(self):
        return self.lambda2 > 0


@dataclass
class LossBreakdown:
    l_s: float
    l_u: float
    total: float
    pseudo_positive_fraction: float = 0.0
    high_conf_fraction: float = 0.0
    step: int = 0
    lr: float = 0.0

    def to_dict(self):
        return asdict(self)


class PseudoLabelMap(NamedTuple):
    labels: torch.Tensor  # (B, H, W) long in {0, 1}
    valid_mask: torch.Tensor  # (B, H, W) bool


# -- losses -------------------------------------------------------------------


def _logits(pred):
    return pred.logits if hasattr(pred, "logits") else pred


def supervised_loss(pred, label):
    """Mean pixelwise 2-class cross-entropy; pred is logits (B, 2, H, W) or a PredictionMap."""
    logits = _logits(pred)
    if logits.shape[-2:] != label.shape[-2:] or logits.shape[0] != label.shape[0]:
        raise ValueError(f"shape mismatch: logits {tuple(logits.shape)} vs label {tuple(label.shape)}")
    if not bool(((label == 0) | (label == 1)).all()):
        raise ValueError("label must be binary")
    return F.cross_entropy(logits, label.long())


def make_pseudo_labels(p_uw, tau, low_conf_mode="label-zero") -> PseudoLabelMap:
    """Y = 1 where p > tau (strictly); the ambiguous band is masked out only in ignore mode."""
    p = p_uw.detach()
    labels = (p > tau).long()
    if low_conf_mode == "ignore":
        valid = (p > tau) | (p < 1 - tau)
    elif low_conf_mode == "label-zero":
        valid = torch.ones_like(p, dtype=torch.bool)
    else:
        raise ValueError(f"unknown low_conf_mode {low_conf_mode!r}")
    return PseudoLabelMap(labels, valid)


def _masked_ce(logits, y: PseudoLabelMap):
    ce = F.cross_entropy(logits, y.labels.detach(), reduction="none")
    valid = y.valid_mask.detach()
    n = valid.sum()
    return (ce * valid).sum() / n.clamp(min=1), int(n)


def unsupervised_loss(p_s1, p_s2, y_u: PseudoLabelMap, y_u2: Optional[PseudoLabelMap] = None, counters=None):
    """0.5 * (CE(s1, Y) + CE(s2, Y)) over valid pixels; y_u2 gives view 2 its own (CutMix-mixed) labels."""
    y_u2 = y_u if y_u2 is None else y_u2
    l1, n1 = _masked_ce(_logits(p_s1), y_u)
    l2, n2 = _masked_ce(_logits(p_s2), y_u2)
    if counters is not None and (n1 == 0 or n2 == 0):
        counters["zero_valid"] = counters.get("zero_valid", 0) + 1
    return 0.5 * (l1 + l2)


def total_loss(l_s, l_u, cfg: TrainConfig, step=0, **extra) -> LossBreakdown:
    ls = float(l_s)
    lu = 0.0 if l_u is None else float(l_u)
    if not (math.isfinite(ls) and math.isfinite(lu)):
        raise TrainingDivergedError(f"non-finite loss at step {step}: l_s={ls}, l_u={lu}", step=step)
    return LossBreakdown(ls, lu, cfg.lambda1 * ls + cfg.lambda2 * lu, step=step, **extra)


def cosine_lr(epoch, cfg: TrainConfig, total=None):
    """Closed-form cosine annealing from lr_init at 0 to lr_final at `total` (default cfg.epochs)."""
    total = cfg.epochs if total is None else total
    t = min(max(epoch / total, 0.0), 1.0) if total > 0 else 1.0
    return cfg.lr_final + (cfg.lr_init - cfg.lr_final) * 0.5 * (1.0 + math.cos(math.pi * t))


# -- one optimisation step ------------------------------------------------------


def _strong_views(a_w, b_w, rng, aug: AugmentSpec):
    sa, sb = [], []
    for i in range(a_w.shape[0]):
        x, y = strong_augment(a_w[i], b_w[i], rng, aug.strong)
        sa.append(x)
        sb.append(y)
    return torch.stack(sa), torch.stack(sb)


def train_step(network, optimizer, labeled, unlabeled, cfg: TrainConfig, rng: np.random.Generator,
               aug: Optional[AugmentSpec] = None, step=0, counters=None) -> LossBreakdown:
    """labeled = (a, b, y) weak views; unlabeled = (a, b) weak views or None."""
    aug = aug or AugmentSpec()
    a_l, b_l, y_l = labeled
    if a_l.shape[0] == 0:
        raise ValueError("labeled batch is empty; the supervised term is mandatory")
    network.train()
    l_s = supervised_loss(network(a_l, b_l), y_l)
    l_u, stats = None, {}
    if unlabeled is not None and cfg.unsupervised:
        a_w, b_w = unlabeled
        with torch.no_grad():
            p_w = torch.softmax(network(a_w, b_w), dim=1)[:, 1]
        pseudo = make_pseudo_labels(p_w, cfg.tau, cfg.low_conf_mode)
        stats = {
            "pseudo_positive_fraction": float(pseudo.labels.float().mean()),
            "high_conf_fraction": float(((p_w > cfg.tau) | (p_w < 1 - cfg.tau)).float().mean()),
        }
        views = []
        for _ in range(2):
            sa, sb = _strong_views(a_w, b_w, rng, aug)
            mix = cutmix_batch(sa, sb, pseudo.labels, rng, aug.strong, valid=pseudo.valid_mask)
            views.append(mix)
        n = a_w.shape[0]
        logits_s = network(torch.cat([views[0].image_a, views[1].image_a]), torch.cat([views[0].image_b, views[1].image_b]))
        l_u = unsupervised_loss(
            logits_s[:n], logits_s[n:],
            PseudoLabelMap(views[0].labels, views[0].valid),
            PseudoLabelMap(views[1].labels, views[1].valid),
            counters,
        )
    lr = optimizer.param_groups[0]["lr"]
    breakdown = total_loss(l_s.detach(), None if l_u is None else l_u.detach(), cfg, step=step, lr=lr, **stats)
    loss = cfg.lambda1 * l_s if l_u is None else cfg.lambda1 * l_s + cfg.lambda2 * l_u
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return breakdown


def make_optimizer(network, cfg: TrainConfig):
    params = [p for p in network.parameters() if p.requires_grad]
    return torch.optim.AdamW(
        params, lr=cfg.lr_init, betas=(cfg.momentum_beta, cfg.beta2), weight_decay=cfg.weight_decay
    )


# -- data held in memory ----------------------------------------------------------


@dataclass
class PairArrays:
    ids: list
    image_a: torch.Tensor  # (N, 3, H, W) float in [0, 1]
    image_b: torch.Tensor
    labels: Optional[torch.Tensor] = None  # (N, H, W) long

    def __len__(self):
        return len(self.ids)


def load_arrays(manifest: DatasetManifest, root, labeled=True) -> PairArrays:
    records = manifest.labeled if labeled else manifest.unlabeled
    pairs = [load_pair(r, root) for r in records]
    if not pairs:
        return PairArrays([], torch.zeros(0, 3, 1, 1), torch.zeros(0, 3, 1, 1), None)
    a = torch.stack([torch.from_numpy(np.ascontiguousarray(p.image_a)).permute(2, 0, 1) for p in pairs]).float()
    b = torch.stack([torch.from_numpy(np.ascontiguousarray(p.image_b)).permute(2, 0, 1) for p in pairs]).float()
    y = None
    if labeled:
        y = torch.stack([torch.from_numpy(p.label.astype(np.int64)) for p in pairs])
    return PairArrays([p.id for p in pairs], a, b, y)


def _weak_batch(data: PairArrays, idx, rng, aug: AugmentSpec):
    out_a, out_b, out_y = [], [], []
    for i in idx:
        y = data.labels[i] if data.labels is not None else None
        a, b, y, _ = weak_augment(data.image_a[i], data.image_b[i], y, rng, aug.weak)
        out_a.append(a)
        out_b.append(b)
        out_y.append(y)
    ys = torch.stack(out_y) if data.labels is not None else None
    return torch.stack(out_a), torch.stack(out_b), ys


class _Cycler:
    """Endless stream of indices: a fresh seeded permutation every pass."""

    def __init__(self, n, rng):
        self.n, self.rng, self.buf = n, rng, []

    def take(self, k):
        while len(self.buf) < k:
            self.buf.extend(int(i) for i in self.rng.permutation(self.n))
        out, self.buf = self.buf[:k], self.buf[k:]
        return out


# -- fit ------------------------------------------------------------------------


@dataclass
class TrainReport:
    history: list = field(default_factory=list)  # per-epoch records
    steps: int = 0
    best_val_iou: float = -1.0
    best_epoch: int = -1
    final_val: dict = field(default_factory=dict)
    best_checkpoint: Optional[str] = None
    last_checkpoint: Optional[str] = None
    zero_valid_batches: int = 0
    seconds: float = 0.0
    best_state = None  # in-memory copy of the best weights, not serialised

    def to_dict(self):
        return asdict(self)


def steps_per_epoch(n_labeled, n_unlabeled, cfg: TrainConfig):
    if cfg.iters_per_epoch is not None:
        return cfg.iters_per_epoch
    # labeled data is cycled over the unlabeled stream; without it, one pass over the labels
    n = max(n_labeled, n_unlabeled) if (cfg.unsupervised and n_unlabeled > 0) else n_labeled
    return max(1, math.ceil(n / cfg.batch_size))


def fit(network, labeled: PairArrays, unlabeled: Optional[PairArrays], cfg: TrainConfig,
        aug: Optional[AugmentSpec] = None, val: Optional[PairArrays] = None, out_dir=None,
        on_step=None, on_epoch=None, keep_best=True) -> TrainReport:
    """Train with the semi-supervised objective; per-epoch validation and best-IoU checkpoint."""
    aug = aug or AugmentSpec()
    if len(labeled) == 0:
        raise ValueError("at least one labeled pair is required")
    if unlabeled is not None and len(unlabeled) == 0:
        unlabeled = None
    use_unlabeled = unlabeled is not None and cfg.unsupervised
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log = open(out / "train_log.jsonl", "w")
    else:
        log = None
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    lab_stream = _Cycler(len(labeled), rng)
    unl_stream = _Cycler(len(unlabeled), rng) if use_unlabeled else None
    per_epoch = steps_per_epoch(len(labeled), len(unlabeled) if use_unlabeled else 0, cfg)
    total_steps = per_epoch * cfg.epochs
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    optimizer = make_optimizer(network, cfg)
    report = TrainReport()
    counters = {}
    best_state = None
    last_good = None
    t0 = time.time()

    def write(rec):
        if log is not None:
            log.write(json.dumps(rec) + "\n")
            log.flush()

    step = 0
    try:
        for epoch in range(cfg.epochs):
            if step >= total_steps:
                break
            sums = {"l_s": 0.0, "l_u": 0.0, "total": 0.0, "pseudo_positive_fraction": 0.0, "high_conf_fraction": 0.0}
            n_steps = 0
            for _ in range(per_epoch):
                if step >= total_steps:
                    break
                # the schedule reaches lr_final exactly on the last optimisation step
                lr = cosine_lr(step, cfg, total=max(total_steps - 1, 1))
                for g in optimizer.param_groups:
                    g["lr"] = lr
                lab = _weak_batch(labeled, lab_stream.take(cfg.batch_size), rng, aug)
                unl = None
                if use_unlabeled and step >= cfg.unsup_warmup_steps:
                    a_w, b_w, _ = _weak_batch(unlabeled, unl_stream.take(cfg.batch_size), rng, aug)
                    unl = (a_w, b_w)
                try:
                    br = train_step(network, optimizer, lab, unl, cfg, rng, aug, step=step, counters=counters)
                except TrainingDivergedError as e:
                    raise TrainingDivergedError(
                        f"{e}; last good checkpoint: {last_good}", step=step, checkpoint=last_good
                    ) from None
                rec = br.to_dict()
                write({"type": "step", "epoch": epoch, **rec})
                if on_step is not None:
                    on_step(br)
                for k in sums:
                    sums[k] += rec[k]
                n_steps += 1
                step += 1
            epoch_rec = {"type": "epoch", "epoch": epoch, "steps": n_steps, "lr": lr}
            epoch_rec.update({k: v / max(n_steps, 1) for k, v in sums.items()})
            if val is not None and len(val):
                m = evaluate_arrays(network, val.image_a, val.image_b, val.labels)
                epoch_rec.update({"val_iou_c": m["iou_c"], "val_oa": m["oa"]})
                report.final_val = {"iou_c": m["iou_c"], "oa": m["oa"]}
                if m["iou_c"] > report.best_val_iou:
                    report.best_val_iou, report.best_epoch = m["iou_c"], epoch
                    if keep_best:
                        best_state = {k: v.detach().clone() for k, v in network.state_dict().items()}
                    if out is not None:
                        report.best_checkpoint = str(save_checkpoint(network, out / "best.pt"))
            if out is not None:
                last_good = report.last_checkpoint = str(save_checkpoint(network, out / "last.pt"))
            write(epoch_rec)
            report.history.append(epoch_rec)
            if on_epoch is not None:
                on_epoch(epoch_rec)
    finally:
        if log is not None:
            log.close()
    report.steps = step
    report.zero_valid_batches = counters.get("zero_valid", 0)
    report.seconds = time.time() - t0
    report.best_state = best_state
    if out is not None:
        d = report.to_dict()
        (out / "report.json").write_text(json.dumps(d, indent=1))
    return report
