"""Full change-detection network: encoder -> neck -> per-stage SADAM -> decoder -> head."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn as nn
from PIL import Image

from .encoder import EncoderConfig, build_encoder, check_input_size, import_pretrained
from .layers import CBR
from .sadam import SADAM, DiffConv, SadamConfig

NUM_CLASSES = 2


@dataclass
class NetworkConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    # width of the 1x1 projection applied to every stage before SADAM; None keeps the encoder widths
    neck_channels: Optional[int] = 64
    sadam_enabled: bool = True
    sca_softmax_axis: str = "m"
    gamma_init: float = 0.0
    seed: int = 0

    @property
    def stage_channels(self) -> list:
        if self.neck_channels is None:
            return list(self.encoder.channels)
        return [self.neck_channels] * 4

    @classmethod
    def paper(cls, **kw):
        kw.setdefault("encoder", EncoderConfig.paper())
        return cls(**kw)

    @classmethod
    def tiny(cls, **kw):
        kw.setdefault("encoder", EncoderConfig.tiny())
        kw.setdefault("neck_channels", 16)
        return cls(**kw)


class PredictionMap(NamedTuple):
    logits: torch.Tensor  # (B, 2, H, W)
    prob_change: torch.Tensor  # (B, H, W)


class Decoder(nn.Module):
    """F_4 = D_4; F_i = CBR_3(CBR_3([D_i, Up(F_{i+1})])) for i = 3, 2, 1."""

    def __init__(self, stage_channels):
        super().__init__()
        if len(stage_channels) != 4:
            raise ValueError(f"decoder expects 4 stage widths, got {stage_channels}")
        self.stage_channels = list(stage_channels)
        self.up = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)
        for i in (3, 2, 1):
            c, c_next = stage_channels[i - 1], stage_channels[i]
            self.add_module(f"fuse{i}", nn.Sequential(CBR(c + c_next, c, 3), CBR(c, c, 3)))

    def forward(self, d):
        if len(d) != 4:
            raise ValueError(f"decoder expects 4 maps, got {len(d)}")
        for i in range(4):
            if d[i].shape[1] != self.stage_channels[i]:
                raise ValueError(f"stage {i + 1}: expected {self.stage_channels[i]} channels, got {d[i].shape[1]}")
            if i and d[i].shape[-2:] != tuple(s // 2 for s in d[i - 1].shape[-2:]):
                raise ValueError(f"stage {i + 1} spatial size {tuple(d[i].shape[-2:])} is not half of stage {i}")
        f = d[3]
        for i in (3, 2, 1):
            f = getattr(self, f"fuse{i}")(torch.cat([d[i - 1], self.up(f)], dim=1))
        return f


class PredictionHead(nn.Module):
    def __init__(self, in_ch, num_classes=NUM_CLASSES):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, num_classes, 1)
        self.up = nn.Upsample(scale_factor=4, mode="bilinear", align_corners=False)

    def forward(self, f1):
        return self.up(self.conv(f1))


def logits_to_prediction(logits) -> PredictionMap:
    return PredictionMap(logits, torch.softmax(logits, dim=1)[:, 1])


class ChangeDetector(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        enc_cfg = config.encoder
        self.encoder = build_encoder(enc_cfg)
        widths = config.stage_channels
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed + 1)
            if config.neck_channels is not None:
                self.neck = nn.ModuleDict(
                    {f"stage{i + 1}": nn.Conv2d(enc_cfg.channels[i], widths[i], 1) for i in range(4)}
                )
            else:
                self.neck = None
            if config.sadam_enabled:
                self.sadam = nn.ModuleDict(
                    {
                        f"stage{i + 1}": SADAM(SadamConfig(widths[i], config.gamma_init, config.sca_softmax_axis))
                        for i in range(4)
                    }
                )
            else:
                self.sadam = nn.ModuleDict({f"stage{i + 1}": DiffConv(widths[i]) for i in range(4)})
            self.decoder = Decoder(widths)
            self.head = PredictionHead(widths[0])

    def extract(self, xa, xb):
        """Per-stage change features (the 4 SADAM outputs)."""
        if xa.shape != xb.shape:
            raise ValueError(f"image shapes differ: {tuple(xa.shape)} vs {tuple(xb.shape)}")
        h, w = xa.shape[-2:]
        check_input_size(h, w)
        if self.config.sadam_enabled and h != w:
            raise ValueError(f"spatial-channel attention needs square inputs, got {h}x{w}")
        n = xa.shape[0]
        feats = self.encoder(torch.cat([xa, xb], dim=0))
        out = []
        for i, f in enumerate(feats):
            key = f"stage{i + 1}"
            if self.neck is not None:
                f = self.neck[key](f)
            out.append(self.sadam[key](f[:n], f[n:]))
        return out

    def forward(self, xa, xb):
        """Logits (B, 2, H, W) for image batches (B, 3, H, W)."""
        return self.head(self.decoder(self.extract(xa, xb)))

    def predict(self, xa, xb) -> PredictionMap:
        return logits_to_prediction(self(xa, xb))

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


def build_network(config: NetworkConfig, pretrained: Optional[str | Path] = None):
    net = ChangeDetector(config)
    report = None
    if pretrained is not None and config.encoder.init_mode == "pretrained-import":
        report = import_pretrained(net.encoder, pretrained)
    return net, report


def decode(network: ChangeDetector, d):
    return network.decoder(d)


def predict(network: ChangeDetector, f1) -> PredictionMap:
    return logits_to_prediction(network.head(f1))


def pair_to_tensors(pair, dtype=torch.float32):
    a = torch.as_tensor(np.ascontiguousarray(pair.image_a), dtype=dtype).permute(2, 0, 1)
    b = torch.as_tensor(np.ascontiguousarray(pair.image_b), dtype=dtype).permute(2, 0, 1)
    return a, b


@torch.no_grad()
def forward_pair(network: ChangeDetector, pair) -> PredictionMap:
    """Eval-mode prediction for a single BiTemporalPair; returns unbatched (2, H, W) / (H, W) maps."""
    was_training = network.training
    network.eval()
    try:
        dtype = next(network.parameters()).dtype
        a, b = pair_to_tensors(pair, dtype)
        pred = network.predict(a[None], b[None])
    finally:
        network.train(was_training)
    return PredictionMap(pred.logits[0], pred.prob_change[0])


# -- checkpoints and prediction export ---------------------------------------


def save_checkpoint(network: ChangeDetector, path: str | Path):
    torch.save({k: v.detach().clone() for k, v in network.state_dict().items()}, path)
    return Path(path)


def load_checkpoint(network: ChangeDetector, path: str | Path):
    state = torch.load(path, map_location="cpu", weights_only=True)
    network.load_state_dict(state)
    return network


def export_mask(prob_change, path: str | Path):
    prob = prob_change.detach().cpu().numpy() if isinstance(prob_change, torch.Tensor) else np.asarray(prob_change)
    Image.fromarray(((prob > 0.5) * 255).astype(np.uint8), "L").save(path)
    return Path(path)
