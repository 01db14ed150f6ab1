"""Hierarchical 4-stage siamese encoder with bottleneck adapters.

Each stage is a downsample (conv stem for stage 1, linear projection + 2x2 max-pool
afterwards) followed by pre-norm windowed-attention blocks. Tensor names follow
``stage{i}.block{j}.<leaf>`` (1-based), which is also the checkpoint format.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

PAPER_CHANNELS = [96, 192, 384, 768]
PAPER_BLOCKS = [1, 2, 7, 2]


@dataclass
class EncoderConfig:
    channels: list = field(default_factory=lambda: list(PAPER_CHANNELS))
    blocks: list = field(default_factory=lambda: list(PAPER_BLOCKS))
    strides: list = field(default_factory=lambda: [4, 8, 16, 32])
    heads: list = field(default_factory=lambda: [1, 2, 4, 8])
    window_sizes: list = field(default_factory=lambda: [8, 4, 0, 0])  # tokens per side; 0 = global
    mlp_ratio: float = 4.0
    adapter_enabled: bool = True
    adapter_reduction: int = 8
    freeze_backbone: bool = True
    init_mode: str = "pretrained-import"  # or "random"
    variant: str = "hiera"  # or "conv" (ablation without the hierarchical transformer)
    pos_embed_size: int = 16
    in_channels: int = 3
    seed: int = 0

    def __post_init__(self):
        for name in ("channels", "blocks", "strides", "heads", "window_sizes"):
            if len(getattr(self, name)) != 4:
                raise ValueError(f"encoder {name} must have 4 entries, got {getattr(self, name)}")
        if any(b <= a for a, b in zip(self.strides, self.strides[1:])):
            raise ValueError(f"strides must be strictly increasing, got {self.strides}")
        if self.strides[0] != 4 or any(b != 2 * a for a, b in zip(self.strides, self.strides[1:])):
            raise ValueError(f"only strides [4, 8, 16, 32] are supported, got {self.strides}")
        if self.init_mode not in ("pretrained-import", "random"):
            raise ValueError(f"init_mode must be 'pretrained-import' or 'random', got {self.init_mode!r}")
        if self.variant not in ("hiera", "conv"):
            raise ValueError(f"variant must be 'hiera' or 'conv', got {self.variant!r}")
        if self.adapter_enabled and self.variant == "hiera":
            bad = [c for c in self.channels if c % self.adapter_reduction]
            if bad:
                raise ValueError(f"adapter_reduction={self.adapter_reduction} does not divide stage channels {bad}")
        for c, h in zip(self.channels, self.heads):
            if c % h:
                raise ValueError(f"heads={h} does not divide channels={c}")

    @classmethod
    def paper(cls, **kw):
        return cls(**kw)

    @classmethod
    def tiny(cls, **kw):
        kw.setdefault("channels", [8, 16, 32, 64])
        kw.setdefault("blocks", [1, 1, 1, 1])
        kw.setdefault("heads", [1, 1, 2, 4])
        kw.setdefault("window_sizes", [8, 0, 0, 0])
        kw.setdefault("pos_embed_size", 16)
        return cls(**kw)


class Adapter(nn.Module):
    """down-linear -> GELU -> up-linear -> GELU, applied per spatial location (channel-last)."""

    def __init__(self, dim, reduction=8):
        super().__init__()
        if dim % reduction:
            raise ValueError(f"adapter_reduction={reduction} does not divide {dim}")
        self.dim = dim
        self.down = nn.Linear(dim, dim // reduction)
        self.up = nn.Linear(dim // reduction, dim)
        self.act = nn.GELU()
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, x):
        if x.shape[-1] != self.dim:
            raise ValueError(f"adapter expects {self.dim} channels, got {x.shape[-1]}")
        return self.act(self.up(self.act(self.down(x))))


def adapter_forward(adapter: Adapter, x):
    """Apply an adapter to a (C, H, W) or (B, C, H, W) map."""
    if x.shape[-3] != adapter.dim:
        raise ValueError(f"adapter expects {adapter.dim} channels, got {x.shape[-3]}")
    return adapter(x.movedim(-3, -1)).movedim(-1, -3)


def _window_partition(x, w):
    b, h, wd, c = x.shape
    x = x.view(b, h // w, w, wd // w, w, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, w * w, c)


def _window_unpartition(x, w, b, h, wd):
    c = x.shape[-1]
    x = x.view(b, h // w, wd // w, w, w, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, wd, c)


class WindowAttention(nn.Module):
    def __init__(self, dim, heads, window):
        super().__init__()
        self.heads = heads
        self.window = window
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def window_for(self, h, w):
        win = self.window
        if win <= 0 or win >= h or win >= w or h % win or w % win:
            return 0
        return win

    def forward(self, x):
        b, h, w, c = x.shape
        win = self.window_for(h, w)
        tokens = _window_partition(x, win) if win else x.reshape(b, h * w, c)
        n, t, _ = tokens.shape
        q, k, v = self.qkv(tokens).view(n, t, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(q, k, v)
        out = self.proj(out.transpose(1, 2).reshape(n, t, c))
        return _window_unpartition(out, win, b, h, w) if win else out.view(b, h, w, c)


class Mlp(nn.Module):
    def __init__(self, dim, ratio=4.0):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim, heads, window, mlp_ratio=4.0, adapter_reduction=None):
        super().__init__()
        self.adapter = Adapter(dim, adapter_reduction) if adapter_reduction else None
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x):
        if self.adapter is not None:
            x = x + self.adapter(x)
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class PatchStem(nn.Module):
    def __init__(self, in_ch, dim, pos_size):
        super().__init__()
        self.proj = nn.Conv2d(in_ch, dim, kernel_size=7, stride=4, padding=3)
        self.pos_embed = nn.Parameter(torch.zeros(1, dim, pos_size, pos_size))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward(self, x):
        x = self.proj(x)
        pos = self.pos_embed
        if pos.shape[-2:] != x.shape[-2:]:
            pos = F.interpolate(pos, size=x.shape[-2:], mode="bicubic", align_corners=False)
        return (x + pos).permute(0, 2, 3, 1)


class PoolProjection(nn.Module):
    """Stage transition: norm, project to the wider channel count, 2x2 max-pool."""

    def __init__(self, dim_in, dim_out):
        super().__init__()
        self.norm = nn.LayerNorm(dim_in)
        self.proj = nn.Linear(dim_in, dim_out)
        self.pool = nn.MaxPool2d(2)

    def forward(self, x):
        x = self.proj(self.norm(x))
        return self.pool(x.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)


class Stage(nn.Module):
    def __init__(self, downsample, blocks):
        super().__init__()
        self.downsample = downsample
        for j, blk in enumerate(blocks, start=1):
            self.add_module(f"block{j}", blk)
        self.num_blocks = len(blocks)

    def blocks(self):
        return [getattr(self, f"block{j}") for j in range(1, self.num_blocks + 1)]

    def forward(self, x):
        x = self.downsample(x)
        for blk in self.blocks():
            x = blk(x)
        return x


class HieraEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        ch = config.channels
        reduction = config.adapter_reduction if config.adapter_enabled else None
        for i in range(4):
            down = (
                PatchStem(config.in_channels, ch[0], config.pos_embed_size)
                if i == 0
                else PoolProjection(ch[i - 1], ch[i])
            )
            blocks = [
                Block(ch[i], config.heads[i], config.window_sizes[i], config.mlp_ratio, reduction)
                for _ in range(config.blocks[i])
            ]
            self.add_module(f"stage{i + 1}", Stage(down, blocks))

    def stages(self):
        return [getattr(self, f"stage{i}") for i in range(1, 5)]

    def forward(self, x):
        feats = []
        for stage in self.stages():
            x = stage(x)
            feats.append(x.permute(0, 3, 1, 2))
        return feats


class ConvBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride, bias=False), nn.BatchNorm2d(out_ch))

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return F.relu(y + (x if self.shortcut is None else self.shortcut(x)))


class ConvEncoder(nn.Module):
    """Residual CNN with the same stage strides, used for the encoder-swap ablation."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        ch = config.channels
        stem = nn.Sequential(
            nn.Conv2d(config.in_channels, ch[0], 7, 2, 3, bias=False),
            nn.BatchNorm2d(ch[0]),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, 2, 1),
        )
        for i in range(4):
            blocks = []
            for j in range(config.blocks[i]):
                in_ch = ch[i - 1] if (j == 0 and i > 0) else ch[i]
                blocks.append(ConvBlock(in_ch, ch[i], 2 if (j == 0 and i > 0) else 1))
            down = stem if i == 0 else nn.Identity()
            self.add_module(f"stage{i + 1}", Stage(down, blocks))

    def stages(self):
        return [getattr(self, f"stage{i}") for i in range(1, 5)]

    def forward(self, x):
        feats = []
        for stage in self.stages():
            x = stage(x)
            feats.append(x)
        return feats


def is_adapter_param(name: str) -> bool:
    return ".adapter." in f".{name}"


def build_encoder(config: EncoderConfig) -> nn.Module:
    """Build the encoder, seed its init and apply the freeze policy."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        enc = HieraEncoder(config) if config.variant == "hiera" else ConvEncoder(config)
        _init_weights(enc)
    apply_freeze(enc, config.freeze_backbone)
    return enc


def _init_weights(module):
    for name, m in module.named_modules():
        if isinstance(m, nn.Linear):
            if name.endswith("adapter.up"):
                continue
            nn.init.trunc_normal_(m.weight, std=1.0 / math.sqrt(m.in_features))
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def apply_freeze(encoder: nn.Module, freeze_backbone: bool):
    for name, p in encoder.named_parameters():
        p.requires_grad_(is_adapter_param(name) or not freeze_backbone)


def adapters(encoder: nn.Module) -> list[Adapter]:
    return [m for m in encoder.modules() if isinstance(m, Adapter)]


def check_input_size(h: int, w: int, multiple: int = 32):
    if h % multiple or w % multiple:
        raise ValueError(f"input size {h}x{w} is not divisible by {multiple}")


def encode(encoder: nn.Module, image_a, image_b):
    """Run both temporal images through the same weights. Returns two lists of 4 maps."""
    if image_a.shape != image_b.shape:
        raise ValueError(f"image shapes differ: {tuple(image_a.shape)} vs {tuple(image_b.shape)}")
    check_input_size(*image_a.shape[-2:])
    squeeze = image_a.dim() == 3
    if squeeze:
        image_a, image_b = image_a[None], image_b[None]
    n = image_a.shape[0]
    feats = encoder(torch.cat([image_a, image_b], dim=0))
    pa, pb = [f[:n] for f in feats], [f[n:] for f in feats]
    if squeeze:
        pa, pb = [f[0] for f in pa], [f[0] for f in pb]
    return pa, pb


# -- checkpoints ------------------------------------------------------------


@dataclass
class ImportReport:
    matched: list = field(default_factory=list)
    shape_mismatched: list = field(default_factory=list)
    missing: list = field(default_factory=list)  # backbone tensors absent from the checkpoint
    unexpected: list = field(default_factory=list)  # checkpoint tensors with no backbone counterpart

    def to_dict(self):
        return {k: list(v) for k, v in self.__dict__.items()}


class CheckpointImportError(RuntimeError):
    pass


def export_checkpoint(module: nn.Module, path: str | Path, include_adapters: bool = True):
    state = {k: v.detach().clone() for k, v in module.state_dict().items()}
    if not include_adapters:
        state = {k: v for k, v in state.items() if not is_adapter_param(k)}
    torch.save(state, path)
    return path


def _load_flat(path) -> dict:
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointImportError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(state, dict) or not all(isinstance(v, torch.Tensor) for v in state.values()):
        raise CheckpointImportError(f"{path}: expected a flat name -> tensor mapping")
    return state


def import_pretrained(encoder: nn.Module, checkpoint, prefix: str = "") -> ImportReport:
    """Copy matching backbone tensors from a checkpoint path or dict. Adapters are never touched."""
    state = checkpoint if isinstance(checkpoint, dict) else _load_flat(checkpoint)
    if prefix:
        state = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
    report = ImportReport()
    own = {k: v for k, v in encoder.state_dict().items() if not is_adapter_param(k)}
    with torch.no_grad():
        for name, tensor in own.items():
            if name not in state:
                report.missing.append(name)
            elif state[name].shape != tensor.shape:
                report.shape_mismatched.append(name)
            else:
                tensor.copy_(state[name])
                report.matched.append(name)
    report.unexpected = sorted(k for k in state if k not in own and not is_adapter_param(k))
    return report
