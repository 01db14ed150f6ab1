"""Scale-aware differential attention: one refined change feature per pyramid stage."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn

from .layers import CBR

NUM_BRANCHES = 4


@dataclass
class SadamConfig:
    channels: int
    gamma_init: float = 0.0
    softmax_axis: str = "m"  # "m": normalise over the key channel (as written); "n": over the query channel

    def __post_init__(self):
        max_groups = 2 ** NUM_BRANCHES
        if self.channels % max_groups:
            raise ValueError(f"SADAM channels ({self.channels}) must be divisible by {max_groups}")
        if self.softmax_axis not in ("m", "n"):
            raise ValueError(f"softmax_axis must be 'm' or 'n', got {self.softmax_axis!r}")


def branch_kernel_groups(j: int) -> tuple[int, int]:
    """Kernel size and group count of branch j (1-based)."""
    return 2 * j - 1, 2**j


class ChangeFeatureSet(NamedTuple):
    branch_pairs: list
    diffs: list
    attended: list
    concat: torch.Tensor
    residual: torch.Tensor
    output: torch.Tensor


def _slices(x):
    # (B, C, H, W) -> (B, H + W, C, S): H row slices (C x W) then W column slices (C x H)
    rows = x.permute(0, 2, 1, 3)
    cols = x.permute(0, 3, 1, 2)
    return torch.cat([rows, cols], dim=1)


def _unslice(s, h):
    rows, cols = s[:, :h], s[:, h:]
    return rows.permute(0, 2, 1, 3), cols.permute(0, 2, 3, 1)


class ScaAttention(nn.Module):
    """Channel-pair self-attention over row and column slices, added back with gain gamma."""

    def __init__(self, gamma_init=0.0, softmax_axis="m"):
        super().__init__()
        self.gamma = nn.Parameter(torch.tensor(float(gamma_init)))
        self.softmax_axis = softmax_axis

    def attention_weights(self, x):
        """Returns (slices, A) with A[..., m, n] = softmax over m of <slice_m, slice_n>."""
        if x.shape[-1] != x.shape[-2]:
            raise ValueError(f"spatial-channel attention needs square maps, got {tuple(x.shape[-2:])}")
        qkv = _slices(x)
        logits = qkv @ qkv.transpose(-1, -2)
        dim = -2 if self.softmax_axis == "m" else -1
        return qkv, torch.softmax(logits, dim=dim)

    def forward(self, x):
        v, attn = self.attention_weights(x)
        # output channel n = sum_m A[m, n] V_m
        out = attn.transpose(-1, -2) @ v
        rows, cols = _unslice(out, x.shape[-2])
        return x + self.gamma * (0.5 * (rows + cols))


class DiffBranch(nn.Module):
    """Branch j: shared grouped CBR on both inputs, then CBR_3 on the absolute difference."""

    def __init__(self, channels, j):
        super().__init__()
        k, g = branch_kernel_groups(j)
        self.j = j
        self.group_conv = CBR(channels, channels, k, groups=g)
        self.diff_conv = CBR(channels, channels, 3)

    def features(self, c_a, c_b):
        if c_a.shape != c_b.shape:
            raise ValueError(f"branch inputs differ in shape: {tuple(c_a.shape)} vs {tuple(c_b.shape)}")
        n = c_a.shape[0]
        both = self.group_conv(torch.cat([c_a, c_b], dim=0))
        return both[:n], both[n:]

    def difference(self, ca_j, cb_j):
        if ca_j.shape != cb_j.shape:
            raise ValueError(f"difference inputs differ in shape: {tuple(ca_j.shape)} vs {tuple(cb_j.shape)}")
        return self.diff_conv(torch.abs(ca_j - cb_j))


class SADAM(nn.Module):
    def __init__(self, config: SadamConfig):
        super().__init__()
        c = config.channels
        self.config = config
        self.branches = nn.ModuleList(DiffBranch(c, j) for j in range(1, NUM_BRANCHES + 1))
        # one gain per module instance, shared by the four branch attentions
        self.sca = ScaAttention(config.gamma_init, config.softmax_axis)
        self.res = nn.Sequential(CBR(c, c, 3), CBR(c, c, 3))
        self.reduce = CBR(NUM_BRANCHES * c, c, 1)
        self.out = CBR(c, c, 1)

    def fuse(self, attended, c_a, c_b, return_parts=False):
        concat = torch.cat(list(attended), dim=1)
        residual = self.res(torch.abs(c_a - c_b))
        reduced = self.reduce(concat)
        if reduced.shape != residual.shape:
            raise ValueError(f"reduced concat {tuple(reduced.shape)} vs residual {tuple(residual.shape)}")
        out = self.out(residual + reduced)
        if return_parts:
            return out, concat, residual
        return out

    def forward(self, c_a, c_b, return_features=False):
        if c_a.shape != c_b.shape:
            raise ValueError(f"SADAM inputs differ in shape: {tuple(c_a.shape)} vs {tuple(c_b.shape)}")
        if c_a.shape[1] != self.config.channels:
            raise ValueError(f"expected {self.config.channels} channels, got {c_a.shape[1]}")
        if c_a.shape[-1] != c_a.shape[-2]:
            raise ValueError(f"SADAM needs square feature maps, got {tuple(c_a.shape[-2:])}")
        pairs, diffs = [], []
        for branch in self.branches:
            ca_j, cb_j = branch.features(c_a, c_b)
            d_j = branch.difference(ca_j, cb_j)
            pairs.append((ca_j, cb_j))
            diffs.append(d_j)
        # the branches share gamma, so their attention runs as one batch
        attended = list(self.sca(torch.cat(diffs, dim=0)).chunk(NUM_BRANCHES, dim=0))
        out, concat, residual = self.fuse(attended, c_a, c_b, return_parts=True)
        if return_features:
            return ChangeFeatureSet(pairs, diffs, attended, concat, residual, out)
        return out


class DiffConv(nn.Module):
    """Ablation stand-in for SADAM: a channel-matched CBR_3 on |C^A - C^B|."""

    def __init__(self, channels):
        super().__init__()
        self.conv = CBR(channels, channels, 3)

    def forward(self, c_a, c_b):
        return self.conv(torch.abs(c_a - c_b))


# functional aliases matching the module's operations


def branch_features(sadam: SADAM, c_a, c_b, j: int):
    return sadam.branches[j - 1].features(c_a, c_b)


def branch_difference(sadam: SADAM, ca_j, cb_j, j: int):
    return sadam.branches[j - 1].difference(ca_j, cb_j)


def sca_attention(d_j, gamma, softmax_axis="m"):
    sca = ScaAttention(0.0, softmax_axis).to(dtype=d_j.dtype, device=d_j.device)
    with torch.no_grad():
        sca.gamma.fill_(float(gamma))
    return sca(d_j)


def sadam_forward(sadam: SADAM, c_a, c_b):
    return sadam(c_a, c_b)
