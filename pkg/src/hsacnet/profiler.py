"""Static complexity accounting: exact parameter tallies and analytic FLOP counts.

Counting convention: one multiply-accumulate (MAC) is recorded per weight use; the
report carries both ``macs`` and ``flops = 2 * macs``:

* conv:      k_h * k_w * (C_in / g) * C_out * H_out * W_out MACs
* linear:    in * out MACs per position
* attention: Q K^T and A V matmul volumes (encoder windows and the SADAM slices)

Normalisation, activations, pooling and upsampling are itemised separately as
element-op counts and excluded from the headline figures.

``flops_at_256`` is the MAC count, the convention common to published backbone
tables (a siamese Hiera-T pair alone is ~12.8 G under it, ~25.6 G under 2 * MACs).
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .encoder import WindowAttention, is_adapter_param
from .sadam import ScaAttention

_ELEMENTWISE = (
    nn.BatchNorm2d,
    nn.LayerNorm,
    nn.ReLU,
    nn.GELU,
    nn.MaxPool2d,
    nn.Upsample,
)


@dataclass
class ComplexityReport:
    total_params: int = 0
    trainable_params: int = 0
    frozen_params: int = 0
    params_by_module: dict = field(default_factory=dict)
    macs: int = 0
    flops: int = 0  # 2 * macs
    input_size: int = 256
    macs_by_module: dict = field(default_factory=dict)
    macs_by_kind: dict = field(default_factory=dict)
    elementwise_ops: dict = field(default_factory=dict)
    convention: str = "macs: one multiply-accumulate per weight use; flops = 2 * macs; flops_at_256 = macs"

    @property
    def flops_at_256(self):
        # headline figure for the complexity comparison: multiply-accumulates; see module docstring
        return self.macs

    def to_dict(self):
        return dict(self.__dict__)


def _group_of(name: str) -> str:
    top = name.split(".", 1)[0]
    if top == "encoder":
        return "adapters" if is_adapter_param(name) else "encoder"
    return top


def count_params(network: nn.Module) -> ComplexityReport:
    by_module = defaultdict(int)
    trainable = frozen = 0
    for name, p in network.named_parameters():
        by_module[_group_of(name)] += p.numel()
        if p.requires_grad:
            trainable += p.numel()
        else:
            frozen += p.numel()
    return ComplexityReport(
        total_params=trainable + frozen,
        trainable_params=trainable,
        frozen_params=frozen,
        params_by_module=dict(by_module),
    )


def conv_macs(conv: nn.Conv2d, out_shape) -> int:
    kh, kw = conv.kernel_size
    n, c_out, h, w = out_shape
    return n * kh * kw * (conv.in_channels // conv.groups) * c_out * h * w


def linear_macs(linear: nn.Linear, out_shape) -> int:
    positions = 1
    for s in out_shape[:-1]:
        positions *= s
    return positions * linear.in_features * linear.out_features


def _attention_macs(module, inp, out) -> int:
    x = inp[0]
    if isinstance(module, WindowAttention):
        b, h, w, c = x.shape
        win = module.window_for(h, w)
        t = win * win if win else h * w
        # QK^T and AV are both tokens x window x channels
        return 2 * b * h * w * t * c
    b, c, h, w = x.shape
    # (H + W) slices; C x C logits from length-S vectors, then C x C times C x S
    return 2 * b * (h + w) * c * c * w


def estimate_flops(network: nn.Module, input_size: int = 256, batch: int = 1) -> ComplexityReport:
    """Trace one forward on a (batch, 3, S, S) pair and tally MACs per layer."""
    if input_size % 32:
        raise ValueError(f"input size {input_size} is not divisible by 32")
    macs_mod = defaultdict(int)
    macs_kind = defaultdict(int)
    elem = defaultdict(int)
    hooks = []

    def make_hook(name):
        group = name.split(".", 1)[0] if name else "root"

        def hook(module, inp, out):
            if isinstance(module, nn.Conv2d):
                m, kind = conv_macs(module, out.shape), "conv"
            elif isinstance(module, nn.Linear):
                m, kind = linear_macs(module, out.shape), "linear"
                if ".adapter." in f".{name}.":
                    kind = "adapter"
            elif isinstance(module, (WindowAttention, ScaAttention)):
                m, kind = _attention_macs(module, inp, out), "attention"
            else:
                elem[type(module).__name__] += out.numel()
                return
            g = "adapters" if kind == "adapter" else group
            macs_mod[g] += m
            macs_kind[kind] += m

        return hook

    for name, module in network.named_modules():
        if isinstance(module, (nn.Conv2d, nn.Linear, WindowAttention, ScaAttention) + _ELEMENTWISE):
            hooks.append(module.register_forward_hook(make_hook(name)))
    was_training = network.training
    network.eval()
    try:
        dtype = next(network.parameters()).dtype
        x = torch.zeros(batch, 3, input_size, input_size, dtype=dtype)
        with torch.no_grad():
            network(x, x)
    finally:
        for h in hooks:
            h.remove()
        network.train(was_training)
    report = count_params(network)
    report.input_size = input_size
    report.macs = int(sum(macs_kind.values()))
    report.flops = 2 * report.macs
    report.macs_by_module = dict(macs_mod)
    report.macs_by_kind = dict(macs_kind)
    report.elementwise_ops = dict(elem)
    return report
