import pytest
import torch
import torch.nn as nn

from hsacnet.encoder import Adapter
from hsacnet.network import ChangeDetector, NetworkConfig
from hsacnet.profiler import conv_macs, count_params, estimate_flops


class _PairConv(nn.Module):
    def __init__(self, groups=1):
        super().__init__()
        self.conv = nn.Conv2d(3, 16, 3, padding=1, bias=False)
        self.mid = nn.Conv2d(16, 16, 3, padding=1, groups=groups, bias=False)

    def forward(self, a, b):
        return self.mid(self.conv(a - b))


def test_single_conv_example():
    conv = nn.Conv2d(16, 16, 3, padding=1)
    assert 2 * conv_macs(conv, (1, 16, 8, 8)) == 2 * 9 * 16 * 16 * 64 == 294_912


def test_group_conv_quarter_cost():
    dense = conv_macs(nn.Conv2d(16, 16, 3, groups=1), (1, 16, 8, 8))
    grouped = conv_macs(nn.Conv2d(16, 16, 3, groups=4), (1, 16, 8, 8))
    assert grouped * 4 == dense


def test_flops_scale_with_area():
    net = _PairConv()
    small = estimate_flops(net, 32)
    big = estimate_flops(net, 64)
    assert big.macs == 4 * small.macs and big.flops == 2 * big.macs
    assert small.macs == 9 * 3 * 16 * 32 * 32 + 9 * 16 * 16 * 32 * 32
    assert estimate_flops(_PairConv(groups=4), 32).macs == 9 * 3 * 16 * 32 * 32 + 9 * 4 * 16 * 32 * 32
    with pytest.raises(ValueError):
        estimate_flops(net, 48)


def test_adapter_param_count():
    assert count_params(Adapter(96, 8)).total_params == 96 * 12 + 12 + 12 * 96 + 96 == 2412


def _block(d):
    # two LayerNorms, qkv, proj, and a 4x MLP
    return 2 * 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * 4 * d + 4 * d) + (4 * d * d + d)


def _adapter(d):
    r = d // 8
    return d * r + r + r * d + d


def _cbr(ci, co, k, g=1):
    return co * (ci // g) * k * k + 2 * co


def _sadam(c):
    branches = sum(_cbr(c, c, 2 * j - 1, 2**j) + _cbr(c, c, 3) for j in range(1, 5))
    return branches + 2 * _cbr(c, c, 3) + _cbr(4 * c, c, 1) + _cbr(c, c, 1) + 1


TINY_LEDGER = {
    "encoder": (3 * 8 * 49 + 8 + 8 * 16 * 16)  # stem conv and positional embedding
    + sum(2 * a + a * b + b for a, b in [(8, 16), (16, 32), (32, 64)])  # stage transitions
    + sum(_block(d) for d in (8, 16, 32, 64)),
    "adapters": sum(_adapter(d) for d in (8, 16, 32, 64)),
    "neck": sum(c * 16 + 16 for c in (8, 16, 32, 64)),
    "sadam": 4 * _sadam(16),
    "decoder": 3 * (_cbr(32, 16, 3) + _cbr(16, 16, 3)),
    "head": 16 * 2 + 2,
}


def test_tiny_matches_hand_ledger():
    rep = count_params(ChangeDetector(NetworkConfig.tiny()))
    assert rep.params_by_module == TINY_LEDGER
    assert rep.total_params == sum(TINY_LEDGER.values()) == 168_533
    assert rep.total_params == rep.trainable_params + rep.frozen_params
    # default tiny config freezes the backbone but keeps adapters trainable
    assert rep.frozen_params == TINY_LEDGER["encoder"]


def test_report_fields_on_tiny():
    rep = estimate_flops(ChangeDetector(NetworkConfig.tiny()), 64)
    assert rep.flops_at_256 == rep.macs and rep.flops == 2 * rep.macs
    assert sum(rep.macs_by_kind.values()) == rep.macs == sum(rep.macs_by_module.values())
    assert {"conv", "linear", "attention", "adapter"} <= set(rep.macs_by_kind)
    assert "BatchNorm2d" in rep.elementwise_ops
    assert "flops_at_256 = macs" in rep.convention


def test_profile_does_not_disturb_training_mode():
    net = ChangeDetector(NetworkConfig.tiny()).train()
    before = {k: v.clone() for k, v in net.state_dict().items()}
    estimate_flops(net, 64)
    assert net.training
    assert all(torch.equal(before[k], v) for k, v in net.state_dict().items())
