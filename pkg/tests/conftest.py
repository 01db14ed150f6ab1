import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_pair(rng, h=16, w=16, with_label=True, pid="p0"):
    from hsacnet.core import BiTemporalPair

    a = rng.integers(0, 256, (h, w, 3)).astype(np.float32) / 255
    b = rng.integers(0, 256, (h, w, 3)).astype(np.float32) / 255
    y = rng.integers(0, 2, (h, w)).astype(np.uint8) if with_label else None
    return BiTemporalPair(a, b, y, pid)


@pytest.fixture
def tiny_net():
    from hsacnet.encoder import EncoderConfig
    from hsacnet.network import NetworkConfig, build_network

    net, _ = build_network(NetworkConfig.tiny(encoder=EncoderConfig.tiny(init_mode="random", freeze_backbone=False)))
    return net


# one line per acceptance criterion, printed after the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
