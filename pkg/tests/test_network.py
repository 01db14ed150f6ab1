import numpy as np
import pytest
import torch
from PIL import Image

import oracles
from conftest import random_pair
from hsacnet.encoder import EncoderConfig, is_adapter_param
from hsacnet.network import (
    ChangeDetector,
    Decoder,
    NetworkConfig,
    build_network,
    decode,
    export_mask,
    forward_pair,
    load_checkpoint,
    logits_to_prediction,
    predict,
    save_checkpoint,
)
from hsacnet.sadam import SADAM, DiffConv


def tiny(**kw):
    return ChangeDetector(NetworkConfig.tiny(**kw)).eval()


def test_tiny_forward_shapes():
    net = tiny()
    with torch.no_grad():
        d = net.extract(torch.rand(2, 3, 64, 64), torch.rand(2, 3, 64, 64))
        assert [tuple(x.shape[1:]) for x in d] == [(16, 16, 16), (16, 8, 8), (16, 4, 4), (16, 2, 2)]
        f1 = decode(net, d)
        assert f1.shape == (2, 16, 16, 16)
        pred = predict(net, f1)
    assert pred.logits.shape == (2, 2, 64, 64)
    assert pred.prob_change.shape == (2, 64, 64)


def test_literal_widths_without_neck():
    # without the projection neck the decoder runs at the encoder widths
    cfg = NetworkConfig.tiny(encoder=EncoderConfig.tiny(channels=[16, 32, 64, 128], heads=[1, 2, 4, 8]), neck_channels=None)
    net = ChangeDetector(cfg).eval()
    assert net.neck is None
    with torch.no_grad():
        d = net.extract(torch.rand(1, 3, 64, 64), torch.rand(1, 3, 64, 64))
        assert decode(net, d).shape == (1, 16, 16, 16)
        assert net(torch.rand(1, 3, 64, 64), torch.rand(1, 3, 64, 64)).shape == (1, 2, 64, 64)


def test_paper_decoder_output_width():
    dec = Decoder([96, 192, 384, 768]).eval()
    d = [torch.zeros(1, c, s, s) for c, s in zip([96, 192, 384, 768], [64, 32, 16, 8])]
    with torch.no_grad():
        f1 = dec(d)
        again = dec(d)
    assert f1.shape == (1, 96, 64, 64)
    assert torch.equal(f1, again)
    head = ChangeDetector(NetworkConfig.tiny()).head
    assert torch.nn.Conv2d(96, 2, 1)(f1).shape[-2:] == (64, 64)
    up = head.up(torch.zeros(1, 2, 64, 64))
    assert up.shape == (1, 2, 256, 256)


def test_decoder_rejects_bad_pyramid():
    dec = Decoder([16, 16, 16, 16])
    good = [torch.zeros(1, 16, s, s) for s in (16, 8, 4, 2)]
    with pytest.raises(ValueError):
        dec(good[:3])
    with pytest.raises(ValueError):
        dec([good[0], torch.zeros(1, 16, 7, 7)] + good[2:])
    with pytest.raises(ValueError):
        dec([torch.zeros(1, 8, 16, 16)] + good[1:])


def test_prediction_softmax():
    logits = torch.zeros(1, 2, 4, 4)
    assert torch.equal(logits_to_prediction(logits).prob_change, torch.full((1, 4, 4), 0.5))
    logits = torch.randn(3, 2, 8, 8)
    p = torch.softmax(logits, dim=1)
    np.testing.assert_allclose(p.sum(1).numpy(), 1.0, atol=1e-6)
    pc = logits_to_prediction(logits).prob_change
    assert bool(((pc >= 0) & (pc <= 1)).all())


def test_identical_pairs_give_input_independent_output(rng):
    net = tiny()
    oracles.randomize_bn(net, rng)  # keep BN non-trivial in eval mode
    x1, x2 = torch.rand(2, 1, 3, 64, 64)
    with torch.no_grad():
        o1 = net(x1, x1)
        o2 = net(x2, x2)
    assert torch.equal(o1, o2)


def test_eval_forward_deterministic(rng):
    net = tiny()
    pair = random_pair(rng, 64, 64)
    p1 = forward_pair(net, pair)
    p2 = forward_pair(net, pair)
    assert torch.equal(p1.logits, p2.logits)
    assert p1.logits.shape == (2, 64, 64)


def test_without_sadam_ablation():
    net = tiny(sadam_enabled=False)
    assert all(isinstance(m, DiffConv) for m in net.sadam.values())
    with torch.no_grad():
        assert net(torch.rand(1, 3, 64, 64), torch.rand(1, 3, 64, 64)).shape == (1, 2, 64, 64)
    # w/o SADAM also lifts the square-input requirement
    with torch.no_grad():
        assert net(torch.rand(1, 3, 64, 96), torch.rand(1, 3, 64, 96)).shape == (1, 2, 64, 96)


def test_conv_encoder_ablation_runs():
    net = tiny(encoder=EncoderConfig.tiny(variant="conv"))
    with torch.no_grad():
        assert net(torch.rand(1, 3, 64, 64), torch.rand(1, 3, 64, 64)).shape == (1, 2, 64, 64)


def test_input_checks():
    net = tiny()
    with pytest.raises(ValueError, match="divisible"):
        net(torch.rand(1, 3, 48, 48), torch.rand(1, 3, 48, 48))
    with pytest.raises(ValueError, match="square"):
        net(torch.rand(1, 3, 64, 96), torch.rand(1, 3, 64, 96))
    with pytest.raises(ValueError):
        net(torch.rand(1, 3, 64, 64), torch.rand(2, 3, 64, 64))


def test_module_naming_convention():
    net = tiny()
    names = [n for n, _ in net.named_parameters()]
    assert any(n.startswith("sadam.stage1.") for n in names)
    assert any(n.startswith("encoder.stage3.block1.") for n in names)
    assert isinstance(net.sadam["stage4"], SADAM)


def test_gradient_flow_with_frozen_backbone():
    net = tiny(encoder=EncoderConfig.tiny(freeze_backbone=True))
    net.train()
    loss = net(torch.rand(2, 3, 64, 64), torch.rand(2, 3, 64, 64)).square().mean()
    loss.backward()
    for name, p in net.named_parameters():
        if name.startswith("encoder.") and not is_adapter_param(name):
            assert p.grad is None, name
    groups = {"adapter": "encoder", "sadam": "sadam.", "decoder": "decoder."}
    for tag, prefix in groups.items():
        sel = [p for n, p in net.named_parameters() if n.startswith(prefix) and (tag != "adapter" or is_adapter_param(n))]
        assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in sel), tag


def test_decoder_gradcheck():
    torch.manual_seed(0)
    dec = Decoder([16, 16, 16, 16]).double().eval()
    oracles.randomize_bn(dec, np.random.default_rng(0))
    d = [torch.randn(1, 16, s, s, dtype=torch.float64, requires_grad=True) for s in (8, 4, 2, 1)]
    params = [dec.fuse3[0].conv.weight, dec.fuse1[1].conv.weight, dec.fuse1[1].bn.weight]
    err = oracles.finite_difference_check(lambda: dec(d), d + params, np.random.default_rng(1))
    assert err < 1e-5, err


def test_checkpoint_roundtrip(tmp_path):
    a, _ = build_network(NetworkConfig.tiny(seed=1))
    b, _ = build_network(NetworkConfig.tiny(seed=2))
    save_checkpoint(a, tmp_path / "net.pt")
    load_checkpoint(b, tmp_path / "net.pt")
    sa, sb = a.state_dict(), b.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)


def test_build_with_pretrained_encoder(tmp_path):
    from hsacnet.encoder import export_checkpoint

    donor, _ = build_network(NetworkConfig.tiny(encoder=EncoderConfig.tiny(seed=9)))
    export_checkpoint(donor.encoder, tmp_path / "enc.pt", include_adapters=False)
    net, report = build_network(NetworkConfig.tiny(), tmp_path / "enc.pt")
    assert report.missing == []
    assert torch.equal(net.encoder.stage1.downsample.proj.weight, donor.encoder.stage1.downsample.proj.weight)
    _, none = build_network(NetworkConfig.tiny(encoder=EncoderConfig.tiny(init_mode="random")), tmp_path / "enc.pt")
    assert none is None


def test_export_mask(tmp_path):
    prob = torch.tensor([[0.2, 0.5], [0.51, 0.9]])
    export_mask(prob, tmp_path / "m.png")
    back = np.asarray(Image.open(tmp_path / "m.png"))
    np.testing.assert_array_equal(back, [[0, 0], [255, 255]])
