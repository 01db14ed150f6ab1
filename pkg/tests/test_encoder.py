import numpy as np
import pytest
import torch
import torch.nn.functional as F

import oracles
from hsacnet.encoder import (
    Adapter,
    CheckpointImportError,
    EncoderConfig,
    adapter_forward,
    adapters,
    build_encoder,
    encode,
    export_checkpoint,
    import_pretrained,
    is_adapter_param,
)


@pytest.fixture(scope="module")
def paper_encoder():
    return build_encoder(EncoderConfig.paper())


def test_config_invariants():
    with pytest.raises(ValueError):
        EncoderConfig(channels=[96, 192, 384])
    with pytest.raises(ValueError):
        EncoderConfig(strides=[4, 8, 8, 32])
    with pytest.raises(ValueError, match="adapter_reduction"):
        EncoderConfig(adapter_reduction=7)
    with pytest.raises(ValueError):
        EncoderConfig(init_mode="imagenet")
    cfg = EncoderConfig.paper()
    assert cfg.channels == [96, 192, 384, 768] and cfg.blocks == [1, 2, 7, 2]
    assert cfg.strides == [4, 8, 16, 32]


def test_paper_encoder_structure(paper_encoder):
    assert len(adapters(paper_encoder)) == 12
    assert len(paper_encoder.stages()) == 4
    assert [s.num_blocks for s in paper_encoder.stages()] == [1, 2, 7, 2]
    # one adapter right at the head of every block
    for stage in paper_encoder.stages():
        for blk in stage.blocks():
            assert isinstance(blk.adapter, Adapter)


def test_frozen_trainable_set_is_adapters(paper_encoder):
    trainable = {n for n, p in paper_encoder.named_parameters() if p.requires_grad}
    adapter_names = {n for n, _ in paper_encoder.named_parameters() if is_adapter_param(n)}
    assert trainable == adapter_names
    assert len(adapter_names) == 12 * 4


def test_tiny_has_four_adapters():
    assert len(adapters(build_encoder(EncoderConfig.tiny()))) == 4
    assert adapters(build_encoder(EncoderConfig.tiny(adapter_enabled=False))) == []


def test_paper_pyramid_shapes(paper_encoder):
    x = torch.rand(3, 256, 256)
    with torch.no_grad():
        pa, pb = encode(paper_encoder, x, x)
    assert [tuple(f.shape) for f in pa] == [(96, 64, 64), (192, 32, 32), (384, 16, 16), (768, 8, 8)]
    for fa, fb in zip(pa, pb):
        assert torch.equal(fa, fb)


@pytest.mark.parametrize("variant", ["hiera", "conv"])
def test_tiny_pyramid_shapes(variant):
    enc = build_encoder(EncoderConfig.tiny(variant=variant))
    a, b = torch.rand(2, 1, 3, 64, 64)
    with torch.no_grad():
        pa, pb = encode(enc, a, b)
    assert [tuple(f.shape[1:]) for f in pa] == [(8, 16, 16), (16, 8, 8), (32, 4, 4), (64, 2, 2)]
    assert [f.shape for f in pa] == [f.shape for f in pb]


def test_bad_input_size_rejected():
    enc = build_encoder(EncoderConfig.tiny())
    with pytest.raises(ValueError, match="divisible by 32"):
        encode(enc, torch.rand(1, 3, 64, 48), torch.rand(1, 3, 64, 48))


def test_shape_property_non_square():
    enc = build_encoder(EncoderConfig.tiny())
    with torch.no_grad():
        pa, _ = encode(enc, torch.rand(1, 3, 64, 96), torch.rand(1, 3, 64, 96))
    for f, s, c in zip(pa, [4, 8, 16, 32], [8, 16, 32, 64]):
        assert tuple(f.shape[1:]) == (c, 64 // s, 96 // s)


def test_adapter_width_and_param_count():
    a = Adapter(96, 8)
    assert a.down.out_features == 12
    assert sum(p.numel() for p in a.parameters()) == 96 * 12 + 12 + 12 * 96 + 96 == 2412


def test_adapter_zero_input_and_zero_up():
    a = Adapter(16, 8).double()
    with torch.no_grad():
        a.down.bias.normal_()
        a.up.weight.normal_()
        a.up.bias.normal_()
    out = adapter_forward(a, torch.zeros(16, 4, 4, dtype=torch.float64))
    hidden = F.gelu(a.down.bias)
    expected = F.gelu(a.up.bias + a.up.weight @ hidden)
    torch.testing.assert_close(out, expected[:, None, None].expand(16, 4, 4))
    # freshly built: zero up-projection, so the adapter emits GELU(0) = 0 everywhere
    fresh = Adapter(16, 8)
    assert torch.equal(adapter_forward(fresh, torch.randn(2, 16, 4, 4)), torch.zeros(2, 16, 4, 4))


def test_adapter_channel_mismatch():
    with pytest.raises(ValueError):
        adapter_forward(Adapter(16, 8), torch.randn(8, 4, 4))
    with pytest.raises(ValueError):
        Adapter(12, 8)


def test_adapter_gradcheck():
    a = Adapter(16, 4).double()
    with torch.no_grad():
        a.up.weight.normal_(0, 0.5)
    x = torch.randn(16, 3, 3, dtype=torch.float64, requires_grad=True)
    err = oracles.finite_difference_check(
        lambda: adapter_forward(a, x), [x, a.down.weight, a.up.weight, a.up.bias], np.random.default_rng(0)
    )
    assert err < 1e-6, err


def test_freeze_after_step():
    enc = build_encoder(EncoderConfig.tiny())
    before = {k: v.clone() for k, v in enc.state_dict().items()}
    opt = torch.optim.AdamW([p for p in enc.parameters() if p.requires_grad], lr=1e-2)
    # adapters start at zero output; a non-trivial loss still reaches the up-projection
    loss = sum(f.square().mean() for f in enc(torch.rand(2, 3, 64, 64)))
    loss.backward()
    opt.step()
    after = enc.state_dict()
    changed = {k for k in before if not torch.equal(before[k], after[k])}
    assert changed and all(is_adapter_param(k) for k in changed)


def test_seeded_build_is_deterministic():
    a = build_encoder(EncoderConfig.tiny(seed=3)).state_dict()
    b = build_encoder(EncoderConfig.tiny(seed=3)).state_dict()
    c = build_encoder(EncoderConfig.tiny(seed=4)).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert any(not torch.equal(a[k], c[k]) for k in a)


def test_import_roundtrip(tmp_path):
    src = build_encoder(EncoderConfig.tiny(seed=1))
    path = export_checkpoint(src, tmp_path / "enc.pt", include_adapters=False)
    dst = build_encoder(EncoderConfig.tiny(seed=2))
    adapter_before = {k: v.clone() for k, v in dst.state_dict().items() if is_adapter_param(k)}
    report = import_pretrained(dst, path)
    assert report.missing == [] and report.shape_mismatched == [] and report.unexpected == []
    s, d = src.state_dict(), dst.state_dict()
    for k in s:
        if not is_adapter_param(k):
            assert torch.equal(s[k], d[k])
    for k, v in adapter_before.items():
        assert torch.equal(d[k], v)


def test_import_empty_and_mismatch(tmp_path):
    enc = build_encoder(EncoderConfig.tiny())
    before = {k: v.clone() for k, v in enc.state_dict().items()}
    report = import_pretrained(enc, {})
    assert report.matched == []
    assert all(torch.equal(before[k], v) for k, v in enc.state_dict().items())

    state = {k: v for k, v in build_encoder(EncoderConfig.tiny(seed=5)).state_dict().items() if not is_adapter_param(k)}
    state["stage1.downsample.proj.weight"] = torch.zeros(1)
    report = import_pretrained(enc, state)
    assert report.shape_mismatched == ["stage1.downsample.proj.weight"]
    assert len(report.matched) == len(state) - 1 and report.missing == []


def test_import_unreadable(tmp_path):
    (tmp_path / "bad.pt").write_bytes(b"garbage")
    with pytest.raises(CheckpointImportError):
        import_pretrained(build_encoder(EncoderConfig.tiny()), tmp_path / "bad.pt")
