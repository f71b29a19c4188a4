import pytest
import torch
import torch.nn as nn

import oracles
from dsmfilter.network import (ModelSpec, ModelSpecError, PatchDiscriminator, ResNetEncoder, build_bundle,
                               build_decoder, count_parameters, encoder_taps, forward_generator)

SMALL = dict(width=0.0625, depth=50)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def test_count_parameters_conv():
    assert count_parameters(nn.Conv2d(1, 1, 3)) == 10
    frozen = nn.Linear(4, 2)
    frozen.bias.requires_grad_(False)
    assert count_parameters(frozen) == 8


def test_spec_validation():
    with pytest.raises(ModelSpecError, match="l1"):
        ModelSpec(active_objectives=("normal", "seg"))
    with pytest.raises(ModelSpecError, match="unknown objectives"):
        ModelSpec(active_objectives=("l1", "ssim"))
    with pytest.raises(ModelSpecError, match="seg"):
        ModelSpec(seg_decoder=None)
    with pytest.raises(ModelSpecError):
        ModelSpec(output_stride=4)
    with pytest.raises(ModelSpecError):
        ModelSpec(dsm_decoder="fpn")
    with pytest.raises(ModelSpecError, match="unknown model fields"):
        ModelSpec.from_dict({"widht": 1.0})
    spec = ModelSpec(width=0.5, seg_decoder=None, active_objectives=("gan", "l1"))
    assert spec.active_objectives == ("l1", "gan")
    assert ModelSpec.from_dict(spec.to_dict()) == spec


@pytest.mark.parametrize("stride", [8, 16])
def test_encoder_strides(stride):
    enc = ResNetEncoder(50, 0.0625, stride).eval()
    feats = enc(torch.zeros(1, 1, 64, 64))
    for name, s in enc.strides.items():
        assert feats[name].shape[-1] == 64 // s
        assert feats[name].shape[1] == enc.channels[name]
    with pytest.raises(ValueError, match="divisible"):
        enc(torch.zeros(1, 1, 60, 64))


def test_narrow_encoder_is_much_smaller():
    full = count_parameters(ResNetEncoder(101, 1.0))
    narrow = count_parameters(ResNetEncoder(101, 0.25))
    assert narrow < full / 8


@pytest.mark.parametrize("decoder", ["unet", "deeplab", "pspnet"])
@pytest.mark.parametrize("size", [32, 48])
def test_output_shape_equals_input(decoder, size):
    bundle = build_bundle(ModelSpec(dsm_decoder=decoder, **SMALL))
    bundle.generator.eval()
    dsm, seg = forward_generator(bundle, torch.randn(2, 1, size, size))
    assert dsm.shape == (2, 1, size, size)
    assert seg.shape == (2, 3, size, size)


def test_forward_rejects_bad_input():
    bundle = build_bundle(ModelSpec(**SMALL))
    with pytest.raises(ValueError):
        forward_generator(bundle, torch.zeros(1, 2, 32, 32))


def test_decoder_tap_requirements():
    enc = ResNetEncoder(50, 0.0625)
    taps = encoder_taps(enc)
    cin = enc.channels["out"]
    build_decoder("pspnet", 1, None, cin, 0.0625)
    with pytest.raises(ValueError, match="5 skip taps"):
        build_decoder("unet", 1, {k: taps[k] for k in ("layer3", "layer2", "layer1", "stem")}, cin, 0.0625)
    with pytest.raises(ValueError, match="layer1"):
        build_decoder("deeplab", 3, {}, cin, 0.0625)
    with pytest.raises(ValueError):
        build_decoder("segnet", 1, taps, cin)


def test_residual_head_starts_as_identity():
    bundle = build_bundle(ModelSpec(**SMALL))
    bundle.generator.eval()
    x = torch.randn(1, 1, 32, 32)
    dsm, seg = forward_generator(bundle, x)
    assert torch.equal(dsm, x)
    assert not seg.any()


def test_eval_mode_deterministic():
    bundle = build_bundle(ModelSpec(residual=False, **SMALL))
    bundle.generator.eval()
    x = torch.randn(2, 1, 32, 32)
    a = forward_generator(bundle, x)
    b = forward_generator(bundle, x)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


def test_seg_head_absent_without_seg_objective():
    bundle = build_bundle(ModelSpec(seg_decoder=None, active_objectives=("l1", "normal"), **SMALL))
    assert bundle.seg_head is None and bundle.discriminator is None
    assert set(bundle.parameter_counts) == {"encoder", "dsm_head"}
    _, seg = forward_generator(bundle, torch.zeros(1, 1, 32, 32))
    assert seg is None


def test_heads_are_independent():
    bundle = build_bundle(ModelSpec(residual=False, **SMALL))
    dsm, seg = forward_generator(bundle, torch.randn(2, 1, 32, 32))
    seg.sum().backward()
    assert all(p.grad is None for p in bundle.dsm_head.parameters())
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in bundle.encoder.parameters())


def test_discriminator_width_follows_spec():
    assert build_bundle(ModelSpec(**SMALL)).discriminator.net[0].out_channels == 4
    spec = ModelSpec(discriminator_width=0.5, **SMALL)
    assert build_bundle(spec).discriminator.net[0].out_channels == 32


def test_receptive_field_matches_recurrence():
    assert PatchDiscriminator.receptive_field() == oracles.receptive_field(PatchDiscriminator.LAYERS) == 70
    convs = [m for m in PatchDiscriminator(0.125).modules() if isinstance(m, nn.Conv2d)]
    assert [(m.kernel_size[0], m.stride[0]) for m in convs] == list(PatchDiscriminator.LAYERS)


def test_receptive_field_empirically():
    # an output cell's gradient support on the input is bounded by the receptive field
    disc = PatchDiscriminator(0.125).eval()
    x = torch.randn(1, 1, 128, 128, requires_grad=True)
    y = torch.randn(1, 1, 128, 128)
    out = disc(x, y)
    i, j = out.shape[-2] // 2, out.shape[-1] // 2
    out[0, 0, i, j].backward()
    rows, cols = torch.nonzero(x.grad[0, 0].abs() > 0, as_tuple=True)
    assert rows.max() - rows.min() + 1 <= 70
    assert cols.max() - cols.min() + 1 <= 70


@pytest.mark.parametrize("size", [256, 512])
def test_discriminator_patch_grid(size):
    disc = PatchDiscriminator(0.125).eval()
    out = disc(torch.zeros(1, 1, size, size), torch.zeros(1, 1, size, size))
    assert out.shape == (1, 1, size // 8 - 2, size // 8 - 2)
