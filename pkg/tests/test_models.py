import numpy as np
import pytest
import torch
import torch.nn as nn

from strokeseg.errors import InvalidConfig, ShapeError
from strokeseg.models import (DiscriminatorConfig, SegmenterConfig, build_discriminator,
                              build_discriminators, build_segmenter, count_parameters,
                              discriminator_inputs, forward_segmenter, unpool_roundtrip)


def _seg(widths, residual, seed=0):
    torch.manual_seed(seed)
    return build_segmenter(SegmenterConfig(encoder_widths=widths, residual=residual))


def test_parameter_counts():
    plain = count_parameters(build_segmenter(SegmenterConfig(residual=False)))
    res = count_parameters(build_segmenter(SegmenterConfig(residual=True)))
    assert plain < res
    assert plain == count_parameters(build_segmenter(SegmenterConfig(residual=False)))


def test_vgg11_layout():
    m = build_segmenter(SegmenterConfig())
    convs = [k for k, v in m.encoder.named_modules() if isinstance(v, nn.Conv2d) and k.endswith(".conv")]
    assert len(convs) == 8
    widths = [m.encoder.get_submodule(k).out_channels for k in convs]
    assert widths == [64, 128, 256, 256, 512, 512, 512, 512]
    keys = m.state_dict().keys()
    assert "encoder.block1.conv1.conv.weight" in keys
    assert "encoder.block3.conv2.conv.weight" in keys
    assert any(k.startswith("decoder.block5.") for k in keys)
    assert not any(p.requires_grad is False for p in m.parameters())


def test_invalid_configs():
    with pytest.raises(InvalidConfig):
        SegmenterConfig(encoder_widths=(8, 8))
    with pytest.raises(InvalidConfig):
        SegmenterConfig(num_classes=2)
    with pytest.raises(InvalidConfig):
        DiscriminatorConfig(in_channels=0)


def test_forward_shapes(tiny_widths):
    m = _seg(tiny_widths, True)
    assert forward_segmenter(m, torch.randn(2, 3, 96, 96)).shape == (2, 3, 96, 96)
    with pytest.raises(ShapeError):
        m(torch.randn(1, 3, 90, 96))
    with pytest.raises(ShapeError):
        m(torch.randn(1, 4, 96, 96))
    with pytest.raises(ShapeError):
        forward_segmenter(m, torch.full((1, 3, 32, 32), float("nan")))


def test_full_width_forward_shape():
    m = build_segmenter(SegmenterConfig()).eval()
    with torch.no_grad():
        assert m(torch.zeros(1, 3, 64, 64)).shape == (1, 3, 64, 64)


def test_zero_input_finite_and_eval_deterministic(tiny_widths):
    m = _seg(tiny_widths, True).eval()
    with torch.no_grad():
        out = m(torch.zeros(1, 3, 64, 64))
        assert torch.isfinite(out).all()
        x = torch.randn(2, 3, 64, 64)
        assert torch.equal(m(x), m(x))


def test_residual_changes_output(tiny_widths):
    x = torch.randn(1, 3, 64, 64)
    plain, res = _seg(tiny_widths, False).eval(), _seg(tiny_widths, True).eval()
    res.load_state_dict(plain.state_dict(), strict=False)
    with torch.no_grad():
        assert (plain(x) - res(x)).abs().max() > 0


class _Zero(nn.Module):
    def forward(self, x):
        return torch.zeros_like(x)


def test_zeroed_shortcuts_recover_plain_path(tiny_widths):
    plain, res = _seg(tiny_widths, False).eval(), _seg(tiny_widths, True).eval()
    missing, unexpected = res.load_state_dict(plain.state_dict(), strict=False)
    assert not unexpected and all("shortcut" in k for k in missing)
    for block in res.modules():
        sc = getattr(block, "shortcut", None)
        if isinstance(sc, nn.Conv2d):
            nn.init.zeros_(sc.weight)
        elif isinstance(sc, nn.Identity):
            block.shortcut = _Zero()
    x = torch.randn(2, 3, 64, 64)
    with torch.no_grad():
        assert torch.allclose(res(x), plain(x), atol=1e-6)


@pytest.mark.parametrize("residual", [False, True])
def test_gradient_reaches_every_parameter(tiny_widths, residual):
    m = _seg(tiny_widths, residual)
    m(torch.randn(2, 3, 64, 64)).square().mean().backward()
    for name, p in m.named_parameters():
        assert p.grad is not None, name
        assert p.grad.abs().sum() > 0, name


def test_unpool_roundtrip_small():
    x = torch.tensor([[[[1.0, 5.0, 2.0, 0.0],
                        [3.0, 4.0, 7.0, 1.0],
                        [0.0, 0.0, 1.0, 1.0],
                        [9.0, 2.0, 3.0, 8.0]]]])
    pooled, _, back = unpool_roundtrip(x)
    assert pooled.flatten().tolist() == [5.0, 7.0, 9.0, 8.0]
    expected = torch.zeros_like(x)
    for (y, xx), v in {(0, 1): 5.0, (1, 2): 7.0, (3, 0): 9.0, (3, 3): 8.0}.items():
        expected[0, 0, y, xx] = v
    assert torch.equal(back, expected)


def test_discriminator_shapes():
    d4 = build_discriminator(DiscriminatorConfig(in_channels=4, base_width=8))
    assert d4(torch.randn(3, 4, 96, 96)).shape == (3, 1)
    d5 = build_discriminator(DiscriminatorConfig(in_channels=5, base_width=8))
    assert d5(torch.randn(2, 5, 64, 64)).shape == (2, 1)
    with pytest.raises(ShapeError):
        d4(torch.randn(2, 5, 64, 64))
    first, bns = d4.features[0], [m for m in d4.features if isinstance(m, nn.BatchNorm2d)]
    assert first.kernel_size == (4, 4) and first.stride == (2, 2) and len(bns) == 3


def test_discriminator_heads():
    discs = build_discriminators(base_width=8)
    assert {k: d.cfg.in_channels for k, d in discs.items()} == {"core": 4, "pen": 4, "pair": 5}


def test_discriminator_inputs():
    labels = torch.randint(0, 3, (2, 32, 32))
    onehot = torch.nn.functional.one_hot(labels, 3).permute(0, 3, 1, 2).float()
    probs = torch.softmax(torch.randn(2, 3, 32, 32), 1)
    x = torch.randn(2, 3, 32, 32)
    pairs = discriminator_inputs(probs, onehot, x)
    assert {k: v[0].shape[1] for k, v in pairs.items()} == {"core": 4, "pen": 4, "pair": 5}
    assert all(r.shape[0] == 2 and f.shape[0] == 2 for r, f in pairs.values())
    real, fake = pairs["core"]
    assert torch.equal(real[:, 3], onehot[:, 2]) and torch.equal(fake[:, 3], probs[:, 2])
    assert torch.equal(pairs["pen"][1][:, 3], probs[:, 1])
    for real, fake in discriminator_inputs(onehot, onehot, x).values():
        assert torch.equal(real, fake)
    with pytest.raises(ShapeError):
        discriminator_inputs(probs[:, :2], onehot, x)
