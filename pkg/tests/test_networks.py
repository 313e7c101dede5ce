import numpy as np
import pytest

from secpnet.errors import ConfigurationError
from secpnet.networks import NetworkConfig, VariantId, build_variant, forward, predict_mask
from secpnet.tensor import Tensor, grad_check, precision, softmax_channels

import oracles
from helpers import variant_instance

SMALL = NetworkConfig(1, 14, 4, 2, 16)


def zero_all(module):
    for p in module.parameters():
        p.data = np.zeros_like(p.data)


def test_variant_labels_and_flags():
    assert [v.label for v in VariantId] == [
        "Baseline", "Baseline+concat", "Baseline+auto-concat", "Baseline+SEC", "Baseline+SEC-concat", "SECP-Net",
    ]
    assert [v for v in VariantId if v.is_cascade] == [
        VariantId.BaselineConcat, VariantId.BaselineAutoConcat, VariantId.BaselineSECConcat, VariantId.SECPNet,
    ]
    assert VariantId.parse("secp-net") is VariantId.SECPNet
    assert VariantId.parse("BaselineSEC") is VariantId.BaselineSEC
    with pytest.raises(ConfigurationError):
        VariantId.parse("resnet")


def test_secondary_input_channels():
    cfg = NetworkConfig(1, 14, 4, 2)
    assert build_variant(VariantId.SECPNet, cfg).secondary_in_channels == 15
    assert build_variant(VariantId.BaselineAutoConcat, cfg).secondary_in_channels == 15
    assert build_variant(VariantId.BaselineConcat, cfg).secondary_in_channels == 14
    assert build_variant(VariantId.BaselineSECConcat, cfg).secondary_in_channels == 14
    assert build_variant(VariantId.Baseline, cfg).secondary_in_channels is None


def test_bottleneck_width():
    cfg = NetworkConfig(base_width=8, depth=4)
    assert cfg.bottleneck_channels == 128
    net = build_variant(VariantId.Baseline, cfg)
    assert net.primary.bottleneck.conv2.out_channels == 128


@pytest.mark.parametrize("variant", list(VariantId))
def test_forward_shapes_and_normalisation(variant):
    net = build_variant(variant, NetworkConfig(1, 14, 4, 3))
    x = np.random.default_rng(0).random((2, 1, 16, 16), dtype=np.float32)
    out = forward(net, x)
    assert out.primary.shape == out.final.shape == (2, 14, 16, 16)
    p = softmax_channels(out.final).data
    assert np.abs(p.sum(axis=1) - 1).max() < 1e-6


def test_secpnet_64x64_shape():
    net = build_variant(VariantId.SECPNet, NetworkConfig(1, 14, 4, 4))
    out = forward(net, np.zeros((1, 1, 64, 64), dtype=np.float32))
    assert out.primary.shape == out.final.shape == (1, 14, 64, 64)


@pytest.mark.parametrize("variant", list(VariantId))
def test_zero_parameters_give_uniform_probabilities(variant):
    net = build_variant(variant, SMALL)
    zero_all(net)
    x = np.random.default_rng(1).random((1, 1, 8, 8), dtype=np.float32)
    p = softmax_channels(forward(net, x).final).data
    np.testing.assert_allclose(p, 1 / 14, atol=1e-7)


@pytest.mark.parametrize("shape", [(1, 1, 12, 12), (1, 1, 8, 6), (1, 2, 8, 8), (1, 8, 8)])
def test_bad_input_extents_rejected(shape):
    net = build_variant(VariantId.Baseline, NetworkConfig(1, 14, 4, 3))
    with pytest.raises(ConfigurationError):
        forward(net, np.zeros(shape, dtype=np.float32))


def test_predict_mask_examples():
    net = build_variant(VariantId.Baseline, SMALL)
    zero_all(net)
    x = np.random.default_rng(2).random((2, 1, 8, 8), dtype=np.float32)
    mask = predict_mask(net, x)
    assert mask.dtype == np.uint8 and mask.shape == (2, 8, 8)
    assert not mask.any()  # uniform logits: class 0 wins the tie
    net.primary.head.bias.data[3] = 1.0
    assert (predict_mask(net, x) == 3).all()


@pytest.mark.parametrize("variant", list(VariantId))
def test_predict_mask_matches_argmax_scan(variant):
    net = build_variant(variant, SMALL, seed=3)
    x = np.random.default_rng(3).random((2, 1, 8, 8), dtype=np.float32)
    logits = forward(net, x).final.data
    np.testing.assert_array_equal(predict_mask(net, x), oracles.argmax_scan(logits))


@pytest.mark.parametrize("variant", list(VariantId))
def test_parameter_names_are_deterministic_and_unique(variant):
    a, b = build_variant(variant, SMALL), build_variant(variant, SMALL)
    sig_a = [(n, p.shape) for n, p in a.named_parameters()]
    assert sig_a == [(n, p.shape) for n, p in b.named_parameters()]
    names = [n for n, _ in sig_a]
    assert len(set(names)) == len(names)
    assert all(p.name == n for n, p in a.named_parameters())


def test_same_seed_same_weights():
    a, b = build_variant(VariantId.SECPNet, SMALL, seed=5), build_variant(VariantId.SECPNet, SMALL, seed=5)
    for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        np.testing.assert_array_equal(pa.data, pb.data)


def test_sec_variant_reduces_to_baseline():
    cfg = NetworkConfig(1, 14, 4, 3, 16)
    with precision("check"):
        base = build_variant(VariantId.Baseline, cfg, seed=1)
        sec = build_variant(VariantId.BaselineSEC, cfg, seed=2)
    shared = base.state_dict()
    own = dict(sec.named_parameters())
    for name, value in shared.items():
        own[name].data = value.copy()
    for mod in sec.primary.sec_modules():
        se = mod.se if hasattr(mod, "se") else mod
        se.expand.bias.data = np.full_like(se.expand.bias.data, 60.0)
    for mod in sec.primary.secs:
        c1 = mod.match.out_channels
        mod.match.weight.data[:] = 0
        mod.match.bias.data[:] = 0
        w = np.zeros_like(mod.fuse.weight.data)
        w[np.arange(c1), np.arange(c1), 1, 1] = 1.0
        mod.fuse.weight.data = w
        mod.fuse.bias.data[:] = 0
    x = Tensor(np.random.default_rng(3).random((2, 1, 16, 16)), dtype=np.float64)
    diff = np.abs(forward(sec, x).final.data - forward(base, x).final.data).max()
    assert diff < 1e-5


def test_state_dict_round_trip_and_mismatch():
    a, b = build_variant(VariantId.SECPNet, SMALL, 0), build_variant(VariantId.SECPNet, SMALL, 9)
    b.load_state_dict(a.state_dict())
    x = np.random.default_rng(4).random((1, 1, 8, 8), dtype=np.float32)
    np.testing.assert_array_equal(forward(a, x).final.data, forward(b, x).final.data)
    with pytest.raises(ConfigurationError):
        build_variant(VariantId.Baseline, SMALL).load_state_dict(a.state_dict())


@pytest.mark.parametrize("variant", list(VariantId))
def test_variant_loss_grad_check(variant):
    worst = max(grad_check(*variant_instance(variant, seed), max_per_tensor=2) for seed in range(3))
    assert worst < 1e-4
