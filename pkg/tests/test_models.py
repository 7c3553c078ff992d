import numpy as np
import pytest

from asdseg import autograd as ad
from asdseg import layers as L
from asdseg.autograd import ContractError, Rng, Tensor
from asdseg.gradcheck import model_cases
from asdseg.models import DiscConfig, SegNetConfig, build_discriminator, build_segnet


def conv_params(c_in, c_out, k):
    return c_in * c_out * k * k + c_out


def test_full_scale_parameter_count():
    cfg = SegNetConfig(num_blocks=4, channels=64, kernel=7, num_classes=11, input_channels=3)
    net = build_segnet(cfg, Rng(0))
    expect = conv_params(3, 64, 7) + 7 * conv_params(64, 64, 7) + 8 * 2 * 64 + conv_params(64, 11, 1)
    assert net.num_params() == expect


def test_full_scale_discriminator_parameter_count():
    cfg = DiscConfig(num_blocks=3, channels=64, kernel=3, stride=2)
    net = build_discriminator(cfg, Rng(0), 11)
    expect = conv_params(11, 64, 3) + 2 * conv_params(64, 64, 3) + 3 * 2 * 64 + 64 + 1
    assert net.num_params() == expect


def test_forward_shape():
    net = build_segnet(SegNetConfig(), Rng(0))
    assert net(Tensor(np.zeros((1, 3, 32, 32), np.float32))).shape == (1, 4, 32, 32)


def test_zero_network_outputs_head_bias():
    net = build_segnet(SegNetConfig(), Rng(0))
    for name, p in net.named_params().items():
        if name.endswith(".weight"):
            p.data[...] = 0
    net.layers["head"].bias.data[:] = [0.5, -1.0, 2.0, 0.25]
    out = net(Tensor(np.random.default_rng(0).normal(size=(2, 3, 8, 8)).astype(np.float32))).data
    np.testing.assert_array_equal(out, np.broadcast_to(np.array([0.5, -1.0, 2.0, 0.25], np.float32).reshape(1, 4, 1, 1), out.shape))


def test_rejects_indivisible_input():
    net = build_segnet(SegNetConfig(num_blocks=2), Rng(0))
    with pytest.raises(ContractError):
        net(Tensor(np.zeros((1, 3, 30, 32), np.float32)))


def test_decoder_consumes_mirrored_indices(monkeypatch):
    """Decoder block j reads the indices exported by encoder block nb-1-j."""
    exported, consumed = [], []
    real_pool, real_unpool = L.maxpool2d, L.maxunpool2d
    import asdseg.models as M

    def pool(x, k):
        y, idx = real_pool(x, k)
        exported.append(idx)
        return y, idx

    def unpool(y, idx, k):
        consumed.append(idx)
        return real_unpool(y, idx, k)

    monkeypatch.setattr(M, "maxpool2d", pool)
    monkeypatch.setattr(M, "maxunpool2d", unpool)
    net = build_segnet(SegNetConfig(num_blocks=3, channels=4), Rng(0))
    net(Tensor(np.random.default_rng(0).normal(size=(1, 3, 16, 16)).astype(np.float32)))
    assert [c is e for c, e in zip(consumed, reversed(exported))] == [True] * 3
    assert [c.input_shape for c in consumed] == [(1, 4, 4, 4), (1, 4, 8, 8), (1, 4, 16, 16)]


def test_discriminator_outputs_one_logit_per_sample():
    D = build_discriminator(DiscConfig(), Rng(0), 4)
    for hw in (8, 16, 20):
        assert D(Tensor(np.random.default_rng(hw).normal(size=(3, 4, hw, hw)).astype(np.float32))).shape == (3, 1)


def test_zero_final_layer_gives_half():
    D = build_discriminator(DiscConfig(), Rng(0), 4)
    D.layers["fc"].weight.data[...] = 0
    D.layers["fc"].bias.data[...] = 0
    z = D(Tensor(np.random.default_rng(0).normal(size=(5, 4, 16, 16)).astype(np.float32)))
    np.testing.assert_array_equal(ad.sigmoid(z).data, 0.5)


def test_spatial_shuffle_of_final_features_leaves_logit():
    D = build_discriminator(DiscConfig(), Rng(0), 4).astype(np.float64)
    feats = D.features(Tensor(np.random.default_rng(1).normal(size=(2, 4, 16, 16))))
    perm = np.random.default_rng(2).permutation(feats.shape[2] * feats.shape[3])
    shuffled = feats.data.reshape(2, feats.shape[1], -1)[:, :, perm].reshape(feats.shape)
    np.testing.assert_allclose(D.head(Tensor(shuffled)).data, D.head(feats).data, rtol=1e-12, atol=1e-12)


def test_init_rules_and_determinism():
    a = build_segnet(SegNetConfig(), Rng(4))
    b = build_segnet(SegNetConfig(), Rng(4))
    for (name, p), q in zip(a.named_params().items(), b.named_params().values()):
        np.testing.assert_array_equal(p.data, q.data)
        if ".bn." in name:
            assert np.all(p.data == (1 if name.endswith("gamma") else 0))
        elif name.endswith("bias"):
            assert np.all(p.data == 0)


def test_conv_weight_variance_matches_fan_in():
    net = build_segnet(SegNetConfig(num_blocks=2, channels=64, kernel=3), Rng(0))
    w = net.layers["dec0.conv"].weight.data
    assert w.size >= 1e4
    assert abs(w.var() / (2 / (64 * 9)) - 1) < 0.2


def test_state_dict_round_trip():
    a = build_segnet(SegNetConfig(), Rng(1))
    b = build_segnet(SegNetConfig(), Rng(2))
    b.load_state_dict(a.state_dict())
    for k, v in a.state_dict().items():
        np.testing.assert_array_equal(b.state_dict()[k], v)


def test_load_state_dict_validates_before_mutating():
    a = build_segnet(SegNetConfig(), Rng(1))
    before = {k: v.copy() for k, v in a.state_dict().items()}
    bad = dict(before)
    bad["head.weight"] = np.zeros((9, 9, 1, 1), np.float32)
    bad["enc0.conv.weight"] = before["enc0.conv.weight"] + 1
    with pytest.raises(ValueError):
        a.load_state_dict(bad)
    for k, v in a.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_eval_forward_is_pure():
    net = build_segnet(SegNetConfig(), Rng(0)).eval()
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 16, 16)).astype(np.float32))
    buffers = {k: v.copy() for k, v in net.named_buffers().items()}
    with ad.no_grad():
        a, b = net(x).data, net(x).data
    np.testing.assert_array_equal(a, b)
    for k, v in net.named_buffers().items():
        np.testing.assert_array_equal(v, buffers[k])


@pytest.mark.parametrize("case", ["segnet_tiny", "discriminator_tiny"])
def test_tiny_models_pass_gradient_check(case):
    runs = dict(model_cases(Rng(0)))
    assert runs[case]() < 1e-4


def test_config_validation():
    with pytest.raises(ContractError):
        SegNetConfig(kernel=4).validate()
    with pytest.raises(ContractError):
        DiscConfig(stride=1).validate()
