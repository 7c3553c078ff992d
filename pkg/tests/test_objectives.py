import math

import numpy as np
import pytest

from asdseg import autograd as ad
from asdseg.autograd import ContractError, Rng, Tensor
from asdseg.models import SegNetConfig, build_segnet
from asdseg.objectives import (
    IGNORE_ID,
    adversarial_loss,
    discriminator_loss,
    evaluate_metrics,
    supervised_loss,
    total_cost,
)


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def brute_ce(logits, labels):
    total, count = 0.0, 0
    n, k, h, w = logits.shape
    for i in range(n):
        for y in range(h):
            for x in range(w):
                c = labels[i, y, x]
                if c == IGNORE_ID:
                    continue
                z = logits[i, :, y, x]
                m = max(z)
                lse = m + math.log(sum(math.exp(v - m) for v in z))
                total += lse - z[c]
                count += 1
    return total / count


def sig(z):
    return 1 / (1 + math.exp(-z))


# ------------------------------------------------------------------ supervised


def test_uniform_logits_give_log_k():
    assert supervised_loss(T(np.zeros((2, 4, 3, 3))), np.zeros((2, 3, 3), int)).item() == pytest.approx(math.log(4))


def test_saturated_correct_logits_give_zero():
    labels = np.random.default_rng(0).integers(0, 3, size=(2, 4, 4))
    z = np.zeros((2, 3, 4, 4))
    np.put_along_axis(z, labels[:, None], 1000.0, axis=1)
    assert supervised_loss(T(z), labels).item() == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(100))
def test_supervised_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(0, 3, size=(2, 3, 2, 2))
    labels = rng.integers(0, 3, size=(2, 2, 2))
    labels[rng.uniform(size=labels.shape) < 0.2] = IGNORE_ID
    if (labels == IGNORE_ID).all():
        labels[0, 0, 0] = 1
    assert abs(supervised_loss(T(z), labels).item() - brute_ce(z, labels)) < 1e-6


def test_all_ignored_is_an_error():
    with pytest.raises(ContractError):
        supervised_loss(T(np.zeros((1, 2, 2, 2))), np.full((1, 2, 2), IGNORE_ID))


def test_ignored_pixels_get_no_gradient():
    z = T(np.random.default_rng(0).normal(size=(1, 3, 2, 2)), grad=True)
    labels = np.array([[[0, IGNORE_ID], [2, 1]]])
    ad.backward(supervised_loss(z, labels))
    assert np.all(z.grad[0, :, 0, 1] == 0)


# ----------------------------------------------------------- discriminator


def test_uninformative_discriminator_loss():
    assert discriminator_loss(T(np.zeros((3, 1))), T(np.zeros((5, 1)))).item() == pytest.approx(2 * math.log(2))


def test_perfect_discrimination_limit():
    assert discriminator_loss(T(np.full((2, 1), 1e4)), T(np.full((2, 1), -1e4))).item() == pytest.approx(0, abs=1e-12)


@pytest.mark.parametrize("seed", range(100))
def test_discriminator_loss_matches_sigmoid_space(seed):
    rng = np.random.default_rng(seed)
    zt, zu = rng.uniform(-30, 30, size=(rng.integers(1, 6), 1)), rng.uniform(-30, 30, size=(rng.integers(1, 6), 1))
    # 1 - sigmoid(z) taken as sigmoid(-z): subtracting from 1 cancels badly near z = 30
    expect = -np.mean([math.log(sig(v)) for v in zt.ravel()]) - np.mean([math.log(sig(-v)) for v in zu.ravel()])
    assert abs(discriminator_loss(T(zt), T(zu)).item() - expect) < 1e-6


def test_adversarial_loss_values():
    assert adversarial_loss(T([[0.0]])).item() == pytest.approx(math.log(2))
    assert adversarial_loss(T([[1e4]])).item() == pytest.approx(0, abs=1e-12)
    assert adversarial_loss(T([[-2.0]])).item() == pytest.approx(math.log1p(math.exp(2.0)), abs=1e-12)
    assert adversarial_loss(T([[-2.0]])).item() == pytest.approx(2.1269280110429727, abs=1e-12)


@pytest.mark.parametrize("seed", range(100))
def test_adversarial_loss_matches_sigmoid_space(seed):
    zu = np.random.default_rng(seed).uniform(-30, 30, size=(4, 1))
    expect = -np.mean([math.log(sig(v)) for v in zu.ravel()])
    assert abs(adversarial_loss(T(zu)).item() - expect) < 1e-6


def test_losses_are_non_negative():
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert supervised_loss(T(rng.normal(size=(1, 3, 2, 2))), rng.integers(0, 3, size=(1, 2, 2))).item() >= 0
        assert discriminator_loss(T(rng.normal(size=(2, 1))), T(rng.normal(size=(2, 1)))).item() >= 0
        assert adversarial_loss(T(rng.normal(size=(2, 1)))).item() >= 0


def test_discriminator_logits_must_be_column():
    with pytest.raises(ContractError):
        adversarial_loss(T(np.zeros((3, 2))))
    with pytest.raises(ContractError):
        discriminator_loss(T(np.zeros((0, 1))), T(np.zeros((2, 1))))


# ------------------------------------------------------------------ total cost


def test_total_cost_arithmetic():
    assert total_cost(1.0, 2.0, 0.5) == 2.0
    assert total_cost(T(3.0), T(7.0), 0.0).item() == 3.0
    with pytest.raises(ContractError):
        total_cost(1.0, 2.0, -0.1)


def test_total_cost_gradient_is_linear():
    cfg = SegNetConfig(num_blocks=1, channels=3, num_classes=3, input_channels=2)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 2, 8, 8))
    labels = rng.integers(0, 3, size=(2, 8, 8))
    target = rng.normal(size=(2, 3, 8, 8))
    alpha = 0.37

    def grads(which):
        net = build_segnet(cfg, Rng(1)).astype(np.float64)
        ad.reset_tape()
        z = net(T(x), update_stats=False)
        sup = supervised_loss(z, labels)
        adv = ad.mean(ad.mul(ad.softmax(z, axis=1), T(target)))
        cost = {"sup": sup, "adv": adv, "both": total_cost(sup, adv, alpha)}[which]
        ad.backward(cost)
        return np.concatenate([p.grad.ravel() for p in net.parameters()])

    g_sup, g_adv, g_both = grads("sup"), grads("adv"), grads("both")
    np.testing.assert_allclose(g_both, g_sup + alpha * g_adv, rtol=1e-6, atol=1e-12)


# --------------------------------------------------------------------- metrics


def counting_oracle(pred, gt, k):
    iou, rec = [], []
    tp_all = total = 0
    for c in range(k):
        inter = union = tp = gtc = 0
        for p, g in zip(pred.ravel(), gt.ravel()):
            if g == IGNORE_ID:
                continue
            inter += p == c and g == c
            union += p == c or g == c
            gtc += g == c
        if union:
            iou.append(inter / union)
        if gtc:
            rec.append(inter / gtc)
        tp_all += inter
    total = sum(1 for g in gt.ravel() if g != IGNORE_ID)
    return float(np.mean(iou)), float(np.mean(rec)), tp_all / total


def test_perfect_prediction():
    gt = np.random.default_rng(0).integers(0, 4, size=(2, 5, 5))
    rep = evaluate_metrics(gt, gt, 4)
    assert rep.iou == rep.class_recall == rep.global_precision == 1.0


def test_binary_hand_case():
    gt = np.array([[[0, 0], [1, 1]]])
    pred = np.array([[[0, 1], [1, 1]]])
    rep = evaluate_metrics(pred, gt, 2)
    assert rep.iou == pytest.approx((1 / 2 + 2 / 3) / 2)
    assert rep.global_precision == 0.75
    assert rep.class_recall == pytest.approx((1 / 2 + 1) / 2)


def test_totally_wrong_binary_prediction():
    gt = np.array([[[0, 1], [1, 0]]])
    rep = evaluate_metrics(1 - gt, gt, 2)
    assert rep.iou == 0 and rep.global_precision == 0


@pytest.mark.parametrize("seed", range(50))
def test_metrics_match_counting_oracle(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 9))
    h, w = rng.integers(1, 17, size=2)
    gt = rng.integers(0, k, size=(2, h, w))
    gt[rng.uniform(size=gt.shape) < 0.1] = IGNORE_ID
    gt[0, 0, 0] = 0
    pred = rng.integers(0, k, size=gt.shape)
    rep = evaluate_metrics(pred, gt, k)
    assert (rep.iou, rep.class_recall, rep.global_precision) == counting_oracle(pred, gt, k)


def test_metrics_reject_out_of_range_ids():
    with pytest.raises(ContractError):
        evaluate_metrics(np.array([[[5]]]), np.array([[[0]]]), 3)
