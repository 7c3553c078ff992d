import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from asdseg import AdversarialSegmenter

FAST = dict(num_blocks=2, channels=4, disc_channels=4, schedule_divisor=2000,
            batch_baseline=4, batch_labelled=4, batch_unlabelled=4, jitter_max=2)


def test_get_params_and_clone():
    est = AdversarialSegmenter(alpha=0.3, k=2, random_state=5)
    params = est.get_params()
    assert params["alpha"] == 0.3 and params["k"] == 2 and params["random_state"] == 5
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(alpha=0.0)
    assert est.alpha == 0.0


def test_fit_predict_shapes(tiny_data):
    X, y = tiny_data.images[:24], tiny_data.labels[:24]
    est = AdversarialSegmenter(**FAST).fit(X, y, X_unlabelled=tiny_data.images[24:])
    assert list(est.classes_) == [0, 1, 2, 3]
    assert est.log_.net_updates == 10 and est.log_.disc_updates == 10
    proba = est.predict_proba(X[:3])
    assert proba.shape == (3, 4, 16, 16)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, rtol=1e-6)
    pred = est.predict(X[:3])
    assert pred.shape == (3, 16, 16)
    assert np.array_equal(pred, proba.argmax(axis=1))
    assert 0.0 <= est.score(X, y) <= 1.0


def test_baseline_fit_is_deterministic(tiny_data):
    X, y = tiny_data.images[:16], tiny_data.labels[:16]
    a = AdversarialSegmenter(mode="baseline", **FAST).fit(X, y)
    b = AdversarialSegmenter(mode="baseline", **FAST).fit(X, y)
    assert a.log_.disc_updates == 0
    assert np.array_equal(a.predict_proba(X[:2]), b.predict_proba(X[:2]))


def test_num_classes_can_exceed_the_observed_labels(tiny_data):
    X, y = tiny_data.images[:8], np.zeros((8, 16, 16), np.uint8)
    y[:, :4] = 1
    est = AdversarialSegmenter(mode="baseline", num_classes=5, **FAST).fit(X, y)
    assert est.predict_proba(X[:1]).shape[1] == 5


def test_validation_errors(tiny_data):
    X, y = tiny_data.images[:8], tiny_data.labels[:8]
    est = AdversarialSegmenter(**FAST)
    with pytest.raises(NotFittedError):
        est.predict(X)
    with pytest.raises(ValueError, match="X_unlabelled"):
        est.fit(X, y)
    with pytest.raises(ValueError, match="N x C x H x W"):
        est.fit(X[:, 0], y, X_unlabelled=X)
    with pytest.raises(ValueError, match="divisible"):
        est.fit(X[:, :, :14, :14], y[:, :14, :14], X_unlabelled=X)
    with pytest.raises(ValueError, match="below 2"):
        AdversarialSegmenter(num_classes=2, **FAST).fit(X, y, X_unlabelled=X)
    with pytest.raises(ValueError, match="match"):
        est.fit(X, y[:, :8], X_unlabelled=X)
    with pytest.raises(ValueError, match="channels"):
        est.fit(X, y, X_unlabelled=X[:, :2])
    bad = X.copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        est.fit(bad, y, X_unlabelled=X)
    fitted = AdversarialSegmenter(mode="baseline", **FAST).fit(X, y)
    with pytest.raises(ValueError, match="channels"):
        fitted.predict(X[:, :1])
    with pytest.raises(ValueError, match="sample_weight"):
        fitted.score(X, y, sample_weight=np.ones(8))
