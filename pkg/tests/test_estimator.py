import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from fracbam.estimator import BamInceptionClassifier
from synthetic import stripe_image


def images(n, size=16, seed=0):
    rng = np.random.default_rng(seed)
    y = np.array(["healthy", "fracture"] * (n // 2))
    X = np.stack([stripe_image(rng, label == "fracture", size)[None] / 255.0 for label in y])
    return X, y


def small(**kw):
    params = dict(width=8, input_size=16, reduction_ratio=4, epochs=2, batch_size=8)
    params.update(kw)
    return BamInceptionClassifier(**params)


def test_params_round_trip():
    clf = small(dilation=2)
    assert clf.get_params()["dilation"] == 2
    assert clone(clf).get_params() == clf.get_params()
    assert clf.set_params(epochs=5).epochs == 5


def test_fit_predict_contract():
    X, y = images(20)
    clf = small().fit(X, y)
    assert list(clf.classes_) == ["fracture", "healthy"]
    assert clf.n_channels_in_ == 1
    assert len(clf.history_) == 2
    proba = clf.predict_proba(X)
    assert proba.shape == (20, 2)
    np.testing.assert_allclose(proba.sum(1), 1.0)
    pred = clf.predict(X)
    assert set(pred) <= set(clf.classes_)
    assert np.array_equal(pred, clf.classes_[np.argmax(proba, 1)])
    assert 0.0 <= clf.score(X, y) <= 1.0
    assert clf.decision_function(X).shape == (20,)


def test_explicit_validation_and_resizing():
    X, y = images(12, size=24)
    Xv, yv = images(6, size=24, seed=1)
    clf = small().fit(X, y, X_val=Xv, y_val=yv)
    assert clf.predict(Xv).shape == (6,)


def test_fit_is_deterministic():
    X, y = images(16)
    a = small().fit(X, y).predict_proba(X)
    b = small().fit(X, y).predict_proba(X)
    assert np.array_equal(a, b)


def test_input_validation():
    X, y = images(8)
    with pytest.raises(NotFittedError):
        small().predict(X)
    with pytest.raises(ValueError, match="two classes"):
        small().fit(X, np.zeros(8))
    with pytest.raises(ValueError, match="dimensions"):
        small().fit(X[:, 0], y)
    with pytest.raises(ValueError):
        small().fit(X, y[:-1])
    bad = X.copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        small().fit(bad, y)
    clf = small().fit(X, y)
    with pytest.raises(ValueError, match="channels"):
        clf.predict(np.repeat(X, 3, axis=1))


def test_exported_from_package():
    import fracbam
    assert fracbam.BamInceptionClassifier is BamInceptionClassifier
