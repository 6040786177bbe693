import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from agcmnet import SaliencyDetector
from agcmnet import data as D
from agcmnet.errors import DataError, ShapeError
from agcmnet.validation import check_images, check_masks


def small_detector(**kw):
    base = dict(widths=(4, 4, 4, 4, 4), n_prototypes=3, n_edgeconv=2, k_nn=1, epochs=2, batch_size=2)
    base.update(kw)
    return SaliencyDetector(**base)


@pytest.fixture(scope="module")
def xy():
    scenes = D.gen_dataset(3, 0, D.SceneSpec(height=32, width=32))
    return np.stack([s.image for s in scenes]), np.stack([s.mask[0] for s in scenes])


def test_params_round_trip():
    est = small_detector(lr_start=1e-3)
    params = est.get_params()
    assert params["lr_start"] == 1e-3 and params["n_prototypes"] == 3
    assert clone(est).get_params() == params
    assert est.set_params(epochs=5).epochs == 5


def test_fit_predict_score(xy):
    X, y = xy
    est = small_detector().fit(X, y)
    assert est.n_steps_ == 4 and len(est.loss_curve_) == 4
    proba = est.predict_proba(X)
    assert proba.shape == (3, 32, 32) and ((proba > 0) & (proba < 1)).all()
    assert set(np.unique(est.predict(X))) <= {0.0, 1.0}
    assert 0.0 <= est.score(X, y) <= 1.0
    again = small_detector().fit(X, y)
    np.testing.assert_array_equal(again.predict_proba(X), proba)


def test_not_fitted(xy):
    with pytest.raises(NotFittedError):
        small_detector().predict(xy[0])


def test_validation(xy):
    X, y = xy
    with pytest.raises(ShapeError):
        check_images(X[:, :2])
    with pytest.raises(DataError):
        check_images(X * 2)
    with pytest.raises(ShapeError):
        check_masks(y[:2], X)
    with pytest.raises(DataError):
        check_masks(y * 0.5, X)
    assert check_images(X[0]).shape == (1, 3, 32, 32)
    assert check_masks(y, X).shape == (3, 1, 32, 32)
