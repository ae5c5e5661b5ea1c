import numpy as np
import pytest
from sklearn.base import clone

from fcdd import FCDD
from fcdd.data import ConfettiConfig
from fcdd.errors import ConfigurationError
from fcdd.estimator import check_images
from fcdd.model import ArchitectureSpec, bn, conv, lrelu, maxpool

SPEC = ArchitectureSpec((conv(1, 4, 3, 1, 1, bias=False), bn(), lrelu(), maxpool(2), conv(4, 1, 1)), (1, 8, 8))


def toy(n=8):
    X = np.concatenate([np.zeros((n, 1, 8, 8)), np.ones((n, 1, 8, 8))]).astype(np.float32)
    y = np.r_[np.zeros(n, int), np.ones(n, int)]
    return X, y


def fitted(**kw):
    X, y = toy()
    params = dict(architecture=SPEC, epochs=30, batch_size=8, anomaly_source="none", normalize=False, sigma=1.0)
    params.update(kw)
    return FCDD(**params).fit(X, y), X, y


def test_check_images_shapes():
    assert check_images(np.zeros((1, 4, 4))).shape == (1, 1, 4, 4)
    with pytest.raises(ValueError):
        check_images(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        check_images(np.zeros((2, 3, 4, 4)), n_channels=1)
    with pytest.raises(ValueError):
        check_images(np.full((1, 1, 2, 2), np.nan))


def test_params_roundtrip_and_clone():
    est = FCDD(lr=0.05, epochs=3, confetti=ConfettiConfig(1, 2, 1, 3))
    assert est.get_params()["lr"] == 0.05
    other = clone(est)
    assert other.get_params()["epochs"] == 3 and other is not est
    est.set_params(epochs=7)
    assert est.epochs == 7


def test_fit_predict_and_outputs():
    est, X, y = fitted()
    scores = est.decision_function(X)
    assert scores[y == 1].min() > scores[y == 0].max()
    assert est.evaluate(X, y)["sample_auc"] == 1.0
    np.testing.assert_array_equal(est.predict(X), y)
    np.testing.assert_array_equal(est.score_samples(X), -scores)
    assert est.transform(X).shape == (16, 4, 4)
    full = est.heatmaps(X)
    assert full.shape == (16, 8, 8) and np.all(full >= 0)
    norm = est.normalized_heatmaps(X, eta=1.0)
    assert norm.min() >= 0 and norm.max() <= 1
    assert est.gradient_heatmaps(X[:2]).shape == (2, 8, 8)


def test_unfitted_estimator_raises():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        FCDD().decision_function(np.zeros((1, 1, 8, 8)))


def test_fit_validates_labels_and_masks():
    X, y = toy(2)
    with pytest.raises(ValueError):
        FCDD(architecture=SPEC).fit(X, np.r_[y[:-1], 2])
    with pytest.raises(ValueError):
        FCDD(architecture=SPEC).fit(X, y, masks=np.zeros((4, 3, 3)))
    with pytest.raises(ConfigurationError):
        FCDD(architecture="no_such_net", epochs=1).fit(X, y)


def test_pixel_loss_with_masks():
    X, y = toy(4)
    masks = np.zeros((8, 8, 8), bool)
    masks[y == 1] = True
    est, _, _ = fitted(loss="fcdd_pixel", epochs=2)
    est.fit(X, y, masks=masks)
    assert "pixel_auc" in est.evaluate(X, y, masks=masks)


def test_save_load_preserves_predictions(tmp_path):
    est, X, y = fitted(normalize=True, epochs=3)
    est.save(tmp_path / "m.ckpt")
    back = FCDD.load(tmp_path / "m.ckpt")
    np.testing.assert_array_equal(back.decision_function(X), est.decision_function(X))
    np.testing.assert_array_equal(back.heatmaps(X), est.heatmaps(X))
    assert back.threshold_ == est.threshold_
    assert back.norm_mean_ == pytest.approx(est.norm_mean_)


def test_same_seed_same_model():
    a, X, _ = fitted(epochs=2, seed=4, anomaly_source="confetti", confetti=ConfettiConfig(1, 2, 1, 3))
    b, _, _ = fitted(epochs=2, seed=4, anomaly_source="confetti", confetti=ConfettiConfig(1, 2, 1, 3))
    assert a.decision_function(X).tobytes() == b.decision_function(X).tobytes()
