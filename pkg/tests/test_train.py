import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fcdd.data import ConfettiConfig, Dataset, Sample
from fcdd.errors import ConfigurationError, NumericError, UsageError
from fcdd.evaluation import roc_auc
from fcdd.loss import anomaly_score, heatmap
from fcdd.model import ArchitectureSpec, bn, build, conv, load_model, lrelu, maxpool
from fcdd.numerics import checkpoint
from fcdd.train import (
    OptimizerConfig,
    TrainConfig,
    TrainLog,
    adam_step,
    schedule_lr,
    sgd_nesterov_step,
    train,
)

SMALL_CONFETTI = ConfettiConfig(1, 2, 1, 3, "random")
SPEC = ArchitectureSpec((conv(1, 4, 3, 1, 1, bias=False), bn(), lrelu(), maxpool(2), conv(4, 1, 1)), (1, 8, 8))


def toy_data(n=8):
    """Nominal all-zero images and anomalous all-one images."""
    return Dataset([Sample(np.zeros((1, 8, 8)), 0) for _ in range(n)] + [Sample(np.ones((1, 8, 8)), 1) for _ in range(n)])


def texture_like(n=12, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset([Sample(rng.random((1, 8, 8)).astype(np.float32) * 0.5, 0) for _ in range(n)])


# optimizer steps ----------------------------------------------------------------------------

@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(1e-4, 1))
def test_sgd_without_momentum_is_plain_gradient_step(theta, g, lr):
    p = [np.array([theta])]
    sgd_nesterov_step(p, [np.array([g])], {}, lr, 0.0, 0.0)
    assert p[0][0] == pytest.approx(theta - lr * g)


def test_zero_gradient_leaves_parameters():
    for step in (lambda p, s: sgd_nesterov_step(p, [np.zeros(3)], s, 0.1, 0.9, 0.0),
                 lambda p, s: adam_step(p, [np.zeros(3)], s, 0.1)):
        p = [np.array([1.0, -2.0, 3.0])]
        state = {}
        for _ in range(5):
            step(p, state)
        np.testing.assert_array_equal(p[0], [1.0, -2.0, 3.0])


def test_sgd_quadratic_decreases_monotonically():
    # lr small enough that momentum 0.9 stays overdamped on this curvature
    p, state = [np.array([3.0])], {}
    values = []
    for _ in range(100):
        sgd_nesterov_step(p, [p[0].copy()], state, 1e-3, 0.9)
        values.append(0.5 * p[0][0] ** 2)
    assert all(b < a for a, b in zip(values, values[1:]))


def test_adam_first_step_size_is_lr():
    p = [np.array([0.0, 0.0])]
    adam_step(p, [np.array([0.3, -2.0])], {}, 0.01)
    np.testing.assert_allclose(np.abs(p[0]), 0.01, rtol=1e-6)


def test_adam_quadratic_converges():
    p, state = [np.array([1.0])], {}
    for _ in range(500):
        adam_step(p, [p[0].copy()], state, 0.05)
    assert abs(p[0][0]) < 1e-3


@pytest.mark.parametrize("decoupled", [True, False])
def test_weight_decay_with_zero_lr_is_noop(decoupled):
    p = [np.array([1.0, 2.0])]
    adam_step(p, [np.array([0.1, 0.1])], {}, 0.0, weight_decay=0.5, decoupled=decoupled)
    sgd_nesterov_step(p, [np.array([0.1, 0.1])], {}, 0.0, 0.9, weight_decay=0.5)
    np.testing.assert_array_equal(p[0], [1.0, 2.0])


def test_step_rejects_shape_mismatch():
    with pytest.raises(UsageError):
        sgd_nesterov_step([np.zeros(2)], [np.zeros(3)], {}, 0.1, 0.9)


def test_schedules():
    exp = OptimizerConfig(lr=0.1, gamma=0.98)
    assert schedule_lr(0, exp) == 0.1
    assert schedule_lr(2, exp) == pytest.approx(0.1 * 0.9604)
    ms = OptimizerConfig(lr=0.1, schedule="milestones", milestones=(400, 500))
    assert schedule_lr(450, ms) == pytest.approx(0.01)
    assert schedule_lr(399, ms) == 0.1
    assert schedule_lr(500, ms) == pytest.approx(0.001)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        OptimizerConfig(lr=0)
    with pytest.raises(ConfigurationError):
        OptimizerConfig(momentum=1.0)
    with pytest.raises(ConfigurationError):
        OptimizerConfig(betas=(0.9, 1.0))
    with pytest.raises(ConfigurationError):
        OptimizerConfig(family="rmsprop")
    with pytest.raises(ConfigurationError):
        TrainConfig(loss="mse")
    with pytest.raises(ConfigurationError):
        TrainConfig(batch_size=0)


# training loop --------------------------------------------------------------------------------

def test_zero_epochs_returns_initial_model():
    model = build(SPEC, 0)
    before = model.state_dict()
    model, log = train(model, toy_data(), None, TrainConfig(epochs=0, anomaly_source="none"))
    assert log.records == []
    for k, v in model.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


@pytest.mark.parametrize("family", ["sgd_nesterov", "adam"])
def test_toy_separable_training(family):
    model, log = train(
        build(SPEC, 0), toy_data(), None,
        TrainConfig(epochs=50, batch_size=8, anomaly_source="none"), OptimizerConfig(family=family, lr=0.01),
    )
    assert log.losses[-1] <= 0.1 * log.losses[0]
    data = toy_data()
    scores = anomaly_score(heatmap(model.forward(data.images(np.float32))))
    assert roc_auc(scores, data.labels()) == 1.0


@pytest.mark.parametrize("loss", ["fcdd", "hsc", "fcdd_pixel"])
def test_training_is_deterministic(loss):
    cfg = TrainConfig(epochs=2, batch_size=4, loss=loss, anomaly_source="confetti", confetti=SMALL_CONFETTI, seed=7)
    runs = [train(build(SPEC, 1), texture_like(), None, cfg) for _ in range(2)]
    assert runs[0][1].records == runs[1][1].records
    for k, v in runs[0][0].state_dict().items():
        assert v.tobytes() == runs[1][0].state_dict()[k].tobytes()


def test_outlier_exposure_source():
    oe = Dataset([Sample(np.ones((1, 8, 8)), 1) for _ in range(3)])
    _, log = train(build(SPEC, 0), texture_like(), oe, TrainConfig(epochs=2, batch_size=4))
    assert len(log.records) == 2
    with pytest.raises(ConfigurationError):
        train(build(SPEC, 0), texture_like(), None, TrainConfig(epochs=1, anomaly_source="oe"))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_writes_diagnostic_checkpoint(tmp_path):
    with pytest.raises(NumericError):
        train(build(SPEC, 0), toy_data(), None, TrainConfig(epochs=3, batch_size=8, anomaly_source="none"),
              OptimizerConfig(lr=1e30), out_dir=tmp_path)
    assert (tmp_path / "diverged.ckpt").exists()


def test_checkpoints_and_resume_match_uninterrupted_run(tmp_path):
    cfg = dict(batch_size=4, anomaly_source="confetti", confetti=SMALL_CONFETTI, seed=3,
               checkpoint_every=2)
    full, full_log = train(build(SPEC, 2), texture_like(), None, TrainConfig(epochs=4, **cfg), out_dir=tmp_path / "a")
    train(build(SPEC, 2), texture_like(), None, TrainConfig(epochs=2, **cfg), out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "epoch_0002.ckpt").exists() and (tmp_path / "a" / "epoch_0004.ckpt").exists()
    resumed, log = train(build(SPEC, 9), texture_like(), None, TrainConfig(epochs=4, **cfg),
                         out_dir=tmp_path / "c", resume_from=tmp_path / "b" / "model.ckpt")
    assert log.records == full_log.records
    for k, v in full.state_dict().items():
        assert v.tobytes() == resumed.state_dict()[k].tobytes()
    saved, _ = load_model(tmp_path / "a" / "model.ckpt")
    assert saved.state_dict()["0.weight"].tobytes() == full.state_dict()["0.weight"].tobytes()
    assert TrainLog.from_csv(tmp_path / "a" / "train_log.csv").records == full_log.records
    assert checkpoint.load(tmp_path / "a" / "model.ckpt")["meta/epoch"][0] == 4


def test_semi_supervised_pixel_training_with_masks():
    mask = np.zeros((8, 8), bool)
    mask[2:5, 2:5] = True
    img = np.zeros((1, 8, 8))
    img[0, mask] = 1.0
    data = texture_like() + Dataset([Sample(img, 1, mask)])
    _, log = train(build(SPEC, 0), data, None, TrainConfig(epochs=2, batch_size=4, loss="fcdd_pixel",
                                                           labeled_repeat=3, anomaly_source="none"))
    assert np.all(np.isfinite(log.losses))
