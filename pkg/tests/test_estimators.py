import numpy as np
import pytest
from sklearn.base import clone
from sklearn.utils.validation import NotFittedError

from sealpose import SealPoseRegressor
from sealpose.errors import ContractError
from sealpose.metrics import mpjpe
from sealpose.synthdata import GeneratorConfig, make_dataset

SMALL = dict(hidden_width=32, n_blocks=1, epochs=2, batch_size=32, lr_p=1e-3)


@pytest.fixture(scope="module")
def data():
    return make_dataset(GeneratorConfig(n_samples=96, seed=31)), make_dataset(GeneratorConfig(n_samples=32, seed=32))


@pytest.fixture(scope="module")
def fitted(data):
    train, val = data
    return SealPoseRegressor(lossnet="mlp", **SMALL).fit(train.x, train.y, eval_set=(val.x, val.y))


def test_params_and_clone():
    est = SealPoseRegressor(alpha=0.1, mechanism="M1")
    params = est.get_params()
    assert params["alpha"] == 0.1 and params["mechanism"] == "M1"
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(epochs=3)
    assert est.epochs == 3


def test_predict_score_and_energy(fitted, data):
    _, val = data
    pred = fitted.predict(val.x)
    assert pred.shape == (32, 17, 3) and np.all(pred[:, 0] == 0)
    assert fitted.score(val.x, val.y) == pytest.approx(-mpjpe(pred, val.y).mean())
    assert np.array_equal(fitted.predict(val.x.reshape(32, -1)), pred)
    assert fitted.energy(val.x).shape == (32,)
    np.testing.assert_allclose(fitted.energy(val.x), fitted.energy(val.x, pred))
    assert len(fitted.history_) == 2


def test_refine_lowers_energy(fitted, data):
    _, val = data
    refined = fitted.refine(val.x[:4], steps=3)
    assert refined.shape == (4, 17, 3)
    assert fitted.energy(val.x[:4], refined).mean() <= fitted.energy(val.x[:4]).mean()


def test_fit_is_deterministic(data):
    train, _ = data
    a = SealPoseRegressor(**{**SMALL, "epochs": 1}).fit(train.x, train.y)
    b = SealPoseRegressor(**{**SMALL, "epochs": 1}).fit(train.x, train.y)
    assert a.posenet_params_.equals(b.posenet_params_) and a.lossnet_params_.equals(b.lossnet_params_)


def test_baseline_matches_zero_alpha(data):
    train, _ = data
    base = SealPoseRegressor(lossnet="mlp", baseline=True, **SMALL).fit(train.x, train.y)
    zero = SealPoseRegressor(lossnet="mlp", alpha=0.0, **SMALL).fit(train.x, train.y)
    assert base.posenet_params_.equals(zero.posenet_params_)


def test_input_validation(data, fitted):
    train, _ = data
    with pytest.raises(NotFittedError):
        SealPoseRegressor().predict(train.x)
    with pytest.raises(ValueError):
        SealPoseRegressor(**SMALL).fit(train.x, train.y[:10])
    with pytest.raises(ContractError):
        fitted.predict(train.x[:, :5])
    bad = train.x.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        fitted.predict(bad)
    with pytest.raises(ContractError):
        SealPoseRegressor(mechanism="M9").fit(train.x, train.y)
