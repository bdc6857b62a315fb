import numpy as np
import pytest
from sklearn.base import clone

from sealpose.errors import ContractError
from sealpose.preprocessing import PoseScaler, check_poses


def test_check_poses_accepts_flat_layout(rng):
    X = rng.normal(size=(4, 17, 2))
    np.testing.assert_array_equal(check_poses(X.reshape(4, 34), 17, 2), X)


@pytest.mark.parametrize("bad", [np.zeros((3, 17, 3)), np.zeros((3, 16, 2)), np.zeros(5)])
def test_check_poses_rejects_wrong_shapes(bad):
    with pytest.raises(ContractError):
        check_poses(bad, 17, 2)


def test_check_poses_rejects_non_finite():
    X = np.zeros((2, 17, 2))
    X[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        check_poses(X, 17, 2)


def test_scaler_round_trip_and_statistics(rng):
    X = rng.normal(loc=500, scale=80, size=(200, 17, 2))
    scaler = PoseScaler().fit(X)
    Z = scaler.transform(X)
    assert abs(Z.mean()) < 1e-9 and Z.reshape(-1, 2).std() == pytest.approx(1.0, rel=1e-9)
    np.testing.assert_allclose(scaler.inverse_transform(Z), X, rtol=1e-12)
    assert scaler.pixels_to_units(scaler.scale_) == 1.0


def test_scaler_serialization_and_units(rng):
    scaler = PoseScaler().fit(rng.normal(size=(10, 17, 2)))
    back = PoseScaler.from_dict(scaler.to_dict())
    x = rng.normal(size=(3, 17, 2))
    assert back.transform(x).tobytes() == scaler.transform(x).tobytes()
    assert scaler.pose_to_mm(scaler.pose_to_units(np.array([1234.5]))) == pytest.approx(1234.5)


def test_pose_scale_is_the_target_spread_in_model_units(rng):
    X = rng.normal(size=(50, 17, 2))
    Y = rng.normal(scale=300.0, size=(50, 17, 3))
    scaler = PoseScaler().fit(X, Y)
    assert scaler.pose_scale_ == pytest.approx(Y.std() / 1000.0, rel=1e-12)
    assert PoseScaler.from_dict(scaler.to_dict()).pose_scale_ == scaler.pose_scale_
    assert PoseScaler().fit(X).pose_scale_ == 1.0
    legacy = {k: v for k, v in scaler.to_dict().items() if k != "pose_scale"}
    assert PoseScaler.from_dict(legacy).pose_scale_ == 1.0


def test_scaler_is_a_well_behaved_estimator():
    scaler = PoseScaler(mm_per_unit=10.0)
    assert clone(scaler).get_params() == {"mm_per_unit": 10.0}
