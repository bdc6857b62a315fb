"""Input validation and coordinate normalization shared by the networks."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import ContractError

MM_PER_UNIT = 1000.0


def check_poses(X, n_joints: int | None = None, dim: int = 2, name: str = "X") -> np.ndarray:
    """Return ``X`` as a float64 array of shape (n, J, dim).

    Accepts the flattened (n, J*dim) layout used by scikit-learn pipelines.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2 and (n_joints is None or X.shape[1] == n_joints * dim) and X.shape[1] % dim == 0 and X.shape[1] != dim:
        X = X.reshape(X.shape[0], -1, dim)
    if X.ndim != 3 or X.shape[-1] != dim:
        raise ContractError(f"{name} must have shape (n, J, {dim}) or (n, J*{dim}); got {X.shape}")
    check_array(X.reshape(X.shape[0], -1), ensure_all_finite=True, input_name=name)
    if n_joints is not None and X.shape[1] != n_joints:
        raise ContractError(f"{name} has {X.shape[1]} joints, expected {n_joints}")
    return X


class PoseScaler(TransformerMixin, BaseEstimator):
    """Centre and scale 2D keypoints; convert 3D millimetres to metres.

    The 2D statistics are fitted on training inputs. 3D poses use a fixed
    unit (``mm_per_unit``) so that learning rates and energy weights keep
    their meaning across datasets. When 3D targets (millimetres) are passed
    to ``fit``, their spread in model units is kept as ``pose_scale_``;
    refinement takes its steps in poses divided by this value.
    """

    def __init__(self, mm_per_unit: float = MM_PER_UNIT):
        self.mm_per_unit = mm_per_unit

    def fit(self, X, y=None):
        X = check_poses(X, dim=2)
        self.center_ = X.reshape(-1, 2).mean(axis=0)
        scale = float((X.reshape(-1, 2) - self.center_).std())
        self.scale_ = scale if scale > 0 else 1.0
        self.pose_scale_ = 1.0
        if y is not None:
            spread = float(check_poses(y, n_joints=X.shape[1], dim=3, name="y").std()) / self.mm_per_unit
            self.pose_scale_ = spread if spread > 0 else 1.0
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "center_")
        X = np.asarray(X, dtype=np.float64)
        return (X - self.center_) / self.scale_

    def inverse_transform(self, X) -> np.ndarray:
        check_is_fitted(self, "center_")
        return np.asarray(X, dtype=np.float64) * self.scale_ + self.center_

    def pose_to_units(self, Y) -> np.ndarray:
        return np.asarray(Y, dtype=np.float64) / self.mm_per_unit

    def pose_to_mm(self, Y) -> np.ndarray:
        return np.asarray(Y, dtype=np.float64) * self.mm_per_unit

    def pixels_to_units(self, pixels: float) -> float:
        """Convert a 2D distance in pixels to normalized input units."""
        check_is_fitted(self, "center_")
        return pixels / self.scale_

    def to_dict(self) -> dict:
        return {
            "center": [float(c) for c in self.center_],
            "scale": self.scale_,
            "pose_scale": self.pose_scale_,
            "mm_per_unit": self.mm_per_unit,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PoseScaler":
        scaler = cls(d.get("mm_per_unit", MM_PER_UNIT))
        scaler.center_ = np.asarray(d["center"], dtype=np.float64)
        scaler.scale_ = float(d["scale"])
        scaler.pose_scale_ = float(d.get("pose_scale", 1.0))
        return scaler
