"""scikit-learn style wrapper around pose-net / loss-net training."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .gbi import GbiConfig, gbi_refine
from .lossnet import LossNetConfig, energy_values
from .metrics import mpjpe
from .objectives import ObjectiveConfig
from .posenet import PoseNetConfig, predict
from .preprocessing import check_poses
from .skeleton import ensure_valid, get_skeleton
from .synthdata import PoseDataset
from .trainer import TrainConfig, train_run


class SealPoseRegressor(RegressorMixin, BaseEstimator):
    """Lift 2D keypoints (pixels) to root-relative 3D poses (millimetres).

    With ``baseline=True`` only the supervised MSE is used; otherwise a
    loss-net is trained alongside and its energy, weighted by ``alpha``, is
    added to the pose-net loss. ``X`` may be (n, J, 2) or (n, 2J) and ``y``
    (n, J, 3) or (n, 3J); predictions are always (n, J, 3).
    """

    def __init__(
        self,
        skeleton="h36m17",
        hidden_width=256,
        n_blocks=2,
        lossnet="graph",
        mechanism="M3",
        alpha=5e-3,
        lr_p=1e-4,
        lr_l=1e-4,
        objective="margin",
        n_negatives=0,
        epochs=20,
        batch_size=64,
        baseline=False,
        float32=False,
        seed=0,
    ):
        self.skeleton = skeleton
        self.hidden_width = hidden_width
        self.n_blocks = n_blocks
        self.lossnet = lossnet
        self.mechanism = mechanism
        self.alpha = alpha
        self.lr_p = lr_p
        self.lr_l = lr_l
        self.objective = objective
        self.n_negatives = n_negatives
        self.epochs = epochs
        self.batch_size = batch_size
        self.baseline = baseline
        self.float32 = float32
        self.seed = seed

    def _configs(self):
        posenet = PoseNetConfig(self.hidden_width, self.n_blocks, seed=self.seed).check()
        lossnet = LossNetConfig(variant=self.lossnet, mechanism=self.mechanism, seed=self.seed).check()
        objective = ObjectiveConfig(alpha=self.alpha, lossnet_objective=self.objective, K=self.n_negatives)
        train = TrainConfig(
            lr_p=self.lr_p, lr_l=self.lr_l, objective=objective, epochs=self.epochs,
            batch_size=self.batch_size, seed=self.seed, baseline_mode=self.baseline,
        ).check()
        return posenet, lossnet, train

    def fit(self, X, y, u=None, eval_set=None):
        """Train on keypoints ``X`` and poses ``y``.

        ``u`` optionally holds noise-free keypoints (used only when sorting
        perturbation negatives by distance to them); ``eval_set`` is an
        ``(X_val, y_val)`` pair scored every epoch to pick the kept weights.
        """
        spec = ensure_valid(get_skeleton(self.skeleton))
        X = check_poses(X, spec.n_joints, 2, "X")
        Y = check_poses(y, spec.n_joints, 3, "y")
        if len(X) != len(Y):
            raise ValueError(f"X has {len(X)} samples but y has {len(Y)}")
        U = X if u is None else check_poses(u, spec.n_joints, 2, "u")
        train = PoseDataset(X, U, Y, np.arange(len(X), dtype=np.int64))
        val = None
        if eval_set is not None:
            Xv = check_poses(eval_set[0], spec.n_joints, 2, "X_val")
            Yv = check_poses(eval_set[1], spec.n_joints, 3, "y_val")
            val = PoseDataset(Xv, Xv, Yv, np.arange(len(Xv), dtype=np.int64))
        posenet_cfg, lossnet_cfg, train_cfg = self._configs()
        with ad.precision(np.float32 if self.float32 else np.float64):
            result = train_run(train, val, train_cfg, spec, posenet_cfg, lossnet_cfg)
        self.spec_ = spec
        self.n_joints_ = spec.n_joints
        self.scaler_ = result.state.scaler
        self.lossnet_config_ = lossnet_cfg
        self.posenet_params_ = result.best_posenet if val is not None else result.state.posenet
        self.lossnet_params_ = result.best_lossnet if val is not None else result.state.lossnet
        self.history_ = result.history
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "posenet_params_")
        X = check_poses(X, self.n_joints_, 2, "X")
        return self.scaler_.pose_to_mm(predict(self.posenet_params_, self.scaler_.transform(X)))

    def score(self, X, y, sample_weight=None) -> float:
        """Negative mean MPJPE in millimetres (higher is better)."""
        Y = check_poses(y, self.n_joints_, 3, "y")
        errors = mpjpe(self.predict(X), Y)
        return -float(np.average(errors, weights=sample_weight))

    def energy(self, X, Y=None) -> np.ndarray:
        """Loss-net energy of (X, Y); Y defaults to the model's own prediction."""
        check_is_fitted(self, "lossnet_params_")
        X = check_poses(X, self.n_joints_, 2, "X")
        Y = self.predict(X) if Y is None else check_poses(Y, self.n_joints_, 3, "Y")
        return energy_values(
            self.lossnet_params_, self.lossnet_config_, self.scaler_.transform(X), self.scaler_.pose_to_units(Y), self.spec_
        )

    def refine(self, X, Y=None, steps=20, step_size=1e-2, line_search=True, normalize_poses=True) -> np.ndarray:
        """Poses after energy-descent refinement, starting from Y or the prediction."""
        check_is_fitted(self, "lossnet_params_")
        X = check_poses(X, self.n_joints_, 2, "X")
        Y = self.predict(X) if Y is None else check_poses(Y, self.n_joints_, 3, "Y")
        traj = gbi_refine(
            self.lossnet_params_, self.lossnet_config_, self.scaler_.transform(X), self.scaler_.pose_to_units(Y),
            self.spec_, GbiConfig(steps, step_size, line_search, record_metrics=False, normalize_poses=normalize_poses),
            pose_scale=self.scaler_.pose_scale_,
        )
        return self.scaler_.pose_to_mm(traj.pose)
