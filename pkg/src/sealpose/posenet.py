"""Residual MLP that lifts 2D keypoints to a root-relative 3D pose."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import ContractError
from .params import ParamStore

PREFIX = "posenet."


@dataclass(frozen=True)
class PoseNetConfig:
    hidden_width: int = 256
    n_blocks: int = 2
    init_scale: float | None = None  # None means 1/sqrt(fan_in) per layer
    seed: int = 0

    def check(self) -> "PoseNetConfig":
        if self.hidden_width < 1:
            raise ContractError("hidden_width must be >= 1")
        if self.n_blocks < 0:
            raise ContractError("n_blocks must be >= 0")
        if self.init_scale is not None and self.init_scale < 0:
            raise ContractError("init_scale must be >= 0")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "PoseNetConfig":
        return cls(**d).check()


def _layers(n_joints: int, config: PoseNetConfig) -> list[tuple[str, int, int]]:
    h = config.hidden_width
    layers = [("in", 2 * n_joints, h)]
    for b in range(config.n_blocks):
        layers += [(f"block{b}.fc1", h, h), (f"block{b}.fc2", h, h)]
    layers.append(("out", h, 3 * (n_joints - 1)))
    return layers


def param_count(n_joints: int, hidden_width: int, n_blocks: int) -> int:
    h, j = hidden_width, n_joints
    return 2 * j * h + h + n_blocks * 2 * (h * h + h) + h * 3 * (j - 1) + 3 * (j - 1)


def init_posenet(n_joints: int, config: PoseNetConfig = PoseNetConfig(), store: ParamStore | None = None) -> ParamStore:
    """Create pose-net parameters (weights uniform, biases zero)."""
    config.check()
    if n_joints < 2:
        raise ContractError("pose-net needs at least two joints")
    store = ParamStore(config.seed) if store is None else store
    rng = np.random.default_rng(config.seed)
    for name, fan_in, fan_out in _layers(n_joints, config):
        bound = config.init_scale if config.init_scale is not None else 1.0 / np.sqrt(fan_in)
        store.add(f"{PREFIX}{name}.weight", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        store.add(f"{PREFIX}{name}.bias", np.zeros(fan_out))
    return store


def _n_joints(params: Mapping) -> int:
    return params[PREFIX + "in.weight"].shape[0] // 2


def posenet_forward(params: Mapping[str, Node | np.ndarray], x) -> Node:
    """Map normalized 2D keypoints (B, J, 2) or (J, 2) to poses of matching leading shape.

    ``params`` may hold nodes (for training) or plain arrays. The root joint
    (index 0) of the output is identically zero.
    """
    p = {k: ad.const(v) for k, v in params.items() if k.startswith(PREFIX)}
    x = ad.const(x)
    j = _n_joints({k: v.value for k, v in p.items()})
    if x.ndim not in (2, 3) or x.shape[-2:] != (j, 2):
        raise ContractError(f"pose-net expects input (..., {j}, 2); got {x.shape}")
    single = x.ndim == 2
    flat = x.reshape((1 if single else x.shape[0], 2 * j))

    h = ad.relu(ad.linear(flat, p[PREFIX + "in.weight"], p[PREFIX + "in.bias"]))
    b = 0
    while PREFIX + f"block{b}.fc1.weight" in p:
        r = ad.relu(ad.linear(h, p[PREFIX + f"block{b}.fc1.weight"], p[PREFIX + f"block{b}.fc1.bias"]))
        h = h + ad.linear(r, p[PREFIX + f"block{b}.fc2.weight"], p[PREFIX + f"block{b}.fc2.bias"])
        b += 1
    out = ad.linear(h, p[PREFIX + "out.weight"], p[PREFIX + "out.bias"])
    out = out.reshape((flat.shape[0], j - 1, 3))
    pose = ad.concat([ad.const(np.zeros((flat.shape[0], 1, 3))), out], axis=1)
    return pose.reshape((j, 3)) if single else pose


def predict(params: ParamStore | Mapping[str, np.ndarray], x, batch_size: int = 1024) -> np.ndarray:
    """Plain-array inference in chunks."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return posenet_forward(params, x).value
    parts = [posenet_forward(dict(params.items()), x[i : i + batch_size]).value for i in range(0, len(x), batch_size)]
    return np.concatenate(parts) if parts else np.zeros((0, x.shape[1], 3))
