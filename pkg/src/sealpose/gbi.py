"""Test-time refinement of poses by descending a frozen loss-net's energy."""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DiagnosticWarning, NumericError
from .lossnet import LossNetConfig, lossnet_energy
from .metrics import bsle, fmt, lle, lse, p_mpjpe
from .skeleton import SkeletonSpec

TRAJECTORY_COLUMNS = ("iteration", "energy", "p_mpjpe", "lse", "bsle", "lle")
MAX_HALVINGS = 10


@dataclass(frozen=True)
class GbiConfig:
    steps: int = 20
    step_size: float = 1e-2
    line_search: bool = True
    record_metrics: bool = True
    normalize_poses: bool = True

    def check(self) -> "GbiConfig":
        if self.steps < 0:
            raise ContractError("steps must be >= 0")
        if self.step_size <= 0:
            raise ContractError("step_size must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "GbiConfig":
        return cls(**d).check()


@dataclass
class GbiRecord:
    iteration: int
    energy: float
    p_mpjpe: float | None = None
    lse: float | None = None
    bsle: float | None = None
    lle: float | None = None

    def row(self) -> list[str]:
        return [str(self.iteration)] + [fmt(getattr(self, c)) for c in TRAJECTORY_COLUMNS[1:]]


@dataclass
class GbiTrajectory:
    """Per-iteration batch means plus the final refined poses (model units)."""

    records: list[GbiRecord] = field(default_factory=list)
    pose: np.ndarray | None = None
    energies: np.ndarray | None = None
    truncated: bool = False
    digest: str = ""

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if getattr(r, name) is None else getattr(r, name) for r in self.records], dtype=float)

    def to_csv(self) -> str:
        buf = io.StringIO()
        if self.digest:
            buf.write(f"# config_digest={self.digest}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRAJECTORY_COLUMNS)
        for r in self.records:
            writer.writerow(r.row())
        return buf.getvalue()


def energy_gradient(params, config: LossNetConfig, x, y, spec: SkeletonSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample energies and their gradients with respect to ``y``."""
    y_var = ad.variable(y, name="y")
    energy = lossnet_energy(params, config, x, y_var, spec)
    values = np.array(energy.value)
    ad.backward(energy.sum())
    grad = np.zeros_like(y_var.value) if y_var.grad is None else np.asarray(y_var.grad)
    return values, grad


def _record(k: int, energies, y, gt, spec, mm_per_unit: float, with_metrics: bool) -> GbiRecord:
    rec = GbiRecord(k, float(np.mean(energies)))
    if with_metrics:
        rec.lse = float(np.mean(lse(y, spec)))
        if gt is not None:
            rec.p_mpjpe = float(np.mean(p_mpjpe(y, gt))) * mm_per_unit
            rec.bsle = float(np.mean(bsle(y, gt, spec)))
            rec.lle = float(np.mean(lle(y, gt, spec)))
    return rec


def gbi_refine(
    lossnet_params,
    lossnet_config: LossNetConfig,
    x,
    y0,
    spec: SkeletonSpec,
    config: GbiConfig = GbiConfig(),
    gt=None,
    mm_per_unit: float = 1000.0,
    pose_scale: float = 1.0,
) -> GbiTrajectory:
    """Refine ``y0`` by gradient steps on the energy, keeping ``x`` fixed.

    ``x`` is normalized 2D input and ``y0``/``gt`` are in model units, either
    single poses or batches. With ``line_search`` each sample halves its own
    step (at most ten times) until its energy does not increase; a sample
    whose energy still rises keeps its current pose for that iteration.
    The root joint is reset to the origin after every step. P-MPJPE is
    reported in millimetres.

    With ``normalize_poses`` steps are taken in ``y / pose_scale``, so in
    model units one plain step is ``y - step_size * pose_scale**2 * dE/dy``.
    Otherwise ``pose_scale`` is ignored.
    """
    config.check()
    if not pose_scale > 0:
        raise ContractError("pose_scale must be positive")
    rate = config.step_size * (pose_scale**2 if config.normalize_poses else 1.0)
    params = {k: np.asarray(v) for k, v in lossnet_params.items()}
    x = np.asarray(x, dtype=np.float64)
    y = np.array(y0, dtype=np.float64)
    single = y.ndim == 2
    if single:
        x, y = x[None], y[None]
        gt = None if gt is None else np.asarray(gt, dtype=np.float64)[None]
    if x.shape[:2] != y.shape[:2] or y.shape[1] != spec.n_joints:
        raise ContractError(f"inconsistent shapes x={x.shape} y={y.shape} for {spec.n_joints} joints")
    if gt is not None and np.shape(gt) != y.shape:
        raise ContractError("gt must match y0 in shape")
    root = spec.root
    y[:, root] = 0.0

    traj = GbiTrajectory()
    energies = lossnet_energy(params, lossnet_config, x, y, spec).value
    traj.records.append(_record(0, energies, y, gt, spec, mm_per_unit, config.record_metrics))
    for k in range(1, config.steps + 1):
        try:
            energies, grad = energy_gradient(params, lossnet_config, x, y, spec)
        except NumericError as exc:
            warnings.warn(f"refinement stopped at iteration {k}: {exc}", DiagnosticWarning, stacklevel=2)
            traj.truncated = True
            break
        if not np.all(np.isfinite(grad)):
            warnings.warn(f"refinement stopped at iteration {k}: non-finite gradient", DiagnosticWarning, stacklevel=2)
            traj.truncated = True
            break
        grad[:, root] = 0.0
        step = np.full(len(y), rate)
        candidate = y - step[:, None, None] * grad
        new_e = lossnet_energy(params, lossnet_config, x, candidate, spec).value
        if config.line_search:
            worse = ~(new_e <= energies)
            for _ in range(MAX_HALVINGS):
                if not worse.any():
                    break
                step[worse] *= 0.5
                candidate[worse] = y[worse] - step[worse, None, None] * grad[worse]
                new_e[worse] = lossnet_energy(params, lossnet_config, x[worse], candidate[worse], spec).value
                worse = ~(new_e <= energies)
            candidate[worse] = y[worse]
            new_e[worse] = energies[worse]
        y, energies = candidate, new_e
        traj.records.append(_record(k, energies, y, gt, spec, mm_per_unit, config.record_metrics))

    traj.pose = y[0] if single else y
    traj.energies = energies
    return traj
