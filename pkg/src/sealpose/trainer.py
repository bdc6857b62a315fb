"""Alternating pose-net / loss-net training and the greedy hyperparameter sweep."""
from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ContractError, NumericError
from .lossnet import LossNetConfig, init_lossnet, lossnet_energy
from .metrics import evaluate, fmt
from .objectives import ObjectiveConfig, lossnet_objective, task_loss
from .optim import AdamState, adam_step
from .params import ParamStore
from .posenet import PoseNetConfig, init_posenet, posenet_forward, predict
from .preprocessing import PoseScaler
from .skeleton import SkeletonSpec
from .synthdata import PoseDataset

log = logging.getLogger(__name__)

ABORT_THRESHOLD = 1e8
HISTORY_COLUMNS = ("epoch", "L_F", "L_E", "mean_energy", "val_mpjpe", "val_pmpjpe", "val_lse", "val_bsle", "val_lle")
SWEEP_COLUMNS = ("lr_p", "lr_l", "alpha", "MPJPE", "LSE", "stage", "status")


class TrainingAborted(NumericError):
    """A loss became non-finite or exploded; ``record`` names the term."""

    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record


@dataclass(frozen=True)
class TrainConfig:
    lr_p: float = 1e-4
    lr_l: float = 1e-4
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    eval_every: int = 1
    baseline_mode: bool = False

    def check(self) -> "TrainConfig":
        if self.lr_p <= 0 or self.lr_l <= 0:
            raise ContractError("learning rates must be positive")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.epochs < 0 or self.eval_every < 1:
            raise ContractError("epochs must be >= 0 and eval_every >= 1")
        self.objective.check()
        return self

    @property
    def alpha(self) -> float:
        return 0.0 if self.baseline_mode else self.objective.alpha

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        d["objective"] = ObjectiveConfig.from_dict(d.get("objective", {}))
        return cls(**d).check()

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# state and records


@dataclass
class TrainState:
    """Everything a step reads or mutates."""

    spec: SkeletonSpec
    scaler: PoseScaler
    posenet: ParamStore
    lossnet: ParamStore
    lossnet_config: LossNetConfig
    adam_p: AdamState
    adam_l: AdamState
    neg_rng: np.random.Generator
    frames: np.ndarray | None = None  # normalized training inputs in frame order, for window pairs

    @classmethod
    def create(
        cls,
        spec: SkeletonSpec,
        scaler: PoseScaler,
        config: TrainConfig,
        posenet_config: PoseNetConfig = PoseNetConfig(),
        lossnet_config: LossNetConfig = LossNetConfig(),
        frames: np.ndarray | None = None,
    ) -> "TrainState":
        posenet = init_posenet(spec.n_joints, posenet_config)
        lossnet = init_lossnet(spec.n_joints, lossnet_config)
        return cls(
            spec, scaler, posenet, lossnet, lossnet_config,
            AdamState.for_params(posenet), AdamState.for_params(lossnet),
            _stream(config.seed, 1), frames,
        )


def _stream(seed: int, k: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), k]))


@dataclass
class StepRecord:
    L_F: float
    L_E: float | None
    mean_energy: float | None


@dataclass
class EpochRecord:
    epoch: int
    L_F: float
    L_E: float | None
    mean_energy: float | None
    val_mpjpe: float | None = None
    val_pmpjpe: float | None = None
    val_lse: float | None = None
    val_bsle: float | None = None
    val_lle: float | None = None
    digest: str = ""

    def row(self) -> list[str]:
        return [str(self.epoch)] + [fmt(getattr(self, c)) for c in HISTORY_COLUMNS[1:]]


@dataclass
class TrainHistory:
    digest: str
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if getattr(r, name) is None else getattr(r, name) for r in self.records], dtype=float)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# config_digest={self.digest}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for r in self.records:
            writer.writerow(r.row())
        return buf.getvalue()

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv())
        return path


def _check_loss(name: str, value: float, context: dict) -> None:
    if not np.isfinite(value) or abs(value) > ABORT_THRESHOLD:
        record = dict(context, term=name, value=value)
        raise TrainingAborted(f"training aborted: {name} = {value!r}", record)


# ---------------------------------------------------------------------------
# one alternating step


def train_step(
    state: TrainState,
    x: np.ndarray,
    y: np.ndarray,
    config: TrainConfig,
    u: np.ndarray | None = None,
    index: np.ndarray | None = None,
) -> StepRecord:
    """One mini-batch of the alternating scheme.

    ``x`` is normalized 2D input and ``y`` the target in model units. The
    order is fixed: predict with the previous pose-net, update the loss-net,
    then update the pose-net against the *updated* loss-net.
    """
    if len(y) == 0:
        raise ContractError("empty batch")
    y_tilde = posenet_forward(state.posenet, x).value

    l_e = mean_energy = None
    if not config.baseline_mode:
        theta = state.lossnet.nodes()
        loss_e, parts = lossnet_objective(
            theta, state.lossnet_config, state.spec, x, y, y_tilde, config.objective,
            rng=state.neg_rng, posenet_params=state.posenet,
            pixel_scale=state.scaler.scale_, u=u, frames=state.frames, index=index,
            margin_scale=state.scaler.mm_per_unit if config.objective.margin_units == "mm" else 1.0,
        )
        l_e = float(loss_e.value)
        _check_loss("L_E", l_e, {})
        grads = ad.backward(loss_e, theta)
        adam_step(state.lossnet, grads, state.adam_l, config.lr_l)
        mean_energy = parts.mean_energy

    phi = state.posenet.nodes()
    y_pred = posenet_forward(phi, x)
    alpha = config.alpha
    if alpha > 0:
        energy = lossnet_energy(state.lossnet, state.lossnet_config, x, y_pred, state.spec)
    else:
        energy = ad.const(np.zeros(len(y)))
    loss_f = task_loss(y, y_pred, energy, alpha)
    l_f = float(loss_f.value)
    _check_loss("L_F", l_f, {"L_E": l_e})
    grads = ad.backward(loss_f, phi)
    adam_step(state.posenet, grads, state.adam_p, config.lr_p)
    return StepRecord(l_f, l_e, mean_energy)


# ---------------------------------------------------------------------------
# full run


@dataclass
class TrainResult:
    history: TrainHistory
    state: TrainState
    best_posenet: ParamStore
    best_lossnet: ParamStore
    best_epoch: int
    aborted: dict | None = None

    @property
    def best_val_mpjpe(self) -> float:
        vals = self.history.column("val_mpjpe")
        vals = vals[np.isfinite(vals)]
        return float(vals.min()) if vals.size else float("nan")

    @property
    def best_val_lse(self) -> float:
        """Validation LSE at the epoch with the lowest MPJPE."""
        mp = self.history.column("val_mpjpe")
        if not np.isfinite(mp).any():
            return float("nan")
        return float(self.history.column("val_lse")[int(np.nanargmin(mp))])


def validate_model(state: TrainState, dataset: PoseDataset):
    pred = state.scaler.pose_to_mm(predict(state.posenet, state.scaler.transform(dataset.x)))
    return evaluate(pred, dataset.y, state.spec)


def run_digest(config: TrainConfig, posenet_config: PoseNetConfig, lossnet_config: LossNetConfig, extra: str = "") -> str:
    payload = json.dumps(
        {"train": config.to_dict(), "posenet": posenet_config.to_dict(), "lossnet": lossnet_config.to_dict(), "extra": extra},
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()


def save_checkpoints(state: TrainState, out_dir, tag: str, posenet: ParamStore | None = None, lossnet: ParamStore | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (posenet or state.posenet).save(out_dir / f"posenet_{tag}.bin")
    (lossnet or state.lossnet).save(out_dir / f"lossnet_{tag}.bin")


def train_run(
    dataset: PoseDataset,
    val_dataset: PoseDataset | None,
    config: TrainConfig,
    spec: SkeletonSpec,
    posenet_config: PoseNetConfig = PoseNetConfig(),
    lossnet_config: LossNetConfig = LossNetConfig(),
    out_dir=None,
    digest: str | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Train for ``config.epochs`` epochs over seeded shuffles of ``dataset``.

    With ``out_dir`` set, writes ``history.csv``, ``scaler.json`` and
    checkpoints tagged ``final`` and ``best`` (best validation MPJPE). On abort
    the partial history is still written and the exception re-raised.
    """
    config.check()
    if len(dataset) == 0:
        raise ContractError("training dataset is empty")
    if dataset.n_joints != spec.n_joints or (val_dataset is not None and val_dataset.n_joints != spec.n_joints):
        raise ContractError("dataset joint count does not match the skeleton")
    digest = digest or run_digest(config, posenet_config, lossnet_config)
    scaler = PoseScaler().fit(dataset.x, dataset.y)
    x_all = scaler.transform(dataset.x)
    y_all = scaler.pose_to_units(dataset.y)
    u_all = scaler.transform(dataset.u)
    order = np.argsort(dataset.frame_index, kind="stable")
    frames = x_all[order] if config.objective.window_w > 1 else None
    position = np.empty(len(order), dtype=np.int64)
    position[order] = np.arange(len(order))

    state = TrainState.create(spec, scaler, config, posenet_config, lossnet_config, frames)
    shuffle_rng = _stream(config.seed, 0)
    history = TrainHistory(digest)
    best = (np.inf, state.posenet.copy(), state.lossnet.copy(), 0)

    def persist():
        if out_dir is None:
            return
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        history.save(out / "history.csv")
        (out / "scaler.json").write_text(json.dumps(scaler.to_dict(), indent=2) + "\n")
        save_checkpoints(state, out, "final")
        save_checkpoints(state, out, "best", best[1], best[2])

    aborted = None
    try:
        for epoch in range(1, config.epochs + 1):
            perm = shuffle_rng.permutation(len(dataset))
            steps = []
            for start in range(0, len(perm), config.batch_size):
                idx = perm[start : start + config.batch_size]
                steps.append(train_step(state, x_all[idx], y_all[idx], config, u=u_all[idx], index=position[idx]))
            rec = EpochRecord(
                epoch=epoch,
                L_F=float(np.mean([s.L_F for s in steps])),
                L_E=None if config.baseline_mode else float(np.mean([s.L_E for s in steps])),
                mean_energy=None if config.baseline_mode else float(np.mean([s.mean_energy for s in steps])),
                digest=digest,
            )
            if val_dataset is not None and (epoch % config.eval_every == 0 or epoch == config.epochs):
                m = validate_model(state, val_dataset)
                rec.val_mpjpe, rec.val_pmpjpe, rec.val_lse, rec.val_bsle, rec.val_lle = (
                    m.mpjpe, m.p_mpjpe, m.lse, m.bsle, m.lle,
                )
                if m.mpjpe < best[0]:
                    best = (m.mpjpe, state.posenet.copy(), state.lossnet.copy(), epoch)
            history.records.append(rec)
            log.info("epoch %d L_F=%.6g L_E=%s val_mpjpe=%s", epoch, rec.L_F, fmt(rec.L_E), fmt(rec.val_mpjpe))
            if on_epoch is not None:
                on_epoch(rec)
    except TrainingAborted as exc:
        aborted = exc.record
        persist()
        raise
    if best[3] == 0:
        best = (best[0], state.posenet.copy(), state.lossnet.copy(), config.epochs)
    persist()
    return TrainResult(history, state, best[1], best[2], best[3], aborted)


# ---------------------------------------------------------------------------
# greedy sweep


@dataclass
class SweepRow:
    lr_p: float
    lr_l: float | None
    alpha: float
    mpjpe: float
    stage: int
    status: str = "ok"
    lse: float = float("nan")

    def row(self) -> list[str]:
        return [fmt(self.lr_p), fmt(self.lr_l), fmt(self.alpha), fmt(self.mpjpe), fmt(self.lse), str(self.stage), self.status]


@dataclass
class SweepResult:
    best: TrainConfig
    rows: list[SweepRow]
    digest: str = ""

    def table(self) -> list[SweepRow]:
        """Rows sorted ascending by MPJPE; failed runs last."""
        return sorted(self.rows, key=lambda r: (r.status != "ok", r.mpjpe if np.isfinite(r.mpjpe) else np.inf))

    def to_csv(self) -> str:
        buf = io.StringIO()
        if self.digest:
            buf.write(f"# config_digest={self.digest}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(SWEEP_COLUMNS)
        for r in self.table():
            writer.writerow(r.row())
        return buf.getvalue()


def greedy_sweep(
    grids: Mapping[str, Sequence[float]],
    dataset: PoseDataset,
    val_dataset: PoseDataset,
    base_config: TrainConfig,
    spec: SkeletonSpec,
    posenet_config: PoseNetConfig = PoseNetConfig(),
    lossnet_config: LossNetConfig = LossNetConfig(),
    runner: Callable[[TrainConfig], float | tuple[float, float]] | None = None,
) -> SweepResult:
    """Three-stage greedy search over (lr_p), (lr_l x alpha), (alpha).

    Stage 2 explores every (lr_l, alpha) pair from the given grids and keeps
    the best lr_l; stage 3 then sweeps alpha. Repeated configurations are run
    once. A run's score is its best validation MPJPE; aborted runs are kept
    in the table with status ``error`` and never win. Each row also reports
    the validation LSE at the selected epoch; it plays no part in selection.
    ``runner`` replaces the training call (useful for tests) and returns
    either the MPJPE or an ``(MPJPE, LSE)`` pair.
    """
    for key in ("lr_p", "lr_l", "alpha"):
        if not grids.get(key):
            raise ContractError(f"grid {key!r} is empty")
    cache: dict[tuple, tuple[float, float, str]] = {}

    def score(cfg: TrainConfig) -> tuple[float, float, str]:
        key = (cfg.lr_p, None if cfg.baseline_mode else cfg.lr_l, cfg.alpha, cfg.baseline_mode)
        if key not in cache:
            try:
                if runner is not None:
                    out = runner(cfg)
                    value, lse_value = (float(out[0]), float(out[1])) if isinstance(out, tuple) else (float(out), float("nan"))
                else:
                    result = train_run(dataset, val_dataset, cfg, spec, posenet_config, lossnet_config)
                    value, lse_value = result.best_val_mpjpe, result.best_val_lse
                cache[key] = (value, lse_value, "ok" if np.isfinite(value) else "error")
            except NumericError as exc:
                log.warning("sweep run failed: %s", exc)
                cache[key] = (float("nan"), float("nan"), "error")
        return cache[key]

    def pick(rows: list[SweepRow]) -> SweepRow | None:
        ok = [r for r in rows if r.status == "ok"]
        return min(ok, key=lambda r: r.mpjpe) if ok else None

    rows: list[SweepRow] = []
    stage1 = []
    for lr_p in grids["lr_p"]:
        cfg = replace(base_config, lr_p=lr_p, baseline_mode=True)
        value, lse_value, status = score(cfg)
        stage1.append(SweepRow(lr_p, None, 0.0, value, 1, status, lse_value))
    rows += stage1
    win1 = pick(stage1)
    if win1 is None:
        raise NumericError("every stage-1 run failed")
    lr_p = win1.lr_p

    def seal(lr_l, alpha):
        obj = replace(base_config.objective, alpha=alpha)
        return replace(base_config, lr_p=lr_p, lr_l=lr_l, objective=obj, baseline_mode=False)

    stage2 = []
    for lr_l, alpha in itertools.product(grids["lr_l"], grids["alpha"]):
        value, lse_value, status = score(seal(lr_l, alpha))
        stage2.append(SweepRow(lr_p, lr_l, alpha, value, 2, status, lse_value))
    rows += stage2
    win2 = pick(stage2)
    if win2 is None:
        raise NumericError("every stage-2 run failed")
    lr_l = win2.lr_l

    stage3 = []
    for alpha in grids["alpha"]:
        value, lse_value, status = score(seal(lr_l, alpha))
        stage3.append(SweepRow(lr_p, lr_l, alpha, value, 3, status, lse_value))
    rows += stage3
    win3 = pick(stage3)
    if win3 is None:
        raise NumericError("every stage-3 run failed")
    digest = hashlib.sha256(json.dumps({"grids": {k: list(v) for k, v in grids.items()}, "base": base_config.to_dict()}, sort_keys=True).encode()).hexdigest()
    return SweepResult(seal(lr_l, win3.alpha), rows, digest)
