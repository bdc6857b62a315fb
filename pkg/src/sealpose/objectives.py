"""Training objectives for the pose-net and the loss-net.

All pose-space distances here are in model units (see
:class:`~sealpose.preprocessing.PoseScaler`); perturbation radii are given
in pixels and converted with ``pixel_scale`` (pixels per normalized input
unit).
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import ContractError, DiagnosticWarning, NumericError
from .lossnet import LossNetConfig, lossnet_energy
from .metrics import mpjpe
from .posenet import posenet_forward
from .skeleton import SkeletonSpec
from .synthdata import CameraModel, project

OBJECTIVES = ("margin", "nce")
SORT_REFERENCES = ("x", "u")
MARGIN_UNITS = ("mm", "model")


@dataclass(frozen=True)
class ObjectiveConfig:
    alpha: float = 5e-3
    lossnet_objective: str = "margin"
    kappa: float = 1.0
    K: int = 0
    R_max: float = 10.0
    window_w: int = 1
    window_weight: float = 1e-3
    n_random_pairs: int = 2
    sort_reference: str = "x"
    margin_units: str = "model"

    def __post_init__(self):
        object.__setattr__(self, "lossnet_objective", str(self.lossnet_objective).lower())

    def check(self) -> "ObjectiveConfig":
        if self.alpha < 0 or self.kappa < 0 or self.K < 0 or self.R_max < 0:
            raise ContractError("alpha, kappa, K and R_max must be non-negative")
        if self.window_w < 1:
            raise ContractError("window_w must be >= 1")
        if self.n_random_pairs < 0 or self.window_weight < 0:
            raise ContractError("n_random_pairs and window_weight must be non-negative")
        if self.lossnet_objective not in OBJECTIVES:
            raise ContractError(f"unknown loss-net objective {self.lossnet_objective!r}")
        if self.margin_units not in MARGIN_UNITS:
            raise ContractError(f"margin_units must be one of {MARGIN_UNITS}")
        if self.sort_reference not in SORT_REFERENCES:
            raise ContractError(f"sort_reference must be one of {SORT_REFERENCES}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ObjectiveConfig":
        return cls(**d).check()


# ---------------------------------------------------------------------------
# pose-net loss


def task_loss(y, y_pred, energy, alpha: float) -> Node:
    """Batch mean of ``sum_j mean_c (y - y_pred)^2 + alpha * energy``."""
    y, y_pred, energy = ad.const(y), ad.const(y_pred), ad.const(energy)
    if y.shape != y_pred.shape:
        raise ContractError(f"shape mismatch: {y.shape} vs {y_pred.shape}")
    diff = y_pred - y
    mse = (diff * diff).mean(axis=-1).sum(axis=-1)
    if energy.shape != mse.shape:
        raise ContractError(f"energy shape {energy.shape} does not match batch shape {mse.shape}")
    return (mse + energy * alpha).mean()


def mpjpe_margin(y, y_tilde):
    """Margin between a target and a prediction: their MPJPE."""
    return mpjpe(y_tilde, y)


# ---------------------------------------------------------------------------
# loss-net base objectives


def margin_loss(e_gt, e_neg, delta) -> Node:
    """Elementwise ``[delta - e_neg + e_gt]_+``."""
    if np.any(np.asarray(delta) < 0):
        raise ContractError("margin must be non-negative")
    return ad.relu(ad.const(delta) - e_neg + e_gt)


def nce_loss(e_gt, e_neg) -> Node:
    """``-log(exp(-e_gt) / (exp(-e_gt) + exp(-e_neg)))``, i.e. softplus(e_gt - e_neg)."""
    return ad.softplus(ad.const(e_gt) - e_neg)


# ---------------------------------------------------------------------------
# negatives


@dataclass
class NegativeSet:
    """Perturbation negatives for one anchor (or a batch of anchors).

    ``poses`` is (..., K, J, 3), ``sort_keys`` (..., K) in pixels, sorted
    ascending along the K axis. ``energies`` is filled in by the caller.
    """

    poses: np.ndarray
    sort_keys: np.ndarray
    eps: np.ndarray
    energies: Node | np.ndarray | None = None

    def __len__(self) -> int:
        return self.sort_keys.shape[-1]


def sample_ball(rng: np.random.Generator, dim: int, radius: float, size=()) -> np.ndarray:
    """Uniform draws from the ``dim``-dimensional L2 ball of ``radius``."""
    size = tuple(np.atleast_1d(size)) if size != () else ()
    direction = rng.normal(size=size + (dim,))
    norms = np.linalg.norm(direction, axis=-1, keepdims=True)
    direction = direction / np.where(norms > 0, norms, 1.0)
    r = radius * rng.uniform(size=size + (1,)) ** (1.0 / dim)
    return direction * r


def sample_perturbation_negatives(
    posenet_params,
    x,
    K: int,
    R_max: float,
    rng: np.random.Generator,
    pixel_scale: float = 1.0,
    reference=None,
) -> NegativeSet:
    """K negatives per anchor from perturbed inputs passed through a frozen pose-net.

    ``x`` is normalized 2D input, (J, 2) or (B, J, 2). ``pixel_scale`` is the
    number of pixels per normalized unit; ``R_max`` and the sort keys are in
    pixels. Sort keys are the mean per-joint distance between ``x + eps`` and
    ``reference`` (default ``x``).
    """
    if K < 1:
        raise ContractError("K must be >= 1")
    if R_max < 0:
        raise ContractError("R_max must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    xb = x[None] if single else x
    b, j, _ = xb.shape
    eps_px = sample_ball(rng, 2 * j, R_max, size=(b, K)).reshape(b, K, j, 2)
    perturbed = xb[:, None] + eps_px / pixel_scale
    frozen = {k: np.asarray(v.value if isinstance(v, Node) else v) for k, v in posenet_params.items()}
    poses = posenet_forward(frozen, perturbed.reshape(b * K, j, 2)).value.reshape(b, K, j, 3)
    ref = xb if reference is None else np.asarray(reference, dtype=np.float64).reshape(xb.shape)
    keys = np.linalg.norm((perturbed - ref[:, None]) * pixel_scale, axis=-1).mean(axis=-1)
    order = np.argsort(keys, axis=-1, kind="stable")
    take = np.take_along_axis
    poses = take(poses, order[..., None, None], axis=1)
    eps_px = take(eps_px, order[..., None, None], axis=1)
    keys = take(keys, order, axis=1)
    if single:
        return NegativeSet(poses[0], keys[0], eps_px[0])
    return NegativeSet(poses, keys, eps_px)


def ordering_pairs(sort_keys: np.ndarray, n_random_pairs: int, rng: np.random.Generator) -> np.ndarray:
    """(i, j) index pairs for one sorted anchor: all adjacent pairs plus random ones.

    ``i`` is always the member with the larger sort key (the later one when
    keys tie).
    """
    k = len(sort_keys)
    pairs = [(i + 1, i) for i in range(k - 1)]
    for _ in range(n_random_pairs):
        a, b = rng.choice(k, size=2, replace=False)
        lo, hi = sorted((int(a), int(b)), key=lambda m: (sort_keys[m], m))
        pairs.append((hi, lo))
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def pair_ordering_loss(neg: NegativeSet, kappa: float, n_random_pairs: int, rng: np.random.Generator) -> Node:
    """Mean of ``[kappa * MPJPE(y_i, y_j) - E_i + E_j]_+`` over compared pairs.

    ``neg`` may hold one anchor ((K, ...) arrays) or a batch ((B, K, ...));
    for a batch the result is the mean over anchors.
    """
    if neg.energies is None:
        raise ContractError("negative set has no energies")
    k = len(neg)
    if k < 2:
        warnings.warn("fewer than two negatives; ordering loss skipped", DiagnosticWarning, stacklevel=2)
        return ad.const(0.0)
    energies = ad.const(neg.energies)
    keys = neg.sort_keys.reshape(-1, k)
    poses = neg.poses.reshape(-1, k, *neg.poses.shape[-2:])
    if np.any(np.diff(keys, axis=-1) < 0):
        raise ContractError("negatives must be sorted by sort key")
    energies = energies.reshape((keys.shape[0], k))
    anchors, first, second = [], [], []
    for a in range(keys.shape[0]):
        pairs = ordering_pairs(keys[a], n_random_pairs, rng)
        anchors.append(np.full(len(pairs), a))
        first.append(pairs[:, 0])
        second.append(pairs[:, 1])
    anchors, first, second = (np.concatenate(v) for v in (anchors, first, second))
    gap = kappa * mpjpe(poses[anchors, first], poses[anchors, second])
    hinge = ad.relu(ad.const(gap) - energies[anchors, first] + energies[anchors, second])
    return hinge.mean()


def select_hard_negative(candidates: Sequence, u, camera: CameraModel) -> int:
    """Index of the candidate (millimetres) whose projection best matches ``u`` (pixels).

    Candidates that cannot be projected are skipped with a warning; ties go
    to the lowest index.
    """
    if len(candidates) == 0:
        raise ContractError("no candidates")
    u = np.asarray(u, dtype=np.float64)
    best, best_err = -1, np.inf
    for k, cand in enumerate(candidates):
        try:
            err = mpjpe(project(camera, cand), u)
        except NumericError as exc:
            warnings.warn(f"candidate {k} excluded: {exc}", DiagnosticWarning, stacklevel=2)
            continue
        if err < best_err:
            best, best_err = k, err
    if best < 0:
        raise NumericError("every candidate failed to project")
    return best


# ---------------------------------------------------------------------------
# multi-frame pairing


def window_pair_loss(energies, poses, t: int, s: int, w: int, kappa: float) -> Node:
    """``[kappa * MPJPE(mean pose over [t, t+w), over [s, s+w)) - |mean energy gap|]_+``.

    ``energies`` is a per-frame (T,) node or array, ``poses`` (T, J, 3).
    """
    energies = ad.const(energies)
    poses = np.asarray(poses, dtype=np.float64)
    n = poses.shape[0]
    if energies.shape != (n,):
        raise ContractError(f"expected {n} per-frame energies, got shape {energies.shape}")
    if w < 1 or min(t, s) < 0 or max(t, s) + w > n:
        raise ContractError(f"windows [{t}, {t + w}) and [{s}, {s + w}) do not fit in {n} frames")
    y_t = poses[t : t + w].mean(axis=0)
    y_s = poses[s : s + w].mean(axis=0)
    e_t = energies[t : t + w].mean()
    e_s = energies[s : s + w].mean()
    return ad.relu(kappa * mpjpe(y_t, y_s) - ad.abs_(e_t - e_s))


def nearby_start(t: int, w: int, n_frames: int, rng: np.random.Generator) -> int:
    """A start index drawn from {t-w, ..., t+w} minus {t}, clipped to valid windows."""
    offsets = np.concatenate([np.arange(-w, 0), np.arange(1, w + 1)])
    return int(np.clip(t + rng.choice(offsets), 0, n_frames - w))


# ---------------------------------------------------------------------------
# composite loss-net objective


@dataclass
class LossParts:
    base: float = 0.0
    pair: float = 0.0
    window: float = 0.0
    mean_energy: float = 0.0  # mean energy of the predictions


def lossnet_objective(
    lossnet_params,
    lossnet_config: LossNetConfig,
    spec: SkeletonSpec,
    x,
    y,
    y_tilde,
    config: ObjectiveConfig,
    rng: np.random.Generator | None = None,
    posenet_params=None,
    pixel_scale: float = 1.0,
    u=None,
    frames=None,
    index=None,
    margin_scale: float = 1.0,
) -> tuple[Node, LossParts]:
    """Loss-net objective on a batch.

    ``y_tilde`` must already be detached from the pose-net. Perturbation
    negatives (``config.K > 0``) need ``posenet_params`` and ``rng``; window
    pairs (``config.window_w > 1``) need ``frames`` (normalized 2D input of the
    whole sequence, in frame order) and the batch's ``index`` into it.
    Pose distances in the margin and ordering terms are multiplied by
    ``margin_scale`` (millimetres per model unit when margins are in mm).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    y_tilde = np.asarray(y_tilde.value if isinstance(y_tilde, Node) else y_tilde, dtype=np.float64)
    b = y.shape[0]
    if b == 0:
        raise ContractError("empty batch")

    energies = lossnet_energy(lossnet_params, lossnet_config, np.concatenate([x, x]), np.concatenate([y, y_tilde]), spec)
    e_gt, e_neg = energies[:b], energies[b:]
    if config.lossnet_objective == "margin":
        base = margin_loss(e_gt, e_neg, margin_scale * mpjpe_margin(y, y_tilde)).mean()
    else:
        base = nce_loss(e_gt, e_neg).mean()
    total = base
    parts = LossParts(base=float(base.value), mean_energy=float(e_neg.value.mean()))

    if config.K > 0:
        if posenet_params is None or rng is None:
            raise ContractError("perturbation negatives need posenet_params and rng")
        neg = sample_perturbation_negatives(
            posenet_params, x, config.K, config.R_max, rng, pixel_scale,
            reference=None if config.sort_reference == "x" else u,
        )
        j = x.shape[1]
        x_rep = np.repeat(x, config.K, axis=0)
        neg.energies = lossnet_energy(
            lossnet_params, lossnet_config, x_rep, neg.poses.reshape(b * config.K, j, 3), spec
        ).reshape((b, config.K))
        pair = pair_ordering_loss(neg, config.kappa * margin_scale, config.n_random_pairs, rng)
        total = total + pair
        parts.pair = float(pair.value)

    if config.window_w > 1:
        if frames is None or index is None or posenet_params is None or rng is None:
            raise ContractError("window pairs need frames, index, posenet_params and rng")
        window = _window_term(
            lossnet_params, lossnet_config, spec, frames, np.asarray(index), config, rng, posenet_params, margin_scale
        )
        total = total + window * config.window_weight
        parts.window = float(window.value)
    return total, parts


def _window_term(lossnet_params, lossnet_config, spec, frames, index, config, rng, posenet_params, margin_scale) -> Node:
    frames = np.asarray(frames, dtype=np.float64)
    n, w = len(frames), config.window_w
    if n < w + 1:
        raise ContractError(f"sequence of {n} frames is too short for window {w}")
    frozen = {k: np.asarray(v.value if isinstance(v, Node) else v) for k, v in posenet_params.items()}
    starts = []
    for t in index:
        t = int(min(t, n - w))
        starts.append((t, nearby_start(t, w, n, rng)))
    rows = np.array([[a + o for o in range(w)] + [c + o for o in range(w)] for a, c in starts])
    x_win = frames[rows.ravel()]
    y_win = posenet_forward(frozen, x_win).value
    e_win = lossnet_energy(lossnet_params, lossnet_config, x_win, y_win, spec).reshape((len(starts), 2 * w))
    y_win = y_win.reshape(len(starts), 2 * w, *y_win.shape[1:])
    terms = []
    for a in range(len(starts)):
        terms.append(window_pair_loss(e_win[a], y_win[a], 0, w, w, config.kappa * margin_scale))
    return ad.stack(terms).mean()
