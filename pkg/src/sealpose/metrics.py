"""Pose-error, structural-consistency and rank-correlation metrics.

Pose arrays are (J, 3) for a single pose or (n, J, 3) for a batch; batched
inputs return one value per sample. Aggregates (:func:`evaluate`) average
per-sample values over samples.
"""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import ContractError, DiagnosticWarning, NumericError
from .skeleton import SkeletonSpec, segment_lengths

PCK_THRESHOLD_MM = 150.0
AUC_THRESHOLDS_MM = np.arange(0.0, 151.0, 5.0)
_EPS_LENGTH = 1e-9


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ContractError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.ndim < 2:
        raise ContractError(f"expected (..., J, dim) poses, got {pred.shape}")
    return pred, gt


def _scalar(x):
    return float(x) if np.ndim(x) == 0 else x


def joint_errors(pred, gt) -> np.ndarray:
    pred, gt = _pair(pred, gt)
    return np.linalg.norm(pred - gt, axis=-1)


def mpjpe(pred, gt):
    """Mean Euclidean distance between corresponding joints."""
    return _scalar(joint_errors(pred, gt).mean(axis=-1))


def procrustes_align(pred, gt, allow_reflection: bool = True) -> np.ndarray:
    """Similarity transform of ``pred`` that best matches ``gt`` in least squares."""
    pred, gt = _pair(pred, gt)
    mu_p = pred.mean(axis=-2, keepdims=True)
    mu_g = gt.mean(axis=-2, keepdims=True)
    p0, g0 = pred - mu_p, gt - mu_g
    g_norm = np.sum(g0 * g0, axis=(-2, -1))
    if np.any(g_norm < 1e-18):
        raise NumericError("degenerate ground truth: all joints coincide")
    p_norm = np.sum(p0 * p0, axis=(-2, -1))

    h = np.swapaxes(p0, -1, -2) @ g0
    u, s, vt = np.linalg.svd(h)
    if not allow_reflection:
        d = np.sign(np.linalg.det(u @ vt))
        d = np.where(d == 0, 1.0, d)
        u = u.copy()
        u[..., :, -1] *= d[..., None]
        s = s.copy()
        s[..., -1] *= d
    rot = u @ vt
    scale = s.sum(axis=-1) / np.where(p_norm > 0, p_norm, 1.0)
    return scale[..., None, None] * (p0 @ rot) + mu_g


def p_mpjpe(pred, gt, allow_reflection: bool = True):
    """MPJPE after optimal similarity (Procrustes) alignment of pred onto gt.

    Reflections are permitted by default; pass ``allow_reflection=False`` to
    restrict the alignment to proper rotations.
    """
    aligned = procrustes_align(pred, gt, allow_reflection)
    return mpjpe(aligned, np.asarray(gt, dtype=np.float64))


def pck(pred, gt, threshold_mm: float = PCK_THRESHOLD_MM):
    """Percentage of joints whose error is at most ``threshold_mm``."""
    if threshold_mm < 0:
        raise ContractError("threshold must be non-negative")
    return _scalar(100.0 * (joint_errors(pred, gt) <= threshold_mm).mean(axis=-1))


def auc(pred, gt, thresholds=AUC_THRESHOLDS_MM):
    """Mean PCK over the threshold sweep (0 to 150 mm in 5 mm steps by default)."""
    err = joint_errors(pred, gt)
    curve = [(err <= t).mean(axis=-1) for t in thresholds]
    return _scalar(100.0 * np.mean(curve, axis=0))


def lse(pose, spec: SkeletonSpec):
    """Limb symmetry error in percent; needs no ground truth.

    Pairs whose two segments are both shorter than 1e-9 are skipped with a
    :class:`DiagnosticWarning`.
    """
    if not spec.symmetry_pairs:
        raise ContractError("skeleton has no symmetry pairs")
    pose = np.asarray(pose, dtype=np.float64)
    pairs = np.asarray(spec.symmetry_pairs)
    lengths = segment_lengths(pose, spec)
    left, right = lengths[..., pairs[:, 0]], lengths[..., pairs[:, 1]]
    total = left + right
    valid = np.maximum(left, right) >= _EPS_LENGTH
    if not valid.all():
        warnings.warn(f"{int((~valid).sum())} symmetry pair(s) with zero-length segments skipped", DiagnosticWarning)
    ratio = np.abs(left - right) / np.where(valid, total / 2.0, 1.0)
    per_pair = np.where(valid, 100.0 * ratio, np.nan)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return _scalar(np.nanmean(per_pair, axis=-1))


def bsle(pred, gt, spec: SkeletonSpec, segments=None):
    """Body segment length error in percent over ``segments`` (all by default).

    Segments whose ground-truth length is below 1e-9 are skipped with a
    :class:`DiagnosticWarning`.
    """
    pred, gt = _pair(pred, gt)
    if segments is None:
        segments = range(spec.n_segments)
    segments = list(segments)
    if not segments:
        raise ContractError("segment subset is empty")
    lp = segment_lengths(pred, spec, segments)
    lg = segment_lengths(gt, spec, segments)
    valid = lg >= _EPS_LENGTH
    if not valid.all():
        warnings.warn(f"{int((~valid).sum())} segment(s) with zero ground-truth length skipped", DiagnosticWarning)
    per_seg = np.where(valid, 100.0 * np.abs(lp - lg) / np.where(valid, lg, 1.0), np.nan)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return _scalar(np.nanmean(per_seg, axis=-1))


def lle(pred, gt, spec: SkeletonSpec):
    """Limb length error: BSLE restricted to ``spec.limb_segments``."""
    return bsle(pred, gt, spec, spec.limb_segments)


# ---------------------------------------------------------------------------
# rank statistics


def _pair_counts(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Concordant and discordant pair counts, derived from tau-b and tie counts."""
    n = len(a)
    n0 = n * (n - 1) / 2

    def ties(*cols):
        _, counts = np.unique(np.stack(cols, axis=1), axis=0, return_counts=True)
        return float((counts * (counts - 1) / 2).sum())

    t_a, t_b, t_ab = ties(a), ties(b), ties(a, b)
    untied = n0 - t_a - t_b + t_ab
    denom = np.sqrt((n0 - t_a) * (n0 - t_b))
    if denom == 0:
        return 0.0, 0.0
    tau = stats.kendalltau(a, b, variant="b").statistic
    diff = tau * denom
    return (untied + diff) / 2.0, (untied - diff) / 2.0


def _rank_inputs(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ContractError("rank inputs must have equal length")
    if a.size < 2:
        raise ContractError("rank statistics need at least two values")
    return a, b


def kendall_tau(a, b) -> float:
    """Tie-adjusted Kendall tau-b; 0.0 when either input is constant."""
    a, b = _rank_inputs(a, b)
    tau = stats.kendalltau(a, b, variant="b").statistic
    return 0.0 if np.isnan(tau) else float(tau)


def ordering_accuracy(a, b) -> float:
    """Percentage of untied pairs that ``a`` and ``b`` order the same way."""
    a, b = _rank_inputs(a, b)
    conc, disc = _pair_counts(a, b)
    if conc + disc == 0:
        return float("nan")
    return float(100.0 * conc / (conc + disc))


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    mpjpe: float
    p_mpjpe: float
    pck: float
    auc: float
    lse: float
    bsle: float
    lle: float
    n_samples: int

    COLUMNS = ("mpjpe", "p_mpjpe", "pck", "auc", "lse", "bsle", "lle", "n_samples")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.COLUMNS)
        writer.writerow([fmt(getattr(self, c)) for c in self.COLUMNS])
        return buf.getvalue()

    def to_text(self) -> str:
        width = max(len(c) for c in self.COLUMNS)
        return "".join(f"{c.ljust(width)} : {fmt(getattr(self, c))}\n" for c in self.COLUMNS)


def fmt(x) -> str:
    """Full-precision text for CSV output; empty string for missing values."""
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if np.isnan(x):
        return ""
    return format(x, ".17g")


def evaluate(pred, gt, spec: SkeletonSpec) -> MetricsReport:
    """Per-sample metrics averaged over the batch (poses in millimetres)."""
    pred, gt = _pair(pred, gt)
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    return MetricsReport(
        mpjpe=float(np.mean(mpjpe(pred, gt))),
        p_mpjpe=float(np.mean(p_mpjpe(pred, gt))),
        pck=float(np.mean(pck(pred, gt))),
        auc=float(np.mean(auc(pred, gt))),
        lse=float(np.mean(lse(pred, spec))),
        bsle=float(np.mean(bsle(pred, gt, spec))),
        lle=float(np.mean(lle(pred, gt, spec))),
        n_samples=int(pred.shape[0]),
    )


@dataclass
class BinStats:
    bin_low: float
    bin_high: float
    system: str
    count: int
    lse: float | None
    bsle: float | None
    lle: float | None


@dataclass
class BinnedStructureReport:
    edges: np.ndarray
    rows: list[BinStats] = field(default_factory=list)

    COLUMNS = ("bin_low", "bin_high", "system", "count", "lse", "bsle", "lle")

    def for_system(self, system: str) -> list[BinStats]:
        return [r for r in self.rows if r.system == system]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.COLUMNS)
        for r in self.rows:
            writer.writerow(
                [fmt(r.bin_low), fmt(r.bin_high), r.system, r.count, fmt(r.lse), fmt(r.bsle), fmt(r.lle)]
            )
        return buf.getvalue()


def assign_bins(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Bin index per value; the last bin is closed on the right."""
    idx = np.searchsorted(edges, values, side="right") - 1
    return np.clip(idx, 0, len(edges) - 2)


def binned_structure_report(
    pred_a,
    pred_b,
    gt,
    spec: SkeletonSpec,
    n_bins: int = 5,
    labels: tuple[str, str] = ("a", "b"),
) -> BinnedStructureReport:
    """Structural errors of two systems inside shared P-MPJPE quantile bins."""
    if n_bins < 1:
        raise ContractError("n_bins must be >= 1")
    pred_a, gt = _pair(pred_a, gt)
    pred_b, _ = _pair(pred_b, gt)
    per_system = {}
    for label, pred in zip(labels, (pred_a, pred_b)):
        per_system[label] = (
            np.atleast_1d(p_mpjpe(pred, gt)),
            np.atleast_1d(lse(pred, spec)),
            np.atleast_1d(bsle(pred, gt, spec)),
            np.atleast_1d(lle(pred, gt, spec)),
        )
    union = np.concatenate([v[0] for v in per_system.values()])
    edges = np.quantile(union, np.linspace(0.0, 1.0, n_bins + 1))
    report = BinnedStructureReport(edges=edges)
    for k in range(n_bins):
        for label, (pm, l_, b_, ll_) in per_system.items():
            mask = assign_bins(pm, edges) == k
            count = int(mask.sum())
            means = [float(v[mask].mean()) if count else None for v in (l_, b_, ll_)]
            report.rows.append(BinStats(float(edges[k]), float(edges[k + 1]), label, count, *means))
    return report
