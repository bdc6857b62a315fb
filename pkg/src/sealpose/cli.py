"""Command-line entry point: ``sealpose <command> [options]``.

Commands: gen-data, train, eval, gbi, sweep, analyze. Settings come from
``--config`` (JSON, see :mod:`sealpose.config`) with command-line flags taking
precedence over file values, which take precedence over defaults. Outputs go
to ``--out``, else ``$SEALPOSE_OUTPUT_ROOT/<command>-<digest>``, else
``runs/<command>-<digest>``; an existing output directory is never
overwritten without ``--force``.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import ExperimentConfig
from .errors import ContractError, NumericError, StructuralError
from .gbi import gbi_refine
from .lossnet import LossNetConfig, energy_values
from .metrics import binned_structure_report, evaluate, fmt, kendall_tau, lse, bsle, lle, ordering_accuracy
from .params import ParamStore
from .posenet import predict
from .preprocessing import PoseScaler
from .skeleton import SkeletonSpec
from .synthdata import PoseDataset, make_dataset
from .trainer import greedy_sweep, run_digest, train_run

log = logging.getLogger("sealpose")

ENV_OUTPUT_ROOT = "SEALPOSE_OUTPUT_ROOT"
TRAIN_FILE, VAL_FILE = "train.dat", "val.dat"
RUN_CONFIG = "config.json"


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        for key in ("seed", "data.seed", "posenet.seed", "lossnet.seed", "train.seed"):
            overrides[key] = args.seed
    for dest, key in getattr(args, "_override_map", {}).items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[key] = value
    return cfg.updated(overrides) if overrides else cfg


def _output_dir(args, cfg: ExperimentConfig, command: str) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        root = os.environ.get(ENV_OUTPUT_ROOT) or cfg.output_dir
        out = Path(root) / f"{command}-{cfg.short_digest()}"
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CliError(f"output directory {out} already exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path: Path, header, rows, digest: str) -> Path:
    buf = io.StringIO()
    buf.write(f"# config_digest={digest}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buf.getvalue())
    return path


def _stamp(path: Path, text: str, digest: str) -> Path:
    path.write_text(text if text.startswith("# config_digest=") else f"# config_digest={digest}\n{text}")
    return path


def _load_dataset(path) -> PoseDataset:
    path = Path(path)
    if path.is_dir():
        raise CliError(f"{path} is a directory; pass a dataset file such as {path / VAL_FILE}")
    if not path.exists():
        raise CliError(f"dataset not found: {path}")
    return PoseDataset.load(path)


class Run:
    """A trained-run directory: config, scaler and tagged checkpoints."""

    def __init__(self, path, tag: str = "best"):
        self.path = Path(path)
        cfg_path = self.path / RUN_CONFIG
        if not cfg_path.exists():
            raise CliError(f"missing run config: expected {cfg_path}")
        self.config = ExperimentConfig.load(cfg_path)
        self.spec = self.config.spec()
        scaler_path = self.path / "scaler.json"
        if not scaler_path.exists():
            raise CliError(f"missing scaler: expected {scaler_path}")
        self.scaler = PoseScaler.from_dict(json.loads(scaler_path.read_text()))
        self.tag = tag
        self._posenet = self._lossnet = None

    def _checkpoint(self, kind: str) -> ParamStore:
        path = self.path / f"{kind}_{self.tag}.bin"
        if not path.exists():
            raise CliError(f"missing checkpoint: expected {path}")
        return ParamStore.load(path)

    @property
    def posenet(self) -> ParamStore:
        if self._posenet is None:
            self._posenet = self._checkpoint("posenet")
        return self._posenet

    @property
    def lossnet(self) -> ParamStore:
        if self._lossnet is None:
            self._lossnet = self._checkpoint("lossnet")
        return self._lossnet

    def predict_mm(self, dataset: PoseDataset) -> np.ndarray:
        return self.scaler.pose_to_mm(predict(self.posenet, self.scaler.transform(dataset.x)))

    def energies(self, dataset: PoseDataset, pose_mm: np.ndarray, config: LossNetConfig | None = None) -> np.ndarray:
        x = self.scaler.transform(dataset.x)
        return energy_values(self.lossnet, config or self.config.lossnet, x, self.scaler.pose_to_units(pose_mm), self.spec)


def _check_joints(spec: SkeletonSpec, dataset: PoseDataset, what: str) -> None:
    if dataset.n_joints != spec.n_joints:
        raise CliError(f"{what} has {dataset.n_joints} joints but the skeleton has {spec.n_joints}")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = _output_dir(args, cfg, "data")
    spec = cfg.spec()
    digest = cfg.digest()
    train = make_dataset(cfg.data, cfg.camera)
    val = make_dataset(cfg.val_generator(), cfg.camera)
    train.save(out / TRAIN_FILE)
    val.save(out / VAL_FILE)
    cfg.save(out / RUN_CONFIG)
    rows = []
    for name, ds in (("train", train), ("val", val)):
        gt_lse = float(np.mean(lse(ds.y, spec))) if len(ds) else float("nan")
        rows.append([name, str(ds.n_joints), str(len(ds)), fmt(gt_lse)])
        print(f"{name}: J={ds.n_joints} n_samples={len(ds)} GT LSE={gt_lse:.2f}")
    _write_csv(out / "summary.csv", ("split", "n_joints", "n_samples", "gt_lse"), rows, digest)
    print(f"wrote {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    spec = cfg.spec()
    data_dir = Path(args.data)
    train = _load_dataset(data_dir / TRAIN_FILE)
    val = _load_dataset(data_dir / VAL_FILE)
    _check_joints(spec, train, "training set")
    _check_joints(spec, val, "validation set")
    if args.baseline:
        cfg = cfg.updated({"train.baseline_mode": True})
    out = _output_dir(args, cfg, "train")
    cfg.save(out / RUN_CONFIG)
    precision = np.float32 if args.float32 else np.float64
    with ad.precision(precision):
        result = train_run(
            train, val, cfg.train_config(), spec, cfg.posenet, cfg.lossnet, out_dir=out, digest=cfg.digest(),
        )
    last = result.history.records[-1] if result.history.records else None
    if last is not None:
        print(f"epoch {last.epoch}: L_F={fmt(last.L_F)} val_mpjpe={fmt(last.val_mpjpe)} val_lse={fmt(last.val_lse)}")
    print(f"wrote {out}")
    return 0


def cmd_eval(args) -> int:
    dataset = _load_dataset(args.dataset)
    if args.stub == "gt":
        cfg = _load_config(args)
        spec = cfg.spec()
        pred = dataset.y.copy()
        run = None
    else:
        if not args.run:
            raise CliError("eval needs --run (or --stub gt)")
        run = Run(args.run, args.checkpoint)
        cfg, spec = run.config, run.spec
        pred = run.predict_mm(dataset)
    _check_joints(spec, dataset, "dataset")
    digest = cfg.digest()
    out = _output_dir(args, cfg, "eval")
    report = evaluate(pred, dataset.y, spec)
    _stamp(out / "metrics.csv", report.to_csv(), digest)
    print(report.to_text(), end="")
    if args.compare:
        other = Run(args.compare, args.checkpoint)
        if other.spec.digest() != spec.digest():
            raise CliError("cannot compare runs trained on different skeletons")
        labels = (args.labels or "a,b").split(",")
        if len(labels) != 2:
            raise CliError("--labels needs two comma-separated names")
        binned = binned_structure_report(pred, other.predict_mm(dataset), dataset.y, spec, n_bins=args.bins, labels=tuple(labels))
        _stamp(out / "binned.csv", binned.to_csv(), digest)
        print(f"binned report: {len(binned.rows)} rows")
    print(f"wrote {out}")
    return 0


def cmd_gbi(args) -> int:
    run = Run(args.run, args.checkpoint)
    cfg = run.config
    overrides = {"gbi.steps": args.steps, "gbi.step_size": args.step_size}
    if args.no_line_search:
        overrides["gbi.line_search"] = False
    if args.raw_poses:
        overrides["gbi.normalize_poses"] = False
    cfg = cfg.updated(overrides)
    dataset = _load_dataset(args.dataset)
    _check_joints(run.spec, dataset, "dataset")
    if args.limit:
        dataset = dataset.subset(np.arange(min(args.limit, len(dataset))))
    out = _output_dir(args, cfg, "gbi")
    x = run.scaler.transform(dataset.x)
    y0 = predict(run.posenet, x)
    traj = gbi_refine(
        run.lossnet, cfg.lossnet, x, y0, run.spec, cfg.gbi,
        gt=run.scaler.pose_to_units(dataset.y), mm_per_unit=run.scaler.mm_per_unit,
        pose_scale=run.scaler.pose_scale_,
    )
    traj.digest = cfg.digest()
    (out / "trajectory.csv").write_text(traj.to_csv())
    print(f"{len(traj)} records; energy {fmt(traj.records[0].energy)} -> {fmt(traj.records[-1].energy)}")
    print(f"wrote {out}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    spec = cfg.spec()
    grid_path = Path(args.grid)
    if not grid_path.exists():
        raise CliError(f"grid file not found: {grid_path}")
    grids = json.loads(grid_path.read_text())
    data_dir = Path(args.data)
    train = _load_dataset(data_dir / TRAIN_FILE)
    val = _load_dataset(data_dir / VAL_FILE)
    _check_joints(spec, train, "training set")
    out = _output_dir(args, cfg, "sweep")
    precision = np.float32 if args.float32 else np.float64
    with ad.precision(precision):
        result = greedy_sweep(grids, train, val, cfg.train_config(), spec, cfg.posenet, cfg.lossnet)
    result.digest = cfg.digest()
    (out / "sweep.csv").write_text(result.to_csv())
    best = cfg.updated({
        "train.lr_p": result.best.lr_p,
        "train.lr_l": result.best.lr_l,
        "objective.alpha": result.best.objective.alpha,
    })
    best.save(out / "best_config.json")
    print(f"best: lr_p={result.best.lr_p} lr_l={result.best.lr_l} alpha={result.best.objective.alpha}")
    print(f"wrote {out}")
    return 0


ANALYZE_COLUMNS = ("metric", "kendall_tau", "ordering_accuracy", "n_samples")


def cmd_analyze(args) -> int:
    dataset = _load_dataset(args.dataset)
    if args.stub_energy == "lse":
        cfg = _load_config(args)
        spec = cfg.spec()
        pred = dataset.y.copy()
        if args.run:
            run = Run(args.run, args.checkpoint)
            cfg, spec = run.config, run.spec
            pred = run.predict_mm(dataset)
        energies = np.asarray(lse(pred, spec), dtype=float)
    else:
        if not args.run:
            raise CliError("analyze needs --run (or --stub-energy lse)")
        run = Run(args.run, args.checkpoint)
        cfg, spec = run.config, run.spec
        pred = run.predict_mm(dataset)
        energies = run.energies(dataset, pred)
    _check_joints(spec, dataset, "dataset")
    out = _output_dir(args, cfg, "analyze")
    structure = {
        "lse": lse(pred, spec),
        "bsle": bsle(pred, dataset.y, spec),
        "lle": lle(pred, dataset.y, spec),
    }
    rows = []
    for name, values in structure.items():
        values = np.asarray(values, dtype=float)
        tau = kendall_tau(energies, values)
        acc = ordering_accuracy(energies, values)
        rows.append([name, fmt(tau), fmt(acc), str(len(values))])
        print(f"{name}: tau={tau:.4f} ordering_accuracy={acc:.2f}%")
    _write_csv(out / "correlation.csv", ANALYZE_COLUMNS, rows, cfg.digest())
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="seed for every component")
    p.add_argument("--force", action="store_true", help="overwrite an existing output directory")


def _overrides(p: argparse.ArgumentParser, spec: dict[str, tuple[str, type, str]]) -> None:
    mapping = {}
    for flag, (key, typ, help_) in spec.items():
        dest = flag.lstrip("-").replace("-", "_")
        kwargs = {"type": typ} if typ is not None else {}
        p.add_argument(flag, dest=dest, help=help_, **kwargs)
        mapping[dest] = key
    p.set_defaults(_override_map=mapping)


TRAIN_FLAGS = {
    "--epochs": ("train.epochs", int, "training epochs"),
    "--batch-size": ("train.batch_size", int, "mini-batch size"),
    "--lr-p": ("train.lr_p", float, "pose-net learning rate"),
    "--lr-l": ("train.lr_l", float, "loss-net learning rate"),
    "--alpha": ("objective.alpha", float, "energy weight in the pose-net loss"),
    "--lossnet": ("lossnet.variant", str.lower, "loss-net variant: mlp or graph"),
    "--mechanism": ("lossnet.mechanism", str.upper, "input mechanism: m1, m2, m3 or m4"),
    "--objective": ("objective.lossnet_objective", str.lower, "loss-net objective: margin or nce"),
    "--negatives": ("objective.K", int, "perturbation negatives per sample"),
    "--window": ("objective.window_w", int, "multi-frame window length"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sealpose", description="Structured energy training for 3D pose lifting.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic train/val datasets")
    _common(p)
    _overrides(p, {
        "--n-samples": ("data.n_samples", int, "training samples"),
        "--val-samples": ("val_samples", int, "validation samples"),
        "--noise": ("data.noise_2d_sigma", float, "2D noise sigma in pixels"),
    })
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a pose-net (and loss-net)")
    _common(p)
    p.add_argument("--data", required=True, help="directory written by gen-data")
    p.add_argument("--baseline", action="store_true", help="MSE-only training, loss-net untouched")
    p.add_argument("--float32", action="store_true", help="single-precision arithmetic (faster)")
    _overrides(p, TRAIN_FLAGS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run on a dataset")
    _common(p)
    p.add_argument("--run", help="training output directory")
    p.add_argument("--checkpoint", default="best", choices=("best", "final"))
    p.add_argument("--dataset", required=True, help="dataset file")
    p.add_argument("--stub", choices=("gt",), help="replace the pose-net with a ground-truth predictor")
    p.add_argument("--compare", help="second run for a binned two-system report")
    p.add_argument("--labels", help="system labels for --compare, e.g. seal,baseline")
    p.add_argument("--bins", type=int, default=5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gbi", help="refine predictions by energy descent")
    _common(p)
    p.add_argument("--run", required=True)
    p.add_argument("--checkpoint", default="best", choices=("best", "final"))
    p.add_argument("--dataset", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--step-size", type=float)
    p.add_argument("--no-line-search", action="store_true")
    p.add_argument("--raw-poses", action="store_true", help="step in model units instead of normalized poses")
    p.add_argument("--limit", type=int, help="use only the first N samples")
    p.set_defaults(func=cmd_gbi)

    p = sub.add_parser("sweep", help="greedy learning-rate / alpha sweep")
    _common(p)
    p.add_argument("--grid", required=True, help='JSON file {"lr_p": [...], "lr_l": [...], "alpha": [...]}')
    p.add_argument("--data", required=True)
    p.add_argument("--float32", action="store_true")
    _overrides(p, {k: v for k, v in TRAIN_FLAGS.items() if k not in ("--lr-p", "--lr-l", "--alpha")})
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="rank correlation between energy and structural errors")
    _common(p)
    p.add_argument("--run")
    p.add_argument("--checkpoint", default="best", choices=("best", "final"))
    p.add_argument("--dataset", required=True)
    p.add_argument("--stub-energy", choices=("lse",), help="use per-sample LSE as the energy")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CliError, ContractError, StructuralError, NumericError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
