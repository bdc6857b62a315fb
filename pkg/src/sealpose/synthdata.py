"""Forward-kinematics pose generator, pinhole camera and dataset files.

Coordinates follow the camera convention: x right, y down, z away from the
camera. Poses are root-relative in millimetres; the root sits at depth
``subject_depth`` in front of the camera.

Dataset file layout (little-endian)::

    magic      8 bytes  b"SEALDAT\\x00"
    version    uint32
    J          uint32
    n_samples  uint64
    camera     4 x float64  focal, cx, cy, subject_depth
    digest     32 bytes     sha256 of the generator config JSON
    records    n x: frame_index uint64, u (J*2 f8), x (J*2 f8), y (J*3 f8)
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ContractError, NumericError
from .skeleton import SkeletonSpec, ensure_valid, get_skeleton

MAGIC = b"SEALDAT\x00"
FORMAT_VERSION = 1

# mm, Human3.6M-like proportions; keyed by segment index of the built-in skeleton
H36M_BONE_LENGTHS = (132.0, 442.0, 454.0, 132.0, 442.0, 454.0, 233.0, 257.0, 121.0, 115.0,
                     151.0, 278.0, 251.0, 151.0, 278.0, 251.0)  # fmt: skip

# rest direction of each segment, expressed in its parent joint's frame
H36M_REST_DIRECTIONS = (
    (-1, 0, 0), (0, 1, 0), (0, 1, 0),
    (1, 0, 0), (0, 1, 0), (0, 1, 0),
    (0, -1, 0), (0, -1, 0), (0, -1, 0), (0, -1, 0),
    (1, 0, 0), (0, 1, 0), (0, 1, 0),
    (-1, 0, 0), (0, 1, 0), (0, 1, 0),
)  # fmt: skip

# per-joint (min, max) Euler angles in radians for rotations about x, y, z;
# a joint's rotation moves every segment hanging below it
_R = {
    0: ((-0.15, 0.15), (-np.pi, np.pi), (-0.15, 0.15)),   # root orientation, yaw free
    1: ((-1.6, 0.4), (-0.3, 0.3), (-0.5, 0.2)),           # right hip
    2: ((0.0, 1.8), (0.0, 0.0), (0.0, 0.0)),              # right knee
    4: ((-1.6, 0.4), (-0.3, 0.3), (-0.2, 0.5)),           # left hip
    5: ((0.0, 1.8), (0.0, 0.0), (0.0, 0.0)),              # left knee
    7: ((-0.3, 0.5), (-0.4, 0.4), (-0.2, 0.2)),           # spine
    8: ((-0.2, 0.2), (-0.2, 0.2), (-0.1, 0.1)),           # thorax
    9: ((-0.3, 0.3), (-0.5, 0.5), (-0.2, 0.2)),           # neck
    11: ((-2.5, 1.0), (-0.6, 0.6), (-1.4, 0.2)),          # left shoulder
    12: ((-2.2, 0.0), (0.0, 0.0), (0.0, 0.0)),            # left elbow
    14: ((-2.5, 1.0), (-0.6, 0.6), (-0.2, 1.4)),          # right shoulder
    15: ((-2.2, 0.0), (0.0, 0.0), (0.0, 0.0)),            # right elbow
}  # fmt: skip


def default_angle_ranges(n_joints: int = 17) -> np.ndarray:
    ranges = np.zeros((n_joints, 3, 2))
    for j, r in _R.items():
        if j < n_joints:
            ranges[j] = r
    return ranges


@dataclass(frozen=True)
class CameraModel:
    focal: float = 1000.0
    principal_point: tuple[float, float] = (500.0, 500.0)
    subject_depth: float = 4500.0

    def __post_init__(self):
        if self.focal <= 0:
            raise ContractError("focal length must be positive")
        object.__setattr__(self, "principal_point", tuple(float(c) for c in self.principal_point))

    def to_dict(self) -> dict:
        return {"focal": self.focal, "principal_point": list(self.principal_point), "subject_depth": self.subject_depth}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(float(d["focal"]), tuple(d["principal_point"]), float(d["subject_depth"]))


def project(camera: CameraModel, pose) -> np.ndarray:
    """Pinhole projection of root-relative poses (..., J, 3) to pixels (..., J, 2)."""
    pose = np.asarray(pose, dtype=np.float64)
    depth = camera.subject_depth + pose[..., 2]
    if np.any(depth <= 0):
        raise NumericError("joint at non-positive depth cannot be projected")
    pp = np.asarray(camera.principal_point)
    return pp + camera.focal * pose[..., :2] / depth[..., None]


@dataclass
class GeneratorConfig:
    """Settings for :func:`make_dataset`.

    ``bone_lengths`` must be mirrored across every symmetry pair so that the
    ground truth has zero limb-symmetry error.
    """

    skeleton: str = "h36m17"
    bone_lengths: tuple[float, ...] = H36M_BONE_LENGTHS
    rest_directions: tuple[tuple[float, float, float], ...] = H36M_REST_DIRECTIONS
    joint_angle_ranges: np.ndarray | None = None
    noise_2d_sigma: float = 2.0
    n_samples: int = 5000
    keyframe_every: int = 10
    seed: int = 0

    def spec(self) -> SkeletonSpec:
        return ensure_valid(get_skeleton(self.skeleton))

    def angle_ranges(self) -> np.ndarray:
        if self.joint_angle_ranges is None:
            return default_angle_ranges(self.spec().n_joints)
        return np.asarray(self.joint_angle_ranges, dtype=np.float64)

    def check(self) -> SkeletonSpec:
        spec = self.spec()
        lengths = np.asarray(self.bone_lengths, dtype=np.float64)
        if lengths.shape != (spec.n_segments,):
            raise ContractError(f"need {spec.n_segments} bone lengths, got {lengths.shape}")
        if np.any(lengths <= 0):
            raise ContractError("bone lengths must be positive")
        for left, right in spec.symmetry_pairs:
            if lengths[left] != lengths[right]:
                raise ContractError(f"segments {left} and {right} form a symmetry pair but differ in length")
        if np.asarray(self.rest_directions).shape != (spec.n_segments, 3):
            raise ContractError("need one 3-vector rest direction per segment")
        if self.angle_ranges().shape != (spec.n_joints, 3, 2):
            raise ContractError("joint_angle_ranges must have shape (J, 3, 2)")
        if self.noise_2d_sigma < 0 or self.n_samples < 0 or self.keyframe_every < 1:
            raise ContractError("noise, sample count and keyframe spacing must be non-negative")
        return spec

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bone_lengths"] = [float(v) for v in self.bone_lengths]
        d["rest_directions"] = [list(map(float, v)) for v in self.rest_directions]
        d["joint_angle_ranges"] = None if self.joint_angle_ranges is None else np.asarray(self.joint_angle_ranges).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        d["bone_lengths"] = tuple(d.get("bone_lengths", H36M_BONE_LENGTHS))
        d["rest_directions"] = tuple(tuple(v) for v in d.get("rest_directions", H36M_REST_DIRECTIONS))
        if d.get("joint_angle_ranges") is not None:
            d["joint_angle_ranges"] = np.asarray(d["joint_angle_ranges"], dtype=np.float64)
        return cls(**d)

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()


def euler_to_matrix(angles: np.ndarray) -> np.ndarray:
    """Rotation matrices R = Rz @ Ry @ Rx for angles (..., 3) in radians."""
    ax, ay, az = angles[..., 0], angles[..., 1], angles[..., 2]
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    zero, one = np.zeros_like(ax), np.ones_like(ax)
    rx = np.stack([one, zero, zero, zero, cx, -sx, zero, sx, cx], -1).reshape(*ax.shape, 3, 3)
    ry = np.stack([cy, zero, sy, zero, one, zero, -sy, zero, cy], -1).reshape(*ax.shape, 3, 3)
    rz = np.stack([cz, -sz, zero, sz, cz, zero, zero, zero, one], -1).reshape(*ax.shape, 3, 3)
    return rz @ ry @ rx


def forward_kinematics(angles: np.ndarray, config: GeneratorConfig, spec: SkeletonSpec | None = None) -> np.ndarray:
    """Joint positions (n, J, 3) from joint angles (n, J, 3)."""
    spec = spec or config.spec()
    n = angles.shape[0]
    local = euler_to_matrix(angles)
    offsets = np.asarray(config.bone_lengths)[:, None] * _unit(np.asarray(config.rest_directions, dtype=np.float64))
    seg_of_child = {c: k for k, (_, c) in enumerate(spec.edges)}
    parents = spec.parents()

    glob = np.empty((n, spec.n_joints, 3, 3))
    pos = np.zeros((n, spec.n_joints, 3))
    for j in spec.topological_order():
        p = parents[j]
        if p < 0:
            glob[:, j] = local[:, j]
            continue
        pos[:, j] = pos[:, p] + glob[:, p] @ offsets[seg_of_child[j]]
        glob[:, j] = glob[:, p] @ local[:, j]
    return pos


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _sample_angles(ranges: np.ndarray, rng: np.random.Generator, size: int) -> np.ndarray:
    lo, hi = ranges[..., 0], ranges[..., 1]
    return lo + (hi - lo) * rng.random((size, *lo.shape))


def generate_pose(config: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    """One root-relative pose (J, 3) with angles drawn uniformly from the configured ranges."""
    spec = config.check()
    angles = _sample_angles(config.angle_ranges(), rng, 1)
    return forward_kinematics(angles, config, spec)[0]


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    u: np.ndarray
    y: np.ndarray
    frame_index: int


@dataclass
class PoseDataset:
    """Paired 2D inputs and 3D targets stored as stacked arrays.

    ``x`` (n, J, 2) are observed pixels, ``u`` (n, J, 2) the clean
    projections, ``y`` (n, J, 3) root-relative millimetres.
    """

    x: np.ndarray
    u: np.ndarray
    y: np.ndarray
    frame_index: np.ndarray
    camera: CameraModel = field(default_factory=CameraModel)
    config_digest: bytes = b"\x00" * 32

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.x[i], self.u[i], self.y[i], int(self.frame_index[i]))

    def __iter__(self) -> Iterator[Sample]:
        return (self[i] for i in range(len(self)))

    @property
    def n_joints(self) -> int:
        return self.y.shape[1]

    def subset(self, idx) -> "PoseDataset":
        idx = np.asarray(idx)
        return PoseDataset(self.x[idx], self.u[idx], self.y[idx], self.frame_index[idx], self.camera, self.config_digest)

    def equals(self, other: "PoseDataset") -> bool:
        return self.to_bytes() == other.to_bytes()

    # -- binary format -----------------------------------------------------

    def to_bytes(self) -> bytes:
        n, j = self.y.shape[:2]
        cam = self.camera
        header = MAGIC + struct.pack(
            "<IIQ4d", FORMAT_VERSION, j, n, cam.focal, *cam.principal_point, cam.subject_depth
        ) + self.config_digest
        rec = np.zeros(n, dtype=[("f", "<u8"), ("u", "<f8", (j * 2,)), ("x", "<f8", (j * 2,)), ("y", "<f8", (j * 3,))])
        rec["f"] = self.frame_index
        rec["u"] = self.u.reshape(n, -1)
        rec["x"] = self.x.reshape(n, -1)
        rec["y"] = self.y.reshape(n, -1)
        return header + rec.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "PoseDataset":
        if data[:8] != MAGIC:
            raise ContractError("not a pose dataset file (bad magic)")
        version, j, n, focal, cx, cy, depth = struct.unpack_from("<IIQ4d", data, 8)
        if version != FORMAT_VERSION:
            raise ContractError(f"unsupported dataset version {version}")
        pos = 8 + struct.calcsize("<IIQ4d")
        digest = data[pos : pos + 32]
        pos += 32
        dtype = np.dtype([("f", "<u8"), ("u", "<f8", (j * 2,)), ("x", "<f8", (j * 2,)), ("y", "<f8", (j * 3,))])
        if len(data) - pos != n * dtype.itemsize:
            raise ContractError("dataset payload size does not match header")
        rec = np.frombuffer(data, dtype=dtype, offset=pos, count=n)
        return cls(
            x=rec["x"].reshape(n, j, 2).astype(np.float64),
            u=rec["u"].reshape(n, j, 2).astype(np.float64),
            y=rec["y"].reshape(n, j, 3).astype(np.float64),
            frame_index=rec["f"].astype(np.int64),
            camera=CameraModel(focal, (cx, cy), depth),
            config_digest=bytes(digest),
        )

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "PoseDataset":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"dataset not found: {path}")
        return cls.from_bytes(path.read_bytes())

    def export_text(self, path) -> Path:
        """One sample per line: frame_index, u (J*2), x (J*2), y (J*3), space separated."""
        path = Path(path)
        n = len(self)
        with path.open("w") as fh:
            fh.write(f"# frame_index u[{self.n_joints}x2] x[{self.n_joints}x2] y[{self.n_joints}x3]\n")
            for i in range(n):
                values = np.concatenate([self.u[i].ravel(), self.x[i].ravel(), self.y[i].ravel()])
                fh.write(str(int(self.frame_index[i])) + " " + " ".join(format(v, ".17g") for v in values) + "\n")
        return path


def make_dataset(config: GeneratorConfig, camera: CameraModel | None = None) -> PoseDataset:
    """Generate ``config.n_samples`` consecutive frames.

    Joint angles are drawn at keyframes every ``keyframe_every`` frames and
    linearly interpolated in between, so neighbouring frames are correlated.
    """
    camera = camera or CameraModel()
    spec = config.check()
    n = config.n_samples
    rng = np.random.default_rng(config.seed)
    n_keys = n // config.keyframe_every + 2
    keys = _sample_angles(config.angle_ranges(), rng, n_keys)
    t = np.arange(n) / config.keyframe_every
    k0 = np.floor(t).astype(int)
    w = (t - k0)[:, None, None]
    angles = (1.0 - w) * keys[k0] + w * keys[k0 + 1]

    y = forward_kinematics(angles, config, spec)
    u = project(camera, y)
    noise = rng.normal(0.0, config.noise_2d_sigma, size=u.shape) if config.noise_2d_sigma > 0 else 0.0
    x = u + noise
    return PoseDataset(x, u, y, np.arange(n, dtype=np.int64), camera, config.digest())
