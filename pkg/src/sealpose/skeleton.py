"""Skeleton topology: joint tree, segments, symmetry pairs and hop distances."""
from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, StructuralError


@dataclass(frozen=True)
class SkeletonSpec:
    """A tree-shaped skeleton.

    ``edges`` are (parent, child) joint pairs and double as the body segments;
    ``symmetry_pairs`` hold (left_segment, right_segment) indices into
    ``edges``; ``limb_segments`` is the subset of segments used for LLE.
    """

    joint_names: tuple[str, ...]
    edges: tuple[tuple[int, int], ...]
    symmetry_pairs: tuple[tuple[int, int], ...] = ()
    limb_segments: tuple[int, ...] = ()
    root: int = 0
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        object.__setattr__(self, "edges", tuple(tuple(int(i) for i in e) for e in self.edges))
        object.__setattr__(self, "symmetry_pairs", tuple(tuple(int(i) for i in p) for p in self.symmetry_pairs))
        object.__setattr__(self, "limb_segments", tuple(int(i) for i in self.limb_segments))

    @property
    def n_joints(self) -> int:
        return len(self.joint_names)

    @property
    def n_segments(self) -> int:
        return len(self.edges)

    def parents(self) -> np.ndarray:
        """Parent index per joint (-1 for the root). Assumes a valid tree."""
        par = np.full(self.n_joints, -1, dtype=int)
        for p, c in self.edges:
            par[c] = p
        return par

    def topological_order(self) -> list[int]:
        """Joints ordered so that every parent precedes its children."""
        children: dict[int, list[int]] = {j: [] for j in range(self.n_joints)}
        for p, c in self.edges:
            children[p].append(c)
        order, queue = [], deque([self.root])
        while queue:
            j = queue.popleft()
            order.append(j)
            queue.extend(children[j])
        return order

    def to_dict(self) -> dict:
        d = asdict(self)
        d["edges"] = [list(e) for e in self.edges]
        d["symmetry_pairs"] = [list(p) for p in self.symmetry_pairs]
        d["joint_names"] = list(self.joint_names)
        d["limb_segments"] = list(self.limb_segments)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SkeletonSpec":
        return cls(
            joint_names=d["joint_names"],
            edges=d["edges"],
            symmetry_pairs=d.get("symmetry_pairs", ()),
            limb_segments=d.get("limb_segments", ()),
            root=d.get("root", 0),
            name=d.get("name", "custom"),
        )

    def digest(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "SkeletonSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str


def validate(spec: SkeletonSpec) -> Diagnostic | None:
    """Return the first problem found with ``spec``, or None if it is a valid tree."""
    n = spec.n_joints
    if n < 1:
        return Diagnostic("empty", "skeleton has no joints")
    if not 0 <= spec.root < n:
        return Diagnostic("root_out_of_bounds", f"root {spec.root} not in [0, {n})")
    for k, (p, c) in enumerate(spec.edges):
        if not (0 <= p < n and 0 <= c < n):
            return Diagnostic("edge_out_of_bounds", f"edge {k} = ({p}, {c}) references a missing joint")
        if p == c:
            return Diagnostic("self_loop", f"edge {k} connects joint {p} to itself")

    # union-find over undirected edges catches cycles before the count check
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for k, (p, c) in enumerate(spec.edges):
        rp, rc = find(p), find(c)
        if rp == rc:
            return Diagnostic("cycle", f"edge {k} = ({p}, {c}) closes a cycle")
        parent[rp] = rc
    if len(spec.edges) != n - 1:
        return Diagnostic("disconnected", f"{n} joints need {n - 1} edges, got {len(spec.edges)}")

    children = [c for _, c in spec.edges]
    if spec.root in children:
        return Diagnostic("root_has_parent", f"root {spec.root} appears as a child")
    if len(set(children)) != len(children):
        return Diagnostic("multiple_parents", "a joint appears as child of more than one edge")

    m = spec.n_segments
    for k, (left, right) in enumerate(spec.symmetry_pairs):
        if not (0 <= left < m and 0 <= right < m):
            return Diagnostic("symmetry_out_of_bounds", f"symmetry pair {k} = ({left}, {right}) outside [0, {m})")
        if left == right:
            return Diagnostic("symmetry_degenerate", f"symmetry pair {k} uses segment {left} twice")
    for s in spec.limb_segments:
        if not 0 <= s < m:
            return Diagnostic("limb_out_of_bounds", f"limb segment {s} outside [0, {m})")
    return None


def ensure_valid(spec: SkeletonSpec) -> SkeletonSpec:
    problem = validate(spec)
    if problem is not None:
        raise StructuralError(f"{problem.code}: {problem.message}")
    return spec


@dataclass(frozen=True)
class SPDMatrix:
    """Hop distances between joints; ``clamped`` caps them at ``max_distance``."""

    distances: np.ndarray
    max_distance: int = 8

    def clamped(self) -> np.ndarray:
        return np.minimum(self.distances, self.max_distance)


def compute_spd(spec: SkeletonSpec, max_distance: int = 8) -> SPDMatrix:
    """All-pairs hop distance via one breadth-first search per joint."""
    if max_distance < 1:
        raise ContractError("max_distance must be >= 1")
    n = spec.n_joints
    adj: list[list[int]] = [[] for _ in range(n)]
    for p, c in spec.edges:
        if not (0 <= p < n and 0 <= c < n):
            raise StructuralError(f"edge ({p}, {c}) references a missing joint")
        adj[p].append(c)
        adj[c].append(p)
    dist = np.full((n, n), -1, dtype=np.int64)
    for src in range(n):
        dist[src, src] = 0
        queue = deque([src])
        while queue:
            i = queue.popleft()
            for j in adj[i]:
                if dist[src, j] < 0:
                    dist[src, j] = dist[src, i] + 1
                    queue.append(j)
    if (dist < 0).any():
        i, j = np.argwhere(dist < 0)[0]
        raise StructuralError(f"skeleton is disconnected: no path between joints {i} and {j}")
    return SPDMatrix(dist, max_distance)


H36M_JOINTS = (
    "pelvis",
    "r_hip",
    "r_knee",
    "r_ankle",
    "l_hip",
    "l_knee",
    "l_ankle",
    "spine",
    "thorax",
    "neck",
    "head",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
)
H36M_EDGES = (
    (0, 1), (1, 2), (2, 3),
    (0, 4), (4, 5), (5, 6),
    (0, 7), (7, 8), (8, 9), (9, 10),
    (8, 11), (11, 12), (12, 13),
    (8, 14), (14, 15), (15, 16),
)  # fmt: skip


def h36m17() -> SkeletonSpec:
    """The built-in 17-joint skeleton in Human3.6M joint order.

    Symmetry pairs are (left, right) segment indices for hip, thigh, shin,
    clavicle, upper arm and forearm; limb segments are every arm and leg
    segment.
    """
    return SkeletonSpec(
        joint_names=H36M_JOINTS,
        edges=H36M_EDGES,
        symmetry_pairs=((3, 0), (4, 1), (5, 2), (10, 13), (11, 14), (12, 15)),
        limb_segments=(0, 1, 2, 3, 4, 5, 10, 11, 12, 13, 14, 15),
        root=0,
        name="h36m17",
    )


BUILTIN = {"h36m17": h36m17}


def get_skeleton(ref: str | SkeletonSpec) -> SkeletonSpec:
    """Resolve a built-in name or a path to a skeleton JSON file."""
    if isinstance(ref, SkeletonSpec):
        return ref
    if ref in BUILTIN:
        return BUILTIN[ref]()
    return ensure_valid(SkeletonSpec.load(ref))


def segment_vectors(pose: np.ndarray, spec: SkeletonSpec, segments=None) -> np.ndarray:
    """Child-minus-parent vectors for each segment, shape (..., n_segments, dim)."""
    edges = np.asarray(spec.edges)
    if segments is not None:
        edges = edges[np.asarray(segments, dtype=int)]
    return pose[..., edges[:, 1], :] - pose[..., edges[:, 0], :]


def segment_lengths(pose: np.ndarray, spec: SkeletonSpec, segments=None) -> np.ndarray:
    return np.linalg.norm(segment_vectors(pose, spec, segments), axis=-1)
