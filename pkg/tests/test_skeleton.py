import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sealpose.errors import StructuralError
from sealpose.skeleton import SkeletonSpec, compute_spd, ensure_valid, get_skeleton, validate


def random_tree(rng, n):
    edges = tuple((int(rng.integers(0, c)), c) for c in range(1, n))
    perm = rng.permutation(n)  # relabel so the root is not always joint 0
    edges = tuple((int(perm[p]), int(perm[c])) for p, c in edges)
    return SkeletonSpec(tuple(f"j{i}" for i in range(n)), edges, (), (), int(perm[0]))


def floyd_warshall(n, edges):
    d = np.full((n, n), np.inf)
    np.fill_diagonal(d, 0)
    for p, c in edges:
        d[p, c] = d[c, p] = 1
    for k in range(n):
        d = np.minimum(d, d[:, k : k + 1] + d[k : k + 1, :])
    return d


def chain(n):
    return SkeletonSpec(tuple(map(str, range(n))), tuple((i, i + 1) for i in range(n - 1)), (), (), 0)


def test_spd_matches_floyd_warshall_on_random_trees():
    rng = np.random.default_rng(7)
    for _ in range(50):
        n = int(rng.integers(4, 33))
        spec = random_tree(rng, n)
        assert validate(spec) is None
        np.testing.assert_array_equal(compute_spd(spec).distances, floyd_warshall(n, spec.edges))


def test_pelvis_to_left_wrist_is_five_hops(spec):
    assert compute_spd(spec).distances[0, 13] == 5


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40))
def test_chain_endpoints(n):
    assert compute_spd(chain(n)).distances[0, n - 1] == n - 1


@settings(max_examples=30, deadline=None)
@given(st.integers(4, 30), st.integers(0, 2**31 - 1))
def test_spd_metric_properties(n, seed):
    spec = random_tree(np.random.default_rng(seed), n)
    d = compute_spd(spec).distances
    assert np.array_equal(d, d.T) and np.all(np.diag(d) == 0)
    for p, c in spec.edges:
        assert d[p, c] == 1
    assert np.all(d[:, None, :] <= d[:, :, None] + d[None, :, :])


def test_clamping_caps_long_paths():
    spd = compute_spd(chain(12), max_distance=8)
    assert spd.clamped().max() == 8 and spd.distances.max() == 11


def test_builtin_skeleton_is_valid(spec):
    assert validate(spec) is None
    assert spec.n_joints == 17 and spec.n_segments == 16
    assert set(spec.limb_segments) <= set(range(spec.n_segments))


@pytest.mark.parametrize(
    "edges,pairs,code",
    [
        (((0, 1), (1, 2), (2, 0)), (), "cycle"),
        (((0, 1), (1, 2)), ((0, 2),), "symmetry_out_of_bounds"),
        (((0, 1), (1, 2)), ((1, 1),), "symmetry_degenerate"),
        (((0, 1),), (), "disconnected"),
        (((0, 5), (1, 2)), (), "edge_out_of_bounds"),
    ],
)
def test_validate_reports_first_problem(edges, pairs, code):
    spec = SkeletonSpec(("a", "b", "c"), edges, pairs, (), 0)
    assert validate(spec).code == code
    with pytest.raises(StructuralError):
        ensure_valid(spec)


def test_disconnected_spd_is_structural_error():
    with pytest.raises(StructuralError):
        compute_spd(SkeletonSpec(("a", "b", "c", "d"), ((0, 1), (2, 3)), (), (), 0))


def test_spec_file_round_trip(tmp_path, spec):
    path = spec.save(tmp_path / "skel.json")
    assert get_skeleton(str(path)) == spec
