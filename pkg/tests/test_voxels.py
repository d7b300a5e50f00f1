import numpy as np
import pytest

from pcjoint.errors import ContractError, DomainError
from pcjoint.voxels import (
    ConvSpec,
    SparseFeatureTensor,
    VoxelCloud,
    avg_pool_map,
    canonical_order,
    dense_children,
    downsample_coords,
    generative_transposed_conv,
    is_canonical,
    kernel_offsets,
    parent_indices,
    scale_bound,
    sparse_conv,
    top_k_prune,
    transposed_avg_pool_map,
)

from conftest import random_cloud


# ---------------------------------------------------------------------------
# coordinate plumbing
# ---------------------------------------------------------------------------


def test_scale_bound():
    assert scale_bound(32, 0) == 32
    assert scale_bound(32, 3) == 4
    assert scale_bound(32, 5) == 1
    assert scale_bound(5, 1) == 3


def test_downsample_floor_division():
    out = downsample_coords(np.array([[2, 3, 4]]))
    np.testing.assert_array_equal(out, [[1, 1, 2]])


def test_downsample_merges_duplicates():
    out = downsample_coords(np.array([[0, 0, 0], [1, 0, 0]]))
    np.testing.assert_array_equal(out, [[0, 0, 0]])


def test_downsample_never_grows(rng):
    for _ in range(20):
        cloud = random_cloud(rng, 1000, 16)
        down = downsample_coords(cloud.coords)
        # brute-force set construction
        expected = sorted({(c[0] // 2, c[1] // 2, c[2] // 2) for c in cloud.coords.tolist()})
        assert len(down) <= len(cloud.coords)
        assert [tuple(r) for r in down.tolist()] == expected


def test_dense_children_unit_cube():
    out = dense_children(np.array([[0, 0, 0]]), child_bound=2)
    expected = sorted({(x, y, z) for x in (0, 1) for y in (0, 1) for z in (0, 1)})
    assert [tuple(r) for r in out.tolist()] == expected


def test_dense_children_inverse_property(rng):
    for _ in range(10):
        cloud = random_cloud(rng, 200, 16)
        parents = downsample_coords(cloud.coords)
        children = dense_children(parents, child_bound=16)
        np.testing.assert_array_equal(downsample_coords(children), parents)


def test_dense_children_superset_of_truth(rng):
    # candidates generated from the downsampled set must cover the originals
    for _ in range(10):
        cloud = random_cloud(rng, 300, 16)
        parents = downsample_coords(cloud.coords)
        children = {tuple(r) for r in dense_children(parents, 16).tolist()}
        assert all(tuple(c) in children for c in cloud.coords.tolist())


def test_dense_children_clipping():
    # scale bound 5 => children at coordinate 5 and above are dropped
    out = dense_children(np.array([[2, 2, 2]]), child_bound=5)
    assert out.max() == 4
    assert len(out) == 1  # only (4,4,4) survives


def test_canonical_order_detection():
    assert is_canonical(np.array([[0, 0, 0], [0, 0, 1], [1, 0, 0]]))
    assert not is_canonical(np.array([[1, 0, 0], [0, 0, 0]]))
    assert not is_canonical(np.array([[1, 0, 0], [1, 0, 0]]))


def test_voxel_cloud_invariants():
    with pytest.raises(ContractError):
        VoxelCloud(np.array([[0, 0, 0], [0, 0, 0]]), np.zeros((2, 3)), 4)
    with pytest.raises(DomainError):
        VoxelCloud.from_points(np.array([[0, 0, 0], [0, 0, 0]]), np.zeros((2, 3)), 4)
    with pytest.raises(DomainError):
        VoxelCloud(np.array([[5, 0, 0]]), np.zeros((1, 3)), 4)
    with pytest.raises(ContractError):
        VoxelCloud(np.array([[0, 0, 0]]), np.zeros((2, 3)), 4)


def test_from_points_dedup_keeps_first():
    cloud = VoxelCloud.from_points(
        np.array([[1, 1, 1], [0, 0, 0], [1, 1, 1]]),
        np.array([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2], [0.9, 0.9, 0.9]]),
        dedup=True,
    )
    assert len(cloud) == 2
    np.testing.assert_allclose(cloud.attrs[1], [0.1, 0.1, 0.1])


def test_from_points_resolution_rounds_to_power_of_two():
    cloud = VoxelCloud.from_points(np.array([[0, 0, 5]]), np.zeros((1, 3)))
    assert cloud.resolution == 8


# ---------------------------------------------------------------------------
# convolutions against a dense-grid oracle
# ---------------------------------------------------------------------------


def dense_conv_oracle(tensor, weights, bias, kernel, stride, grid):
    """Materialize on a dense grid and convolve with explicit loops."""
    cin = tensor.feats.shape[1]
    cout = weights.shape[2]
    dense = np.zeros((grid, grid, grid, cin))
    for c, f in zip(tensor.coords, tensor.feats):
        dense[tuple(c)] = f
    offsets = kernel_offsets(kernel)
    out_coords = tensor.coords if stride == 1 else downsample_coords(tensor.coords)
    out = np.zeros((len(out_coords), cout))
    for i, v in enumerate(out_coords):
        anchor = v if stride == 1 else 2 * v
        acc = np.zeros(cout)
        for t, off in enumerate(offsets):
            p = anchor + off
            if np.all(p >= 0) and np.all(p < grid):
                acc += dense[tuple(p)] @ weights[t]
        out[i] = acc + bias
    return out_coords, out


@pytest.mark.parametrize("kernel,stride", [(1, 1), (3, 1), (2, 2), (3, 2)])
def test_sparse_conv_matches_dense_oracle(rng, kernel, stride):
    for _ in range(3):
        cloud = random_cloud(rng, 64, 8)
        cin, cout = 3, 5
        tensor = SparseFeatureTensor(cloud.coords, rng.normal(size=(len(cloud), cin)))
        spec = ConvSpec(kernel, stride, cin, cout)
        w = rng.normal(size=(kernel**3, cin, cout))
        b = rng.normal(size=cout)
        got = sparse_conv(tensor, spec, w, b)
        oracle_coords, oracle = dense_conv_oracle(tensor, w, b, kernel, stride, 8)
        np.testing.assert_array_equal(got.coords, oracle_coords)
        np.testing.assert_allclose(got.feats, oracle, atol=1e-6)


def test_identity_kernel_is_identity(rng):
    cloud = random_cloud(rng, 30, 8)
    feats = rng.normal(size=(len(cloud), 4))
    tensor = SparseFeatureTensor(cloud.coords, feats)
    w = np.eye(4)[None, :, :]
    out = sparse_conv(tensor, ConvSpec(1, 1, 4, 4), w, np.zeros(4))
    np.testing.assert_allclose(out.feats, feats, atol=1e-12)


def test_isolated_voxel_sees_only_center_tap(rng):
    tensor = SparseFeatureTensor(np.array([[4, 4, 4]]), rng.normal(size=(1, 3)))
    w = rng.normal(size=(27, 3, 2))
    out = sparse_conv(tensor, ConvSpec(3, 1, 3, 2), w, np.zeros(2))
    center = 13  # offset (0,0,0) in lexicographic order over [-1..1]^3
    np.testing.assert_allclose(out.feats, tensor.feats @ w[center], atol=1e-12)


def test_conv_linearity(rng):
    cloud = random_cloud(rng, 50, 8)
    spec = ConvSpec(3, 1, 3, 4)
    w = rng.normal(size=(27, 3, 4))
    fx = rng.normal(size=(len(cloud), 3))
    fy = rng.normal(size=(len(cloud), 3))
    a, b = 1.7, -0.6
    tx = SparseFeatureTensor(cloud.coords, fx)
    ty = SparseFeatureTensor(cloud.coords, fy)
    tmix = SparseFeatureTensor(cloud.coords, a * fx + b * fy)
    mix = sparse_conv(tmix, spec, w)
    sep = a * sparse_conv(tx, spec, w).feats + b * sparse_conv(ty, spec, w).feats
    np.testing.assert_allclose(mix.feats, sep, atol=1e-9)


def test_channel_mismatch_raises(rng):
    cloud = random_cloud(rng, 10, 8)
    tensor = SparseFeatureTensor(cloud.coords, rng.normal(size=(len(cloud), 3)))
    with pytest.raises(ContractError):
        sparse_conv(tensor, ConvSpec(3, 1, 4, 2), rng.normal(size=(27, 4, 2)))


def dense_transposed_oracle(tensor, weights, bias, kernel, child_bound):
    """Dense stride-2 transposed convolution restricted to dyadic children."""
    offsets = kernel_offsets(kernel)
    out_coords = dense_children(tensor.coords, child_bound)
    lookup = {tuple(c): f for c, f in zip(tensor.coords.tolist(), tensor.feats)}
    cout = weights.shape[2]
    out = np.zeros((len(out_coords), cout))
    for i, c in enumerate(out_coords):
        acc = np.zeros(cout)
        for t, off in enumerate(offsets):
            shifted = c - off
            if np.all(shifted >= 0) and np.all(shifted % 2 == 0):
                parent = lookup.get(tuple(shifted // 2))
                if parent is not None:
                    acc += parent @ weights[t]
        out[i] = acc + bias
    return out_coords, out


@pytest.mark.parametrize("kernel", [2, 3])
def test_generative_conv_matches_dense_oracle(rng, kernel):
    cloud = random_cloud(rng, 40, 8)
    cin, cout = 3, 4
    tensor = SparseFeatureTensor(cloud.coords, rng.normal(size=(len(cloud), cin)),
                                 scale=1)
    spec = ConvSpec(kernel, 2, cin, cout, transposed_generative=True)
    w = rng.normal(size=(kernel**3, cin, cout))
    b = rng.normal(size=cout)
    got = generative_transposed_conv(tensor, spec, w, b, child_bound=16)
    oracle_coords, oracle = dense_transposed_oracle(tensor, w, b, kernel, 16)
    np.testing.assert_array_equal(got.coords, oracle_coords)
    np.testing.assert_allclose(got.feats, oracle, atol=1e-6)


def test_generative_single_parent_kernel2(rng):
    feat = rng.normal(size=(1, 3))
    tensor = SparseFeatureTensor(np.array([[1, 2, 3]]), feat, scale=1)
    spec = ConvSpec(2, 2, 3, 4, transposed_generative=True)
    w = rng.normal(size=(8, 3, 4))
    b = rng.normal(size=4)
    out = generative_transposed_conv(tensor, spec, w, b, child_bound=16)
    assert len(out) == 8
    # child at parent*2 + octant j receives tap j exactly
    for j, row in enumerate(out.coords):
        np.testing.assert_array_equal(row // 2, [1, 2, 3])
        oct_bits = row - 2 * (row // 2)
        t = oct_bits[0] * 4 + oct_bits[1] * 2 + oct_bits[2]
        np.testing.assert_allclose(out.feats[j], feat[0] @ w[t] + b, atol=1e-12)


def test_generative_output_covers_truth(rng):
    cloud = random_cloud(rng, 120, 16)
    parents = downsample_coords(cloud.coords)
    tensor = SparseFeatureTensor(parents, rng.normal(size=(len(parents), 2)), scale=1)
    spec = ConvSpec(2, 2, 2, 2, transposed_generative=True)
    out = generative_transposed_conv(tensor, spec, rng.normal(size=(8, 2, 2)),
                                     child_bound=16)
    produced = {tuple(r) for r in out.coords.tolist()}
    assert all(tuple(c) in produced for c in cloud.coords.tolist())


# ---------------------------------------------------------------------------
# pooling and pruning
# ---------------------------------------------------------------------------


def test_avg_pool_constant_map_stays_constant(rng):
    cloud = random_cloud(rng, 200, 16)
    coords, values = cloud.coords, np.full(len(cloud), 0.37)
    for _ in range(4):
        coords, values = avg_pool_map(coords, values)
        np.testing.assert_allclose(values, 0.37)


def test_avg_pool_two_children_mean():
    coords = np.array([[0, 0, 0], [1, 0, 0]])
    parents, pooled = avg_pool_map(coords, np.array([0.2, 0.6]))
    np.testing.assert_array_equal(parents, [[0, 0, 0]])
    np.testing.assert_allclose(pooled, [0.4])


def test_pool_broadcast_matches_parent_search(rng):
    for _ in range(5):
        cloud = random_cloud(rng, 300, 16)
        values = rng.uniform(size=len(cloud))
        parents, pooled = avg_pool_map(cloud.coords, values)
        candidates = dense_children(parents, 16)
        broadcast = transposed_avg_pool_map(parents, pooled, candidates)
        # brute-force per-point parent lookup
        table = {tuple(p): v for p, v in zip(parents.tolist(), pooled)}
        expected = np.array([table[(c[0] // 2, c[1] // 2, c[2] // 2)]
                             for c in candidates.tolist()])
        np.testing.assert_allclose(broadcast, expected, atol=1e-12)


def test_parent_indices_requires_coverage():
    with pytest.raises(ContractError):
        parent_indices(np.array([[4, 4, 4]]), np.array([[0, 0, 0]]))


def test_top_k_basic():
    coords = np.array([[0, 0, 0], [0, 0, 1], [0, 1, 0]])
    tensor = SparseFeatureTensor(coords, np.arange(3, dtype=float).reshape(-1, 1))
    out = top_k_prune(tensor, np.array([0.9, 0.2, 0.7]), 2)
    np.testing.assert_array_equal(out.coords, [[0, 0, 0], [0, 1, 0]])


def test_top_k_identity_when_keeping_all(rng):
    cloud = random_cloud(rng, 50, 8)
    tensor = SparseFeatureTensor(cloud.coords, rng.normal(size=(len(cloud), 2)))
    out = top_k_prune(tensor, rng.uniform(size=len(cloud)), len(cloud))
    np.testing.assert_array_equal(out.coords, tensor.coords)


def test_top_k_tie_break_lexicographic(rng):
    cloud = random_cloud(rng, 40, 8)
    tensor = SparseFeatureTensor(cloud.coords, rng.normal(size=(len(cloud), 1)))
    out = top_k_prune(tensor, np.full(len(cloud), 0.5), 7)
    np.testing.assert_array_equal(out.coords, tensor.coords[:7])


def test_top_k_exact_size_and_largest_multiset(rng):
    for _ in range(10):
        cloud = random_cloud(rng, 100, 8)
        probs = rng.uniform(size=len(cloud))
        n = int(rng.integers(1, len(cloud)))
        tensor = SparseFeatureTensor(cloud.coords, probs.reshape(-1, 1))
        out = top_k_prune(tensor, probs, n)
        assert len(out) == n
        kept = np.sort(out.feats[:, 0])[::-1]
        expected = np.sort(probs)[::-1][:n]
        np.testing.assert_allclose(kept, expected)


def test_top_k_overflow_raises(rng):
    cloud = random_cloud(rng, 10, 8)
    tensor = SparseFeatureTensor(cloud.coords, np.zeros((10, 1)))
    with pytest.raises(DomainError):
        top_k_prune(tensor, np.zeros(10), 11)


def test_all_ops_preserve_canonical_order(rng):
    cloud = random_cloud(rng, 150, 16)
    assert is_canonical(downsample_coords(cloud.coords))
    assert is_canonical(dense_children(downsample_coords(cloud.coords), 16))
    tensor = SparseFeatureTensor(cloud.coords, rng.normal(size=(len(cloud), 3)))
    out = sparse_conv(tensor, ConvSpec(2, 2, 3, 3), rng.normal(size=(8, 3, 3)))
    assert is_canonical(out.coords)
