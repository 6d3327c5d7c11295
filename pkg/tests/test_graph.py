import numpy as np
import pytest
import scipy.sparse as sparse
import scipy.sparse.linalg as spla
from scipy.spatial.transform import Rotation

from common.errors import GraphError
from conftest import random_cloud
from pointgcn.data import synth_generate
from pointgcn.graph import (
    LAMBDA_MAX_FALLBACK,
    cloud_laplacian,
    estimate_lambda_max,
    hop_distances,
    knn_graph,
    normalized_laplacian,
    rescale_laplacian,
)
from pointgcn.pointcloud import PointCloud


def chain_cloud():
    # increasing gaps make every nearest neighbor the left one
    return PointCloud([[0, 0, 0], [1, 0, 0], [2.5, 0, 0], [4.5, 0, 0], [7, 0, 0]])


def test_adjacency_contracts(cloud):
    W = knn_graph(cloud, 6).adjacency
    assert abs(W - W.T).max() == 0
    assert np.all(W.diagonal() == 0)
    assert W.data.min() > 0 and W.data.max() <= 1
    assert np.all(np.diff(W.indptr) >= 6)


def test_adaptive_sigma_is_mean_squared_knn_distance():
    graph = knn_graph(chain_cloud(), 1)
    assert graph.sigma2 == pytest.approx((1 + 1 + 2.25 + 4 + 6.25) / 5)
    assert graph.adjacency[0, 1] == pytest.approx(np.exp(-1 / graph.sigma2))
    assert graph.adjacency.nnz == 8


def test_fixed_sigma():
    graph = knn_graph(chain_cloud(), 1, sigma_policy=2.0)
    assert graph.sigma2 == 4.0
    assert graph.adjacency[1, 2] == pytest.approx(np.exp(-2.25 / 4.0))


def test_knn_rejects_k_not_below_n(cloud):
    with pytest.raises(GraphError):
        knn_graph(cloud, cloud.n)
    with pytest.raises(GraphError):
        knn_graph(cloud, 0)


def test_mutual_symmetrization_can_isolate():
    cloud = PointCloud([[0, 0, 0], [0.1, 0, 0], [0.2, 0, 0], [5, 0, 0]])
    knn_graph(cloud, 1, symmetrize="union")
    with pytest.raises(GraphError):
        knn_graph(cloud, 1, symmetrize="mutual")


def test_laplacian_spectra_on_random_graphs():
    rng = np.random.default_rng(0)
    for trial in range(100):
        n = int(rng.integers(5, 101))
        k = int(rng.integers(1, min(10, n - 1) + 1))
        cloud = random_cloud(n, seed=trial)
        L = normalized_laplacian(knn_graph(cloud, k))
        assert abs(L - L.T).max() == 0
        eigs = np.linalg.eigvalsh(L.toarray())
        assert eigs.min() >= -1e-9 and eigs.max() <= 2 + 1e-9

        Lt = rescale_laplacian(L, estimate_lambda_max(L))
        scaled = np.linalg.eigvalsh(Lt.toarray())
        assert scaled.min() >= -1.002 and scaled.max() <= 1.002


def test_lambda_max_dense_matches_eigvalsh(cloud):
    L = normalized_laplacian(knn_graph(cloud, 5))
    assert estimate_lambda_max(L) == pytest.approx(np.linalg.eigvalsh(L.toarray())[-1], rel=1e-12)


def test_lambda_max_iterative_solvers():
    L = normalized_laplacian(knn_graph(random_cloud(200, seed=3), 8))
    exact = np.linalg.eigvalsh(L.toarray())[-1]
    assert estimate_lambda_max(L, method="lanczos") == pytest.approx(exact, rel=1e-3)
    power = estimate_lambda_max(L, method="power", max_iter=2000)
    assert exact * (1 - 2e-3) <= power <= LAMBDA_MAX_FALLBACK + 1e-9


def test_lambda_max_falls_back_when_lanczos_fails(mocker):
    L = normalized_laplacian(knn_graph(random_cloud(100, seed=4), 6))
    mocker.patch("pointgcn.graph.spla.eigsh", side_effect=spla.ArpackNoConvergence("no", [], []))
    assert estimate_lambda_max(L) == LAMBDA_MAX_FALLBACK


def test_lambda_max_falls_back_when_power_iteration_runs_out():
    L = normalized_laplacian(knn_graph(random_cloud(100, seed=5), 6))
    assert estimate_lambda_max(L, method="power", max_iter=0) == LAMBDA_MAX_FALLBACK


def test_rescale_rejects_non_positive_lambda(cloud):
    L = normalized_laplacian(knn_graph(cloud, 4))
    with pytest.raises(GraphError):
        rescale_laplacian(L, 0.0)


def test_graph_is_rigid_motion_invariant():
    rng = np.random.default_rng(6)
    cloud = random_cloud(50, seed=6)
    reference = knn_graph(cloud, 6).adjacency.toarray()
    rotations = Rotation.random(20, random_state=7)
    for i in range(20):
        moved = rotations[i].apply(cloud.points.astype(np.float64)) + rng.uniform(-3, 3, size=3)
        W = knn_graph(PointCloud(moved), 6).adjacency.toarray()
        np.testing.assert_allclose(W, reference, atol=1e-5)


def test_hop_distances_on_chain():
    graph = knn_graph(chain_cloud(), 1)
    assert hop_distances(graph.adjacency, 0).tolist() == [0, 1, 2, 3, 4]


def test_cloud_laplacian_lambda_in_range(cloud):
    lap = cloud_laplacian(cloud, 6)
    assert 0 < lap.lambda_max <= 2 + 1e-9
    assert lap.n == cloud.n


def test_collinear_nearest_neighbors_union():
    cloud = PointCloud([[0, 0, 0], [1, 0, 0], [3, 0, 0]])
    W = knn_graph(cloud, 1).adjacency
    edges = set(zip(*W.nonzero()))
    assert edges == {(0, 1), (1, 0), (1, 2), (2, 1)}


def test_graph_is_permutation_equivariant():
    rng = np.random.default_rng(8)
    cloud = random_cloud(60, seed=8)
    W = knn_graph(cloud, 7).adjacency.toarray()
    for _ in range(5):
        perm = rng.permutation(60)
        moved = knn_graph(PointCloud(cloud.points[perm]), 7).adjacency.toarray()
        np.testing.assert_allclose(moved, W[perm][:, perm], rtol=1e-12, atol=1e-15)


def test_laplacian_kernel_is_sqrt_degree(cloud):
    graph = knn_graph(cloud, 5)
    L = normalized_laplacian(graph)
    v = np.sqrt(graph.degrees)
    v /= np.linalg.norm(v)
    assert np.linalg.norm(L @ v) < 1e-6
    assert np.linalg.eigvalsh(L.toarray())[0] == pytest.approx(0.0, abs=1e-9)


def test_two_vertex_laplacian():
    graph = knn_graph(PointCloud([[0, 0, 0], [1, 0, 0]]), 1)
    L = normalized_laplacian(graph)
    np.testing.assert_allclose(L.toarray(), [[1, -1], [-1, 1]], atol=1e-12)
    np.testing.assert_allclose(np.linalg.eigvalsh(L.toarray()), [0, 2], atol=1e-12)
    assert estimate_lambda_max(L) == pytest.approx(2.0, abs=2e-3)

    Lt = rescale_laplacian(L, 2.0)
    np.testing.assert_allclose(Lt.toarray(), [[0, -1], [-1, 0]], atol=1e-12)
    np.testing.assert_allclose(np.linalg.eigvalsh(Lt.toarray()), [-1, 1], atol=1e-12)


def test_lambda_max_of_identity():
    assert estimate_lambda_max(np.eye(10)) == pytest.approx(1.0, abs=1e-3)
    assert estimate_lambda_max(sparse.identity(100, format="csr"), method="power") == pytest.approx(1.0, abs=1e-3)


def test_lanczos_meets_tolerance_on_full_size_clouds():
    clouds = list(synth_generate(per_class=2, n_points=256, noise_sigma=0.02, seed=11).clouds)
    clouds += [random_cloud(n, seed=n) for n in (65, 130, 300)]
    rng = np.random.default_rng(12)
    for cloud in clouds:
        L = normalized_laplacian(knn_graph(cloud, 20))
        exact = np.linalg.eigvalsh(L.toarray())[-1]
        for trial in range(3):
            perm = rng.permutation(cloud.n) if trial else np.arange(cloud.n)
            Lp = normalized_laplacian(knn_graph(PointCloud(cloud.points[perm]), 20))
            estimate = estimate_lambda_max(Lp)
            assert abs(estimate - exact) <= 1e-3 * exact

            scaled = np.linalg.eigvalsh(rescale_laplacian(Lp, estimate).toarray())
            assert scaled.min() >= -1.002 and scaled.max() <= 1.002
