import numpy as np
import pytest

from common.errors import ConfigError, DatasetError, GeometryError, ShapeError
from conftest import numeric_gradient, random_cloud, relative_error
from pointgcn.nn import (
    ClassWeights,
    active_points,
    class_weights_from_counts,
    cluster_members,
    dropout,
    dropout_backward,
    fc_backward,
    fc_softmax,
    global_pool,
    global_pool_backward,
    multires_pool,
    multires_pool_backward,
    relu,
    relu_backward,
    weighted_cross_entropy,
)


def test_relu_and_gradient():
    X = np.array([[-1.0, 0.0, 2.0]])
    Y, cache = relu(X)
    assert Y.tolist() == [[0.0, 0.0, 2.0]]
    assert relu_backward(cache, np.ones_like(X)).tolist() == [[0.0, 0.0, 1.0]]


def test_dropout_is_identity_in_eval():
    X = np.arange(6.0).reshape(2, 3)
    Y, cache = dropout(X, 0.5, training=False)
    assert Y is X
    assert dropout_backward(cache, X) is X


def test_dropout_keeps_expectation():
    X = np.ones((200, 200))
    Y, cache = dropout(X, 0.9, training=True, rng=np.random.default_rng(0))
    assert np.all((Y == 0) | np.isclose(Y, 1 / 0.9))
    assert abs(Y.mean() - 1.0) < 0.01
    np.testing.assert_array_equal(dropout_backward(cache, np.ones_like(X)), Y)


def test_dropout_rejects_bad_keep_prob():
    with pytest.raises(ConfigError):
        dropout(np.ones(3), 0.0, training=True)
    with pytest.raises(ConfigError):
        dropout(np.ones(3), 1.5, training=True)


def test_global_pool_max_and_variance():
    features = np.array([[1.0, 5.0], [3.0, 1.0], [2.0, 0.0]])
    pooled, cache = global_pool(features)
    np.testing.assert_allclose(pooled, [3.0, 5.0, 2.0 / 3.0, np.var([5.0, 1.0, 0.0])])
    assert cache.argmax.tolist() == [1, 0]


def test_global_pool_is_permutation_invariant():
    rng = np.random.default_rng(1)
    features = rng.normal(size=(50, 7)).astype(np.float32)
    pooled, _ = global_pool(features)
    for _ in range(5):
        permuted, _ = global_pool(features[rng.permutation(50)])
        np.testing.assert_array_equal(permuted, pooled)


def test_global_pool_needs_two_rows():
    with pytest.raises(ShapeError):
        global_pool(np.ones((1, 4)))


def test_global_pool_gradient():
    rng = np.random.default_rng(2)
    features = rng.normal(size=(6, 3))
    G = rng.normal(size=6)
    _, cache = global_pool(features)
    analytic = global_pool_backward(cache, G)
    indices = [(i, j) for i in range(6) for j in range(3)]
    numeric = numeric_gradient(lambda: float(global_pool(features)[0] @ G), features, indices)
    assert relative_error(numeric, [analytic[i] for i in indices]) < 1e-4


def test_cluster_members_overlap_and_partition():
    points = np.array([[0, 0, 0], [0.1, 0, 0], [0.2, 0, 0], [5, 0, 0], [5.1, 0, 0]], dtype=float)
    centroids = np.array([0, 3])
    overlap = cluster_members(points, centroids, 2, "overlap")
    assert [c.tolist() for c in overlap] == [[0, 1], [3, 4]]
    partition = cluster_members(points, centroids, 2, "partition")
    assert [c.tolist() for c in partition] == [[0, 1, 2], [3, 4]]
    with pytest.raises(ConfigError):
        cluster_members(points, centroids, 2, "bogus")


def test_multires_pool_shapes_and_values():
    rng = np.random.default_rng(3)
    cloud = random_cloud(40, seed=3)
    features = rng.normal(size=(40, 5))
    pooled, centroids, cache = multires_pool(features, cloud, 8, 6, seed=0)
    assert pooled.shape == (8, 5)
    assert centroids.n == 8
    np.testing.assert_array_equal(centroids.points, cloud.points[cache.centroid_indices])
    # every pooled value is attained by some member row
    for j in range(8):
        np.testing.assert_array_equal(pooled[j], features[cache.source_rows[j], np.arange(5)])


def test_multires_pool_rejects_too_few_points():
    cloud = random_cloud(10, seed=4)
    with pytest.raises(GeometryError):
        multires_pool(np.zeros((10, 2)), cloud, 11, 3)
    with pytest.raises(GeometryError):
        multires_pool(np.zeros((10, 2)), cloud, 5, 11)


def test_multires_pool_gradient():
    rng = np.random.default_rng(5)
    cloud = random_cloud(20, seed=5)
    features = rng.normal(size=(20, 3))
    G = rng.normal(size=(6, 3))
    _, _, cache = multires_pool(features, cloud, 6, 5, seed=1)
    analytic = multires_pool_backward(cache, G)
    indices = [(i, j) for i in range(20) for j in range(3)]
    numeric = numeric_gradient(
        lambda: float(np.sum(multires_pool(features, cloud, 6, 5, seed=1)[0] * G)), features, indices
    )
    assert relative_error(numeric, [analytic[i] for i in indices]) < 1e-4


def test_multires_pool_with_single_point_clusters_is_selection():
    rng = np.random.default_rng(6)
    cloud = random_cloud(12, seed=6)
    features = rng.normal(size=(12, 4))
    pooled, centroids, cache = multires_pool(features, cloud, 12, 1, seed=2)
    np.testing.assert_array_equal(pooled, features[cache.centroid_indices])


def test_fc_softmax_is_distribution():
    rng = np.random.default_rng(7)
    probs, _ = fc_softmax(rng.normal(size=10), rng.normal(size=(4, 10)) * 5, np.zeros(4))
    assert np.all(probs > 0)
    assert probs.sum() == pytest.approx(1.0, abs=1e-6)


def test_fc_shape_mismatch():
    with pytest.raises(ShapeError):
        fc_softmax(np.ones(5), np.ones((3, 4)), np.zeros(3))


def test_cross_entropy_and_fc_gradient():
    rng = np.random.default_rng(8)
    features = rng.normal(size=6)
    weight = rng.normal(size=(3, 6))
    bias = rng.normal(size=3)
    cw = ClassWeights(np.array([0.5, 2.0, 0.5]))

    def loss():
        return weighted_cross_entropy(fc_softmax(features, weight, bias)[0], 1, cw)[0]

    probs, cache = fc_softmax(features, weight, bias)
    value, d_logits = weighted_cross_entropy(probs, 1, cw)
    assert value == pytest.approx(-2.0 * np.log(probs[1]))
    d_features, d_weight, d_bias = fc_backward(cache, d_logits, weight)

    assert relative_error(numeric_gradient(loss, features, [(i,) for i in range(6)]), d_features) < 1e-4
    w_idx = [(i, j) for i in range(3) for j in range(6)]
    assert relative_error(numeric_gradient(loss, weight, w_idx), [d_weight[i] for i in w_idx]) < 1e-4
    assert relative_error(numeric_gradient(loss, bias, [(i,) for i in range(3)]), d_bias) < 1e-4


def test_cross_entropy_rejects_bad_label():
    with pytest.raises(DatasetError):
        weighted_cross_entropy(np.array([0.5, 0.5]), 2, ClassWeights.uniform(2))


def test_class_weights_have_mean_one():
    weights = class_weights_from_counts([10, 30, 20])
    assert weights.weights.mean() == pytest.approx(1.0)
    assert weights[0] == pytest.approx(3 * weights[1])


def test_class_weights_balanced_are_uniform():
    np.testing.assert_array_equal(class_weights_from_counts([7, 7, 7]).weights, np.ones(3))


def test_class_weights_reject_empty_class():
    with pytest.raises(DatasetError):
        class_weights_from_counts([3, 0])


def test_active_points_records():
    records = active_points(np.array([4, 2, 9]), layer=2)
    assert [(r.layer, r.filter, r.vertex) for r in records] == [(2, 0, 4), (2, 1, 2), (2, 2, 9)]
