from dataclasses import replace

import numpy as np
import pytest

from common.errors import ConfigError, GeometryError, StaleCacheError
from conftest import numeric_gradient, random_cloud, relative_error
from pointgcn.model import (
    ModelConfig,
    ModelParams,
    backward,
    build_laplacian,
    forward,
    init_params,
    predict,
)
from pointgcn.nn import ClassWeights


def loss_at(cloud, params, config, label, class_weights, seed=0):
    result = forward(cloud, params, config, training=True, rng=np.random.default_rng(seed))
    return backward(result.cache, label, class_weights, params)


def check_model_gradients(cloud, config, label=1, samples=12, tol=1e-3):
    params = init_params(config, seed=3)
    class_weights = ClassWeights(np.array([0.7, 1.6, 0.7]))
    _, grads = loss_at(cloud, params, config, label, class_weights)
    named, grad_named = params.named_tensors(), grads.named_tensors()
    rng = np.random.default_rng(4)
    for name, tensor in named.items():
        flat = [tuple(np.unravel_index(i, tensor.shape)) for i in rng.choice(tensor.size, min(samples, tensor.size), replace=False)]
        numeric = numeric_gradient(lambda: loss_at(cloud, params, config, label, class_weights)[0], tensor, flat)
        assert relative_error(numeric, [grad_named[name][i] for i in flat]) < tol, name


def test_init_is_deterministic_and_shaped():
    config = ModelConfig(class_count=5, filters=(16, 12), cheb_order=3)
    a, b = init_params(config, seed=7), init_params(config, seed=7)
    for name, tensor in a.named_tensors().items():
        np.testing.assert_array_equal(tensor, b.named_tensors()[name])
    assert a.conv1.theta.shape == (4, 3, 16)
    assert a.conv2.theta.shape == (4, 16, 12)
    assert a.fc_weight.shape == (5, 2 * (16 + 12))
    assert not a.conv1.bias.any() and not a.fc_bias.any()


def test_init_variance_follows_glorot():
    params = init_params(ModelConfig(), seed=0)
    theta = params.conv2.theta.astype(np.float64)
    assert theta.size >= 10 ** 6
    expected = 2.0 / (4 * 1000 + 1000)
    assert abs(theta.var() / expected - 1.0) < 0.05


def test_forward_returns_distribution(cloud, tiny_config):
    probs = forward(cloud, init_params(tiny_config), tiny_config).probs
    assert probs.shape == (3,)
    assert np.all(probs > 0)
    assert probs.sum() == pytest.approx(1.0, abs=1e-6)


def test_eval_forward_is_deterministic(cloud):
    config = ModelConfig(class_count=3, knn_k=6, filters=(8, 8))
    params = init_params(config, seed=1)
    np.testing.assert_array_equal(forward(cloud, params, config).probs, forward(cloud, params, config).probs)


def test_training_forward_depends_only_on_rng_seed(cloud):
    config = ModelConfig(class_count=3, knn_k=6, filters=(8, 8))
    params = init_params(config, seed=1)
    a = forward(cloud, params, config, training=True, rng=np.random.default_rng(5)).probs
    b = forward(cloud, params, config, training=True, rng=np.random.default_rng(5)).probs
    np.testing.assert_array_equal(a, b)


def test_global_branch_is_permutation_invariant():
    config = ModelConfig(class_count=4, knn_k=10, filters=(16, 16))
    params = init_params(config, seed=2)
    cloud = random_cloud(60, seed=2)
    reference = forward(cloud, params, config).probs
    rng = np.random.default_rng(3)
    for _ in range(20):
        permuted = cloud.subset(rng.permutation(cloud.n))
        assert np.max(np.abs(forward(permuted, params, config).probs - reference)) < 1e-5


def test_full_model_gradient_global(tiny_config):
    check_model_gradients(random_cloud(24, seed=5), tiny_config)


def test_full_model_gradient_with_weight_decay_and_dropout(tiny_config):
    config = replace(tiny_config, weight_decay=2e-4, keep_probs=(0.9, 0.5))
    check_model_gradients(random_cloud(24, seed=6), config)


def test_full_model_gradient_multires(tiny_config):
    config = replace(tiny_config, pooling="multires", centroid_count=8, cluster_k=4)
    check_model_gradients(random_cloud(24, seed=7), config)


def test_full_model_gradient_multires_partition_with_layer1(tiny_config):
    config = replace(
        tiny_config, pooling="multires", centroid_count=8, cluster_k=4,
        cluster_mode="partition", multires_concat_layer1=True,
    )
    check_model_gradients(random_cloud(24, seed=8), config)


def test_gradients_vanish_at_confident_correct_prediction(cloud, tiny_config):
    params = init_params(tiny_config, seed=1)
    params.fc_bias[2] = 200.0
    _, grads = loss_at(cloud, params, tiny_config, 2, ClassWeights.uniform(3))
    for name, g in grads.named_tensors().items():
        assert np.max(np.abs(g)) < 1e-6, name


def test_weight_decay_gradient_is_linear_in_lambda(cloud, tiny_config):
    params = init_params(tiny_config, seed=1)
    cw = ClassWeights.uniform(3)
    base = loss_at(cloud, params, tiny_config, 0, cw)[1].named_tensors()
    for decay in (1e-3, 2e-3):
        grads = loss_at(cloud, params, replace(tiny_config, weight_decay=decay), 0, cw)[1].named_tensors()
        for name, tensor in params.named_tensors().items():
            expected = 2 * decay * tensor if name in ModelParams.DECAYED else 0
            np.testing.assert_allclose(grads[name] - base[name], expected, atol=1e-12)


def test_backward_rejects_stale_and_eval_caches(cloud, tiny_config):
    params = init_params(tiny_config)
    result = forward(cloud, params, tiny_config, training=True)
    backward(result.cache, 0, ClassWeights.uniform(3), params)
    with pytest.raises(StaleCacheError):
        backward(result.cache, 0, ClassWeights.uniform(3), params)
    with pytest.raises(StaleCacheError):
        backward(forward(cloud, params, tiny_config).cache, 0, ClassWeights.uniform(3), params)


def test_multires_needs_enough_points(tiny_config):
    config = replace(tiny_config, pooling="multires", centroid_count=30, cluster_k=4)
    with pytest.raises(GeometryError):
        forward(random_cloud(24), init_params(config), config)


def test_multires_with_every_point_a_centroid_matches_global():
    glob = ModelConfig(class_count=3, knn_k=6, cheb_order=2, filters=(8, 8), dtype="float64")
    multi = replace(glob, pooling="multires", centroid_count=30, cluster_k=1, multires_concat_layer1=True)
    params = init_params(glob, seed=4)
    cloud = random_cloud(30, seed=9)
    np.testing.assert_allclose(forward(cloud, params, multi).probs, forward(cloud, params, glob).probs, atol=1e-10)


def test_active_points_global(cloud):
    config = ModelConfig(class_count=3, knn_k=6, filters=(10, 7))
    result = forward(cloud, init_params(config), config)
    records = result.active
    assert len(records) == 17
    assert {r.layer for r in records} == {1, 2}
    assert all(0 <= r.vertex < cloud.n for r in records)


def test_active_points_multires_index_input_cloud(tiny_config):
    config = replace(tiny_config, pooling="multires", centroid_count=8, cluster_k=4)
    cloud = random_cloud(24, seed=10)
    result = forward(cloud, init_params(config), config)
    assert len(result.active) == 8
    assert set(result.active_vertices) == {2}
    assert set(result.active_vertices[2].tolist()) <= set(result.cache.multires.centroid_indices.tolist())


def test_predict_uses_precomputed_laplacian(cloud, tiny_config):
    params = init_params(tiny_config, seed=2)
    lap = build_laplacian(cloud, tiny_config)
    assert predict(cloud, params, tiny_config, laplacian=lap) == predict(cloud, params, tiny_config)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(pooling="bogus").validate()
    with pytest.raises(ConfigError):
        ModelConfig(filters=(0, 5)).validate()
    with pytest.raises(ConfigError):
        ModelConfig(keep_probs=(0.0, 0.5)).validate()
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"class_count": 3, "layers": 4})


def test_config_round_trips_through_dict():
    config = ModelConfig(class_count=10, filters=(4, 6), sigma=0.25, pooling="multires")
    assert ModelConfig.from_dict(config.to_dict()) == config


def test_check_config_names_mismatching_tensor(tiny_config):
    params = init_params(tiny_config)
    with pytest.raises(ConfigError, match="fc.weight"):
        params.check_config(replace(tiny_config, class_count=4))
