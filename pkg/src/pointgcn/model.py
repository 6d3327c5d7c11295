"""
PointGCN network: two Chebyshev graph-convolution layers, global or
multi-resolution pooling, and a softmax classifier.

Global branch:
    kNN graph -> conv1 + ReLU -> conv2 + ReLU (same graph), global pooling
    after each conv layer, pooled vectors concatenated -> dropout -> FC.
Multi-resolution branch:
    conv1 + ReLU -> farthest-point centroids with max-pooled clusters ->
    kNN graph on the centroids -> conv2 + ReLU -> global pooling -> FC.
"""

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Tuple

import numpy as np

from common.errors import ConfigError, GeometryError, StaleCacheError
from pointgcn.chebfilter import ChebFilterBank, cheb_backward, cheb_basis, cheb_combine
from pointgcn.graph import RescaledLaplacian, cloud_laplacian
from pointgcn.nn import (
    ActivePoint,
    ClassWeights,
    DropoutCache,
    FCCache,
    GlobalPoolCache,
    MultiresPoolCache,
    ReluCache,
    active_points,
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
from pointgcn.pointcloud import PointCloud

logger = logging.getLogger(__name__)

POOLING_MODES = ("global", "multires")
CLUSTER_MODES = ("overlap", "partition")
DTYPES = ("float32", "float64")


@dataclass
class ModelConfig:
    """Architecture hyperparameters."""

    class_count: int = 40
    knn_k: int = 40
    cheb_order: int = 3
    filters: Tuple[int, int] = (1000, 1000)
    pooling: str = "global"
    centroid_count: int = 55
    cluster_k: int = 50
    cluster_mode: str = "overlap"
    # keep probabilities: after each conv layer, and on the classifier input
    keep_probs: Tuple[float, float] = (0.9, 0.5)
    weight_decay: float = 2e-4
    # None selects the adaptive kernel width
    sigma: Optional[float] = None
    use_bias: bool = True
    multires_concat_layer1: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        self.filters = tuple(int(f) for f in self.filters)
        self.keep_probs = tuple(float(p) for p in self.keep_probs)

    def validate(self) -> "ModelConfig":
        """Raise ConfigError on the first invalid field."""
        if len(self.filters) != 2:
            raise ConfigError(f"filters needs two values, got {self.filters}")
        if len(self.keep_probs) != 2:
            raise ConfigError(f"keep_probs needs two values, got {self.keep_probs}")
        for name in ("class_count", "knn_k", "centroid_count", "cluster_k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.class_count < 2:
            raise ConfigError(f"class_count must be at least 2, got {self.class_count}")
        if self.cheb_order < 0:
            raise ConfigError(f"cheb_order must be non-negative, got {self.cheb_order}")
        if any(f < 1 for f in self.filters):
            raise ConfigError(f"filters must be positive, got {self.filters}")
        if self.pooling not in POOLING_MODES:
            raise ConfigError(f"pooling must be one of {POOLING_MODES}, got '{self.pooling}'")
        if self.cluster_mode not in CLUSTER_MODES:
            raise ConfigError(f"cluster_mode must be one of {CLUSTER_MODES}, got '{self.cluster_mode}'")
        if self.pooling == "multires" and self.centroid_count < 2:
            raise ConfigError("multires pooling needs at least 2 centroids")
        if any(not 0.0 < p <= 1.0 for p in self.keep_probs):
            raise ConfigError(f"keep_probs must lie in (0, 1], got {self.keep_probs}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.sigma is not None and not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {DTYPES}, got '{self.dtype}'")
        return self

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)

    @property
    def fc_input_dim(self) -> int:
        f1, f2 = self.filters
        if self.pooling == "global" or self.multires_concat_layer1:
            return 2 * (f1 + f2)
        return 2 * f2

    @property
    def pooled_layers(self) -> Tuple[int, ...]:
        """Conv layers whose features are globally pooled into the classifier."""
        if self.pooling == "global" or self.multires_concat_layer1:
            return (1, 2)
        return (2,)

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict[str, object]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"Unknown model config keys: {sorted(unknown)}")
        return cls(**values)


@dataclass
class ModelParams:
    """All trainable tensors."""

    conv1: ChebFilterBank
    conv2: ChebFilterBank
    fc_weight: np.ndarray
    fc_bias: np.ndarray

    # tensors that carry weight decay; biases are excluded
    DECAYED = ("conv1.theta", "conv2.theta", "fc.weight")

    def named_tensors(self) -> Dict[str, np.ndarray]:
        """Name -> array; the arrays are the live parameters, not copies."""
        named = {"conv1.theta": self.conv1.theta}
        if self.conv1.bias is not None:
            named["conv1.bias"] = self.conv1.bias
        named["conv2.theta"] = self.conv2.theta
        if self.conv2.bias is not None:
            named["conv2.bias"] = self.conv2.bias
        named["fc.weight"] = self.fc_weight
        named["fc.bias"] = self.fc_bias
        return named

    @classmethod
    def from_named(cls, named: Dict[str, np.ndarray]) -> "ModelParams":
        return cls(
            conv1=ChebFilterBank(named["conv1.theta"], named.get("conv1.bias")),
            conv2=ChebFilterBank(named["conv2.theta"], named.get("conv2.bias")),
            fc_weight=named["fc.weight"],
            fc_bias=named["fc.bias"],
        )

    def copy(self) -> "ModelParams":
        return ModelParams.from_named({k: v.copy() for k, v in self.named_tensors().items()})

    def check_config(self, config: ModelConfig) -> None:
        """Raise ConfigError naming the first dimension that disagrees with ``config``."""
        K1 = config.cheb_order + 1
        f1, f2 = config.filters
        expected = {
            "conv1.theta": (K1, 3, f1),
            "conv2.theta": (K1, f1, f2),
            "fc.weight": (config.class_count, config.fc_input_dim),
            "fc.bias": (config.class_count,),
        }
        named = self.named_tensors()
        for name, shape in expected.items():
            if named[name].shape != shape:
                raise ConfigError(f"{name} has shape {named[name].shape}, config expects {shape}")


def glorot_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """
    Glorot-uniform weights, zero biases, deterministic in ``seed``.

    A Chebyshev bank is treated as a linear map from (K + 1) * C_in inputs to
    C_out outputs when computing its fan-in.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    dtype = config.np_dtype
    K1 = config.cheb_order + 1
    f1, f2 = config.filters

    def bank(c_in: int, c_out: int) -> ChebFilterBank:
        theta = glorot_uniform(rng, (K1, c_in, c_out), K1 * c_in, c_out).astype(dtype)
        bias = np.zeros(c_out, dtype=dtype) if config.use_bias else None
        return ChebFilterBank(theta, bias)

    conv1 = bank(3, f1)
    conv2 = bank(f1, f2)
    fc_in = config.fc_input_dim
    fc_weight = glorot_uniform(rng, (config.class_count, fc_in), fc_in, config.class_count).astype(dtype)
    return ModelParams(conv1, conv2, fc_weight, np.zeros(config.class_count, dtype=dtype))


@dataclass
class ForwardCache:
    """Everything the backward pass needs from one forward call."""

    config: ModelConfig
    training: bool
    laplacian1: RescaledLaplacian
    inputs1: np.ndarray
    basis1: np.ndarray
    relu1: ReluCache
    drop1: DropoutCache
    laplacian2: RescaledLaplacian
    inputs2: np.ndarray
    basis2: np.ndarray
    relu2: ReluCache
    drop2: DropoutCache
    pool2: GlobalPoolCache
    fc_drop: DropoutCache
    fc: FCCache
    pool1: Optional[GlobalPoolCache] = None
    multires: Optional[MultiresPoolCache] = None
    consumed: bool = False


@dataclass
class ForwardResult:
    probs: np.ndarray
    cache: ForwardCache
    # layer -> vertex index of every filter's maximum in the input cloud
    active_vertices: Dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def active(self) -> List[ActivePoint]:
        records: List[ActivePoint] = []
        for layer, vertices in sorted(self.active_vertices.items()):
            records.extend(active_points(vertices, layer))
        return records

    @property
    def prediction(self) -> int:
        return int(np.argmax(self.probs))


def build_laplacian(cloud: PointCloud, config: ModelConfig, k: Optional[int] = None) -> RescaledLaplacian:
    """Rescaled Laplacian of the cloud's kNN graph under ``config``."""
    sigma_policy = "adaptive" if config.sigma is None else config.sigma
    return cloud_laplacian(cloud, config.knn_k if k is None else k, sigma_policy)


def forward(
    cloud: PointCloud,
    params: ModelParams,
    config: ModelConfig,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    laplacian: Optional[RescaledLaplacian] = None,
) -> ForwardResult:
    """
    Run the network on one preprocessed cloud.

    Args:
        cloud: Normalized cloud
        params: Model parameters (read only)
        config: Architecture
        training: Apply dropout when True
        rng: Source of dropout masks and the first centroid pick; seeded with 0
            when omitted so evaluation is deterministic
        laplacian: Precomputed rescaled Laplacian of ``cloud``

    Returns:
        ForwardResult with class probabilities, backward cache and active points
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if config.pooling == "multires" and cloud.n < config.centroid_count:
        raise GeometryError(
            f"Cloud has {cloud.n} points, fewer than centroid_count={config.centroid_count}"
        )
    dtype = config.np_dtype
    keep_conv, keep_fc = config.keep_probs

    lap1 = laplacian if laplacian is not None else build_laplacian(cloud, config)
    x0 = cloud.points.astype(dtype)
    basis1 = cheb_basis(lap1, x0, params.conv1.order)
    h1, relu1 = relu(cheb_combine(basis1, params.conv1))
    h1, drop1 = dropout(h1, keep_conv, training, rng)

    pool1 = None
    pooled: List[np.ndarray] = []
    active: Dict[int, np.ndarray] = {}
    multires_cache = None
    if 1 in config.pooled_layers:
        p1, pool1 = global_pool(h1)
        pooled.append(p1)
        active[1] = pool1.argmax

    if config.pooling == "global":
        lap2, inputs2 = lap1, h1
    else:
        fps_seed = int(rng.integers(2 ** 31))
        inputs2, centroids, multires_cache = multires_pool(
            h1, cloud, config.centroid_count, config.cluster_k, fps_seed, config.cluster_mode
        )
        lap2 = build_laplacian(centroids, config, k=min(config.knn_k, centroids.n - 1))

    basis2 = cheb_basis(lap2, inputs2, params.conv2.order)
    h2, relu2 = relu(cheb_combine(basis2, params.conv2))
    h2, drop2 = dropout(h2, keep_conv, training, rng)
    p2, pool2 = global_pool(h2)
    pooled.append(p2)

    layer2_vertices = pool2.argmax
    if multires_cache is not None:
        layer2_vertices = multires_cache.centroid_indices[pool2.argmax]
    active[2] = layer2_vertices

    features, fc_drop = dropout(np.concatenate(pooled), keep_fc, training, rng)
    probs, fc = fc_softmax(features, params.fc_weight, params.fc_bias)

    cache = ForwardCache(
        config=config,
        training=training,
        laplacian1=lap1,
        inputs1=x0,
        basis1=basis1,
        relu1=relu1,
        drop1=drop1,
        laplacian2=lap2,
        inputs2=inputs2,
        basis2=basis2,
        relu2=relu2,
        drop2=drop2,
        pool2=pool2,
        fc_drop=fc_drop,
        fc=fc,
        pool1=pool1,
        multires=multires_cache,
    )
    return ForwardResult(probs=probs, cache=cache, active_vertices=active)


def weight_decay_penalty(params: ModelParams, weight_decay: float) -> float:
    named = params.named_tensors()
    return weight_decay * float(sum(np.sum(named[name].astype(np.float64) ** 2) for name in ModelParams.DECAYED))


def backward(
    cache: ForwardCache,
    label: int,
    class_weights: ClassWeights,
    params: ModelParams,
) -> Tuple[float, ModelParams]:
    """
    Loss and gradients of weighted cross-entropy plus lambda * sum ||w||^2.

    Args:
        cache: Cache of a training-mode forward call, used once
        label: True class
        class_weights: Per-class loss weights
        params: Parameters used in the forward call

    Returns:
        (loss, gradients shaped like ``params``)
    """
    if cache.consumed:
        raise StaleCacheError("Forward cache was already used by a backward pass")
    if not cache.training:
        raise StaleCacheError("Backward needs a cache from a training-mode forward pass")
    cache.consumed = True
    config = cache.config

    loss, d_logits = weighted_cross_entropy(cache.fc.probs, label, class_weights)
    d_features, d_fc_weight, d_fc_bias = fc_backward(cache.fc, d_logits, params.fc_weight)
    d_features = dropout_backward(cache.fc_drop, d_features)

    f1, f2 = config.filters
    d_pool1 = None
    if cache.pool1 is not None:
        d_pool1, d_pool2 = d_features[: 2 * f1], d_features[2 * f1:]
    else:
        d_pool2 = d_features

    d_h2 = global_pool_backward(cache.pool2, d_pool2)
    d_z2 = relu_backward(cache.relu2, dropout_backward(cache.drop2, d_h2))
    d_inputs2, d_theta2, d_bias2 = cheb_backward(
        cache.laplacian2, cache.inputs2, params.conv2, d_z2, cache.basis2
    )

    if cache.multires is not None:
        d_h1 = multires_pool_backward(cache.multires, d_inputs2)
    else:
        d_h1 = d_inputs2
    if d_pool1 is not None:
        d_h1 = d_h1 + global_pool_backward(cache.pool1, d_pool1)

    d_z1 = relu_backward(cache.relu1, dropout_backward(cache.drop1, d_h1))
    _, d_theta1, d_bias1 = cheb_backward(
        cache.laplacian1, cache.inputs1, params.conv1, d_z1, cache.basis1
    )

    grads = ModelParams(
        conv1=ChebFilterBank(d_theta1, d_bias1),
        conv2=ChebFilterBank(d_theta2, d_bias2),
        fc_weight=d_fc_weight,
        fc_bias=d_fc_bias,
    )

    decay = config.weight_decay
    if decay > 0:
        loss += weight_decay_penalty(params, decay)
        named, grad_named = params.named_tensors(), grads.named_tensors()
        for name in ModelParams.DECAYED:
            grad_named[name] += (2.0 * decay) * named[name]

    return loss, grads


def predict(
    cloud: PointCloud,
    params: ModelParams,
    config: ModelConfig,
    laplacian: Optional[RescaledLaplacian] = None,
) -> int:
    """Most probable class in evaluation mode."""
    return forward(cloud, params, config, training=False, laplacian=laplacian).prediction
