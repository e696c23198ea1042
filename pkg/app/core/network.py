"""
End-to-end network: toy convolutional feature extractor F, pooling (second-order or global
average), optional gradient reversal on the unlabeled path, and the classifier C, plus the
two training losses.
"""

import copy
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.sop import FeatureMap, sop_dimension, sop_forward
from app.core.tensor import (
    Parameter,
    Tensor,
    add,
    as_tensor,
    conv2d,
    divide,
    gradient_reversal,
    hadamard,
    log_softmax_rows,
    matmul,
    mean,
    relu,
    reshape,
    scale,
    softmax_rows,
    sqrt,
    sum_,
    transpose,
    xlogx,
)
from app.errors import ConfigError, ContractError, DimensionError
from app.models import (
    LayerKind,
    ModelConfig,
    ParamGroup,
    SopConfig,
    TrainMode,
)

logger = logging.getLogger("Network")

GRL_BACKWARD_FACTOR = -1.0


class FeatureExtractor:
    """
    Stack of conv2d / relu / pointwise_linear layers, no biases, Kaiming fan-in initialization.
    All weights belong to theta_F.
    """

    def __init__(self, model_config: ModelConfig, input_shape: Tuple[int, int, int], rng: np.random.Generator):
        self.config = model_config.feature_extractor
        self.input_shape = tuple(input_shape)
        self.output_shape = self.config.output_shape(self.input_shape)
        channels, height, width = self.output_shape
        if height < 1 or width < 1:
            raise ConfigError(f"feature extractor collapses input {self.input_shape} to {self.output_shape}")
        if channels < 2:
            raise ConfigError(f"feature extractor must end with d >= 2 channels, got {channels}")

        self.layers: List[Tuple[object, Optional[Parameter]]] = []
        channels = self.input_shape[0]
        for index, layer in enumerate(self.config.layers):
            param = None
            if layer.kind is LayerKind.CONV2D:
                fan_in = channels * layer.kernel_size * layer.kernel_size
                shape = (layer.out_channels, channels, layer.kernel_size, layer.kernel_size)
                param = Parameter(
                    f"features.{index}.conv2d.weight",
                    Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)),
                    ParamGroup.FEATURE_EXTRACTOR,
                )
                channels = layer.out_channels
            elif layer.kind is LayerKind.POINTWISE_LINEAR:
                param = Parameter(
                    f"features.{index}.pointwise.weight",
                    Tensor(rng.normal(0.0, np.sqrt(2.0 / channels), size=(layer.out_channels, channels))),
                    ParamGroup.FEATURE_EXTRACTOR,
                )
                channels = layer.out_channels
            self.layers.append((layer, param))

    @property
    def parameters(self) -> List[Parameter]:
        return [param for _, param in self.layers if param is not None]

    def __call__(self, images: Tensor) -> Tensor:
        x = as_tensor(images)
        if tuple(x.shape[-3:]) != self.input_shape or x.ndim not in (3, 4):
            raise DimensionError(f"image shape {x.shape} does not match configured input {self.input_shape}")
        for layer, param in self.layers:
            if layer.kind is LayerKind.CONV2D:
                x = conv2d(x, param.tensor, stride=layer.stride, padding=layer.padding)
            elif layer.kind is LayerKind.RELU:
                x = relu(x)
            else:
                lead, (channels, height, width) = x.shape[:-3], x.shape[-3:]
                flat = reshape(x, lead + (channels, height * width))
                x = reshape(matmul(param.tensor, flat), lead + (layer.out_channels, height, width))
        return x


def extract_features(images: Tensor, extractor: FeatureExtractor) -> FeatureMap:
    return FeatureMap.from_conv_output(extractor(images))


def global_average_pool(feature_map: FeatureMap) -> Tensor:
    """First-order pooling: per-channel mean over the n spatial positions."""
    return mean(feature_map.X, axis=-2)


def grl(v: Tensor, factor: float = GRL_BACKWARD_FACTOR) -> Tensor:
    return gradient_reversal(v, factor)


class NormalizedClassifier:
    """Prototype rows w_i scored against unnormalized features through w_i / (||w_i|| + eps)."""

    def __init__(
        self,
        num_classes: int,
        dim: int,
        rng: np.random.Generator,
        eps_norm: float = 1e-8,
        logit_scale: float = 1.0,
    ):
        self.num_classes = num_classes
        self.dim = dim
        self.eps_norm = eps_norm
        self.logit_scale = logit_scale
        self.weight = Parameter(
            "classifier.weight",
            Tensor(rng.normal(0.0, 1.0 / np.sqrt(dim), size=(num_classes, dim))),
            ParamGroup.CLASSIFIER,
        )

    @property
    def parameters(self) -> List[Parameter]:
        return [self.weight]

    def normalized_weight(self) -> Tensor:
        W = self.weight.tensor
        norms = sqrt(sum_(hadamard(W, W), axis=1, keepdims=True))
        return divide(W, add(norms, self.eps_norm))

    def __call__(self, v: Tensor) -> Tensor:
        v = as_tensor(v)
        if v.shape[-1] != self.dim:
            raise DimensionError(f"classifier expects features of length {self.dim}, got shape {v.shape}")
        logits = matmul(v if v.ndim > 1 else reshape(v, (1, self.dim)), transpose(self.normalized_weight()))
        return scale(logits, self.logit_scale) if self.logit_scale != 1.0 else logits


class LinearClassifier:
    """Unnormalized W v + b, used by the first-order supervised baseline only."""

    def __init__(self, num_classes: int, dim: int, rng: np.random.Generator):
        self.num_classes = num_classes
        self.dim = dim
        self.weight = Parameter(
            "classifier.weight",
            Tensor(rng.normal(0.0, 1.0 / np.sqrt(dim), size=(num_classes, dim))),
            ParamGroup.CLASSIFIER,
        )
        self.bias = Parameter("classifier.bias", Tensor(np.zeros(num_classes)), ParamGroup.CLASSIFIER)

    @property
    def parameters(self) -> List[Parameter]:
        return [self.weight, self.bias]

    def __call__(self, v: Tensor) -> Tensor:
        v = as_tensor(v)
        if v.shape[-1] != self.dim:
            raise DimensionError(f"classifier expects features of length {self.dim}, got shape {v.shape}")
        return add(matmul(v, transpose(self.weight.tensor)), self.bias.tensor)


def classify(v: Tensor, classifier) -> Tensor:
    """Logits (b, K) of pooled features under either classifier head."""
    return classifier(v)


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of the labels, via log-softmax."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise DimensionError(f"labels of shape {labels.shape} do not match logits of shape {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractError(f"labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]")
    one_hot = np.eye(num_classes)[labels]
    picked = sum_(hadamard(log_softmax_rows(logits), one_hot))
    return scale(picked, -1.0 / labels.size)


def entropy(probs: Tensor) -> Tensor:
    """Mean Shannon entropy (nats) of the rows of a probability batch, 0 log 0 := 0."""
    probs = as_tensor(probs)
    rows = int(np.prod(probs.shape[:-1])) if probs.ndim > 1 else 1
    return scale(sum_(xlogx(probs)), -1.0 / rows)


class Network:
    """
    Feature extractor + pooling + classifier for one training mode.

    Usage:
        >>> network = build_network(TrainMode.OURS, ModelConfig(), SopConfig(), (8, 16, 16), 10, rng)
        >>> logits = network.logits(images, reverse_gradient=True)
    """

    def __init__(
        self,
        mode: TrainMode,
        model_config: ModelConfig,
        sop_config: SopConfig,
        input_shape: Tuple[int, int, int],
        num_classes: int,
        rng: np.random.Generator,
    ):
        self.mode = mode
        self.model_config = model_config
        self.sop_config = sop_config
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.extractor = FeatureExtractor(model_config, self.input_shape, rng)
        channels = self.extractor.output_shape[0]
        self.feature_dim = sop_dimension(channels) if mode.uses_sop else channels
        if mode.normalized_classifier:
            self.classifier = NormalizedClassifier(
                num_classes, self.feature_dim, rng, model_config.eps_norm, model_config.logit_scale
            )
        else:
            self.classifier = LinearClassifier(num_classes, self.feature_dim, rng)

        self.parameters: List[Parameter] = self.extractor.parameters + self.classifier.parameters
        names = [param.name for param in self.parameters]
        if len(set(names)) != len(names):
            raise ContractError(f"duplicate parameter names: {names}")

    def parameters_in(self, group: ParamGroup) -> List[Parameter]:
        return [param for param in self.parameters if param.group is group]

    def features(self, images) -> Tensor:
        """Pooled feature vectors: (b, m) second-order or (b, d) first-order."""
        feature_map = extract_features(as_tensor(images), self.extractor)
        if self.mode.uses_sop:
            return sop_forward(feature_map, self.sop_config).v
        return global_average_pool(feature_map)

    def logits(self, images, reverse_gradient: bool = False) -> Tensor:
        v = self.features(images)
        if reverse_gradient:
            v = grl(v)
        return classify(v, self.classifier)

    def probabilities(self, images, reverse_gradient: bool = False) -> Tensor:
        return softmax_rows(self.logits(images, reverse_gradient))

    def predict(self, images) -> np.ndarray:
        return np.argmax(self.logits(images).data, axis=-1)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {param.name: param.data.copy() for param in self.parameters}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for param in self.parameters:
            if param.name not in state:
                raise ContractError(f"state has no entry for parameter {param.name}")
            value = np.asarray(state[param.name], dtype=np.float64)
            if value.shape != param.data.shape:
                raise DimensionError(f"{param.name}: state shape {value.shape} != parameter shape {param.data.shape}")
            param.data = value.copy()

    def clone(self) -> "Network":
        """Independent copy with its own parameter arrays."""
        twin = copy.copy(self)
        twin.extractor = copy.copy(self.extractor)
        twin.extractor.layers = [
            (layer, None if param is None else Parameter(param.name, Tensor(param.data.copy()), param.group))
            for layer, param in self.extractor.layers
        ]
        twin.classifier = copy.copy(self.classifier)
        for attribute in ("weight", "bias"):
            param = getattr(self.classifier, attribute, None)
            if param is not None:
                setattr(twin.classifier, attribute, Parameter(param.name, Tensor(param.data.copy()), param.group))
        twin.parameters = twin.extractor.parameters + twin.classifier.parameters
        return twin


def build_network(
    mode: TrainMode,
    model_config: ModelConfig,
    sop_config: SopConfig,
    input_shape: Tuple[int, int, int],
    num_classes: int,
    rng: np.random.Generator,
) -> Network:
    network = Network(mode, model_config, sop_config, input_shape, num_classes, rng)
    logger.info(
        f"Built {mode.value} network: input {network.input_shape}, features {network.extractor.output_shape}, "
        f"m={network.feature_dim}, K={num_classes}, {sum(p.data.size for p in network.parameters)} weights"
    )
    return network
