"""
The two-branch model: dynamic and static context-aware attention branches
with unshared parameters, late fusion, and a sigmoid score regressor.
"""
from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterator, Mapping, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape, Tensor2D
from .context_attention import (
    ATTENTION_NORMS,
    FUSED_DIM,
    VARIANTS,
    AttentionOutput,
    InstanceSet,
    branch_layer_shapes,
    context_attention,
    linear,
)
from .errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

STREAM_SETS = {
    "ds": ("dynamic",),
    "ss": ("static",),
    "ts": ("dynamic", "static"),
}
HEAD_HIDDEN = 128
ATTENTION_GROUP = "attention"
PREDICTION_GROUP = "prediction"
CLAIMED_PARAMETER_COUNT = 3_540_000


@dataclass(frozen=True)
class ModelConfig:
    streams: str = "ts"
    attention: str = "caa"
    kernel_scale: float = 1.0
    dropout: float = 0.5
    seed: int = 0
    attention_norm: str = "softmax"
    adjacency_grad: bool = False

    def __post_init__(self):
        if self.streams not in STREAM_SETS:
            raise ConfigError(f"streams must be one of {sorted(STREAM_SETS)}, got '{self.streams}'")
        if self.attention not in VARIANTS:
            raise ConfigError(f"attention must be one of {list(VARIANTS)}, got '{self.attention}'")
        if self.attention_norm not in ATTENTION_NORMS:
            raise ConfigError(f"attention_norm must be one of {list(ATTENTION_NORMS)}")
        if not self.kernel_scale > 0:
            raise ConfigError(f"kernel scale K must be positive, got {self.kernel_scale}")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def active_streams(self) -> Tuple[str, ...]:
        return STREAM_SETS[self.streams]

    @property
    def head_input_dim(self) -> int:
        return FUSED_DIM * len(self.active_streams)


def group_for(name: str) -> str:
    return PREDICTION_GROUP if name.startswith("head.") else ATTENTION_GROUP


class ModelParams:
    """Named float64 tensors, each tagged with its learning-rate group."""

    def __init__(self, tensors: Optional[Mapping[str, Tensor2D]] = None):
        self.tensors: "OrderedDict[str, Tensor2D]" = OrderedDict()
        for name, value in (tensors or {}).items():
            self.tensors[name] = ad.as_tensor(value)

    def __getitem__(self, name: str) -> Tensor2D:
        return self.tensors[name]

    def __setitem__(self, name: str, value: Tensor2D) -> None:
        self.tensors[name] = ad.as_tensor(value)

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def group(self, name: str) -> str:
        return group_for(name)

    def shapes(self) -> "OrderedDict[str, Tuple[int, int]]":
        return OrderedDict((name, value.shape) for name, value in self.tensors.items())

    def copy(self) -> "ModelParams":
        return ModelParams({name: value.copy() for name, value in self.tensors.items()})

    def branch(self, stream: str) -> Dict[str, Tensor2D]:
        prefix = f"{stream}."
        return {name[len(prefix):]: value for name, value in self.tensors.items() if name.startswith(prefix)}

    def identical_to(self, other: "ModelParams") -> bool:
        if list(self.tensors) != list(other.tensors):
            return False
        return all(
            self.tensors[name].shape == other.tensors[name].shape
            and self.tensors[name].tobytes() == other.tensors[name].tobytes()
            for name in self.tensors
        )


def layer_shapes(config: ModelConfig) -> "OrderedDict[str, Tuple[int, int]]":
    shapes = OrderedDict()
    for stream in config.active_streams:
        for name, shape in branch_layer_shapes(stream, config.attention).items():
            shapes[f"{stream}.{name}"] = shape
    shapes["head.fc1.weight"] = (config.head_input_dim, HEAD_HIDDEN)
    shapes["head.fc1.bias"] = (1, HEAD_HIDDEN)
    shapes["head.fc2.weight"] = (HEAD_HIDDEN, 1)
    shapes["head.fc2.bias"] = (1, 1)
    return shapes


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Weights ~ U(-sqrt(1/fan_in), sqrt(1/fan_in)); biases start at zero."""
    params = ModelParams()
    for name, shape in layer_shapes(config).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            bound = np.sqrt(1.0 / shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


@dataclass
class ParamCount:
    per_layer: "OrderedDict[str, int]"
    per_group: Dict[str, int]
    per_branch: Dict[str, int]
    total: int
    claimed: int = CLAIMED_PARAMETER_COUNT

    @property
    def relative_gap(self) -> float:
        return (self.total - self.claimed) / float(self.claimed)


def count_params(params: ModelParams) -> ParamCount:
    per_layer = OrderedDict((name, int(value.size)) for name, value in params.items())
    per_group = {ATTENTION_GROUP: 0, PREDICTION_GROUP: 0}
    per_branch: Dict[str, int] = {}
    for name, size in per_layer.items():
        per_group[group_for(name)] += size
        branch = name.split(".", 1)[0]
        per_branch[branch] = per_branch.get(branch, 0) + size
    return ParamCount(
        per_layer=per_layer,
        per_group=per_group,
        per_branch=per_branch,
        total=sum(per_layer.values()),
    )


@dataclass
class ForwardResult:
    score: Node
    tape: Tape
    attention: Dict[str, AttentionOutput]
    param_nodes: Dict[str, Node] = field(default_factory=dict)

    @property
    def value(self) -> float:
        return float(self.score.value[0, 0])


def _coerce_instances(value, stream: str) -> Optional[Tensor2D]:
    if value is None:
        return None
    if isinstance(value, InstanceSet):
        if value.stream != stream:
            raise ConfigError(f"expected {stream} instances, got {value.stream}")
        return value.features
    return InstanceSet(features=value, stream=stream).features


def forward(
    dynamic,
    static,
    params: ModelParams,
    config: ModelConfig,
    mode: str = "eval",
    rng: Optional[np.random.Generator] = None,
    fixed_adjacency: Optional[Mapping[str, Tensor2D]] = None,
) -> ForwardResult:
    """
    Score one video.

    Inputs are InstanceSets or NxD arrays per stream; the score is
    sigmoid(FC2(dropout(ReLU(FC1([f_D; f_S]))))). Single-stream configs feed
    only their own 512-d stream feature to the head.
    """
    provided = {"dynamic": dynamic, "static": static}
    # Streams outside the config are never read.
    inputs = {stream: _coerce_instances(provided[stream], stream) for stream in config.active_streams}
    for stream in config.active_streams:
        if inputs[stream] is None:
            raise ConfigError(f"streams '{config.streams}' require {stream} features")

    expected = layer_shapes(config)
    if dict(params.shapes()) != dict(expected):
        missing = sorted(set(expected) - set(params.shapes()))
        raise ShapeError(
            f"parameters do not match config streams={config.streams} attention={config.attention}"
            + (f" (missing {', '.join(missing[:4])})" if missing else "")
        )

    tape = Tape()
    param_nodes = {name: tape.variable(value, name=name) for name, value in params.items()}

    attention: Dict[str, AttentionOutput] = {}
    stream_features = []
    for stream in config.active_streams:
        prefix = f"{stream}."
        branch_nodes = {name[len(prefix):]: node for name, node in param_nodes.items() if name.startswith(prefix)}
        output = context_attention(
            tape.constant(inputs[stream]),
            branch_nodes,
            variant=config.attention,
            kernel_scale=config.kernel_scale,
            attention_norm=config.attention_norm,
            adjacency_grad=config.adjacency_grad,
            fixed_adjacency=(fixed_adjacency or {}).get(stream),
        )
        attention[stream] = output
        stream_features.append(output.stream_feature)

    fused = stream_features[0]
    for feature in stream_features[1:]:
        fused = ad.concat_cols(fused, feature)

    hidden = ad.relu(linear(fused, param_nodes["head.fc1.weight"], param_nodes["head.fc1.bias"]))
    hidden = ad.dropout(hidden, config.dropout, mode, rng)
    score = ad.sigmoid(linear(hidden, param_nodes["head.fc2.weight"], param_nodes["head.fc2.bias"]))
    return ForwardResult(score=score, tape=tape, attention=attention, param_nodes=param_nodes)


def predict(dynamic, static, params: ModelParams, config: ModelConfig) -> float:
    return forward(dynamic, static, params, config, mode="eval").value
