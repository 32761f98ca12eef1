"""
Context-aware attention for one stream of one video.

Instance features are embedded by two ReLU layers, related through an
exponential-kernel instance graph and two GCN layers (the TCG-U), fused with
their context, weighted by the attention unit (ATT-U) and pooled into one
512-d stream feature. SAU drops the graph context; AVG drops both units and
averages uniformly.
"""
from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np
from scipy.spatial.distance import pdist, squareform

from . import autodiff as ad
from .autodiff import Node, Tensor2D
from .errors import ConfigError, NumericError, ShapeError

logger = logging.getLogger(__name__)

STREAM_DIMS = {"dynamic": 1024, "static": 2048}
STREAM_BY_DIM = {dim: stream for stream, dim in STREAM_DIMS.items()}
EMBED_HIDDEN = {"dynamic": 512, "static": 1024}
EMBED_DIM = 256
FUSED_DIM = 2 * EMBED_DIM
ATT_HIDDEN = 256

VARIANTS = ("caa", "sau", "avg")
ATTENTION_NORMS = ("softmax", "sigmoid")


@dataclass(frozen=True)
class InstanceSet:
    features: Tensor2D
    stream: str
    video_id: str = ""

    def __post_init__(self):
        if self.stream not in STREAM_DIMS:
            raise ConfigError(f"unknown stream '{self.stream}'")
        features = ad.as_tensor(self.features)
        if features.shape[0] < 1:
            raise ShapeError(f"video '{self.video_id}': empty {self.stream} instance set")
        if features.shape[1] != STREAM_DIMS[self.stream]:
            raise ShapeError(
                f"video '{self.video_id}': {self.stream} features must have "
                f"{STREAM_DIMS[self.stream]} columns, got {features.shape[1]}"
            )
        object.__setattr__(self, "features", features)

    @property
    def count(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class AdjacencyPair:
    raw: Tensor2D
    normalized: Tensor2D
    kernel_scale: float


@dataclass
class AttentionOutput:
    stream_feature: Node
    weights: Node
    fused: Node
    context: Optional[Node]
    embedded: Node
    adjacency: Optional[AdjacencyPair] = None

    @property
    def weight_values(self) -> np.ndarray:
        return self.weights.value[:, 0]


def branch_layer_shapes(stream: str, variant: str) -> "OrderedDict[str, Tuple[int, int]]":
    """Parameter shapes of one branch, keyed by their name inside the branch."""
    if stream not in STREAM_DIMS:
        raise ConfigError(f"unknown stream '{stream}'")
    if variant not in VARIANTS:
        raise ConfigError(f"unknown attention variant '{variant}'")
    in_dim, hidden = STREAM_DIMS[stream], EMBED_HIDDEN[stream]
    shapes = OrderedDict()
    shapes["embed1.weight"] = (in_dim, hidden)
    shapes["embed1.bias"] = (1, hidden)
    shapes["embed2.weight"] = (hidden, EMBED_DIM)
    shapes["embed2.bias"] = (1, EMBED_DIM)
    if variant == "caa":
        # GCN layers carry no bias.
        shapes["gcn1.weight"] = (EMBED_DIM, EMBED_DIM)
        shapes["gcn2.weight"] = (EMBED_DIM, EMBED_DIM)
    if variant in ("caa", "sau"):
        shapes["att1.weight"] = (FUSED_DIM, ATT_HIDDEN)
        shapes["att1.bias"] = (1, ATT_HIDDEN)
        shapes["att2.weight"] = (ATT_HIDDEN, 1)
        shapes["att2.bias"] = (1, 1)
    return shapes


def linear(x: Node, weight: Node, bias: Optional[Node] = None) -> Node:
    out = ad.matmul(x, weight)
    if bias is not None:
        out = ad.add(out, bias)
    return out


def _require(weights: Mapping[str, Node], name: str) -> Node:
    try:
        return weights[name]
    except KeyError:
        raise ConfigError(f"missing branch parameter '{name}'") from None


def embed(x: Node, weights: Mapping[str, Node]) -> Node:
    """Two ReLU layers: 1024->512->256 for dynamic input, 2048->1024->256 for static."""
    in_dim = x.shape[1]
    if in_dim not in STREAM_BY_DIM:
        raise ShapeError(f"embed: unsupported feature width {in_dim}; expected 1024 or 2048")
    hidden = ad.relu(linear(x, _require(weights, "embed1.weight"), _require(weights, "embed1.bias")))
    return ad.relu(linear(hidden, _require(weights, "embed2.weight"), _require(weights, "embed2.bias")))


# ---- instance graph ----

def _pairwise_distances(features: np.ndarray) -> np.ndarray:
    if features.shape[0] == 1:
        return np.zeros((1, 1))
    return squareform(pdist(features, metric="euclidean"))


def _normalize(raw: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    a_tilde = raw + np.eye(raw.shape[0])
    degree = a_tilde.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(degree)
    # outer(s, s) is exactly symmetric, so the product keeps A-hat symmetric.
    return a_tilde * np.outer(inv_sqrt, inv_sqrt), a_tilde, inv_sqrt


def build_adjacency(embedded: Tensor2D, kernel_scale: float = 1.0) -> AdjacencyPair:
    """Exponential-kernel adjacency over L2 distances and its renormalized form."""
    if not kernel_scale > 0:
        raise ConfigError(f"kernel scale K must be positive, got {kernel_scale}")
    embedded = ad.as_tensor(embedded)
    if embedded.shape[0] < 1:
        raise ShapeError("build_adjacency: empty instance set")
    raw = np.exp(-_pairwise_distances(embedded) / kernel_scale)
    normalized, _a_tilde, _inv_sqrt = _normalize(raw)
    return AdjacencyPair(raw=raw, normalized=normalized, kernel_scale=float(kernel_scale))


def kernel_adjacency(embedded: Node, kernel_scale: float) -> Node:
    """Differentiable exponential-kernel adjacency; zero subgradient at zero distance."""
    if not kernel_scale > 0:
        raise ConfigError(f"kernel scale K must be positive, got {kernel_scale}")
    features = embedded.value
    distances = _pairwise_distances(features)
    raw = np.exp(-distances / kernel_scale)

    def backward(g):
        g_dist = -g * raw / kernel_scale
        pair = np.divide(g_dist + g_dist.T, distances, out=np.zeros_like(distances), where=distances > 0)
        return (pair.sum(axis=1, keepdims=True) * features - pair @ features,)

    return embedded.tape.record(raw, "kernel_adjacency", (embedded,), backward)


def normalize_adjacency(raw: Node) -> Node:
    """Differentiable D^-1/2 (A + I) D^-1/2."""
    normalized, a_tilde, inv_sqrt = _normalize(raw.value)

    def backward(g):
        direct = g * np.outer(inv_sqrt, inv_sqrt)
        weighted = g * a_tilde
        d_inv_sqrt = weighted @ inv_sqrt + weighted.T @ inv_sqrt
        d_degree = d_inv_sqrt * (-0.5) * inv_sqrt ** 3
        return (direct + d_degree[:, None],)

    return raw.tape.record(normalized, "normalize_adjacency", (raw,), backward)


def tcg_forward(embedded: Node, normalized: Union[Node, Tensor2D], weights: Mapping[str, Node]) -> Node:
    """Two GCN layers H <- ReLU(A_hat H W) producing the context-related features."""
    count = embedded.shape[0]
    a_hat = normalized if isinstance(normalized, Node) else embedded.tape.constant(normalized)
    if a_hat.shape != (count, count):
        raise ShapeError(f"tcg_forward: adjacency {a_hat.shape} does not match {count} instances")
    hidden = embedded
    for layer in ("gcn1.weight", "gcn2.weight"):
        hidden = ad.relu(ad.matmul(ad.matmul(a_hat, hidden), _require(weights, layer)))
    return hidden


# ---- attention ----

def attend_aggregate(
    embedded: Node,
    context: Optional[Node],
    weights: Mapping[str, Node],
    variant: str = "caa",
    attention_norm: str = "softmax",
) -> AttentionOutput:
    """Fuse instance and context features, weight them and pool to one row."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown attention variant '{variant}'")
    if attention_norm not in ATTENTION_NORMS:
        raise ConfigError(f"unknown attention normalization '{attention_norm}'")
    count = embedded.shape[0]
    if count == 0:
        raise ShapeError("attend_aggregate: empty instance set")

    if variant == "caa":
        if context is None:
            raise NumericError("CAA attention needs context features")
        if context.shape != embedded.shape:
            raise ShapeError(f"context {context.shape} does not match embedded {embedded.shape}")
        fused = ad.concat_cols(embedded, context)
    else:
        # Keep the 512-d interface without context.
        fused = ad.concat_cols(embedded, embedded)

    if variant == "avg":
        attention = embedded.tape.constant(np.full((count, 1), 1.0 / count))
    else:
        hidden = ad.relu(linear(fused, _require(weights, "att1.weight"), _require(weights, "att1.bias")))
        scores = linear(hidden, _require(weights, "att2.weight"), _require(weights, "att2.bias"))
        attention = ad.softmax_rows(scores) if attention_norm == "softmax" else ad.sigmoid(scores)

    return AttentionOutput(
        stream_feature=ad.weighted_row_sum(fused, attention),
        weights=attention,
        fused=fused,
        context=context if variant == "caa" else None,
        embedded=embedded,
    )


def context_attention(
    features: Node,
    weights: Mapping[str, Node],
    variant: str = "caa",
    kernel_scale: float = 1.0,
    attention_norm: str = "softmax",
    adjacency_grad: bool = False,
    fixed_adjacency: Optional[Tensor2D] = None,
) -> AttentionOutput:
    """Run the whole module on one stream's NxD features."""
    embedded = embed(features, weights)
    adjacency = None
    context = None
    if variant == "caa":
        if fixed_adjacency is not None:
            normalized = ad.as_tensor(fixed_adjacency)
            adjacency = AdjacencyPair(raw=None, normalized=normalized, kernel_scale=float(kernel_scale))
            context = tcg_forward(embedded, normalized, weights)
        elif adjacency_grad:
            raw = kernel_adjacency(embedded, kernel_scale)
            normalized = normalize_adjacency(raw)
            adjacency = AdjacencyPair(raw=raw.value, normalized=normalized.value, kernel_scale=float(kernel_scale))
            context = tcg_forward(embedded, normalized, weights)
        else:
            adjacency = build_adjacency(embedded.value, kernel_scale)
            context = tcg_forward(embedded, adjacency.normalized, weights)
    output = attend_aggregate(embedded, context, weights, variant=variant, attention_norm=attention_norm)
    output.adjacency = adjacency
    return output


def top_instances(weights: np.ndarray, k: int = 4) -> Dict[str, list]:
    """Indices of the k highest and k lowest attention weights, strongest first."""
    values = np.asarray(weights, dtype=np.float64).reshape(-1)
    k = max(0, min(int(k), values.size))
    # Stable sort keeps ties in temporal order.
    order = np.argsort(-values, kind="stable")
    return {
        "high": [int(i) for i in order[:k]],
        "low": [int(i) for i in order[::-1][:k]],
    }
