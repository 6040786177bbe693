"""Adaptive graph convolution module.

The module turns a C×H×W feature map into K prototype vectors by
attention-weighted pooling, builds a kNN graph over the prototypes, embeds
them with a stack of EdgeConv layers, and uses the Gram matrix of those
embeddings to mix channel-reweighted prototypes. The mixed prototypes are
correlated against every pixel and the K score maps are appended to the
input channels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

logger = logging.getLogger(__name__)
_warned: set = set()


@dataclass(frozen=True)
class AgcmConfig:
    """Hyperparameters of one AGCM instance.

    ``edge_hidden`` defaults to ``channels``. ``dynamic_graph`` rebuilds the
    kNN graph from each layer's input instead of reusing the one built on the
    raw prototypes. ``similarity`` is ``"dot"`` (scaled by 1/C) or ``"cosine"``.
    """

    channels: int
    n_prototypes: int = 8
    n_layers: int = 3
    k_nn: int = 2
    edge_hidden: Optional[int] = None
    heads: int = 2
    dynamic_graph: bool = False
    similarity: str = "dot"

    def __post_init__(self):
        if self.channels < 1 or self.n_prototypes < 1 or self.n_layers < 1:
            raise ConfigError(
                f"AGCM needs channels, n_prototypes, n_layers >= 1; got {self.channels}, "
                f"{self.n_prototypes}, {self.n_layers}")
        if not 1 <= self.k_nn <= self.n_prototypes - 1:
            raise ConfigError(
                f"k_nn must lie in [1, {self.n_prototypes - 1}] for {self.n_prototypes} prototypes, "
                f"got {self.k_nn}")
        if self.similarity not in ("dot", "cosine"):
            raise ConfigError(f"unknown similarity {self.similarity!r}")
        if self.edge_hidden is not None and self.edge_hidden < 1:
            raise ConfigError("edge_hidden must be positive")
        nn.MhaSpec(self.channels, self.heads)

    @property
    def hidden(self) -> int:
        return self.edge_hidden or self.channels

    @property
    def edge_spec(self) -> nn.MlpSpec:
        return nn.MlpSpec((2 * self.channels, self.hidden, self.channels))

    @property
    def mha_spec(self) -> nn.MhaSpec:
        return nn.MhaSpec(self.channels, self.heads)

    @property
    def mlp_spec(self) -> nn.MlpSpec:
        return nn.MlpSpec((self.channels, self.channels, self.channels))


def declare_agcm(store: nn.ParameterStore, prefix: str, cfg: AgcmConfig) -> None:
    # no bias: a per-map constant is cancelled by the spatial softmax
    nn.declare_conv(store, f"{prefix}.attn", cfg.channels, cfg.n_prototypes, 1, bias=False)
    for n in range(cfg.n_layers):
        nn.declare_mlp(store, f"{prefix}.edgeconv.{n}", cfg.edge_spec)
    nn.declare_mha(store, f"{prefix}.mha", cfg.mha_spec)
    nn.declare_mlp(store, f"{prefix}.mlp", cfg.mlp_spec)


def agcm_param_count(cfg: AgcmConfig) -> int:
    """Closed-form number of scalars held by one AGCM."""
    return (nn.conv_param_count(cfg.channels, cfg.n_prototypes, 1, bias=False)
            + cfg.n_layers * nn.mlp_param_count(cfg.edge_spec)
            + nn.mha_param_count(cfg.mha_spec)
            + nn.mlp_param_count(cfg.mlp_spec))


# ---------------------------------------------------------------- stage 1


def generate_prototypes(features: Tensor, params: Mapping[str, Tensor],
                        prefix: str = "agcm") -> tuple[Tensor, Tensor]:
    """Attention-pool a C×H×W map into prototypes.

    Returns ``(P, S)`` with ``S`` the K×HW spatial softmax of a 1×1
    convolution and ``P = I_flat @ S.T`` of shape C×K.
    """
    if features.ndim != 3:
        raise ShapeError(f"generate_prototypes expects C×H×W, got {features.shape}")
    c, h, w = features.shape
    kernel = params[f"{prefix}.attn.weight"]
    if kernel.shape[1] != c:
        raise ConfigError(f"{prefix}: attention kernel expects {kernel.shape[1]} channels, input has {c}")
    k = kernel.shape[0]
    if h * w < k and (prefix, h, w, k) not in _warned:
        _warned.add((prefix, h, w, k))
        logger.warning("%s: %d pixels for %d prototypes; prototypes will be degenerate", prefix, h * w, k)
    logits = nn.conv(params, f"{prefix}.attn", features)
    attention = T.softmax(logits.reshape(k, h * w), axis=1)
    flat = features.reshape(c, h * w)
    return T.matmul(flat, attention.T), attention


# ---------------------------------------------------------------- graph


@dataclass(frozen=True)
class KnnGraph:
    """``neighbors[i]`` lists the k nearest other nodes of node i, nearest first."""

    neighbors: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.neighbors.shape[0]

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]


def knn_graph(prototypes, k_nn: int) -> KnnGraph:
    """Euclidean kNN over the columns of a C×K matrix, self excluded, ties to lower index."""
    x = prototypes.data if isinstance(prototypes, Tensor) else np.asarray(prototypes, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"knn_graph expects a C×K matrix, got {x.shape}")
    n = x.shape[1]
    if not 1 <= k_nn <= n - 1:
        raise ConfigError(f"k_nn={k_nn} out of range for {n} nodes")
    diff = x[:, :, None] - x[:, None, :]
    dist = np.sqrt((diff * diff).sum(axis=0))
    np.fill_diagonal(dist, np.inf)
    order = np.argsort(dist, axis=1, kind="stable")
    return KnnGraph(order[:, :k_nn].copy())


def edgeconv_layer(x: Tensor, graph: KnnGraph, params: Mapping[str, Tensor],
                   spec: nn.MlpSpec, prefix: str) -> Tensor:
    """One EdgeConv layer on a C_in×K node matrix.

    Each node i takes the elementwise max over its neighbours j of
    ``MLP([x_i ; x_j - x_i])``.
    """
    c, n = x.shape
    if graph.n_nodes != n:
        raise ShapeError(f"edgeconv: graph has {graph.n_nodes} nodes, features have {n}")
    k = graph.k
    centre = T.take(x, np.repeat(np.arange(n), k), axis=1)
    neigh = T.take(x, graph.neighbors.reshape(-1), axis=1)
    edges = T.concat([centre, neigh - centre], axis=0)          # 2C × nk
    h = nn.mlp_forward(spec, params, edges.T, prefix=prefix)    # nk × C_out
    pooled, _ = T.max(h.reshape(n, k, h.shape[1]), axis=1)      # n × C_out
    return pooled.T


def embed_prototypes(prototypes: Tensor, graph: KnnGraph, params: Mapping[str, Tensor],
                     cfg: AgcmConfig, prefix: str = "agcm") -> Tensor:
    x = prototypes
    for n in range(cfg.n_layers):
        g = knn_graph(x, cfg.k_nn) if (cfg.dynamic_graph and n > 0) else graph
        x = edgeconv_layer(x, g, params, cfg.edge_spec, f"{prefix}.edgeconv.{n}")
    return x


def adjacency(embeddings: Tensor) -> Tensor:
    """Gram matrix ``E.T @ E`` of node embeddings; K×K and symmetric."""
    if embeddings.ndim != 2:
        raise ShapeError(f"adjacency expects a C×K matrix, got {embeddings.shape}")
    return T.matmul(embeddings.T, embeddings)


# ---------------------------------------------------------------- stage 2


def kernel_weight(prototypes: Tensor, params: Mapping[str, Tensor], cfg: AgcmConfig,
                  prefix: str = "agcm") -> Tensor:
    """Channel weights of length C: self-attention over prototype tokens, mean pool, MLP."""
    if prototypes.ndim != 2 or prototypes.shape[0] != cfg.channels:
        raise ShapeError(f"kernel_weight: expected {cfg.channels}×K prototypes, got {prototypes.shape}")
    tokens = nn.mha_forward(cfg.mha_spec, params, prototypes.T, prefix=f"{prefix}.mha")
    pooled = tokens.mean(axis=0)
    return nn.mlp_forward(cfg.mlp_spec, params, pooled, prefix=f"{prefix}.mlp")


def reweight(prototypes: Tensor, weight: Tensor) -> Tensor:
    if weight.ndim != 1 or weight.shape[0] != prototypes.shape[0]:
        raise ShapeError(f"reweight: weight {weight.shape} does not match {prototypes.shape[0]} channels")
    return T.hadamard(prototypes, weight.reshape(weight.shape[0], 1))


def refine(reweighted: Tensor, affinity: Tensor) -> Tensor:
    """Mix prototypes with a column-stochastic softmax of the affinity matrix."""
    k = reweighted.shape[1]
    if affinity.shape != (k, k):
        raise ShapeError(f"refine: affinity {affinity.shape} does not match {k} nodes")
    return T.matmul(reweighted, T.softmax(affinity, axis=0))


def correlate(refined: Tensor, features: Tensor, similarity: str = "dot") -> Tensor:
    """Per-pixel similarity of each refined prototype with the input features (K×H×W)."""
    c, k = refined.shape
    if features.ndim != 3 or features.shape[0] != c:
        raise ShapeError(f"correlate: prototypes have {c} channels, features {features.shape}")
    _, h, w = features.shape
    flat = features.reshape(c, h * w)
    if similarity == "dot":
        scores = T.matmul(refined.T, flat) * (1.0 / c)
    elif similarity == "cosine":
        eps = 1e-12
        pn = T.sqrt((refined * refined).sum(axis=0, keepdims=True) + eps)
        fn = T.sqrt((flat * flat).sum(axis=0, keepdims=True) + eps)
        scores = T.matmul(T.div(refined, pn).T, T.div(flat, fn))
    else:
        raise ConfigError(f"unknown similarity {similarity!r}")
    return scores.reshape(k, h, w)


# ---------------------------------------------------------------- full module


@dataclass
class AgcmTrace:
    """Intermediate values of one forward pass."""

    attention: Tensor
    prototypes: Tensor
    graph: KnnGraph
    embeddings: Tensor
    affinity: Tensor
    weight: Tensor
    reweighted: Tensor
    refined: Tensor
    scores: Tensor


def agcm_forward(features: Tensor, cfg: AgcmConfig, params: Mapping[str, Tensor],
                 prefix: str = "agcm", trace: bool = False):
    """Run the module and return ``concat(features, scores)`` with C+K channels.

    With ``trace=True`` returns ``(output, AgcmTrace)``.
    """
    if features.ndim != 3 or features.shape[0] != cfg.channels:
        raise ShapeError(f"{prefix}: expected {cfg.channels}×H×W features, got {features.shape}")
    protos, attention = generate_prototypes(features, params, prefix)
    graph = knn_graph(protos, cfg.k_nn)
    emb = embed_prototypes(protos, graph, params, cfg, prefix)
    aff = adjacency(emb)
    weight = kernel_weight(protos, params, cfg, prefix)
    rew = reweight(protos, weight)
    ref = refine(rew, aff)
    scores = correlate(ref, features, cfg.similarity)
    out = T.concat([features, scores], axis=0)
    if trace:
        return out, AgcmTrace(attention, protos, graph, emb, aff, weight, rew, ref, scores)
    return out
