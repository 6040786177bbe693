"""Encoder–decoder saliency network hosting AGCMs on its deepest skip connections."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass
from typing import Mapping

from . import nn
from . import tensor as T
from .agcm import AgcmConfig, agcm_forward, agcm_param_count, declare_agcm
from .errors import ConfigError, ShapeError
from .tensor import Tensor

logger = logging.getLogger(__name__)
_warned: set = set()

N_STAGES = 5


@dataclass(frozen=True)
class NetworkConfig:
    input_size: tuple[int, int] = (64, 64)
    widths: tuple[int, ...] = (8, 16, 24, 32, 40)
    agcm_stages: tuple[int, ...] = (4, 5)
    aspp_rates: tuple[int, ...] = (1, 2, 4)
    n_prototypes: int = 8
    n_edgeconv: int = 3
    k_nn: int = 2
    edge_hidden: int | None = None
    heads: int = 2
    dynamic_graph: bool = False
    similarity: str = "dot"

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))
        object.__setattr__(self, "agcm_stages", tuple(sorted(int(v) for v in self.agcm_stages)))
        object.__setattr__(self, "aspp_rates", tuple(int(v) for v in self.aspp_rates))
        if len(self.widths) != N_STAGES or any(w < 1 for w in self.widths):
            raise ConfigError(f"need {N_STAGES} positive stage widths, got {self.widths}")
        h, w = self.input_size
        div = 2 ** N_STAGES
        if h % div or w % div or h <= 0 or w <= 0:
            raise ConfigError(f"input size {h}x{w} must be a positive multiple of {div}")
        if len(set(self.agcm_stages)) != len(self.agcm_stages) or any(
                not 1 <= s <= N_STAGES for s in self.agcm_stages):
            raise ConfigError(f"agcm_stages must be distinct values in 1..{N_STAGES}, got {self.agcm_stages}")
        if not self.aspp_rates or any(r < 1 for r in self.aspp_rates):
            raise ConfigError(f"ASPP rates must be positive, got {self.aspp_rates}")
        for s in self.agcm_stages:
            self.agcm_config(s)

    def agcm_config(self, stage: int) -> AgcmConfig:
        return AgcmConfig(
            channels=self.widths[stage - 1], n_prototypes=self.n_prototypes,
            n_layers=self.n_edgeconv, k_nn=self.k_nn, edge_hidden=self.edge_hidden,
            heads=self.heads, dynamic_graph=self.dynamic_graph, similarity=self.similarity)

    def skip_width(self, stage: int) -> int:
        """Channels leaving the skip path of ``stage`` (stage width plus K score maps)."""
        extra = self.n_prototypes if stage in self.agcm_stages else 0
        return self.widths[stage - 1] + extra

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> bytes:
        """8-byte digest identifying the architecture."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()[:8]

    def replace(self, **changes) -> "NetworkConfig":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------- parameters


def declare_network(cfg: NetworkConfig) -> nn.ParameterStore:
    store = nn.ParameterStore()
    prev = 3
    for s, c in enumerate(cfg.widths, start=1):
        nn.declare_conv(store, f"enc{s}.conv1", prev, c, 3)
        nn.declare_conv(store, f"enc{s}.conv2", c, c, 3)
        nn.declare_conv(store, f"enc{s}.down", c, c, 3)
        nn.declare_conv(store, f"skip{s}", c, c, 1)
        if s in cfg.agcm_stages:
            declare_agcm(store, f"agcm{s}", cfg.agcm_config(s))
        prev = c
    declare_aspp(store, "aspp", cfg.skip_width(N_STAGES), len(cfg.aspp_rates))
    up = cfg.skip_width(N_STAGES)
    for s in range(N_STAGES - 1, 0, -1):
        nn.declare_conv(store, f"dec{s}", up + cfg.skip_width(s), cfg.widths[s - 1], 3)
        up = cfg.widths[s - 1]
    nn.declare_conv(store, "head.conv", up, up, 3)
    nn.declare_conv(store, "head.out", up, 1, 1)
    return store


def build_params(cfg: NetworkConfig, seed: int = 0) -> nn.ParameterStore:
    return nn.init_params(declare_network(cfg), seed=seed)


def agcm_parameter_delta(cfg: NetworkConfig, stage: int) -> int:
    """Closed-form change in parameter count from enabling an AGCM at ``stage``.

    Besides the module itself, its K extra channels widen the consumers of
    that skip: the decoder conv at ``stage`` (or, for the last stage, the ASPP
    branches, fusion conv and the first decoder conv).
    """
    acfg = cfg.agcm_config(stage)
    k = cfg.n_prototypes
    delta = agcm_param_count(acfg)
    if stage < N_STAGES:
        delta += 9 * k * cfg.widths[stage - 1]
        return delta
    c = cfg.widths[-1]
    nb = len(cfg.aspp_rates)
    before = aspp_param_count(c, nb) + nn.conv_param_count(c + cfg.skip_width(N_STAGES - 1), cfg.widths[-2], 3)
    after = aspp_param_count(c + k, nb) + nn.conv_param_count(c + k + cfg.skip_width(N_STAGES - 1), cfg.widths[-2], 3)
    return delta + after - before


# ---------------------------------------------------------------- encoder


def encoder_forward(image: Tensor, cfg: NetworkConfig, params: Mapping[str, Tensor]) -> list[Tensor]:
    """Five stages of conv3×3+relu, conv3×3+relu, stride-2 conv3×3+relu."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"encoder expects a 3×H×W image, got {image.shape}")
    if tuple(image.shape[1:]) != cfg.input_size:
        raise ConfigError(f"image size {image.shape[1:]} does not match configured {cfg.input_size}")
    feats = []
    x = image
    for s in range(1, N_STAGES + 1):
        x = T.relu(nn.conv(params, f"enc{s}.conv1", x, padding=1))
        x = T.relu(nn.conv(params, f"enc{s}.conv2", x, padding=1))
        x = T.relu(nn.conv(params, f"enc{s}.down", x, stride=2, padding=1))
        feats.append(x)
    return feats


# ---------------------------------------------------------------- ASPP


def declare_aspp(store: nn.ParameterStore, prefix: str, channels: int, n_rates: int) -> None:
    nn.declare_conv(store, f"{prefix}.b0", channels, channels, 1)
    for i in range(n_rates):
        nn.declare_conv(store, f"{prefix}.r{i}", channels, channels, 3)
    nn.declare_conv(store, f"{prefix}.fuse", channels * (n_rates + 1), channels, 1)


def aspp_param_count(channels: int, n_rates: int) -> int:
    return (nn.conv_param_count(channels, channels, 1)
            + n_rates * nn.conv_param_count(channels, channels, 3)
            + nn.conv_param_count(channels * (n_rates + 1), channels, 1))


def effective_rates(rates, height: int, width: int) -> list[int]:
    """Rates actually used; a rate reaching past the map collapses to 1."""
    out = []
    for r in rates:
        if r >= min(height, width) and r != 1:
            if (r, height, width) not in _warned:
                _warned.add((r, height, width))
                logger.warning("ASPP rate %d too large for %dx%d map; using rate 1", r, height, width)
            r = 1
        out.append(r)
    return out


def aspp_forward(x: Tensor, params: Mapping[str, Tensor], rates, prefix: str = "aspp") -> Tensor:
    """1×1 branch plus one dilated 3×3 branch per rate, concatenated and fused by 1×1 conv."""
    _, h, w = x.shape
    branches = [T.relu(nn.conv(params, f"{prefix}.b0", x))]
    for i, r in enumerate(effective_rates(rates, h, w)):
        branches.append(T.relu(nn.conv(params, f"{prefix}.r{i}", x, dilation=r, padding=r)))
    return T.relu(nn.conv(params, f"{prefix}.fuse", T.concat(branches, axis=0)))


# ---------------------------------------------------------------- full model


def skip_forward(feats: list[Tensor], cfg: NetworkConfig, params: Mapping[str, Tensor]) -> list[Tensor]:
    skips = []
    for s, f in enumerate(feats, start=1):
        x = nn.conv(params, f"skip{s}", f)
        if s in cfg.agcm_stages:
            x = agcm_forward(x, cfg.agcm_config(s), params, prefix=f"agcm{s}")
        if s == N_STAGES:
            x = aspp_forward(x, params, cfg.aspp_rates)
        if x.shape[0] != cfg.skip_width(s):
            raise ShapeError(f"stage {s}: skip has {x.shape[0]} channels, decoder expects {cfg.skip_width(s)}")
        skips.append(x)
    return skips


def decoder_forward(skips: list[Tensor], params: Mapping[str, Tensor]) -> Tensor:
    x = skips[-1]
    for s in range(N_STAGES - 1, 0, -1):
        up = T.upsample_nearest(x, 2)
        try:
            x = T.relu(nn.conv(params, f"dec{s}", T.concat([up, skips[s - 1]], axis=0), padding=1))
        except ShapeError as exc:
            raise ShapeError(f"decoder stage {s}: {exc}") from exc
    x = T.upsample_nearest(x, 2)
    x = T.relu(nn.conv(params, "head.conv", x, padding=1))
    return nn.conv(params, "head.out", x)


def model_logits(image: Tensor, cfg: NetworkConfig, params: Mapping[str, Tensor]) -> Tensor:
    feats = encoder_forward(image, cfg, params)
    return decoder_forward(skip_forward(feats, cfg, params), params)


def model_forward(image: Tensor, cfg: NetworkConfig, params: Mapping[str, Tensor]) -> Tensor:
    """Saliency mask of shape 1×H×W with values in (0, 1)."""
    return T.sigmoid(model_logits(image, cfg, params))
