"""Parameter storage and the small layer zoo used by AGCM and the host network."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError, UsageError
from .tensor import Tensor


@dataclass(frozen=True)
class _Decl:
    shape: tuple[int, ...]
    kind: str  # "weight" or "bias"
    fan_in: int
    fan_out: int


class ParameterStore(Mapping[str, Tensor]):
    """Learnable tensors keyed by dotted path, enumerated in lexicographic order.

    Parameters are first *declared* (shape and fans) and later materialised by
    :func:`init_params` or by loading a checkpoint.
    """

    def __init__(self):
        self._decls: dict[str, _Decl] = {}
        self._params: dict[str, Tensor] = {}

    def declare(self, path: str, shape, kind: str = "weight", fan_in: int = 1, fan_out: int = 1):
        if path in self._decls:
            raise ConfigError(f"parameter {path!r} declared twice")
        if kind not in ("weight", "bias"):
            raise ConfigError(f"unknown parameter kind {kind!r}")
        self._decls[path] = _Decl(tuple(int(s) for s in shape), kind, int(fan_in), int(fan_out))

    def declaration(self, path: str) -> _Decl:
        return self._decls[path]

    @property
    def initialized(self) -> bool:
        return bool(self._params)

    def __getitem__(self, path: str) -> Tensor:
        try:
            return self._params[path]
        except KeyError:
            if path in self._decls:
                raise UsageError(f"parameter {path!r} is declared but not initialised") from None
            raise

    def __setitem__(self, path: str, value) -> None:
        if path not in self._decls:
            raise KeyError(f"undeclared parameter {path!r}")
        arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype=np.float64)
        if arr.shape != self._decls[path].shape:
            raise ShapeError(f"{path}: expected shape {self._decls[path].shape}, got {arr.shape}")
        self._params[path] = Tensor(arr, requires_grad=True, name=path)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._decls))

    def __len__(self) -> int:
        return len(self._decls)

    def num_parameters(self) -> int:
        return int(sum(int(np.prod(d.shape)) for d in self._decls.values()))

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def with_override(self, path: str, value: Tensor) -> "ParameterStore":
        """Shallow copy in which ``path`` maps to ``value`` (used for gradient checks)."""
        if path not in self._decls:
            raise KeyError(path)
        clone = ParameterStore()
        clone._decls = self._decls
        clone._params = dict(self._params)
        clone._params[path] = value
        return clone


def init_params(store: ParameterStore, scheme: str = "glorot_uniform", seed: int = 0) -> ParameterStore:
    """Fill every declared parameter: Glorot-uniform weights, zero biases."""
    if store.initialized:
        raise UsageError("parameter store is already initialised")
    if scheme != "glorot_uniform":
        raise ConfigError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    for path in store:
        d = store.declaration(path)
        if d.kind == "bias":
            store[path] = np.zeros(d.shape)
        else:
            limit = math.sqrt(6.0 / (d.fan_in + d.fan_out))
            store[path] = rng.uniform(-limit, limit, size=d.shape)
    return store


# ---------------------------------------------------------------- affine / MLP


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        if not self.widths or any(w <= 0 for w in self.widths):
            raise ConfigError(f"MLP widths must be positive, got {self.widths}")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def depth(self) -> int:
        return len(self.widths) - 1


_ACTIVATIONS = {"relu": T.relu, "sigmoid": T.sigmoid}


def declare_linear(store: ParameterStore, prefix: str, d_in: int, d_out: int, bias: bool = True) -> None:
    store.declare(f"{prefix}.weight", (d_in, d_out), "weight", d_in, d_out)
    if bias:
        store.declare(f"{prefix}.bias", (d_out,), "bias")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Row-vector affine map ``x @ weight + bias`` for x of shape (d_in,) or (n, d_in)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} does not match weight {weight.shape}")
    squeeze = x.ndim == 1
    if squeeze:
        x = x.reshape(1, x.shape[0])
    y = T.matmul(x, weight)
    if bias is not None:
        y = y + bias.reshape(1, bias.shape[0])
    return y.reshape(y.shape[1]) if squeeze else y


def declare_mlp(store: ParameterStore, prefix: str, spec: MlpSpec) -> None:
    for i in range(spec.depth):
        declare_linear(store, f"{prefix}.{i}", spec.widths[i], spec.widths[i + 1])


def mlp_forward(spec: MlpSpec, params: Mapping[str, Tensor], x: Tensor, prefix: str = "mlp") -> Tensor:
    """Affine layers with ``spec.activation`` between them; the last layer is affine only."""
    if x.shape[-1] != spec.widths[0]:
        raise ShapeError(f"mlp: input width {x.shape[-1]} != {spec.widths[0]}")
    act = _ACTIVATIONS[spec.activation]
    for i in range(spec.depth):
        x = linear(x, params[f"{prefix}.{i}.weight"], params[f"{prefix}.{i}.bias"])
        if i < spec.depth - 1:
            x = act(x)
    return x


def mlp_param_count(spec: MlpSpec) -> int:
    return sum(a * b + b for a, b in zip(spec.widths[:-1], spec.widths[1:]))


# ---------------------------------------------------------------- attention


@dataclass(frozen=True)
class MhaSpec:
    d: int
    heads: int = 2

    def __post_init__(self):
        if self.d <= 0 or self.heads <= 0:
            raise ConfigError(f"MHA dims must be positive, got d={self.d}, heads={self.heads}")
        if self.d % self.heads:
            raise ConfigError(f"MHA model dim {self.d} is not divisible by {self.heads} heads")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads


def declare_mha(store: ParameterStore, prefix: str, spec: MhaSpec) -> None:
    # a key bias only shifts every logit of a query row equally, which softmax ignores
    for name in ("q", "k", "v", "o"):
        declare_linear(store, f"{prefix}.{name}", spec.d, spec.d, bias=name != "k")


def mha_param_count(spec: MhaSpec) -> int:
    return 4 * spec.d * spec.d + 3 * spec.d


def mha_forward(spec: MhaSpec, params: Mapping[str, Tensor], tokens: Tensor, prefix: str = "mha") -> Tensor:
    """Multi-head scaled dot-product self-attention over the rows of a K×d matrix.

    No positional encoding is added, so the map is permutation-equivariant
    over tokens.
    """
    if tokens.ndim != 2 or tokens.shape[1] != spec.d:
        raise ShapeError(f"mha: expected K×{spec.d} tokens, got {tokens.shape}")
    q = linear(tokens, params[f"{prefix}.q.weight"], params[f"{prefix}.q.bias"])
    k = linear(tokens, params[f"{prefix}.k.weight"])
    v = linear(tokens, params[f"{prefix}.v.weight"], params[f"{prefix}.v.bias"])
    dh = spec.head_dim
    inv_scale = 1.0 / math.sqrt(dh)
    heads = []
    for h in range(spec.heads):
        cols = slice(h * dh, (h + 1) * dh)
        qh, kh, vh = q[:, cols], k[:, cols], v[:, cols]
        attn = T.softmax(T.matmul(qh, kh.T) * inv_scale, axis=1)
        heads.append(T.matmul(attn, vh))
    merged = heads[0] if len(heads) == 1 else T.concat(heads, axis=1)
    return linear(merged, params[f"{prefix}.o.weight"], params[f"{prefix}.o.bias"])


# ---------------------------------------------------------------- convolution


def declare_conv(store: ParameterStore, prefix: str, c_in: int, c_out: int, k: int, bias: bool = True) -> None:
    store.declare(f"{prefix}.weight", (c_out, c_in, k, k), "weight", c_in * k * k, c_out * k * k)
    if bias:
        store.declare(f"{prefix}.bias", (c_out,), "bias")


def conv_param_count(c_in: int, c_out: int, k: int, bias: bool = True) -> int:
    return c_out * c_in * k * k + (c_out if bias else 0)


def conv(params: Mapping[str, Tensor], prefix: str, x: Tensor, stride: int = 1,
         dilation: int = 1, padding: int = 0) -> Tensor:
    bias = params.get(f"{prefix}.bias")
    return T.conv2d(x, params[f"{prefix}.weight"], bias,
                    stride=stride, dilation=dilation, padding=padding)
