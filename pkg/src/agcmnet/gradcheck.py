"""Finite-difference verification of every AGCM stage and of the whole module."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import agcm as A
from . import nn
from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

STAGE_TOL = 1e-4
END_TO_END_TOL = 2e-4


@dataclass(frozen=True)
class GradcheckConfig:
    channels: int = 4
    height: int = 6
    width: int = 6
    n_prototypes: int = 3
    n_layers: int = 2
    k_nn: int = 1
    heads: int = 2
    h: float = 1e-5

    def __post_init__(self):
        if self.height > 8 or self.width > 8:
            raise ConfigError("gradcheck runs on maps of at most 8x8")

    def agcm(self) -> A.AgcmConfig:
        return A.AgcmConfig(self.channels, self.n_prototypes, self.n_layers, self.k_nn, heads=self.heads)


@dataclass(frozen=True)
class GradcheckRow:
    stage: str
    operation: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def _inner(r: np.ndarray):
    """Scalar reduction <R, x> with fixed random weights, keeping gradients O(1)."""
    rt = Tensor(r)
    return lambda x: (x * rt).sum()


def _check_params(f_of_params, params: nn.ParameterStore, prefix: str, h: float) -> float:
    worst = 0.0
    for path in params:
        if path.startswith(prefix):
            worst = max(worst, T.grad_check(lambda w, p=path: f_of_params(params.with_override(p, w)),
                                            params[path], h))
    return worst


def run_gradcheck(cfg: GradcheckConfig = GradcheckConfig(), seed: int = 0) -> list[GradcheckRow]:
    """Five per-equation rows followed by one end-to-end row."""
    rng = np.random.default_rng(seed)
    acfg = cfg.agcm()
    store = nn.ParameterStore()
    A.declare_agcm(store, "agcm", acfg)
    nn.init_params(store, seed=seed)
    c, k, h = cfg.channels, cfg.n_prototypes, cfg.h
    feats = Tensor(rng.normal(size=(c, cfg.height, cfg.width)))

    rows = []

    # prototype generation, w.r.t. features and attention parameters
    r_p = _inner(rng.normal(size=(c, k)))
    r_s = _inner(rng.normal(size=(k, cfg.height * cfg.width)))

    def eq1(x, params=store):
        p, s = A.generate_prototypes(x, params)
        return r_p(p) + r_s(s)

    err = max(T.grad_check(eq1, feats, h), _check_params(lambda ps: eq1(feats, ps), store, "agcm.attn", h))
    rows.append(GradcheckRow("generate_prototypes", "P = I S^T, S = softmax(conv1x1(I))", err, STAGE_TOL))

    protos = Tensor(rng.normal(size=(c, k)))
    graph = A.knn_graph(protos, cfg.k_nn)
    r_a = _inner(rng.normal(size=(k, k)))

    def eq2(p, params=store):
        return r_a(A.adjacency(A.embed_prototypes(p, graph, params, acfg)))

    err = max(T.grad_check(eq2, protos, h),
              _check_params(lambda ps: eq2(protos, ps), store, "agcm.edgeconv", h))
    rows.append(GradcheckRow("adjacency", "A = phi(P)^T phi(P)", err, STAGE_TOL))

    r_w = _inner(rng.normal(size=(c,)))

    def eq3(p, params=store):
        return r_w(A.kernel_weight(p, params, acfg))

    err = T.grad_check(eq3, protos, h)
    for prefix in ("agcm.mha", "agcm.mlp"):
        err = max(err, _check_params(lambda ps: eq3(protos, ps), store, prefix, h))
    rows.append(GradcheckRow("kernel_weight", "W = MLP(MHA(P))", err, STAGE_TOL))

    weight = Tensor(rng.normal(size=(c,)))
    r_pp = _inner(rng.normal(size=(c, k)))
    err = max(T.grad_check(lambda p: r_pp(A.reweight(p, weight)), protos, h),
              T.grad_check(lambda w: r_pp(A.reweight(protos, w)), weight, h))
    rows.append(GradcheckRow("reweight", "P'_i = W * P_i", err, STAGE_TOL))

    affinity = Tensor(rng.normal(size=(k, k)))
    err = max(T.grad_check(lambda p: r_pp(A.refine(p, affinity)), protos, h),
              T.grad_check(lambda a: r_pp(A.refine(protos, a)), affinity, h))
    rows.append(GradcheckRow("refine", "P'' = P' softmax(A)", err, STAGE_TOL))

    r_out = _inner(rng.normal(size=(c + k, cfg.height, cfg.width)))

    def full(x, params=store):
        return r_out(A.agcm_forward(x, acfg, params))

    err = max(T.grad_check(full, feats, h), _check_params(lambda ps: full(feats, ps), store, "agcm", h))
    rows.append(GradcheckRow("agcm_forward", "end-to-end", err, END_TO_END_TOL))
    return rows


def format_report(rows: list[GradcheckRow], elapsed: float | None = None) -> str:
    lines = [f"{'stage':<20} {'max_rel_err':>12} {'tol':>8}  status"]
    for r in rows:
        lines.append(f"{r.stage:<20} {r.max_rel_err:12.3e} {r.tolerance:8.0e}  {'PASS' if r.passed else 'FAIL'}")
    if elapsed is not None:
        lines.append(f"elapsed {elapsed:.2f}s")
    return "\n".join(lines)


def timed_gradcheck(cfg: GradcheckConfig = GradcheckConfig(), seed: int = 0) -> tuple[list[GradcheckRow], float]:
    t0 = time.perf_counter()
    rows = run_gradcheck(cfg, seed)
    return rows, time.perf_counter() - t0
