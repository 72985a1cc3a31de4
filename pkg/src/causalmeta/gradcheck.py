"""Autodiff-versus-finite-difference suite over random small networks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import rng as rngs
from .autodiff import ParamSet, Tensor
from .causal import _tracked, causal_support_loss
from .config import CausalHyper, ExperimentConfig, ModelConfig
from .meta import adapt_batch, forward, task_loss
from .models import init_bundle
from .tasks import CLASSIFICATION, REGRESSION, TaskBatch

PATHS = ("plain", "causal", "meta-plain", "meta-causal")


@dataclass(frozen=True)
class CheckResult:
    net: int
    path: str
    kind: str
    n_params: int
    rel_error: float
    passed: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-300)
    return float(num / den)


def _random_setup(rng: np.random.Generator, mode: str, kind: str):
    d_in = int(rng.integers(1, 4))
    out = 2 if kind == CLASSIFICATION else 1
    model = ModelConfig(input_dim=d_in, output_dim=out, encoder_hidden=(int(rng.integers(2, 5)),),
                        n_z=int(rng.integers(2, 5)), n_factors=int(rng.integers(2, 4)),
                        hidden_act="tanh", match_params=False)
    config = ExperimentConfig(mode=mode, task_kind="classification" if kind == CLASSIFICATION else "regression",
                              model=model, inner_lr=0.1,
                              causal=CausalHyper(lambda1=float(rng.uniform(0.1, 1.0)),
                                                 lambda2=float(rng.uniform(0.1, 1.0))))
    bundle = init_bundle(config, seed=int(rng.integers(0, 2**31)))
    t, k = 2, 3
    xs = rng.normal(size=(t, k, d_in))
    xq = rng.normal(size=(t, k, d_in))
    if kind == CLASSIFICATION:
        ys = rng.integers(0, 2, size=(t, k))
        yq = rng.integers(0, 2, size=(t, k))
    else:
        ys = rng.normal(size=(t, k, 1))
        yq = rng.normal(size=(t, k, 1))
    x_avg = np.concatenate([xs, xq], axis=1).mean(axis=1, keepdims=True)
    batch = TaskBatch(xs, ys, xq, yq, x_avg, kind)
    return config, bundle, batch


def _loss_fn(path: str, config, bundle, batch):
    hyper = config.causal
    if path == "plain":
        def fn(p):
            pred = forward(bundle, p, batch.x_support, batch.x_avg)
            return task_loss(pred, batch.y_support, batch.kind)
        return fn, bundle.theta()
    if path == "causal":
        def fn(p):
            b = bundle.with_theta(p).with_causal(p)
            return causal_support_loss(b, batch, "support", hyper)
        return fn, bundle.named_params()

    def fn(p):
        p = _tracked(p)   # the inner step needs tracked leaves even for probes
        b = bundle.with_theta(p)
        fast = adapt_batch(b, p, batch, config)
        pred = forward(b, fast, batch.x_query, batch.x_avg)
        return task_loss(pred, batch.y_query, batch.kind)
    return fn, bundle.theta()


def check_network(index: int, path: str, kind: str, seed: int = 0, h: float = 1e-5,
                  tol: float = 1e-5) -> CheckResult:
    rng = rngs.stream(seed, rngs.EVAL, sub=1000 * index + PATHS.index(path) * 2 + (kind == CLASSIFICATION))
    mode = "causal" if path.endswith("causal") else "plain"
    config, bundle, batch = _random_setup(rng, mode, kind)
    fn, params = _loss_fn(path, config, bundle, batch)
    params = params.tracked()
    analytic = ad.grad(fn(params), params)
    numeric = ad.finite_diff_grad(fn, params.detached(), h)
    a = np.concatenate([analytic[k].data.ravel() for k in params])
    n = np.concatenate([numeric[k].ravel() for k in params])
    err = relative_error(a, n)
    return CheckResult(index, path, kind, int(a.size), err, err <= tol)


def run_gradcheck(n_nets: int = 50, seed: int = 0, paths=PATHS, tol: float = 1e-5,
                  meta_nets: int = 10) -> dict:
    """Check every path on ``n_nets`` networks; the (costly) ``meta-*`` paths on the first ``meta_nets``."""
    results = []
    for i in range(n_nets):
        for path in paths:
            if path.startswith("meta") and i >= meta_nets:
                continue
            for kind in (REGRESSION, CLASSIFICATION):
                results.append(check_network(i, path, kind, seed, tol=tol))
    return {
        "n_networks": n_nets,
        "tolerance": tol,
        "checks": len(results),
        "passed": sum(r.passed for r in results),
        "max_rel_error": max(r.rel_error for r in results),
        "results": [r.to_dict() for r in results],
    }
