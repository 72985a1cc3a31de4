"""Disentangling losses and the two-level update of the factor matrix and grouping net.

The first level takes one gradient step on the support-split objective; the
second evaluates the query-split objective at those stepped values and
differentiates back through the step to the original ``Xi`` and ``f_gr``.
Encoder and head are constants throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .config import CausalHyper
from .models import ModelBundle, encode, head_forward, mlp, normalize
from .tasks import CLASSIFICATION, Task, TaskBatch, stack_tasks

LOG_FLOOR = 1e-12


def _pairwise_mask(n_k: int) -> np.ndarray:
    return np.triu(np.ones((n_k, n_k)), k=1)


def loss_dm_xi(xi: Tensor, penalty: str = "squared") -> Tensor:
    """Penalty on inner products between distinct factor columns.

    ``"squared"`` sums ``(xi_i . xi_j)**2`` over ``i < j`` and is zero exactly
    when the columns are mutually orthogonal; ``"signed"`` sums the raw inner
    products.
    """
    if xi.ndim != 2 or xi.shape[1] < 2:
        raise ad.ShapeError(f"factor matrix must be [N_z, N_k] with N_k >= 2, got {xi.shape}")
    gram = ad.matmul(ad.transpose(xi), xi)
    mask = Tensor(_pairwise_mask(xi.shape[1]))
    if penalty == "squared":
        return ad.sum(ad.mul(ad.mul(gram, gram), mask))
    if penalty == "signed":
        return ad.sum(ad.mul(gram, mask))
    raise ValueError(f"unknown penalty {penalty!r}")


def _entropy(p: Tensor) -> Tensor:
    floor = np.maximum(p.data, LOG_FLOOR) - p.data
    return ad.neg(ad.sum(ad.mul(p, ad.log(ad.add(p, Tensor(floor))))))


def loss_dm_fgr(outputs: Tensor | Sequence[Tensor], entropy: str = "factor") -> Tensor:
    """L1 mass of the grouping outputs minus an entropy bonus.

    ``outputs`` are the positive pre-normalisation grouping scores, either a
    sequence of ``[N_k]`` tensors (one per task) or one tensor whose last axis
    is ``N_k`` and whose leading axes index tasks.  With ``entropy="factor"``
    the entropy is taken over the factor-usage distribution
    ``p_k = sum_i out_i[k] / sum_ik out_i[k]``; ``"task"`` uses the share of
    total mass carried by each task instead.
    """
    if isinstance(outputs, Tensor):
        if (outputs.data <= 0).any():
            raise ValueError("grouping outputs must be strictly positive")
        n_k = outputs.shape[-1]
        rows = ad.reshape(outputs, (outputs.size // n_k, n_k))
        l1 = ad.sum(rows)
        usage = ad.sum(rows, 0)
        masses = ad.sum(rows, 1)
    else:
        outputs = list(outputs)
        if not outputs:
            raise ValueError("need at least one task's grouping output")
        if any((o.data <= 0).any() for o in outputs):
            raise ValueError("grouping outputs must be strictly positive")
        masses_list = [ad.sum(o) for o in outputs]
        l1 = masses_list[0]
        usage = outputs[0]
        for o, m in zip(outputs[1:], masses_list[1:]):
            l1 = ad.add(l1, m)
            usage = ad.add(usage, o)
        masses = None if entropy == "factor" else masses_list
    if entropy == "factor":
        p = ad.div(usage, l1)
    elif entropy == "task":
        if isinstance(masses, list):
            p = ad.div(_concat_scalars(masses), l1)
        else:
            p = ad.div(masses, l1)
    else:
        raise ValueError(f"unknown entropy mode {entropy!r}")
    return ad.sub(l1, _entropy(p))


def _concat_scalars(items: list[Tensor]) -> Tensor:
    # one-hot placement keeps the result differentiable without a concat op
    n = len(items)
    out = None
    for i, s in enumerate(items):
        e = np.zeros(n)
        e[i] = 1.0
        term = ad.mul(ad.broadcast_to(ad.reshape(s, (1,)), (n,)), Tensor(e))
        out = term if out is None else ad.add(out, term)
    return out


def loss_dm_total(xi: Tensor, outputs, hyper: CausalHyper) -> Tensor:
    """``lambda1 * loss_dm_xi + lambda2 * loss_dm_fgr``."""
    return ad.add(ad.mul(loss_dm_xi(xi, hyper.xi_penalty), hyper.lambda1),
                  ad.mul(loss_dm_fgr(outputs, hyper.entropy), hyper.lambda2))


# -------------------------------------------------------------- causal module

@dataclass(frozen=True, eq=False)
class Features:
    """Encoder outputs for a batch; constants when the encoder is frozen."""

    support: Tensor          # [T, K, N_z]
    query: Tensor
    avg: Tensor              # [T, 1, N_z]
    y_support: np.ndarray
    y_query: np.ndarray
    kind: str


def batch_features(bundle: ModelBundle, batch: Sequence[Task] | TaskBatch,
                   frozen: bool = True) -> Features:
    b = stack_tasks(batch)
    if frozen:
        with ad.no_grad():
            fs, fq, fa = (encode(bundle, x) for x in (b.x_support, b.x_query, b.x_avg))
    else:
        fs, fq, fa = (encode(bundle, x) for x in (b.x_support, b.x_query, b.x_avg))
    return Features(fs, fq, fa, b.y_support, b.y_query, b.kind)


def prediction_loss(pred: Tensor, target: np.ndarray, kind: str) -> Tensor:
    if kind == CLASSIFICATION:
        return ad.nll_loss(pred, target)
    return ad.mse_loss(pred, Tensor(target))


def _split_objective(bundle: ModelBundle, feats: Features, split: str,
                     params: Mapping[str, Tensor], hyper: CausalHyper,
                     head: Mapping[str, Tensor] | None = None) -> tuple[Tensor, dict]:
    xi = params["xi"]
    grouping = {k[3:]: v for k, v in params.items() if k.startswith("gr.")}
    scores = mlp(grouping, bundle.grouping_spec, ad.matmul(feats.avg, xi))   # [T,1,N_k]
    weights = normalize(scores, bundle.norm)
    feat = feats.support if split == "support" else feats.query
    target = feats.y_support if split == "support" else feats.y_query
    rep = ad.matmul(feat, xi)
    pred = head_forward(bundle, ad.mul(rep, ad.broadcast_to(weights, rep.shape)), head)
    pred_loss = prediction_loss(pred, target, feats.kind)
    dm_xi = loss_dm_xi(xi, hyper.xi_penalty)
    dm_fgr = loss_dm_fgr(scores, hyper.entropy)
    total = ad.add(pred_loss, ad.add(ad.mul(dm_xi, hyper.lambda1), ad.mul(dm_fgr, hyper.lambda2)))
    parts = {"pred_loss": pred_loss.item(), "l_dm_xi": dm_xi.item(), "l_dm_fgr": dm_fgr.item()}
    return total, parts


def causal_support_loss(bundle: ModelBundle, batch, split: str, hyper: CausalHyper,
                        params: Mapping[str, Tensor] | None = None) -> Tensor:
    """Mean per-task prediction loss on ``split`` plus the disentangling loss.

    Predictions use grouping-weighted causal representations.  The result is
    differentiable with respect to ``Xi`` and the grouping parameters, and
    also the encoder/head when those are tracked in ``bundle``.
    """
    if bundle.mode != "causal":
        raise ValueError("causal_support_loss needs a causal-mode bundle")
    if split not in ("support", "query"):
        raise ValueError(f"unknown split {split!r}")
    feats = batch_features(bundle, batch, frozen=False)
    return _split_objective(bundle, feats, split, params or bundle.causal_params(), hyper)[0]


def _step(params: ParamSet, grads, rate_xi: float, rate_gr: float, create_graph: bool) -> ParamSet:
    xi = {k: v for k, v in params.items() if k == "xi"}
    gr = {k: v for k, v in params.items() if k != "xi"}
    out = ParamSet(ad.sgd_step(xi, grads, rate_xi, create_graph))
    out.update(ad.sgd_step(gr, grads, rate_gr, create_graph))
    return out


def _tracked(params: ParamSet) -> ParamSet:
    if all(p.requires_grad for p in params.values()):
        return params
    return params.tracked()


def causal_first_level(bundle: ModelBundle, batch, hyper: CausalHyper,
                       params: ParamSet | None = None, feats: Features | None = None,
                       head: Mapping[str, Tensor] | None = None) -> ParamSet:
    """One support-split step: ``Xi' = Xi - a1 grad``, ``f_gr' = f_gr - a2 grad``.

    The returned parameters stay differentiable with respect to ``params``
    (default: the bundle's own tensors, made tracked if they are not).
    """
    if bundle.mode != "causal":
        raise ValueError("causal_first_level needs a causal-mode bundle")
    params = _tracked(params if params is not None else bundle.causal_params())
    feats = feats if feats is not None else batch_features(bundle, batch)
    head = head if head is not None else bundle.head.detached()
    loss, _ = _split_objective(bundle, feats, "support", params, hyper, head)
    grads = ad.grad(loss, params, create_graph=True)
    return _step(params, grads, hyper.alpha1, hyper.alpha2, create_graph=True)


def causal_second_level(bundle: ModelBundle, batch, hyper: CausalHyper,
                        return_parts: bool = False):
    """Update ``Xi`` and ``f_gr`` from the query objective at the first-level step.

    Encoder and head tensors of the returned bundle are the very same objects
    as in ``bundle``.
    """
    if bundle.mode != "causal":
        raise ValueError("causal_second_level needs a causal-mode bundle")
    feats = batch_features(bundle, batch)
    head = bundle.head.detached()
    params = bundle.causal_params().tracked()
    stepped = causal_first_level(bundle, batch, hyper, params, feats, head)
    loss, parts = _split_objective(bundle, feats, "query", stepped, hyper, head)
    grads = ad.grad(loss, params)
    new = _step(params, grads, hyper.alpha3, hyper.alpha4, create_graph=False)
    out = bundle.with_causal(new)
    return (out, parts) if return_parts else out


def disentangle_xi(xi: np.ndarray | Tensor, steps: int = 200, lr: float = 0.05,
                   lambda1: float = 1.0, penalty: str = "squared") -> tuple[np.ndarray, list[float]]:
    """Plain gradient descent on ``lambda1 * loss_dm_xi`` alone."""
    x = Tensor(xi.data if isinstance(xi, Tensor) else np.asarray(xi, dtype=np.float64),
               requires_grad=True)
    history = []
    for _ in range(steps):
        loss = ad.mul(loss_dm_xi(x, penalty), lambda1)
        history.append(loss.item())
        (g,) = ad.grad(loss, [x])
        x = Tensor(x.data - lr * g.data, requires_grad=True)
    return x.data, history


def mean_offdiag(gram: np.ndarray) -> float:
    n = gram.shape[0]
    mask = ~np.eye(n, dtype=bool)
    return float(np.abs(gram[mask]).mean())


def max_entropy(n_k: int) -> float:
    return math.log(n_k)
