"""Bi-level meta-optimisation of the encoder/head and the two-step causal schedule.

A batch of ``T`` equal-sized tasks is adapted in one vectorised pass: the
meta-parameters are broadcast to per-task copies of shape ``[T, ...]``, the
summed support loss is differentiated with respect to those copies (each
task's loss touches only its own copy), and the query loss of the adapted
copies is differentiated back to the shared parameters through the
broadcast.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import rng as rngs
from .autodiff import ParamSet, Tensor
from .causal import causal_second_level
from .config import ExperimentConfig
from .models import ModelBundle, grouping_weights, init_bundle, mlp, predict
from .tasks import (CLASSIFICATION, REGRESSION, SinusoidSpec, Task, TaskBatch,
                    sample_sinusoid_task, stack_tasks)

TaskSource = Callable[[np.random.Generator, int], Sequence[Task]]

METRIC_COLUMNS = ("iteration", "split", "pred_loss", "score", "l_dm_xi", "l_dm_fgr", "seconds")


class TrainingDiverged(FloatingPointError):
    def __init__(self, iteration: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class MetricsRow:
    iteration: int
    split: str
    pred_loss: float
    score: float
    l_dm_xi: float = 0.0
    l_dm_fgr: float = 0.0
    seconds: float = 0.0

    def __post_init__(self):
        for name in ("pred_loss", "score", "l_dm_xi", "l_dm_fgr", "seconds"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"metrics field {name} is not finite")


# ----------------------------------------------------------- generic pieces

def replicate(params: Mapping[str, Tensor], n: int) -> ParamSet:
    """Per-task copies ``[n, *shape]`` that remain tied to ``params``."""
    return ParamSet(
        (k, ad.broadcast_to(ad.reshape(p, (1, *p.shape)), (n, *p.shape))) for k, p in params.items()
    )


def adapt(params: Mapping[str, Tensor], loss_fn: Callable[[ParamSet], Tensor], lr: float,
          steps: int = 1, first_order: bool = False, create_graph: bool = True) -> ParamSet:
    """Inner-loop gradient descent on ``loss_fn``.

    With ``create_graph`` (the default) the result is differentiable with
    respect to ``params`` including second-order terms.  ``first_order``
    keeps the dependence but treats the inner gradients as constants.
    """
    fast = ParamSet(params)
    for _ in range(steps):
        loss = loss_fn(fast)
        grads = ad.grad(loss, fast, create_graph=create_graph and not first_order)
        fast = ad.sgd_step(fast, grads, lr, create_graph=create_graph)
    return fast


def _split_theta(theta: Mapping[str, Tensor]) -> tuple[dict, dict]:
    enc = {k[2:]: v for k, v in theta.items() if k.startswith("g.")}
    head = {k[2:]: v for k, v in theta.items() if k.startswith("h.")}
    return enc, head


def forward(bundle: ModelBundle, theta: Mapping[str, Tensor], x, x_avg,
            xi: Tensor | None = None, grouping: Mapping[str, Tensor] | None = None) -> Tensor:
    """Model output with explicit (possibly per-task) encoder/head parameters."""
    enc, head = _split_theta(theta)
    if bundle.mode == "plain":
        return mlp(head, bundle.head_spec, mlp(enc, bundle.encoder_spec, x))
    xi = bundle.xi if xi is None else xi
    grouping = bundle.grouping if grouping is None else grouping
    w = grouping_weights(bundle, x_avg, enc, xi, grouping)
    return predict(bundle, x, w, enc, head, xi)


def task_loss(pred: Tensor, target: np.ndarray, kind: str) -> Tensor:
    if kind == CLASSIFICATION:
        return ad.nll_loss(pred, target)
    return ad.mse_loss(pred, Tensor(target))


def score(pred: np.ndarray, target: np.ndarray, kind: str) -> np.ndarray:
    """Per-task score on the last two axes: accuracy or MSE."""
    if kind == CLASSIFICATION:
        return (pred.argmax(axis=-1) == target).mean(axis=-1)
    return ((pred - target) ** 2).mean(axis=(-1, -2))


def _frozen_causal(bundle: ModelBundle):
    if bundle.mode != "causal":
        return None, None
    return Tensor(bundle.xi.data), bundle.grouping.detached()


def _check_kind(batch: TaskBatch, config: ExperimentConfig) -> None:
    if batch.kind != config.task_kind:
        raise ValueError(f"task kind {batch.kind!r} does not match config {config.task_kind!r}")


def adapt_batch(bundle: ModelBundle, theta: Mapping[str, Tensor], batch: TaskBatch,
                config: ExperimentConfig, create_graph: bool = True) -> ParamSet:
    """Per-task adapted copies ``[T, ...]`` of ``theta`` after the inner loop."""
    xi, grouping = _frozen_causal(bundle)
    n = len(batch)

    def support_loss(fast):
        pred = forward(bundle, fast, batch.x_support, batch.x_avg, xi, grouping)
        # n * mean == sum of per-task mean losses
        return ad.mul(task_loss(pred, batch.y_support, batch.kind), float(n))

    return adapt(replicate(theta, n), support_loss, config.inner_lr, config.inner_steps,
                 config.first_order, create_graph)


def inner_adapt(bundle: ModelBundle, task: Task, config: ExperimentConfig,
                create_graph: bool = True) -> ParamSet:
    """Adapted encoder/head for a single task (``g.``/``h.`` names, original shapes).

    Differentiable with respect to the bundle's tensors when those are
    tracked.  The factor matrix and grouping network are held constant.
    """
    batch = stack_tasks([task])
    _check_kind(batch, config)
    fast = adapt_batch(bundle, bundle.theta(), batch, config, create_graph)
    return ParamSet((k, ad.reshape(v, v.shape[1:])) for k, v in fast.items())


@dataclass(frozen=True, eq=False)
class MetaGradient:
    grads: dict
    loss: float
    score: float
    scores: np.ndarray


def meta_gradient(bundle: ModelBundle, batch, config: ExperimentConfig) -> MetaGradient:
    """Gradient of the mean query loss after adaptation w.r.t. encoder/head."""
    b = stack_tasks(batch)
    _check_kind(b, config)
    theta = bundle.theta().tracked()
    xi, grouping = _frozen_causal(bundle)
    fast = adapt_batch(bundle, theta, b, config)
    pred = forward(bundle, fast, b.x_query, b.x_avg, xi, grouping)
    loss = task_loss(pred, b.y_query, b.kind)
    if not math.isfinite(loss.item()):
        raise FloatingPointError("non-finite meta loss")
    grads = ad.grad(loss, theta)
    target = b.y_query
    scores = score(pred.data, target, b.kind)
    return MetaGradient(grads, loss.item(), float(scores.mean()), scores)


class OuterSGD:
    """``theta <- theta - beta * grad``."""

    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: ParamSet, grads: Mapping[str, Tensor]) -> ParamSet:
        return ad.sgd_step(params, grads, self.lr)


class OuterAdam:
    """Adam with step size ``beta``; moment estimates persist across calls."""

    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ParamSet, grads: Mapping[str, Tensor]) -> ParamSet:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        out = ParamSet()
        for k, p in params.items():
            if k not in grads:
                raise KeyError(f"no gradient for parameter {k!r}")
            g = grads[k].data
            m = self.m[k] = self.b1 * self.m.get(k, 0.0) + (1.0 - self.b1) * g
            v = self.v[k] = self.b2 * self.v.get(k, 0.0) + (1.0 - self.b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            out[k] = Tensor(p.data - update, requires_grad=True)
        return out


def make_optimizer(config: ExperimentConfig):
    if config.outer_optimizer == "adam":
        return OuterAdam(config.outer_lr)
    return OuterSGD(config.outer_lr)


def meta_outer_step(bundle: ModelBundle, batch, config: ExperimentConfig,
                    return_info: bool = False, optimizer=None):
    """One outer update of encoder/head from the meta-gradient.

    ``optimizer`` carries state between calls (default: a fresh one built
    from the config).  Factor matrix and grouping network are untouched.
    """
    mg = meta_gradient(bundle, batch, config)
    optimizer = optimizer or make_optimizer(config)
    out = bundle.with_theta(optimizer.step(bundle.theta(), mg.grads))
    return (out, mg) if return_info else out


def train_batch_two_step(bundle: ModelBundle, batch, config: ExperimentConfig,
                         iteration: int = 0, second_batch=None,
                         started: float | None = None,
                         optimizer=None) -> tuple[ModelBundle, MetricsRow]:
    """Step 1 updates encoder/head with Xi and f_gr fixed; step 2 the reverse.

    Plain-mode bundles run step 1 only.  ``second_batch`` (default: the same
    batch) feeds step 2.
    """
    b = stack_tasks(batch)
    bundle, mg = meta_outer_step(bundle, b, config, return_info=True, optimizer=optimizer)
    dm_xi = dm_fgr = 0.0
    if bundle.mode == "causal":
        b2 = b if second_batch is None else stack_tasks(second_batch)
        bundle, parts = causal_second_level(bundle, b2, config.effective_causal, return_parts=True)
        dm_xi, dm_fgr = parts["l_dm_xi"], parts["l_dm_fgr"]
    elapsed = 0.0 if started is None else time.perf_counter() - started
    for name, v in (("loss", mg.loss), ("l_dm_xi", dm_xi), ("l_dm_fgr", dm_fgr)):
        if not math.isfinite(v):
            raise TrainingDiverged(iteration, name)
    return bundle, MetricsRow(iteration, "train", mg.loss, mg.score, dm_xi, dm_fgr, elapsed)


# ----------------------------------------------------------- task sources

def sinusoid_source(spec: SinusoidSpec) -> TaskSource:
    def draw(rng: np.random.Generator, n: int) -> list[Task]:
        return [sample_sinusoid_task(spec, rng) for _ in range(n)]
    return draw


def default_source(config: ExperimentConfig) -> TaskSource:
    if config.task_kind == REGRESSION:
        return sinusoid_source(config.sinusoid)
    from .confounder import world_source  # deferred: confounder imports this module
    return world_source(config)


def meta_train(config: ExperimentConfig, source: TaskSource | None = None,
               bundle: ModelBundle | None = None,
               callback: Callable[[ModelBundle, MetricsRow], None] | None = None,
               ) -> tuple[ModelBundle, list[MetricsRow]]:
    """Run ``config.iterations`` two-step iterations; deterministic per seed."""
    source = source or default_source(config)
    bundle = bundle or init_bundle(config)
    rng = rngs.stream(config.seed, rngs.TRAIN)
    rows = []
    optimizer = make_optimizer(config)
    started = time.perf_counter()
    for it in range(config.iterations):
        batch = source(rng, config.batch_size)
        second = None
        if bundle.mode == "causal" and not config.shared_batch:
            second = source(rng, config.batch_size)
        try:
            with np.errstate(over="raise", invalid="raise"):
                bundle, row = train_batch_two_step(bundle, batch, config, it, second, started, optimizer)
        except FloatingPointError as exc:
            raise TrainingDiverged(it) from exc
        rows.append(row)
        if callback is not None:
            callback(bundle, row)
    return bundle, rows


# ------------------------------------------------------------- evaluation

@dataclass(frozen=True, eq=False)
class EvalResult:
    mean: float
    half_width: float
    scores: np.ndarray
    metric: str

    @property
    def n(self) -> int:
        return len(self.scores)

    def to_dict(self) -> dict:
        return {"metric": self.metric, "mean": self.mean, "half_width": self.half_width,
                "n_tasks": self.n}


def confidence_half_width(scores: np.ndarray) -> float:
    """``1.96 * std / sqrt(n)`` with the population (ddof=0) standard deviation."""
    scores = np.asarray(scores, dtype=np.float64)
    return float(1.96 * scores.std() / math.sqrt(len(scores)))


def meta_evaluate(bundle: ModelBundle, tasks: Sequence[Task], config: ExperimentConfig,
                  chunk: int = 50) -> EvalResult:
    """Adapt on each support set, score on its query set, aggregate."""
    tasks = list(tasks)
    if not tasks:
        raise ValueError("no tasks to evaluate")
    theta = bundle.theta().detached()
    xi, grouping = _frozen_causal(bundle)
    parts = []
    for start in range(0, len(tasks), chunk):
        group = stack_tasks(tasks[start:start + chunk])
        _check_kind(group, config)
        with_grad = theta.tracked()
        fast = adapt_batch(bundle, with_grad, group, config, create_graph=False)
        with ad.no_grad():
            pred = forward(bundle, fast, group.x_query, group.x_avg, xi, grouping)
        parts.append(score(pred.data, group.y_query, group.kind))
    scores = np.concatenate(parts)
    metric = "accuracy" if config.task_kind == CLASSIFICATION else "mse"
    return EvalResult(float(scores.mean()), confidence_half_width(scores), scores, metric)
