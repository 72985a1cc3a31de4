"""Spurious-factor experiments: least-squares weights on a two-task joint
setting, the batch-size sweep on a confounded factor world, and an input
sensitivity diagnostic for trained models.

Label coupling between two binary tasks is parameterised by the agreement
probability ``q = P(y_i == y_j)``; the corresponding Pearson correlation of
the labels is ``2q - 1``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import rng as rngs
from .config import ExperimentConfig, SweepConfig, Theorem1Config
from .meta import EvalResult, TaskSource, forward, inner_adapt, meta_evaluate, meta_train
from .models import ModelBundle, init_bundle
from .tasks import (FactorWorld, FactorWorldSpec, JointDataset, JointSetting, Task,
                    batch_pairs, make_confounded_batch, sample_classification_task,
                    sample_factor_world, sample_theorem1_dataset)

CORRELATION_READING = "agreement-probability"


# ------------------------------------------------------------ least squares

def _setting(spec) -> JointSetting:
    if isinstance(spec, JointSetting):
        return spec
    if isinstance(spec, FactorWorldSpec):
        return JointSetting.from_world(spec)
    if isinstance(spec, Theorem1Config):
        return JointSetting(spec.mu_i, spec.mu_j, spec.sd_i, spec.sd_j, spec.width_i, spec.width_j)
    raise TypeError(f"cannot build a joint setting from {type(spec).__name__}")


def population_moments(spec, q: float) -> tuple[np.ndarray, np.ndarray]:
    """``(Cov(z), Cov(z, y_i))`` for ``z = [A_i; A_j]`` (both have zero mean)."""
    s = _setting(spec)
    rho = 2.0 * q - 1.0
    di, dj = s.width_i, s.width_j
    cov = np.zeros((di + dj, di + dj))
    cov[:di, :di] = s.mu_i ** 2 * np.ones((di, di)) + s.sd_i ** 2 * np.eye(di)
    cov[di:, di:] = s.mu_j ** 2 * np.ones((dj, dj)) + s.sd_j ** 2 * np.eye(dj)
    cov[:di, di:] = s.mu_i * s.mu_j * rho
    cov[di:, :di] = s.mu_i * s.mu_j * rho
    cross = np.concatenate([np.full(di, s.mu_i), np.full(dj, s.mu_j * rho)])
    return cov, cross


def population_lsq_weights(spec, q: float) -> np.ndarray:
    """Optimal linear predictor of ``y_i`` from ``[A_i; A_j]``, causal block first.

    By symmetry within each block the solution is ``[a * 1; b * 1]`` where
    ``(a, b)`` solves a 2x2 system; Cramer's rule gives
    ``b = mu_j * rho * sd_i**2 / det``, exactly zero when ``q == 0.5``.
    """
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must lie in [0, 1], got {q}")
    s = _setting(spec)
    if s.sd_i <= 0 or s.sd_j <= 0:
        raise np.linalg.LinAlgError("singular covariance: factor noise std must be > 0")
    rho = 2.0 * q - 1.0
    di, dj = s.width_i, s.width_j
    a11 = s.mu_i ** 2 * di + s.sd_i ** 2
    a12 = s.mu_i * s.mu_j * rho * dj
    a21 = s.mu_i * s.mu_j * rho * di
    a22 = s.mu_j ** 2 * dj + s.sd_j ** 2
    det = a11 * a22 - a12 * a21
    if det == 0.0:
        raise np.linalg.LinAlgError("singular covariance")
    r1, r2 = s.mu_i, s.mu_j * rho
    a = (r1 * a22 - a12 * r2) / det
    b = (a11 * r2 - a21 * r1) / det
    return np.concatenate([np.full(di, a), np.full(dj, b)])


def default_ridge(z: np.ndarray) -> float:
    return 1e-8 * float(np.einsum("ij,ij->", z, z)) / z.shape[1]


def empirical_lsq_weights(data: JointDataset | tuple[np.ndarray, np.ndarray],
                          ridge: float | None = None) -> np.ndarray:
    """``(Z^T Z + eps I)^{-1} Z^T y`` without an intercept."""
    if isinstance(data, JointDataset):
        z, y = data.z, data.y_i
    else:
        z, y = data
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    eps = default_ridge(z) if ridge is None else ridge
    if eps < 0:
        raise ValueError("ridge must be >= 0")
    gram = z.T @ z + eps * np.eye(z.shape[1])
    return np.linalg.solve(gram, z.T @ y)


@dataclass(frozen=True, eq=False)
class Theorem1Report:
    setting: dict
    causal_weights: np.ndarray
    noncausal_weights: np.ndarray
    noncausal_norm: float
    verdicts: dict
    # finite-sample rows: per-resample non-causal norms
    norms: np.ndarray | None = None

    def __post_init__(self):
        width = self.setting["width_i"] + self.setting["width_j"]
        if len(self.causal_weights) + len(self.noncausal_weights) != width:
            raise ValueError("weight blocks do not cover the joint feature width")

    def to_dict(self) -> dict:
        out = {
            "setting": self.setting,
            "causal_weights": [float(v) for v in self.causal_weights],
            "noncausal_weights": [float(v) for v in self.noncausal_weights],
            "noncausal_norm": self.noncausal_norm,
            "verdicts": self.verdicts,
        }
        if self.norms is not None:
            out["noncausal_norm_quantiles"] = {
                k: float(np.quantile(self.norms, p)) for k, p in (("q05", 0.05), ("median", 0.5), ("q95", 0.95))
            }
        return out


def _report(s: JointSetting, q: float, n, weights: np.ndarray, norm: float,
            norms: np.ndarray | None = None) -> Theorem1Report:
    setting = {"mu_i": s.mu_i, "mu_j": s.mu_j, "sd_i": s.sd_i, "sd_j": s.sd_j,
               "width_i": s.width_i, "width_j": s.width_j, "q": q, "n": n,
               "label_correlation": 2.0 * q - 1.0, "reading": CORRELATION_READING}
    if n == "population":
        verdicts = {"zero_noncausal_weight": norm == 0.0, "independent_labels": q == 0.5}
        verdicts["consistent"] = verdicts["zero_noncausal_weight"] == (q == 0.5 or s.mu_j == 0)
    else:
        verdicts = {"positive_noncausal_weight": norm > 0.0}
        verdicts["consistent"] = verdicts["positive_noncausal_weight"]
    w = np.asarray(weights, dtype=np.float64)
    return Theorem1Report(setting, w[:s.width_i], w[s.width_i:], float(norm), verdicts, norms)


def finite_sample_norms(spec, q: float, n: int, resamples: int,
                        rng: np.random.Generator, ridge: float | None = None
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Mean weight vector and per-resample non-causal norms of the empirical fit."""
    s = _setting(spec)
    weights = np.empty((resamples, s.width_i + s.width_j))
    for r in range(resamples):
        weights[r] = empirical_lsq_weights(sample_theorem1_dataset(s, n, q, rng), ridge)
    norms = np.linalg.norm(weights[:, s.width_i:], axis=1)
    return weights.mean(axis=0), norms


def theorem1_experiment(config: ExperimentConfig | Theorem1Config,
                        seed: int | None = None) -> list[Theorem1Report]:
    """One report per ``(q, n)`` in the grid, q-major order.

    Finite-sample reports carry the median non-causal norm over
    ``resamples`` independent datasets.
    """
    if isinstance(config, ExperimentConfig):
        seed = config.seed if seed is None else seed
        config = config.theorem1
    seed = 0 if seed is None else seed
    s = _setting(config)
    reports = []
    for qi, q in enumerate(config.q_grid):
        for ni, n in enumerate(config.n_grid):
            if n == "population":
                w = population_lsq_weights(s, q)
                reports.append(_report(s, q, n, w, float(np.linalg.norm(w[s.width_i:]))))
            else:
                rng = rngs.stream(seed, rngs.EVAL, sub=qi * len(config.n_grid) + ni)
                mean_w, norms = finite_sample_norms(s, q, n, config.resamples, rng)
                reports.append(_report(s, q, n, mean_w, float(np.median(norms)), norms))
    return reports


# ------------------------------------------------------------ factor world

def world_for(config: ExperimentConfig) -> FactorWorld:
    return sample_factor_world(config.world, rngs.stream(config.seed, rngs.WORLD))


def classification_config(config: ExperimentConfig) -> ExperimentConfig:
    """``config`` with model widths and task kind set for its factor world."""
    model = config.model.__class__(**{**config.model.__dict__,
                                      "input_dim": config.world.input_dim, "output_dim": 2})
    return config.replace(task_kind="classification", model=model)


def confounded_source(world: FactorWorld, q: float, shots: int, queries: int,
                      pairing: str = "all") -> TaskSource:
    """Batches of distinct training tasks, confounded pairwise at agreement ``q``."""
    ids = np.asarray(world.train_ids)

    def draw(rng: np.random.Generator, n: int) -> list[Task]:
        if n > len(ids):
            raise ValueError(f"batch of {n} exceeds the {len(ids)} training tasks")
        chosen = [int(t) for t in rng.choice(ids, size=n, replace=False)]
        pairs = batch_pairs(chosen, pairing)
        tasks = {t.meta["task_id"]: t for t in make_confounded_batch(world, pairs, q, rng, shots, queries)}
        for t in chosen:
            if t not in tasks:   # unpaired (batch of one, or odd one out)
                tasks[t] = sample_classification_task(world, t, shots, rng, queries)
        return [tasks[t] for t in chosen]

    return draw


def world_source(config: ExperimentConfig) -> TaskSource:
    sw = config.sweep
    return confounded_source(world_for(config), config.world.agreement, sw.shots, sw.queries,
                             sw.pairing)


def evaluation_tasks(world: FactorWorld, ids: Sequence[int], n_tasks: int, shots: int,
                     queries: int, rng: np.random.Generator) -> list[Task]:
    """Unconfounded tasks cycling through ``ids``."""
    ids = list(ids)
    if not ids:
        raise ValueError("no task ids to evaluate")
    return [sample_classification_task(world, ids[k % len(ids)], shots, rng, queries)
            for k in range(n_tasks)]


# ----------------------------------------------------------------- sweep

@dataclass(frozen=True)
class SweepCell:
    batch_size: int
    seed: int
    mode: str
    held_in: float
    held_in_hw: float
    held_out: float
    held_out_hw: float
    final_train_loss: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True, eq=False)
class SweepReport:
    base_batch: int
    cells: tuple[SweepCell, ...]
    q: float
    seconds: float = field(default=0.0, compare=False)

    def __post_init__(self):
        sizes = {self.base_batch, 2 * self.base_batch}
        seen: dict[tuple[int, str], set[int]] = {}
        for c in self.cells:
            seen.setdefault((c.seed, c.mode), set()).add(c.batch_size)
        for key, got in seen.items():
            if got != sizes:
                raise ValueError(f"cell {key} lacks batch sizes {sorted(sizes - got)}")

    @property
    def modes(self) -> list[str]:
        return sorted({c.mode for c in self.cells})

    def select(self, mode: str, batch_size: int) -> list[SweepCell]:
        return [c for c in self.cells if c.mode == mode and c.batch_size == batch_size]

    def aggregate(self) -> dict:
        out = {}
        for mode in self.modes:
            per = {}
            for bs in (self.base_batch, 2 * self.base_batch):
                cells = self.select(mode, bs)
                entry = {}
                for split in ("held_in", "held_out"):
                    vals = np.array([getattr(c, split) for c in cells])
                    entry[split] = {"mean": float(vals.mean()),
                                    "half_width": float(1.96 * vals.std() / math.sqrt(len(vals)))}
                entry["n_seeds"] = len(cells)
                per[str(bs)] = entry
            out[mode] = per
        return out

    def verdicts(self, tolerance: float = 0.01) -> dict:
        agg = self.aggregate()
        b, b2 = str(self.base_batch), str(2 * self.base_batch)
        out = {}
        if "plain" in agg:
            out["plain_degrades"] = all(agg["plain"][b2][s]["mean"] <= agg["plain"][b][s]["mean"]
                                        for s in ("held_in", "held_out"))
        if "causal" in agg:
            out["causal_holds"] = all(agg["causal"][b2][s]["mean"] >= agg["causal"][b][s]["mean"] - tolerance
                                      for s in ("held_in", "held_out"))
        return out

    def to_dict(self) -> dict:
        return {"base_batch": self.base_batch, "q": self.q,
                "cells": [c.to_dict() for c in self.cells],
                "aggregate": self.aggregate(), "verdicts": self.verdicts()}


def sweep_cell_config(config: ExperimentConfig, mode: str, batch_size: int, seed: int) -> ExperimentConfig:
    sw = config.sweep
    base = classification_config(config)
    return base.replace(mode=mode, batch_size=batch_size, seed=seed, iterations=sw.iterations,
                        inner_lr=sw.inner_lr, outer_lr=sw.outer_lr, eval_tasks=sw.eval_tasks,
                        outer_optimizer=sw.outer_optimizer)


def run_sweep_cell(config: ExperimentConfig, mode: str, batch_size: int, seed: int) -> SweepCell:
    cfg = sweep_cell_config(config, mode, batch_size, seed)
    sw = cfg.sweep
    world = world_for(cfg)
    source = confounded_source(world, cfg.world.agreement, sw.shots, sw.queries, sw.pairing)
    bundle, rows = meta_train(cfg, source)
    rng = rngs.stream(seed, rngs.EVAL)
    held_in = meta_evaluate(bundle, evaluation_tasks(world, world.train_ids, sw.eval_tasks,
                                                     sw.shots, sw.queries, rng), cfg)
    held_out = meta_evaluate(bundle, evaluation_tasks(world, world.test_ids, sw.eval_tasks,
                                                      sw.shots, sw.queries, rng), cfg)
    tail = rows[-min(100, len(rows)):]
    return SweepCell(batch_size, seed, mode, held_in.mean, held_in.half_width,
                     held_out.mean, held_out.half_width,
                     float(np.mean([r.pred_loss for r in tail])))


def batch_size_sweep(config: ExperimentConfig, modes: Sequence[str] | None = None,
                     progress=None) -> SweepReport:
    """Train every (batch size, seed, mode) cell on confounded batches, score on clean tasks.

    ``held_in`` reuses the training task ids with fresh unconfounded samples;
    ``held_out`` uses the world's reserved test ids.
    """
    sw = config.sweep
    modes = tuple(modes or sw.modes)
    if config.world.agreement == 0.5:
        raise ValueError("the sweep needs confounded pairs (agreement q != 0.5)")
    started = time.perf_counter()
    cells = []
    for mode in modes:
        for seed in sw.seeds:
            for bs in (sw.base_batch, 2 * sw.base_batch):
                cell = run_sweep_cell(config, mode, bs, seed)
                cells.append(cell)
                if progress is not None:
                    progress(cell)
    return SweepReport(sw.base_batch, tuple(cells), config.world.agreement,
                       time.perf_counter() - started)


# ------------------------------------------------------------- diagnostic

def noncausal_weight_mass(bundle: ModelBundle, world: FactorWorld, task_id: int,
                          x: np.ndarray | None = None, theta=None, h: float = 1e-3,
                          n_points: int = 64, seed: int = 0) -> float:
    """RMS sensitivity of the logit margin along the task's non-causal directions.

    The margin ``f = logit_1 - logit_0`` is differentiated by central
    differences along each non-causal dictionary column ``d_k`` at points
    ``x`` (default: clean samples of the task); the result is
    ``sqrt(mean_x sum_k (df/dd_k)^2)``.  ``theta`` optionally replaces the
    bundle's encoder/head, e.g. with per-task adapted parameters.
    """
    if x is None:
        rng = rngs.stream(seed, rngs.EVAL, sub=task_id + 1)
        task = sample_classification_task(world, task_id, n_points, rng, 1)
        x = task.x_support
    x = np.asarray(x, dtype=np.float64)
    theta = bundle.theta() if theta is None else theta
    x_avg = x.mean(axis=0, keepdims=True)
    dirs = world.dictionary[:, list(world.noncausal(task_id))].T   # [m, D]
    if len(dirs) == 0:
        return 0.0

    def margin(points: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            out = forward(bundle, theta, points, x_avg).data
        if out.shape[-1] < 2:
            return out[..., 0]
        return out[..., 1] - out[..., 0]

    # evaluate every perturbed copy in one pass: [2m, n, D] -> margins
    shifted = np.concatenate([x[None] + h * dirs[:, None, :], x[None] - h * dirs[:, None, :]])
    m = margin(shifted.reshape(-1, x.shape[1])).reshape(2, len(dirs), len(x))
    slopes = (m[0] - m[1]) / (2.0 * h)
    return float(math.sqrt(np.mean(np.sum(slopes ** 2, axis=0))))


def adapted_noncausal_mass(bundle: ModelBundle, world: FactorWorld, task: Task,
                           config: ExperimentConfig, **kw) -> float:
    """``noncausal_weight_mass`` after adapting to ``task``'s support set."""
    fast = inner_adapt(bundle, task, config, create_graph=False)
    return noncausal_weight_mass(bundle, world, task.meta["task_id"], theta=fast.detached(), **kw)
