"""Synthetic task sources: sinusoid regression and binary factor worlds.

A factor world is a small structural causal model.  A fixed dictionary ``D``
with orthonormal columns maps latent factors ``s`` to observations
``x = D s + noise``.  Every task owns a subset of the factors; its label
``y in {-1, +1}`` shifts the mean of those factors to ``mu * y`` while the
remaining factors stay centred noise.  Labels are reported as class indices
``(y + 1) / 2``.

Confounding is introduced by :func:`make_confounded_batch`: a task's
observations also carry the factors of the tasks it is paired with, driven by
partner labels that agree with its own label with probability ``q``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

REGRESSION = "regression"
CLASSIFICATION = "classification"


@dataclass(frozen=True, eq=False)
class Task:
    x_support: np.ndarray
    y_support: np.ndarray
    x_query: np.ndarray
    y_query: np.ndarray
    kind: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in (REGRESSION, CLASSIFICATION):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if len(self.x_support) == 0 or len(self.x_query) == 0:
            raise ValueError("support and query sets must be non-empty")
        if self.x_support.ndim != 2 or self.x_query.ndim != 2:
            raise ValueError("task inputs must be 2-D [samples, features]")
        if self.x_support.shape[1] != self.x_query.shape[1]:
            raise ValueError("support and query input widths differ")
        if len(self.y_support) != len(self.x_support) or len(self.y_query) != len(self.x_query):
            raise ValueError("inputs and targets have different lengths")

    @property
    def input_dim(self) -> int:
        return self.x_support.shape[1]

    def split(self, which: str) -> tuple[np.ndarray, np.ndarray]:
        if which == "support":
            return self.x_support, self.y_support
        if which == "query":
            return self.x_query, self.y_query
        raise ValueError(f"unknown split {which!r}")

    def to_dict(self) -> dict:
        """Plain-data form used by dataset dumps."""
        return {
            "kind": self.kind,
            "x_support": self.x_support.tolist(),
            "y_support": self.y_support.tolist(),
            "x_query": self.x_query.tolist(),
            "y_query": self.y_query.tolist(),
            "meta": {k: _plain(v) for k, v in sorted(self.meta.items())},
        }


def _plain(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (tuple, list)):
        return [_plain(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


@dataclass(frozen=True, eq=False)
class TaskBatch:
    """Equal-sized tasks stacked on a leading task axis."""

    x_support: np.ndarray    # [T, K, d]
    y_support: np.ndarray    # [T, K, 1] (regression) or [T, K] class indices
    x_query: np.ndarray
    y_query: np.ndarray
    x_avg: np.ndarray        # [T, 1, d]
    kind: str

    def __len__(self) -> int:
        return self.x_support.shape[0]

    def split(self, which: str) -> tuple[np.ndarray, np.ndarray]:
        if which == "support":
            return self.x_support, self.y_support
        if which == "query":
            return self.x_query, self.y_query
        raise ValueError(f"unknown split {which!r}")


def stack_tasks(tasks: Sequence[Task] | TaskBatch) -> TaskBatch:
    if isinstance(tasks, TaskBatch):
        return tasks
    if isinstance(tasks, Task):
        tasks = [tasks]
    if not tasks:
        raise ValueError("empty task batch")
    kinds = {t.kind for t in tasks}
    if len(kinds) != 1:
        raise ValueError("cannot mix regression and classification tasks in one batch")
    first = tasks[0]
    for t in tasks[1:]:
        if t.x_support.shape != first.x_support.shape or t.x_query.shape != first.x_query.shape:
            raise ValueError("tasks in a batch must share support and query sizes")
    avg = [(t.x_support.sum(axis=0) + t.x_query.sum(axis=0)) / (len(t.x_support) + len(t.x_query))
           for t in tasks]
    return TaskBatch(
        np.stack([t.x_support for t in tasks]), np.stack([t.y_support for t in tasks]),
        np.stack([t.x_query for t in tasks]), np.stack([t.y_query for t in tasks]),
        np.stack(avg)[:, None, :], first.kind)


# ------------------------------------------------------------------ sinusoid

@dataclass(frozen=True)
class SinusoidSpec:
    amplitude: tuple[float, float] = (0.1, 5.0)
    frequency: tuple[float, float] = (0.5, 2.0)
    phase: tuple[float, float] = (0.0, 2 * math.pi)
    noise_std: float = 0.3
    input_range: tuple[float, float] = (-5.0, 5.0)
    shots: int = 10
    queries: int = 10
    # "phase": y = A sin(w x + b); "offset": y = A sin(w x) + b
    phase_mode: str = "phase"

    def __post_init__(self):
        for name in ("amplitude", "frequency", "phase", "input_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} range must be ordered, got ({lo}, {hi})")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.shots < 1 or self.queries < 1:
            raise ValueError("shots and queries must be >= 1")
        if self.phase_mode not in ("phase", "offset"):
            raise ValueError(f"phase_mode must be 'phase' or 'offset', got {self.phase_mode!r}")


def sinusoid(x: np.ndarray, amplitude: float, frequency: float, phase: float,
             phase_mode: str = "phase") -> np.ndarray:
    if phase_mode == "offset":
        return amplitude * np.sin(frequency * x) + phase
    return amplitude * np.sin(frequency * x + phase)


def sample_sinusoid_task(spec: SinusoidSpec, rng: np.random.Generator) -> Task:
    amp = rng.uniform(*spec.amplitude)
    freq = rng.uniform(*spec.frequency)
    phase = rng.uniform(*spec.phase)
    n = spec.shots + spec.queries
    x = rng.uniform(*spec.input_range, size=n)
    # a repeated draw would leak a support point into the query set
    while len(np.unique(x)) < n:
        x = rng.uniform(*spec.input_range, size=n)
    y = sinusoid(x, amp, freq, phase, spec.phase_mode)
    y = y + rng.normal(0.0, spec.noise_std, size=n) if spec.noise_std > 0 else y
    x = x[:, None]
    y = y[:, None]
    k = spec.shots
    return Task(x[:k], y[:k], x[k:], y[k:], REGRESSION,
                {"amplitude": amp, "frequency": freq, "phase": phase})


def sinusoid_batch(spec: SinusoidSpec, n: int, rng: np.random.Generator) -> list[Task]:
    return [sample_sinusoid_task(spec, rng) for _ in range(n)]


# -------------------------------------------------------------- factor world

@dataclass(frozen=True)
class FactorWorldSpec:
    input_dim: int = 16
    n_factors: int = 16
    subset_size: int = 2
    class_mean: float = 1.0
    factor_noise: float = 1.0
    obs_noise: float = 0.1
    agreement: float = 0.8
    n_train_tasks: int = 16
    n_test_tasks: int = 8

    def __post_init__(self):
        if self.n_factors < 1 or self.input_dim < self.n_factors:
            raise ValueError(f"need input_dim >= n_factors >= 1, got {self.input_dim}, {self.n_factors}")
        if not 1 <= self.subset_size <= self.n_factors:
            raise ValueError("subset_size must be in [1, n_factors]")
        if not 0.0 <= self.agreement <= 1.0:
            raise ValueError("agreement probability q must lie in [0, 1]")
        if self.factor_noise < 0 or self.obs_noise < 0:
            raise ValueError("noise levels must be >= 0")
        if self.n_train_tasks < 1 or self.n_test_tasks < 0:
            raise ValueError("need at least one training task")


@dataclass(frozen=True, eq=False)
class FactorWorld:
    spec: FactorWorldSpec
    dictionary: np.ndarray           # [input_dim, n_factors], orthonormal columns
    subsets: tuple[tuple[int, ...], ...]
    train_ids: tuple[int, ...]
    test_ids: tuple[int, ...]

    def subset(self, task_id: int) -> tuple[int, ...]:
        if not 0 <= task_id < len(self.subsets):
            raise KeyError(f"unknown task id {task_id}")
        return self.subsets[task_id]

    def noncausal(self, task_id: int) -> tuple[int, ...]:
        own = set(self.subset(task_id))
        return tuple(k for k in range(self.spec.n_factors) if k not in own)

    def disjoint(self, i: int, j: int) -> bool:
        return not set(self.subset(i)) & set(self.subset(j))


def sample_factor_world(spec: FactorWorldSpec, rng: np.random.Generator) -> FactorWorld:
    """Draw an orthonormal dictionary and one causal subset per task.

    Subsets are dealt in chunks from shuffled permutations of the factors,
    so tasks dealt from the same permutation (consecutive runs of
    ``n_factors // subset_size`` ids) never share a factor.
    """
    gauss = rng.normal(size=(spec.input_dim, spec.n_factors))
    q, r = np.linalg.qr(gauss)
    q = q * np.sign(np.diag(r))
    n_tasks = spec.n_train_tasks + spec.n_test_tasks
    per_perm = spec.n_factors // spec.subset_size
    subsets: list[tuple[int, ...]] = []
    while len(subsets) < n_tasks:
        perm = rng.permutation(spec.n_factors)
        for c in range(per_perm):
            subsets.append(tuple(sorted(int(k) for k in perm[c * spec.subset_size:(c + 1) * spec.subset_size])))
    subsets = subsets[:n_tasks]
    return FactorWorld(spec, q, tuple(subsets), tuple(range(spec.n_train_tasks)),
                       tuple(range(spec.n_train_tasks, n_tasks)))


def _balanced_labels(n: int, rng: np.random.Generator) -> np.ndarray:
    y = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    if n % 2:
        y[-1] = rng.choice([-1.0, 1.0])
    return rng.permutation(y)


def _observe(world: FactorWorld, factors: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    x = factors @ world.dictionary.T
    if world.spec.obs_noise > 0:
        x = x + rng.normal(0.0, world.spec.obs_noise, size=x.shape)
    return x


def _factors(world: FactorWorld, n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.normal(0.0, world.spec.factor_noise, size=(n, world.spec.n_factors))


def _to_class(y: np.ndarray) -> np.ndarray:
    return ((y + 1) // 2).astype(np.int64)


def sample_classification_task(world: FactorWorld, task_id: int, shots: int,
                               rng: np.random.Generator, queries: int | None = None) -> Task:
    """Unconfounded task: only the task's own factors carry label signal."""
    subset = list(world.subset(task_id))
    queries = shots if queries is None else queries
    if shots < 1 or queries < 1:
        raise ValueError("shots and queries must be >= 1")
    splits = []
    for n in (shots, queries):
        y = _balanced_labels(n, rng)
        s = _factors(world, n, rng)
        s[:, subset] += world.spec.class_mean * y[:, None]
        splits.append((_observe(world, s, rng), _to_class(y)))
    (xs, ys), (xq, yq) = splits
    return Task(xs, ys, xq, yq, CLASSIFICATION, {"task_id": task_id, "subset": subset})


def _agreeing(y: np.ndarray, q: float, rng: np.random.Generator) -> np.ndarray:
    agree = rng.random(len(y)) < q
    return np.where(agree, y, -y)


def make_confounded_batch(world: FactorWorld, pairs: Sequence[tuple[int, int]], q: float,
                          rng: np.random.Generator, shots: int = 10,
                          queries: int | None = None) -> list[Task]:
    """Tasks whose observations also express their partners' factors.

    Every task named in ``pairs`` yields one Task.  For each of its
    observations, each partner ``j`` gets a label that equals the task's own
    label with probability ``q`` (drawn independently per partner and
    sample), and partner ``j``'s factors are shifted by ``mu`` times that
    label.  A task paired with several others (e.g. all pairs inside a batch)
    therefore sees several spurious factor groups.  Partner labels are kept in
    ``meta["partner_labels"]`` as ``{j: (support, query)}`` in ``{-1, +1}``.
    """
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must lie in [0, 1], got {q}")
    queries = shots if queries is None else queries
    n_tasks = len(world.subsets)
    order: list[int] = []
    partners: dict[int, list[int]] = {}
    for i, j in pairs:
        for t in (i, j):
            if not 0 <= t < n_tasks:
                raise KeyError(f"pair references undefined task {t}")
        if i == j:
            raise ValueError(f"task {i} cannot be paired with itself")
        for a, b in ((i, j), (j, i)):
            if a not in partners:
                partners[a] = []
                order.append(a)
            if b not in partners[a]:
                partners[a].append(b)
    mu = world.spec.class_mean
    tasks = []
    for t in order:
        subset = list(world.subset(t))
        splits = []
        plabels: dict[int, list[np.ndarray]] = {j: [] for j in partners[t]}
        for n in (shots, queries):
            y = _balanced_labels(n, rng)
            s = _factors(world, n, rng)
            s[:, subset] += mu * y[:, None]
            for j in partners[t]:
                yj = _agreeing(y, q, rng)
                s[:, list(world.subset(j))] += mu * yj[:, None]
                plabels[j].append(yj)
            splits.append((_observe(world, s, rng), _to_class(y)))
        (xs, ys), (xq, yq) = splits
        meta = {"task_id": t, "subset": subset, "partners": list(partners[t]),
                "partner_labels": {j: tuple(v) for j, v in plabels.items()}, "q": q}
        tasks.append(Task(xs, ys, xq, yq, CLASSIFICATION, meta))
    return tasks


def batch_pairs(task_ids: Sequence[int], scheme: str = "all") -> list[tuple[int, int]]:
    """Pair list for a batch: ``"all"`` pairs every two tasks, ``"adjacent"`` forms (0,1), (2,3), ..."""
    ids = list(task_ids)
    if scheme == "adjacent":
        return [(ids[k], ids[k + 1]) for k in range(0, len(ids) - 1, 2)]
    if scheme == "all":
        return [(ids[a], ids[b]) for a in range(len(ids)) for b in range(a + 1, len(ids))]
    raise ValueError(f"unknown pairing scheme {scheme!r}")


# ----------------------------------------------------------- theorem setting

@dataclass(frozen=True)
class JointSetting:
    """Two binary tasks with disjoint Gaussian factor blocks."""

    mu_i: float = 1.0
    mu_j: float = 1.0
    sd_i: float = 1.0
    sd_j: float = 1.0
    width_i: int = 2
    width_j: int = 2

    def __post_init__(self):
        if self.width_i < 1 or self.width_j < 1:
            raise ValueError("block widths must be >= 1")
        if self.sd_i < 0 or self.sd_j < 0:
            raise ValueError("noise levels must be >= 0")

    @classmethod
    def from_world(cls, spec: FactorWorldSpec) -> "JointSetting":
        return cls(spec.class_mean, spec.class_mean, spec.factor_noise, spec.factor_noise,
                   spec.subset_size, spec.subset_size)


@dataclass(frozen=True, eq=False)
class JointDataset:
    z: np.ndarray            # [n, width_i + width_j]: causal block first
    y_i: np.ndarray          # {-1, +1}
    y_j: np.ndarray
    causal_width: int


def sample_theorem1_dataset(setting: JointSetting | FactorWorldSpec, n: int, q: float,
                            rng: np.random.Generator) -> JointDataset:
    """Rows ``z = [A_i; A_j]`` with each block centred at its own label times mu.

    The shared block is empty and ``P(y_i == y_j) = q``.
    """
    if isinstance(setting, FactorWorldSpec):
        setting = JointSetting.from_world(setting)
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must lie in [0, 1], got {q}")
    y_i = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    y_j = _agreeing(y_i, q, rng)
    a_i = setting.mu_i * y_i[:, None] + setting.sd_i * rng.normal(size=(n, setting.width_i))
    a_j = setting.mu_j * y_j[:, None] + setting.sd_j * rng.normal(size=(n, setting.width_j))
    return JointDataset(np.hstack([a_i, a_j]), y_i, y_j, setting.width_i)
