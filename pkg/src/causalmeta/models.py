"""Encoder, head, grouping network and factor matrix, plus their forward passes.

All forward functions accept either a single batch ``[n, d]`` or a stack of
tasks ``[T, n, d]``.  Parameters may be shared (``W: [d_in, d_out]``) or
per-task (``W: [T, d_in, d_out]``, bias ``[T, d_out]``); the latter is how the
meta-learner adapts every task of a batch in one vectorised pass.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import rng as rngs
from .autodiff import ParamSet, Tensor
from .config import ExperimentConfig
from .tasks import Task

OUTPUT_ACTS = ("identity", "softplus", "tanh", "relu")
NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class MLPSpec:
    widths: tuple[int, ...]
    hidden_act: str = "tanh"
    out_act: str = "identity"

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least one layer (two widths)")
        if any(w < 1 for w in self.widths):
            raise ValueError(f"widths must be positive, got {self.widths}")
        if self.hidden_act not in ("tanh", "relu"):
            raise ValueError(f"unknown hidden activation {self.hidden_act!r}")
        if self.out_act not in OUTPUT_ACTS:
            raise ValueError(f"unknown output activation {self.out_act!r}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def num_params(self) -> int:
        return sum((a + 1) * b for a, b in zip(self.widths[:-1], self.widths[1:]))


_ACT = {"tanh": ad.tanh, "relu": ad.relu, "softplus": ad.softplus, "identity": lambda t: t}


def init_mlp(spec: MLPSpec, rng: np.random.Generator) -> ParamSet:
    """Gaussian weights with std 1/sqrt(fan_in); zero biases."""
    params = ParamSet()
    for i, (a, b) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        params[f"{i}.w"] = Tensor(rng.normal(0.0, 1.0 / math.sqrt(a), size=(a, b)), requires_grad=True)
        params[f"{i}.b"] = Tensor(np.zeros(b), requires_grad=True)
    return params


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def mlp(params: Mapping[str, Tensor], spec: MLPSpec, x) -> Tensor:
    h = _as_tensor(x)
    if h.shape[-1] != spec.widths[0]:
        raise ad.ShapeError(f"input width {h.shape[-1]} does not match MLP input {spec.widths[0]}")
    last = spec.n_layers - 1
    for i in range(spec.n_layers):
        w, b = params[f"{i}.w"], params[f"{i}.b"]
        h = ad.matmul(h, w)
        if b.ndim == 2:  # per-task bias [T, out]
            b = ad.reshape(b, (b.shape[0], 1, b.shape[1]))
        h = ad.add(h, ad.broadcast_to(b, h.shape))
        h = _ACT[spec.out_act if i == last else spec.hidden_act](h)
    return h


# ------------------------------------------------------------------ bundle

@dataclass(frozen=True, eq=False)
class ModelBundle:
    encoder: ParamSet
    head: ParamSet
    grouping: ParamSet | None
    xi: Tensor | None
    mode: str
    encoder_spec: MLPSpec
    head_spec: MLPSpec
    grouping_spec: MLPSpec | None = None
    norm: str = "sum"

    def __post_init__(self):
        if self.mode not in ("plain", "causal"):
            raise ValueError(f"unknown mode {self.mode!r}")
        n_z = self.encoder_spec.widths[-1]
        if self.mode == "causal":
            if self.xi is None or self.grouping is None or self.grouping_spec is None:
                raise ValueError("causal mode needs a factor matrix and a grouping network")
            n_k = self.xi.shape[1]
            if self.xi.shape[0] != n_z:
                raise ValueError(f"factor matrix has {self.xi.shape[0]} rows, encoder emits {n_z}")
            if n_k < 2:
                raise ValueError("need at least two factors")
            if self.head_spec.widths[0] != n_k:
                raise ValueError(f"causal head input {self.head_spec.widths[0]} != N_k {n_k}")
            gw = self.grouping_spec.widths
            if gw[0] != n_k or gw[-1] != n_k:
                raise ValueError(f"grouping network must map N_k -> N_k, got {gw}")
        elif self.head_spec.widths[0] != n_z:
            raise ValueError(f"plain head input {self.head_spec.widths[0]} != N_z {n_z}")

    @property
    def n_factors(self) -> int:
        return self.xi.shape[1] if self.xi is not None else 0

    def theta(self) -> ParamSet:
        """Encoder and head parameters under ``g.`` / ``h.`` prefixes."""
        return ParamSet({**self.encoder.prefixed("g."), **self.head.prefixed("h.")})

    def causal_params(self) -> ParamSet:
        """Factor matrix and grouping parameters (``xi`` / ``gr.``)."""
        out = ParamSet({"xi": self.xi})
        out.update(self.grouping.prefixed("gr."))
        return out

    def named_params(self) -> ParamSet:
        out = self.theta()
        if self.mode == "causal":
            out.update(self.causal_params())
        return out

    def with_theta(self, theta: Mapping[str, Tensor]) -> "ModelBundle":
        enc = ParamSet((k[2:], v) for k, v in theta.items() if k.startswith("g."))
        head = ParamSet((k[2:], v) for k, v in theta.items() if k.startswith("h."))
        return dataclasses.replace(self, encoder=enc, head=head)

    def with_causal(self, params: Mapping[str, Tensor]) -> "ModelBundle":
        gr = ParamSet((k[3:], v) for k, v in params.items() if k.startswith("gr."))
        return dataclasses.replace(self, xi=params["xi"], grouping=gr)

    def num_params(self) -> int:
        return self.named_params().num_params()

    def specs(self) -> dict:
        def spec(s):
            return None if s is None else {"widths": list(s.widths), "hidden_act": s.hidden_act,
                                           "out_act": s.out_act}
        return {"mode": self.mode, "norm": self.norm, "encoder": spec(self.encoder_spec),
                "head": spec(self.head_spec), "grouping": spec(self.grouping_spec)}


def causal_param_count(mc) -> int:
    enc = MLPSpec((mc.input_dim, *mc.encoder_hidden, mc.n_z)).num_params()
    head = MLPSpec((mc.n_factors, *mc.head_hidden, mc.output_dim)).num_params()
    gr = MLPSpec(mc.grouping_widths).num_params()
    return enc + head + gr + mc.n_z * mc.n_factors


def plain_encoder_widths(mc) -> tuple[tuple[int, ...], int]:
    """Encoder hidden widths and N_z for plain mode.

    When ``match_params`` is set every encoder width is scaled by a common
    factor so that the plain model's parameter count is as close as possible
    to the causal model's (which also counts the factor matrix and the
    grouping network).
    """
    if not mc.match_params:
        return tuple(mc.encoder_hidden), mc.n_z
    target = causal_param_count(mc)
    base = (*mc.encoder_hidden, mc.n_z)
    best = None
    for step in range(1, 4001):
        scale = step / 1000
        widths = tuple(max(1, round(w * scale)) for w in base)
        count = (MLPSpec((mc.input_dim, *widths)).num_params()
                 + MLPSpec((widths[-1], *mc.head_hidden, mc.output_dim)).num_params())
        gap = abs(count - target)
        if best is None or gap < best[0]:
            best = (gap, widths)
    widths = best[1]
    return widths[:-1], widths[-1]


def init_bundle(config: ExperimentConfig, seed: int | None = None) -> ModelBundle:
    """Fresh parameters drawn from the init stream of ``seed``."""
    seed = config.seed if seed is None else seed
    mc = config.model
    act = mc.hidden_act
    rng = rngs.stream(seed, rngs.INIT)
    if config.mode == "plain":
        hidden, n_z = plain_encoder_widths(mc)
        enc_spec = MLPSpec((mc.input_dim, *hidden, n_z), act, act)
        head_spec = MLPSpec((n_z, *mc.head_hidden, mc.output_dim), act, "identity")
        return ModelBundle(init_mlp(enc_spec, rng), init_mlp(head_spec, rng), None, None,
                           "plain", enc_spec, head_spec, None, config.causal.norm)
    enc_spec = MLPSpec((mc.input_dim, *mc.encoder_hidden, mc.n_z), act, act)
    head_spec = MLPSpec((mc.n_factors, *mc.head_hidden, mc.output_dim), act, "identity")
    gr_spec = MLPSpec(mc.grouping_widths, "tanh", "softplus")
    encoder = init_mlp(enc_spec, rng)
    head = init_mlp(head_spec, rng)
    grouping = init_mlp(gr_spec, rng)
    xi = Tensor(rng.normal(0.0, 1.0 / math.sqrt(mc.n_z), size=(mc.n_z, mc.n_factors)),
                requires_grad=True)
    return ModelBundle(encoder, head, grouping, xi, "causal", enc_spec, head_spec, gr_spec,
                       config.causal.norm)


# ------------------------------------------------------------ forward passes

def encode(bundle: ModelBundle, x, encoder: Mapping[str, Tensor] | None = None) -> Tensor:
    """Shared encoder ``g``; output ``[..., n, N_z]``."""
    return mlp(bundle.encoder if encoder is None else encoder, bundle.encoder_spec, x)


def _require_causal(bundle: ModelBundle) -> None:
    if bundle.mode != "causal":
        raise ValueError("operation needs a causal-mode bundle")


def causal_representation(bundle: ModelBundle, x, encoder=None, xi: Tensor | None = None) -> Tensor:
    """``g(x) @ Xi`` row-wise, i.e. ``Xi^T g(x)`` for each sample."""
    _require_causal(bundle)
    return ad.matmul(encode(bundle, x, encoder), bundle.xi if xi is None else xi)


def task_average(task: Task) -> np.ndarray:
    """Mean input over the union of support and query samples."""
    n = len(task.x_support) + len(task.x_query)
    if n == 0:
        raise ValueError("empty task")
    return (task.x_support.sum(axis=0) + task.x_query.sum(axis=0)) / n


def normalize(v: Tensor, kind: str = "sum") -> Tensor:
    """Turn positive scores on the last axis into weights.

    ``"sum"`` divides by the total (a probability vector); ``"max"`` divides
    by the largest entry.
    """
    if kind == "sum":
        denom = ad.sum(v, -1, keepdims=True)
        if denom.data.min() < NORM_FLOOR:
            denom = ad.add(denom, Tensor(np.maximum(denom.data, NORM_FLOOR) - denom.data))
    elif kind == "max":
        denom = ad.max(v, -1, keepdims=True)
    else:
        raise ValueError(f"unknown normalisation {kind!r}")
    return ad.div(v, ad.broadcast_to(denom, v.shape))


def grouping_scores(bundle: ModelBundle, x_avg, encoder=None, xi=None, grouping=None) -> Tensor:
    """Positive (softplus) grouping outputs before normalisation."""
    _require_causal(bundle)
    rep = causal_representation(bundle, x_avg, encoder, xi)
    out = mlp(bundle.grouping if grouping is None else grouping, bundle.grouping_spec, rep)
    if not np.isfinite(out.data).all():
        raise ad.NonFiniteError("grouping network produced non-finite values")
    return out


def grouping_weights(bundle: ModelBundle, x_avg, encoder=None, xi=None, grouping=None) -> Tensor:
    """Per-factor relevance weights for a task, from its average sample.

    A 1-D ``x_avg`` gives an ``[N_k]`` vector; stacked inputs
    ``[..., 1, d]`` give ``[..., 1, N_k]``.
    """
    x = _as_tensor(x_avg)
    flat = x.ndim == 1
    if flat:
        x = ad.reshape(x, (1, x.shape[0]))
    w = normalize(grouping_scores(bundle, x, encoder, xi, grouping), bundle.norm)
    return ad.reshape(w, (w.shape[-1],)) if flat else w


def head_forward(bundle: ModelBundle, z, head=None) -> Tensor:
    return mlp(bundle.head if head is None else head, bundle.head_spec, z)


def predict(bundle: ModelBundle, x, weights=None, encoder=None, head=None, xi=None) -> Tensor:
    """``h(g(x))`` in plain mode, ``h(weights * (Xi^T g(x)))`` in causal mode."""
    if bundle.mode == "plain":
        if weights is not None:
            raise ValueError("plain-mode prediction takes no grouping weights")
        return head_forward(bundle, encode(bundle, x, encoder), head)
    if weights is None:
        raise ValueError("causal-mode prediction needs grouping weights")
    rep = causal_representation(bundle, x, encoder, xi)
    weights = _as_tensor(weights)
    if weights.shape[-1] != rep.shape[-1]:
        raise ad.ShapeError(f"weights have {weights.shape[-1]} entries, expected {rep.shape[-1]}")
    return head_forward(bundle, ad.mul(rep, ad.broadcast_to(weights, rep.shape)), head)


def gram(bundle_or_xi) -> np.ndarray:
    """``|Xi^T Xi|``, the factor similarity matrix."""
    xi = bundle_or_xi.xi if isinstance(bundle_or_xi, ModelBundle) else bundle_or_xi
    arr = xi.data if isinstance(xi, Tensor) else np.asarray(xi)
    return np.abs(arr.T @ arr)
