# src/moeprune/core/moe.py
"""
Deterministic toy sparse-MoE transformer.

Architecture: token + position embedding -> L blocks of
[pre-norm single-head causal attention, pre-norm top-k MoE FFN], each with a
residual connection -> final norm -> output projection -> softmax.

All weights come from one PCG64 stream seeded with `weight_seed`, drawn in this
fixed order (this order also defines the parameter checksum):

    tok_emb (V, d), pos_emb (S, d),
    per layer: wq, wk, wv, wo (d, d), router (n_l, d),
               per expert: w_in (e, d), b_in (e,), w_out (d, e), b_out (d,),
    out_proj (d, V)

Everything is float64. Models are never serialized; rebuild them from the spec.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Callable, Iterator, Optional, Sequence

import numpy as np
from scipy.special import expit, softmax

from ..errors import FeasibilityError, SequenceLengthError, ShapeError, StructureError, ValidationError

if TYPE_CHECKING:
    from .criteria import PruningOrder

logger = logging.getLogger(__name__)

SPEC_KEYS = (
    "layers", "experts_per_layer", "fanout", "hidden_dim", "expert_hidden_dim",
    "vocab_size", "max_seq_len", "weight_seed", "weight_scale",
)

NORM_EPS = 1e-5

TokenSequence = Sequence[int]


def _is_int(v) -> bool:
    return isinstance(v, (int, np.integer)) and not isinstance(v, bool)


def _per_layer(name: str, value, layers: int) -> tuple[int, ...]:
    if _is_int(value):
        return (int(value),) * layers
    if not isinstance(value, (list, tuple)):
        raise ValidationError(f"{name} must be an integer or a list of integers", field=name)
    if len(value) != layers:
        raise ValidationError(f"{name} has {len(value)} entries, expected {layers} (one per layer)", field=name)
    out = []
    for i, v in enumerate(value):
        if not _is_int(v):
            raise ValidationError(f"{name}[{i}] must be an integer, got {v!r}", field=f"{name}[{i}]")
        out.append(int(v))
    return tuple(out)


@dataclass(frozen=True)
class ModelSpec:
    layers: int
    experts_per_layer: tuple[int, ...]
    fanout: tuple[int, ...]
    hidden_dim: int
    expert_hidden_dim: int
    vocab_size: int
    max_seq_len: int
    weight_seed: int
    weight_scale: float

    def __post_init__(self):
        for name in ("layers", "hidden_dim", "expert_hidden_dim", "vocab_size", "max_seq_len", "weight_seed"):
            if not _is_int(getattr(self, name)):
                raise ValidationError(f"{name} must be an integer", field=name)
        if self.layers < 1:
            raise ValidationError("layers must be >= 1", field="layers")
        object.__setattr__(self, "experts_per_layer", _per_layer("experts_per_layer", self.experts_per_layer, self.layers))
        object.__setattr__(self, "fanout", _per_layer("fanout", self.fanout, self.layers))
        for l, (n, k) in enumerate(zip(self.experts_per_layer, self.fanout)):
            if n < 1:
                raise ValidationError(f"experts_per_layer[{l}]={n} must be >= 1", field=f"experts_per_layer[{l}]")
            if not 1 <= k <= n:
                raise ValidationError(
                    f"fanout[{l}]={k} must satisfy 1 <= fanout <= experts_per_layer[{l}]={n}",
                    field=f"fanout[{l}]", layer=l,
                )
        if self.hidden_dim < 1:
            raise ValidationError("hidden_dim must be >= 1", field="hidden_dim")
        if self.expert_hidden_dim < 1:
            raise ValidationError("expert_hidden_dim must be >= 1", field="expert_hidden_dim")
        if self.vocab_size < 2:
            raise ValidationError("vocab_size must be >= 2", field="vocab_size")
        if self.max_seq_len < 1:
            raise ValidationError("max_seq_len must be >= 1", field="max_seq_len")
        if not 0 <= self.weight_seed < 2**64:
            raise ValidationError("weight_seed must be a 64-bit unsigned integer", field="weight_seed")
        try:
            scale = float(self.weight_scale)
        except (TypeError, ValueError):
            raise ValidationError("weight_scale must be a real number", field="weight_scale") from None
        if isinstance(self.weight_scale, bool) or not np.isfinite(scale) or scale <= 0:
            raise ValidationError("weight_scale must be a finite positive real", field="weight_scale")
        object.__setattr__(self, "weight_scale", scale)
        object.__setattr__(self, "layers", int(self.layers))
        object.__setattr__(self, "weight_seed", int(self.weight_seed))

    @property
    def caps(self) -> tuple[int, ...]:
        """Most experts that may be removed per layer (n_l - k_l)."""
        return tuple(n - k for n, k in zip(self.experts_per_layer, self.fanout))

    @property
    def total_experts(self) -> int:
        return sum(self.experts_per_layer)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        if not isinstance(d, dict):
            raise ValidationError("model spec must be a JSON object", field="spec")
        missing = [k for k in SPEC_KEYS if k not in d]
        if missing:
            raise ValidationError(f"model spec is missing key(s): {', '.join(missing)}", field=missing[0])
        unknown = sorted(set(d) - set(SPEC_KEYS))
        if unknown:
            raise ValidationError(f"model spec has unknown key(s): {', '.join(unknown)}", field=unknown[0])
        return cls(**{k: d[k] for k in SPEC_KEYS})

    def to_dict(self) -> dict:
        return {
            "layers": self.layers,
            "experts_per_layer": list(self.experts_per_layer),
            "fanout": list(self.fanout),
            "hidden_dim": self.hidden_dim,
            "expert_hidden_dim": self.expert_hidden_dim,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
            "weight_seed": self.weight_seed,
            "weight_scale": self.weight_scale,
        }

    def spec_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


@dataclass(frozen=True, eq=False)
class ExpertFFN:
    w_in: np.ndarray   # (e, d)
    b_in: np.ndarray   # (e,)
    w_out: np.ndarray  # (d, e)
    b_out: np.ndarray  # (d,)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        a = x @ self.w_in.T + self.b_in
        return (a * expit(a)) @ self.w_out.T + self.b_out


@dataclass(frozen=True, eq=False)
class MoELayer:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    router: np.ndarray  # W_g, (n_l, d)
    experts: tuple[ExpertFFN, ...]


@dataclass(frozen=True, eq=False)
class MoEModel:
    spec: ModelSpec
    tok_emb: np.ndarray
    pos_emb: np.ndarray
    layers: tuple[MoELayer, ...]
    out_proj: np.ndarray
    active_mask: tuple[np.ndarray, ...]

    @property
    def is_full(self) -> bool:
        return all(bool(m.all()) for m in self.active_mask)

    def active_experts(self, layer: int) -> np.ndarray:
        return np.flatnonzero(self.active_mask[layer])


@dataclass(frozen=True, eq=False)
class RouteTrace:
    """Per-layer routing record handed to forward observers (calibration)."""
    layer: int
    router_probs: np.ndarray  # (T, n_l) full softmax over active logits, 0 for inactive experts
    selected: np.ndarray      # (T, k_l) expert ids, descending logit
    gates: np.ndarray         # (T, k_l)
    expert_norms: np.ndarray  # (T, k_l) ||E_i(h)||_2 of the selected experts


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def build_model(spec: ModelSpec) -> MoEModel:
    rng = np.random.Generator(np.random.PCG64(spec.weight_seed))
    scale = spec.weight_scale
    d, e = spec.hidden_dim, spec.expert_hidden_dim

    def draw(*shape):
        return _freeze(rng.standard_normal(shape) * scale)

    tok_emb = draw(spec.vocab_size, d)
    pos_emb = draw(spec.max_seq_len, d)
    layers = []
    for n in spec.experts_per_layer:
        wq, wk, wv, wo = draw(d, d), draw(d, d), draw(d, d), draw(d, d)
        router = draw(n, d)
        experts = tuple(ExpertFFN(draw(e, d), draw(e), draw(d, e), draw(d)) for _ in range(n))
        layers.append(MoELayer(wq, wk, wv, wo, router, experts))
    out_proj = draw(d, spec.vocab_size)
    mask = tuple(_freeze(np.ones(n, dtype=bool)) for n in spec.experts_per_layer)
    logger.debug("Built model spec_hash=%s L=%d n=%s k=%s", spec.spec_hash()[:12],
                 spec.layers, list(spec.experts_per_layer), list(spec.fanout))
    return MoEModel(spec, tok_emb, pos_emb, tuple(layers), out_proj, mask)


def parameter_arrays(model: MoEModel) -> Iterator[np.ndarray]:
    """Yield every weight array in generator order."""
    yield model.tok_emb
    yield model.pos_emb
    for lw in model.layers:
        yield from (lw.wq, lw.wk, lw.wv, lw.wo, lw.router)
        for ex in lw.experts:
            yield from (ex.w_in, ex.b_in, ex.w_out, ex.b_out)
    yield model.out_proj


def parameter_checksum(model: MoEModel) -> str:
    h = hashlib.sha256()
    for a in parameter_arrays(model):
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()


# ---------- forward pieces ----------

def _norm(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + NORM_EPS)


def _attention(lw: MoELayer, x: np.ndarray) -> np.ndarray:
    t, d = x.shape
    q, k, v = x @ lw.wq.T, x @ lw.wk.T, x @ lw.wv.T
    scores = (q @ k.T) / np.sqrt(d)
    causal = np.tril(np.ones((t, t), dtype=bool))
    scores = np.where(causal, scores, -np.inf)
    return (softmax(scores, axis=-1) @ v) @ lw.wo.T


def _route_tokens(model: MoEModel, layer: int, x: np.ndarray):
    """Top-k among active experts for every row of x (T, d)."""
    k = model.spec.fanout[layer]
    active = model.active_experts(layer)
    if active.size < k:
        raise StructureError(f"layer {layer} has {active.size} active experts, fewer than fanout {k}", layer=layer)
    logits = x @ model.layers[layer].router[active].T          # (T, n_active)
    # stable sort on negated logits: among equal logits the lower expert index wins
    top = np.argsort(-logits, axis=-1, kind="stable")[:, :k]
    gates = softmax(np.take_along_axis(logits, top, axis=-1), axis=-1)
    return active[top], gates, logits, active


def _moe_tokens(model: MoEModel, layer: int, x: np.ndarray,
                observer: Optional[Callable[[RouteTrace], None]] = None) -> np.ndarray:
    selected, gates, logits, active = _route_tokens(model, layer, x)
    experts = model.layers[layer].experts
    y = np.zeros_like(x)
    norms = np.zeros_like(gates) if observer is not None else None
    for ex_id in np.unique(selected):
        rows, slot = np.nonzero(selected == ex_id)
        out = experts[ex_id](x[rows])
        y[rows] += gates[rows, slot][:, None] * out
        if norms is not None:
            norms[rows, slot] = np.linalg.norm(out, axis=-1)
    if observer is not None:
        probs = np.zeros((x.shape[0], model.spec.experts_per_layer[layer]))
        probs[:, active] = softmax(logits, axis=-1)
        observer(RouteTrace(layer, probs, selected, gates, norms))
    return y


def _check_layer(model: MoEModel, layer: int) -> None:
    if not (_is_int(layer) and 0 <= layer < model.spec.layers):
        raise ValidationError(f"layer {layer!r} out of range [0, {model.spec.layers})", field="layer")


def _check_hidden(model: MoEModel, h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (model.spec.hidden_dim,):
        raise ShapeError(f"hidden state has shape {h.shape}, expected ({model.spec.hidden_dim},)")
    return h


def check_sequence(spec: ModelSpec, seq: TokenSequence) -> np.ndarray:
    ids = np.asarray(seq)
    if ids.ndim != 1 or ids.size == 0:
        raise ValidationError("token sequence must be a nonempty 1-D list of ids", field="ids")
    if not np.issubdtype(ids.dtype, np.integer):
        raise ValidationError("token ids must be integers", field="ids")
    if ids.size > spec.max_seq_len:
        raise SequenceLengthError(f"sequence length {ids.size} exceeds max_seq_len {spec.max_seq_len}", field="ids")
    if ids.min() < 0 or ids.max() >= spec.vocab_size:
        raise ValidationError(f"token id outside [0, {spec.vocab_size})", field="ids")
    return ids.astype(np.int64)


# ---------- public operations ----------

def route(model: MoEModel, layer: int, h) -> tuple[np.ndarray, np.ndarray]:
    """
    Return (A(h), g): the selected expert ids in ascending order and the
    length-n_l gate vector (zero outside A(h), summing to 1).
    """
    _check_layer(model, layer)
    h = _check_hidden(model, h)
    selected, gates, _, _ = _route_tokens(model, layer, h[None, :])
    g = np.zeros(model.spec.experts_per_layer[layer])
    g[selected[0]] = gates[0]
    return np.sort(selected[0]), g


def moe_forward(model: MoEModel, layer: int, h) -> np.ndarray:
    """y(h) = sum over selected i of g_i(h) * E_i(h); unselected experts are not evaluated."""
    _check_layer(model, layer)
    h = _check_hidden(model, h)
    return _moe_tokens(model, layer, h[None, :])[0]


def forward(model: MoEModel, seq: TokenSequence,
            observer: Optional[Callable[[RouteTrace], None]] = None) -> np.ndarray:
    ids = check_sequence(model.spec, seq)
    x = model.tok_emb[ids] + model.pos_emb[: ids.size]
    for l, lw in enumerate(model.layers):
        x = x + _attention(lw, _norm(x))
        x = x + _moe_tokens(model, l, _norm(x), observer)
    return softmax(_norm(x) @ model.out_proj, axis=-1)


def teacher_forced_distributions(model: MoEModel, seq: TokenSequence) -> np.ndarray:
    """Row t is p(. | seq[0..t]); shape (len(seq), vocab_size)."""
    return forward(model, seq)


def next_token_distribution(model: MoEModel, seq: TokenSequence) -> np.ndarray:
    return forward(model, seq)[-1]


def pruned_sets(order: "PruningOrder", alloc: Sequence[int]) -> list[np.ndarray]:
    """Experts removed per layer: the first r entries of that layer's pruning order."""
    return [np.asarray(pi[: int(r)]) for pi, r in zip(order.pi, alloc)]


def apply_allocation(model: MoEModel, order: "PruningOrder", alloc: Sequence[int]) -> MoEModel:
    spec = model.spec
    if len(order.pi) != spec.layers:
        raise ValidationError(f"pruning order covers {len(order.pi)} layers, model has {spec.layers}", field="order")
    r = [int(v) for v in alloc]
    if len(r) != spec.layers:
        raise FeasibilityError(f"allocation has {len(r)} entries, model has {spec.layers} layers")
    masks = []
    for l, (rl, cap, pi) in enumerate(zip(r, spec.caps, order.pi)):
        if len(pi) != spec.experts_per_layer[l]:
            raise ValidationError(f"pruning order for layer {l} has {len(pi)} entries", field=f"order[{l}]", layer=l)
        if not 0 <= rl <= cap:
            raise FeasibilityError(f"layer {l}: r={rl} outside [0, {cap}] (n - k)", layer=l)
        mask = model.active_mask[l].copy()
        mask[np.asarray(pi[:rl], dtype=np.int64)] = False
        if mask.sum() < spec.fanout[l]:
            raise FeasibilityError(f"layer {l}: fewer than {spec.fanout[l]} experts would remain", layer=l)
        masks.append(_freeze(mask))
    return replace(model, active_mask=tuple(masks))
