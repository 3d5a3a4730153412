"""Pre-norm transformer assembly over the mixer zoo.

Block ell computes
    U   = X + Mix(RMSNorm(X))          (skipped entirely for bypass mixers)
    X'  = U + FFN(RMSNorm(U))
with a gated SiLU FFN and a final RMSNorm before the (tied) unembedding.
U is the per-layer state used as the hidden-alignment target.

Layer indices are zero-based everywhere. Parameters live in a flat dict keyed
"layer{i}.{role}" plus the globals "embed.table", "final_norm.g" and
(untied only) "unembed.w"; all buffers are float64 and owned by the model.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import mixers as mx
from . import tensor as tt
from .mixers import MixerKind
from .seeding import rng
from .tensor import Tensor

INIT_STD = 0.02
# sigmoid(2.944...) ~ 0.95: freshly converted linear layers start near a
# cumulative-sum attention (slow decay), which keeps early alignment stable.
SLOW_DECAY_BIAS = float(np.log(0.95 / 0.05))


@dataclass(frozen=True)
class ModelSpec:
    layers: int
    width: int
    heads: int
    vocab: int
    seq_max: int
    mixers: tuple[MixerKind, ...]
    ffn_mult: int = 4
    norm_eps: float = 1e-6
    tied_unembed: bool = True
    rope_base: float = 10000.0
    beta_on_additive: bool = True

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if self.width % self.heads != 0:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if len(self.mixers) != self.layers:
            raise ValueError(
                f"{len(self.mixers)} mixer kinds for {self.layers} layers"
            )
        if self.head_dim % 2 != 0:
            raise ValueError("head width must be even for rotary embedding")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    def with_mixers(self, kinds) -> "ModelSpec":
        return replace(self, mixers=tuple(kinds))

    def to_dict(self) -> dict:
        return {
            "layers": self.layers,
            "width": self.width,
            "heads": self.heads,
            "vocab": self.vocab,
            "seq_max": self.seq_max,
            "mixers": [m.label() for m in self.mixers],
            "ffn_mult": self.ffn_mult,
            "norm_eps": self.norm_eps,
            "tied_unembed": self.tied_unembed,
            "rope_base": self.rope_base,
            "beta_on_additive": self.beta_on_additive,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["mixers"] = tuple(MixerKind.parse(m) for m in d["mixers"])
        return cls(**d)


def uniform_mixers(layers: int, kind: str, window: int | None = None) -> tuple:
    mk = MixerKind(kind, window)
    return tuple(mk for _ in range(layers))


@dataclass(frozen=True)
class HybridLayout:
    """Partition of layer indices into softmax-attention and linear layers."""

    softmax_layers: frozenset
    linear_layers: frozenset

    def __post_init__(self):
        if self.softmax_layers & self.linear_layers:
            raise ValueError("layout sets overlap")

    @classmethod
    def from_selection(cls, selected, layers: int) -> "HybridLayout":
        sel = frozenset(int(i) for i in selected)
        if not sel <= set(range(layers)):
            raise ValueError(f"selection {sorted(sel)} outside [0, {layers})")
        return cls(sel, frozenset(range(layers)) - sel)

    def check_partition(self, layers: int) -> None:
        if self.softmax_layers | self.linear_layers != set(range(layers)):
            raise ValueError("layout does not cover every layer")


def _layer_param_shapes(spec: ModelSpec, layer: int) -> dict[str, tuple]:
    d, m = spec.width, spec.ffn_mult * spec.width
    shapes = {"attn_norm.g": (d,), "ffn_norm.g": (d,)}
    shapes.update(
        {f"mix.{r}": s for r, s in mx.mixer_param_shapes(spec.mixers[layer], d, spec.heads).items()}
    )
    shapes.update({"ffn.w_gate": (d, m), "ffn.w_in": (d, m), "ffn.w_out": (m, d)})
    return shapes


def _init_role(role: str, shape: tuple, gen: np.random.Generator) -> np.ndarray:
    if role.endswith("norm.g"):
        return np.ones(shape)
    if role in ("mix.gate_b", "mix.alpha_b"):
        return np.full(shape, SLOW_DECAY_BIAS)
    if role == "mix.beta_b":
        return np.zeros(shape)
    return gen.normal(scale=INIT_STD, size=shape)


class Model:
    """A concrete parameterization of a ModelSpec."""

    def __init__(self, spec: ModelSpec, params: dict[str, Tensor], seed: int, step: int = 0):
        self.spec = spec
        self.params = params
        self.seed = seed
        self.step = step
        self._rope_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    # -- construction --------------------------------------------------------

    @classmethod
    def init(cls, spec: ModelSpec, seed: int) -> "Model":
        params: dict[str, Tensor] = {}
        gen = rng("model-init", seed)
        params["embed.table"] = tt.param(gen.normal(scale=INIT_STD, size=(spec.vocab, spec.width)))
        for i in range(spec.layers):
            for role, shape in _layer_param_shapes(spec, i).items():
                params[f"layer{i}.{role}"] = tt.param(_init_role(role, shape, gen))
        params["final_norm.g"] = tt.param(np.ones(spec.width))
        if not spec.tied_unembed:
            params["unembed.w"] = tt.param(gen.normal(scale=INIT_STD, size=(spec.width, spec.vocab)))
        return cls(spec, params, seed)

    def clone(self) -> "Model":
        params = {k: tt.param(v.data.copy()) for k, v in self.params.items()}
        return Model(self.spec, params, self.seed, self.step)

    def layer_keys(self, layer: int) -> list[str]:
        prefix = f"layer{layer}."
        return [k for k in self.params if k.startswith(prefix)]

    # -- forward --------------------------------------------------------------

    def _rope(self, t: int):
        if t not in self._rope_cache:
            self._rope_cache[t] = mx.rope_tables(t, self.spec.head_dim, self.spec.rope_base)
        return self._rope_cache[t]

    def _norm(self, x: Tensor, key: str) -> Tensor:
        ms = tt.mean_(x * x, axis=-1, keepdims=True)
        return x / tt.sqrt(ms + self.spec.norm_eps) * self.params[key]

    def _ffn(self, x: Tensor, layer: int) -> Tensor:
        p = self.params
        gate = tt.silu(tt.matmul(x, p[f"layer{layer}.ffn.w_gate"]))
        up = tt.matmul(x, p[f"layer{layer}.ffn.w_in"])
        return tt.matmul(gate * up, p[f"layer{layer}.ffn.w_out"])

    def _mix(self, xn: Tensor, layer: int) -> Tensor:
        kind = self.spec.mixers[layer]
        prefix = f"layer{layer}.mix."
        p = {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}
        h = self.spec.heads
        t = xn.shape[-2]
        if kind.kind == "softmax":
            return mx.softmax_attention(xn, p, heads=h, rope=self._rope(t))
        if kind.kind == "swa":
            return mx.sliding_window_attention(xn, p, kind.window, heads=h, rope=self._rope(t))
        if kind.kind == "gla":
            return mx.gla_forward(xn, p, heads=h)[0]
        if kind.kind == "gdn":
            return mx.gdn_forward(
                xn, p, heads=h, beta_on_additive=self.spec.beta_on_additive
            )[0]
        raise ValueError(f"no mix path for {kind.kind}")

    def block_forward(self, x: Tensor, layer: int) -> tuple[Tensor, Tensor]:
        """One pre-norm block; returns (U, next X)."""
        if not 0 <= layer < self.spec.layers:
            raise ValueError(f"layer {layer} outside [0, {self.spec.layers})")
        if self.spec.mixers[layer].kind == "bypass":
            u = mx.bypass(x)
        else:
            u = x + self._mix(self._norm(x, f"layer{layer}.attn_norm.g"), layer)
        x_next = u + self._ffn(self._norm(u, f"layer{layer}.ffn_norm.g"), layer)
        return u, x_next

    def forward(self, tokens: np.ndarray, capture: bool = False):
        """Token ids (B,T) -> logits (B,T,V); capture also returns [U^(l)]."""
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None]
        x = tt.embedding(self.params["embed.table"], tokens)
        states = []
        for i in range(self.spec.layers):
            u, x = self.block_forward(x, i)
            if capture:
                states.append(u)
        xf = self._norm(x, "final_norm.g")
        if self.spec.tied_unembed:
            logits = tt.matmul(xf, tt.transpose(self.params["embed.table"]))
        else:
            logits = tt.matmul(xf, self.params["unembed.w"])
        return (logits, states) if capture else logits

    def logits(self, tokens: np.ndarray) -> np.ndarray:
        """Tape-free forward, plain array out."""
        return self.forward(tokens).data

    def hidden_states(self, tokens: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        logits, states = self.forward(tokens, capture=True)
        return logits.data, [s.data for s in states]


# -- weight transfer -------------------------------------------------------------


def _compat_fields(a: ModelSpec, b: ModelSpec) -> list[str]:
    fields_ = ("layers", "width", "heads", "vocab", "ffn_mult", "tied_unembed")
    return [f for f in fields_ if getattr(a, f) != getattr(b, f)]


def init_student_from_teacher(teacher: Model, target_mixers, seed: int = 0) -> Model:
    """Build a student with `target_mixers`, transferring teacher weights.

    Projection weights (wq/wk/wv/wo), norms, FFNs, embeddings and unembedding
    are copied; layers whose mixer kind is unchanged are copied wholesale;
    gate projections of converted layers are freshly initialized.
    """
    target_mixers = tuple(target_mixers)
    spec = teacher.spec.with_mixers(target_mixers)
    bad = _compat_fields(teacher.spec, spec)
    if bad:
        raise ValueError(f"teacher/student specs differ in {bad}")
    params: dict[str, Tensor] = {}
    for key in ("embed.table", "final_norm.g", "unembed.w"):
        if key in teacher.params:
            params[key] = tt.param(teacher.params[key].data.copy())
    for i in range(spec.layers):
        gen = rng("gate-init", seed, i)
        tkind = teacher.spec.mixers[i]
        skind = spec.mixers[i]
        for role, shape in _layer_param_shapes(spec, i).items():
            key = f"layer{i}.{role}"
            tkey = f"layer{i}.{role}"
            if skind == tkind or not role.startswith("mix."):
                params[key] = tt.param(teacher.params[tkey].data.copy())
            elif tkey in teacher.params and role in ("mix.wq", "mix.wk", "mix.wv", "mix.wo"):
                params[key] = tt.param(teacher.params[tkey].data.copy())
            else:
                params[key] = tt.param(_init_role(role, shape, gen))
    return Model(spec, params, teacher.seed)


def restore_layer(student: Model, layer: int, teacher: Model) -> Model:
    """Non-destructively swap block `layer` back to the teacher's.

    The returned model has the teacher's mixer kind and an exact copy of every
    layer-`layer` parameter (mixer, norms, FFN); all other layers are copies
    of the student's. The input model is untouched.
    """
    if not 0 <= layer < student.spec.layers:
        raise ValueError(f"layer {layer} outside [0, {student.spec.layers})")
    bad = _compat_fields(student.spec, teacher.spec)
    if bad:
        raise ValueError(f"student/teacher specs differ in {bad}")
    kinds = list(student.spec.mixers)
    kinds[layer] = teacher.spec.mixers[layer]
    spec = student.spec.with_mixers(kinds)
    params: dict[str, Tensor] = {}
    for key, val in student.params.items():
        if not key.startswith(f"layer{layer}."):
            params[key] = tt.param(val.data.copy())
    for key in teacher.layer_keys(layer):
        params[key] = tt.param(teacher.params[key].data.copy())
    return Model(spec, params, student.seed, student.step)


def build_hybrid(aligned: Model, layout: HybridLayout, teacher: Model) -> Model:
    """Hybrid student: teacher blocks at layout.softmax_layers, aligned linear
    blocks everywhere else."""
    layout.check_partition(aligned.spec.layers)
    model = aligned.clone()
    for i in sorted(layout.softmax_layers):
        model = restore_layer(model, i, teacher)
    return model
