"""Sequence-mixing layers behind one interface.

All mixers consume token states X of shape (B, T, d) (a bare (T, d) input is
treated as batch 1) and return the mixed states before the block residual.

Conventions:
  - softmax / sliding-window: logits scaled by 1/sqrt(d_h), rotary position
    embeddings applied to Q and K, causal (banded for sliding-window) mask.
  - linear mixers (GLA, gated DeltaNet): unscaled q, no rotary; per-head
    recurrent state S of shape (d_h, d_h) updated left-to-right.
        GLA:  S_t = diag(a_t) S_{t-1} + k_t v_t^T,          a_t in (0,1)^{d_h}
        GDN:  S_t = a_t (I - b_t k_t k_t^T) S_{t-1} + b_t k_t v_t^T
    with scalar-per-head a_t, b_t in (0,1) and L2-normalized keys (keeps the
    delta-rule transition a contraction). The b_t factor on the additive term
    can be dropped via `beta_on_additive=False` to get the simplified update.

The recurrent scans are single tape ops with hand-written backward passes
(validated against central finite differences); everything else composes the
generic tensor ops.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import scan_kernels as kernels
from . import tensor as tt
from .tensor import Tensor, ShapeError

MIXER_KINDS = ("softmax", "swa", "gla", "gdn", "bypass")


@dataclass(frozen=True)
class MixerKind:
    """Tag for one layer's sequence mixer; `window` only for swa."""

    kind: str
    window: int | None = None

    def __post_init__(self):
        if self.kind not in MIXER_KINDS:
            raise ValueError(f"unknown mixer kind {self.kind!r}")
        if self.kind == "swa":
            if self.window is None or self.window < 1:
                raise ValueError("swa mixer needs window >= 1")
        elif self.window is not None:
            raise ValueError(f"{self.kind} mixer takes no window")

    @property
    def is_linear(self) -> bool:
        return self.kind in ("gla", "gdn")

    def label(self) -> str:
        return f"swa:{self.window}" if self.kind == "swa" else self.kind

    @classmethod
    def parse(cls, text: str) -> "MixerKind":
        text = text.strip()
        if text.startswith("swa:"):
            return cls("swa", int(text.split(":", 1)[1]))
        return cls(text)


def mixer_param_shapes(kind: MixerKind, d: int, heads: int) -> dict[str, tuple]:
    """Parameter roles and shapes for one mixer (d == heads * d_h)."""
    if kind.kind == "bypass":
        return {}
    shapes = {"wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d)}
    if kind.kind == "gla":
        shapes["gate_w"] = (d, d)
        shapes["gate_b"] = (d,)
    elif kind.kind == "gdn":
        shapes["alpha_w"] = (d, heads)
        shapes["alpha_b"] = (heads,)
        shapes["beta_w"] = (d, heads)
        shapes["beta_b"] = (heads,)
    return shapes


# -- shared plumbing -----------------------------------------------------------


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return tt.reshape(x, (1,) + x.shape), True
    if x.ndim == 3:
        return x, False
    raise ShapeError(f"mixer input must be (T,d) or (B,T,d), got {x.shape}")


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return tt.transpose(tt.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return tt.reshape(tt.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def _qkv(x: Tensor, params: dict, heads: int) -> tuple[Tensor, Tensor, Tensor]:
    q = _split_heads(tt.matmul(x, params["wq"]), heads)
    k = _split_heads(tt.matmul(x, params["wk"]), heads)
    v = _split_heads(tt.matmul(x, params["wv"]), heads)
    return q, k, v


def causal_mask(t: int) -> np.ndarray:
    return np.tril(np.ones((t, t), dtype=bool))


def window_mask(t: int, window: int) -> np.ndarray:
    i = np.arange(t)[:, None]
    j = np.arange(t)[None, :]
    return (j <= i) & (j > i - window)


def rope_tables(t: int, d_h: int, base: float = 10000.0) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape (t, d_h // 2) for half-split rotary embedding."""
    half = d_h // 2
    inv = base ** (-np.arange(half) / half)
    ang = np.arange(t)[:, None] * inv[None, :]
    return np.cos(ang), np.sin(ang)


def apply_rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate (B,h,T,d_h) features pairwise: (x1, x2) -> (x1 c - x2 s, x1 s + x2 c)."""
    half = x.shape[-1] // 2
    x1 = x[..., :half]
    x2 = x[..., half:]
    c, s = Tensor(cos), Tensor(sin)
    return tt.concat([x1 * c - x2 * s, x1 * s + x2 * c], axis=-1)


# -- softmax attention -----------------------------------------------------------


def softmax_attention(
    x: Tensor,
    params: dict,
    *,
    heads: int,
    rope: tuple[np.ndarray, np.ndarray] | None = None,
    keep: np.ndarray | None = None,
) -> Tensor:
    """Causal multi-head softmax attention, Q K^T / sqrt(d_h) logits."""
    x, squeeze = _batched(x)
    t = x.shape[1]
    if t < 1:
        raise ShapeError("softmax_attention: empty sequence")
    q, k, v = _qkv(x, params, heads)
    if rope is not None:
        q = apply_rope(q, *rope)
        k = apply_rope(k, *rope)
    if keep is None:
        keep = causal_mask(t)
    d_h = q.shape[-1]
    scores = tt.matmul(q, tt.transpose(k)) * (1.0 / np.sqrt(d_h))
    weights = tt.masked_row_softmax(scores, keep)
    out = tt.matmul(_merge_heads(tt.matmul(weights, v)), params["wo"])
    return out[0] if squeeze else out


def sliding_window_attention(
    x: Tensor,
    params: dict,
    window: int,
    *,
    heads: int,
    rope: tuple[np.ndarray, np.ndarray] | None = None,
) -> Tensor:
    """Softmax attention restricted to the last `window` positions."""
    if window < 1:
        raise ShapeError(f"sliding window must be >= 1, got {window}")
    x3, _ = _batched(x)
    return softmax_attention(
        x, params, heads=heads, rope=rope, keep=window_mask(x3.shape[1], window)
    )


def bypass(x: Tensor) -> Tensor:
    """Identity across the mixing sublayer."""
    return x


# -- recurrent scan cores ----------------------------------------------------------


def _flat(x: np.ndarray) -> np.ndarray:
    nb, nh = x.shape[:2]
    return np.ascontiguousarray(x).reshape((nb * nh,) + x.shape[2:])


def gla_scan(q: Tensor, k: Tensor, v: Tensor, a: Tensor) -> tuple[Tensor, np.ndarray]:
    """Gated linear attention recurrence over (B,h,T,d) inputs.

    S_t = diag(a_t) S_{t-1} + k_t v_t^T ; o_t = q_t^T S_t. Returns the output
    sequence and the final state (B,h,d_k,d_v). Backward replays the
    recurrence in reverse with a running dL/dS accumulator.
    """
    nb, nh, t, dk = q.shape
    dv = v.shape[-1]
    qf, kf, vf, af = _flat(q.data), _flat(k.data), _flat(v.data), _flat(a.data)
    states = np.empty((nb * nh, t, dk, dv))
    out = np.empty((nb * nh, t, dv))
    kernels.gla_fwd(qf, kf, vf, af, states, out)

    def bwd(go):
        dq = np.empty_like(qf)
        dk_ = np.empty_like(kf)
        dv_ = np.empty_like(vf)
        da = np.empty_like(af)
        kernels.gla_bwd(qf, kf, vf, af, states, _flat(go), dq, dk_, dv_, da)
        shape4 = (nb, nh, t, dk)
        return (
            dq.reshape(shape4),
            dk_.reshape(shape4),
            dv_.reshape((nb, nh, t, dv)),
            da.reshape(shape4),
        )

    final = states[:, -1].reshape(nb, nh, dk, dv).copy()
    return tt.record_op(out.reshape(nb, nh, t, dv), (q, k, v, a), bwd), final


def gdn_scan(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    a: Tensor,
    b: Tensor,
    *,
    beta_on_additive: bool = True,
) -> tuple[Tensor, np.ndarray]:
    """Gated delta-rule recurrence; a, b are (B,h,T) scalar gates.

    S_t = a_t (I - b_t k_t k_t^T) S_{t-1} + c_t k_t v_t^T with c_t = b_t (or 1
    when `beta_on_additive` is off). Keys are used as given; callers normalize.
    """
    nb, nh, t, dk = q.shape
    dv = v.shape[-1]
    qf, kf, vf = _flat(q.data), _flat(k.data), _flat(v.data)
    af, bf = _flat(a.data), _flat(b.data)
    states = np.empty((nb * nh, t, dk, dv))
    out = np.empty((nb * nh, t, dv))
    kernels.gdn_fwd(qf, kf, vf, af, bf, beta_on_additive, states, out)

    def bwd(go):
        dq = np.empty_like(qf)
        dk_ = np.empty_like(kf)
        dv_ = np.empty_like(vf)
        da = np.empty_like(af)
        db = np.empty_like(bf)
        kernels.gdn_bwd(
            qf, kf, vf, af, bf, beta_on_additive, states, _flat(go), dq, dk_, dv_, da, db
        )
        return (
            dq.reshape((nb, nh, t, dk)),
            dk_.reshape((nb, nh, t, dk)),
            dv_.reshape((nb, nh, t, dv)),
            da.reshape((nb, nh, t)),
            db.reshape((nb, nh, t)),
        )

    final = states[:, -1].reshape(nb, nh, dk, dv).copy()
    return tt.record_op(out.reshape(nb, nh, t, dv), (q, k, v, a, b), bwd), final


# -- linear mixer assembly -----------------------------------------------------------


def _normalize_keys(k: Tensor) -> Tensor:
    norm = tt.sqrt(tt.sum_(k * k, axis=-1, keepdims=True) + 1e-12)
    return k / norm


def gla_forward(
    x: Tensor, params: dict, *, heads: int
) -> tuple[Tensor, np.ndarray]:
    """Gated linear attention layer; gate a_t = sigmoid(x_t gate_w + gate_b)."""
    x3, squeeze = _batched(x)
    q, k, v = _qkv(x3, params, heads)
    a = _split_heads(tt.sigmoid(tt.matmul(x3, params["gate_w"]) + params["gate_b"]), heads)
    o, state = gla_scan(q, k, v, a)
    out = tt.matmul(_merge_heads(o), params["wo"])
    return (out[0] if squeeze else out), state


def gdn_forward(
    x: Tensor,
    params: dict,
    *,
    heads: int,
    beta_on_additive: bool = True,
) -> tuple[Tensor, np.ndarray]:
    """Gated DeltaNet layer; scalar-per-head gates, L2-normalized keys."""
    x3, squeeze = _batched(x)
    q, k, v = _qkv(x3, params, heads)
    k = _normalize_keys(k)
    a = tt.transpose(tt.sigmoid(tt.matmul(x3, params["alpha_w"]) + params["alpha_b"]), (0, 2, 1))
    b = tt.transpose(tt.sigmoid(tt.matmul(x3, params["beta_w"]) + params["beta_b"]), (0, 2, 1))
    o, state = gdn_scan(q, k, v, a, b, beta_on_additive=beta_on_additive)
    out = tt.matmul(_merge_heads(o), params["wo"])
    return (out[0] if squeeze else out), state


# -- chunkwise evaluation (inference path, plain numpy) --------------------------------


def _gla_chunk(qc, kc, vc, ac, s):
    """One GLA chunk given state s; returns (outputs, new state)."""
    logs = np.cumsum(np.log(ac), axis=2)  # (B,h,c,dk)
    lam = np.exp(logs)
    o_inter = np.matmul(qc * lam, s)
    c = qc.shape[2]
    tril = np.tril(np.ones((c, c), dtype=bool))[None, None, :, :, None]
    diff = logs[:, :, :, None, :] - logs[:, :, None, :, :]
    decay = np.exp(np.where(tril, diff, -np.inf))
    p = np.einsum("bhtd,bhid,bhtid->bhti", qc, kc, decay)
    o_intra = np.matmul(p, vc)
    rem = np.exp(logs[:, :, -1:, :] - logs)  # decay from i to chunk end
    s_new = np.exp(logs[:, :, -1, :])[..., None] * s + np.matmul(
        np.swapaxes(kc * rem, -1, -2), vc
    )
    return o_inter + o_intra, s_new


def _gdn_chunk(qc, kc, vc, ac, bc, s, beta_on_additive):
    """One gated-delta chunk via the WY form.

    Pseudo-values w solve (I + diag(b) A) W = rhs with A_ti = r_ti k_t.k_i
    strictly lower, r_ti the cumulative decay ratio; then
    o_t = g_t q_t^T S0 + sum_{i<=t} r_ti (q_t.k_i) w_i.
    """
    nb, nh, c, dk = qc.shape
    logs = np.cumsum(np.log(ac), axis=2)  # (B,h,c)
    gam = np.exp(logs)
    diff = logs[:, :, :, None] - logs[:, :, None, :]
    lower = np.tril(np.ones((c, c), dtype=bool), -1)[None, None]
    lower_eq = np.tril(np.ones((c, c), dtype=bool))[None, None]
    ratio_lo = np.exp(np.where(lower, diff, -np.inf))
    ratio_le = np.exp(np.where(lower_eq, diff, -np.inf))
    kk = np.matmul(kc, np.swapaxes(kc, -1, -2))
    m = np.eye(c)[None, None] + bc[..., None] * ratio_lo * kk
    ks0 = np.matmul(kc, s)  # row t = k_t^T S0
    if beta_on_additive:
        rhs = bc[..., None] * (vc - gam[..., None] * ks0)
    else:
        rhs = vc - bc[..., None] * gam[..., None] * ks0
    w = np.linalg.solve(m, rhs)
    p = ratio_le * np.matmul(qc, np.swapaxes(kc, -1, -2))
    o = gam[..., None] * np.matmul(qc, s) + np.matmul(p, w)
    rem = np.exp(logs[:, :, -1:] - logs)
    s_new = np.exp(logs[:, :, -1])[..., None, None] * s + np.matmul(
        np.swapaxes(kc * rem[..., None], -1, -2), w
    )
    return o, s_new


def chunkwise_linear_forward(
    x: Tensor | np.ndarray,
    params: dict,
    chunk: int,
    kind: str,
    *,
    heads: int,
    beta_on_additive: bool = True,
) -> np.ndarray:
    """Blocked evaluation of a linear mixer, numerically equivalent to the scan.

    Processes the sequence in blocks of `chunk`, carrying the inter-chunk
    state and computing intra-chunk terms with batched matrix products.
    Pure-numpy forward (no tape). Intra-chunk decay tensors are O(chunk^2 d_h)
    per head, so keep chunks modest for long sequences.
    """
    if chunk < 1:
        raise ShapeError(f"chunk must be >= 1, got {chunk}")
    if kind not in ("gla", "gdn"):
        raise ShapeError(f"chunkwise kinds are gla/gdn, got {kind!r}")
    xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    squeeze = xd.ndim == 2
    if squeeze:
        xd = xd[None]
    nb, t, d = xd.shape
    dh = d // heads

    def proj(name):
        h = xd @ params[name].data
        return h.reshape(nb, t, heads, dh).transpose(0, 2, 1, 3)

    q, k, v = proj("wq"), proj("wk"), proj("wv")
    if kind == "gla":
        a = xd @ params["gate_w"].data + params["gate_b"].data
        a = 1.0 / (1.0 + np.exp(-a))
        a = a.reshape(nb, t, heads, dh).transpose(0, 2, 1, 3)
    else:
        k = k / np.sqrt((k * k).sum(-1, keepdims=True) + 1e-12)
        a = 1.0 / (1.0 + np.exp(-(xd @ params["alpha_w"].data + params["alpha_b"].data)))
        b = 1.0 / (1.0 + np.exp(-(xd @ params["beta_w"].data + params["beta_b"].data)))
        a = a.transpose(0, 2, 1)
        b = b.transpose(0, 2, 1)

    s = np.zeros((nb, heads, dh, dh))
    outs = []
    for start in range(0, t, chunk):
        end = min(start + chunk, t)
        sl = np.s_[:, :, start:end]
        if kind == "gla":
            o, s = _gla_chunk(q[sl], k[sl], v[sl], a[sl], s)
        else:
            o, s = _gdn_chunk(q[sl], k[sl], v[sl], a[sl], b[sl], s, beta_on_additive)
        outs.append(o)
    o = np.concatenate(outs, axis=2)
    y = o.transpose(0, 2, 1, 3).reshape(nb, t, d) @ params["wo"].data
    return y[0] if squeeze else y
