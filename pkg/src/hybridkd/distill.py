"""Two-stage distillation: per-layer hidden-state alignment, then
temperature-scaled KL matching of output distributions.

Stage 1 trains only the mixer parameters of converted layers (layers whose
mixer kind differs from the teacher's) against the teacher's per-block
post-mixer states U; everything else stays frozen. Stage 2 trains all
student parameters against the teacher's logits. Teacher targets are
recomputed on the fly unless caching is enabled; they never carry gradient.

Budgets are token counts; a run consumes floor(budget / tokens_per_batch)
full batches (any trailing partial batch is dropped).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from itertools import islice

import numpy as np

from . import tensor as tt
from .model import Model, HybridLayout, build_hybrid
from .seeding import seed_entropy
from .tasks import DataSource
from .tensor import Tensor


@dataclass(frozen=True)
class StageConfig:
    stage: int
    token_budget: int
    seq_len: int
    batch_size: int
    lr: float = 3e-3
    tau: float = 2.0
    seed: int = 0
    warmup_frac: float = 0.05
    adam_betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.0
    cache_teacher: bool = False
    eval_sequences: int = 32

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if self.token_budget < self.batch_size * self.seq_len:
            raise ValueError("token budget smaller than one batch")

    @property
    def tokens_per_batch(self) -> int:
        return self.batch_size * self.seq_len

    @property
    def steps(self) -> int:
        return self.token_budget // self.tokens_per_batch


def trainable_keys(student: Model, teacher: Model, stage: int) -> set[str]:
    """Freeze policy: stage 1 trains converted layers' mixer params only;
    stage 2 trains everything."""
    if stage == 2:
        return set(student.params)
    keys = set()
    for i in range(student.spec.layers):
        if student.spec.mixers[i] != teacher.spec.mixers[i]:
            keys.update(k for k in student.layer_keys(i) if ".mix." in k)
    return keys


# -- losses -------------------------------------------------------------------------


def stage1_loss(teacher_states: list[np.ndarray], student_states: list[Tensor]) -> Tensor:
    """Sum over layers of the squared Frobenius gap, per sequence position:
    sum_l ||U_teacher - U_student||^2 / (B*T). Teacher states are constants."""
    if len(teacher_states) != len(student_states):
        raise ValueError(
            f"layer count mismatch: {len(teacher_states)} vs {len(student_states)}"
        )
    total = None
    for ts, us in zip(teacher_states, student_states):
        bt = ts.shape[0] * ts.shape[1]
        term = tt.l2_sq(us - Tensor(ts)) * (1.0 / bt)
        total = term if total is None else total + term
    return total


def stage2_loss(teacher_logits: np.ndarray, student_logits: Tensor, tau: float) -> Tensor:
    """Temperature KL: (tau^2 / (B*T)) * sum_t KL(p_teacher,t || p_student,t)
    with p = softmax(logits / tau). Teacher logits enter as plain arrays, so
    no gradient can reach them."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    tl = np.asarray(teacher_logits, dtype=np.float64)
    if tl.shape != student_logits.shape:
        raise ValueError(f"logit shapes differ: {tl.shape} vs {student_logits.shape}")
    z = tl / tau
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    plogp = float((p * np.log(np.where(p > 0, p, 1.0))).sum())
    ls = tt.log_softmax(student_logits * (1.0 / tau))
    cross = tt.sum_(Tensor(p) * ls)
    bt = tl.shape[0] * tl.shape[1]
    return (plogp - cross) * (tau * tau / bt)


def stage2_kl_value(teacher_logits: np.ndarray, student_logits: np.ndarray, tau: float) -> float:
    """Tape-free value of the stage-2 loss."""

    def logp(x):
        z = np.asarray(x, dtype=np.float64) / tau
        z = z - z.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    lt, ls = logp(teacher_logits), logp(student_logits)
    p = np.exp(lt)
    bt = p.shape[0] * p.shape[1]
    return float((p * (lt - ls)).sum() * tau * tau / bt)


# -- optimizer -----------------------------------------------------------------------


class Adam:
    def __init__(self, keys, lr: float, betas=(0.9, 0.95), eps: float = 1e-8, weight_decay: float = 0.0):
        self.keys = sorted(keys)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params: dict[str, Tensor], lr_scale: float = 1.0) -> None:
        self.t += 1
        lr = self.lr * lr_scale
        for key in self.keys:
            p = params[key]
            g = p.grad
            if g is None:
                continue
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = self.m.get(key)
            v = self.v.get(key)
            m = (1 - self.b1) * g if m is None else self.b1 * m + (1 - self.b1) * g
            v = (1 - self.b2) * g * g if v is None else self.b2 * v + (1 - self.b2) * g * g
            self.m[key], self.v[key] = m, v
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)


def lr_scale(step: int, total_steps: int, warmup_frac: float) -> float:
    """Linear warmup over warmup_frac of the run, then cosine decay to zero."""
    warm = max(1, int(round(total_steps * warmup_frac)))
    if step < warm:
        return (step + 1) / warm
    if total_steps <= warm:
        return 1.0
    progress = (step - warm) / (total_steps - warm)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


# -- training loop ----------------------------------------------------------------------


@dataclass
class TrainResult:
    curve: list  # (step, tokens_seen, loss)
    tokens_consumed: int
    probes: list = field(default_factory=list)  # (step, probe value)

    @property
    def final_loss(self) -> float:
        return self.curve[-1][2] if self.curve else float("nan")

    def curve_csv(self) -> str:
        rows = ["step,tokens,loss"]
        rows += [f"{s},{n},{v:.10g}" for s, n, v in self.curve]
        return "\n".join(rows) + "\n"


def train_stage(
    student: Model,
    teacher: Model,
    source: DataSource,
    config: StageConfig,
    *,
    probe_every: int = 0,
    probe_fn=None,
) -> TrainResult:
    """Run one distillation stage in place on `student`.

    Consumes exactly `config.steps` full batches from the train partition.
    `probe_fn(student)` is invoked every `probe_every` steps when given
    (used for selection snapshots)."""
    steps = config.steps
    keys = trainable_keys(student, teacher, config.stage)
    opt = Adam(keys, config.lr, config.adam_betas, weight_decay=config.weight_decay)
    stream = source.stream(config.batch_size, seed=config.seed, partition="train")
    cache: dict[int, object] = {}
    curve = []
    probes = []
    for step in range(steps):
        batch = next(stream)
        if batch.tokens.shape[1] != config.seq_len:
            raise ValueError(
                f"stream seq_len {batch.tokens.shape[1]} != config {config.seq_len}"
            )
        if config.stage == 1:
            if config.cache_teacher and step in cache:
                t_states = cache[step]
            else:
                _, t_states = teacher.hidden_states(batch.tokens)
                if config.cache_teacher:
                    cache[step] = t_states
            with tt.GradientTape():
                _, s_states = student.forward(batch.tokens, capture=True)
                loss = stage1_loss(t_states, s_states)
                tt.backward(loss)
        else:
            if config.cache_teacher and step in cache:
                t_logits = cache[step]
            else:
                t_logits = teacher.logits(batch.tokens)
                if config.cache_teacher:
                    cache[step] = t_logits
            with tt.GradientTape():
                s_logits = student.forward(batch.tokens)
                loss = stage2_loss(t_logits, s_logits, config.tau)
                tt.backward(loss)
        opt.step(student.params, lr_scale(step, steps, config.warmup_frac))
        for k in keys:
            student.params[k].grad = None
        curve.append((step, (step + 1) * config.tokens_per_batch, loss.item()))
        if probe_every and probe_fn is not None and (step + 1) % probe_every == 0:
            probes.append((step + 1, probe_fn(student)))
    student.step += steps
    return TrainResult(curve, steps * config.tokens_per_batch, probes)


# -- evaluation ---------------------------------------------------------------------------


def evaluate_kl(
    student: Model,
    teacher: Model,
    source: DataSource,
    *,
    batch_size: int,
    n_sequences: int = 32,
    tau: float = 2.0,
    seed=0,
) -> float:
    """Mean temperature-KL to the teacher on the held-out partition."""
    if n_sequences < 1:
        raise ValueError("need at least one held-out sequence")
    n_batches = max(1, n_sequences // batch_size)
    vals = []
    for batch in islice(source.stream(batch_size, seed=seed, partition="heldout"), n_batches):
        vals.append(stage2_kl_value(teacher.logits(batch.tokens), student.logits(batch.tokens), tau))
    return float(np.mean(vals))


def evaluate_hidden(
    student: Model,
    teacher: Model,
    source: DataSource,
    *,
    batch_size: int,
    n_sequences: int = 32,
    seed=0,
) -> float:
    """Mean stage-1 alignment loss on the held-out partition."""
    if n_sequences < 1:
        raise ValueError("need at least one held-out sequence")
    n_batches = max(1, n_sequences // batch_size)
    vals = []
    for batch in islice(source.stream(batch_size, seed=seed, partition="heldout"), n_batches):
        _, ts = teacher.hidden_states(batch.tokens)
        _, ss = student.hidden_states(batch.tokens)
        bt = ts[0].shape[0] * ts[0].shape[1]
        vals.append(sum(((a - b) ** 2).sum() / bt for a, b in zip(ts, ss)))
    return float(np.mean(vals))


# -- pipeline pieces -----------------------------------------------------------------------


def distill_all_linear(
    teacher: Model,
    target_kind,
    source: DataSource,
    cfg1: StageConfig,
    cfg2: StageConfig,
    *,
    init_seed=0,
):
    """Teacher -> all-linear student via stage 1 then stage 2.

    Returns (aligned stage-1 checkpoint model, distilled stage-2 model,
    stage-1 result, stage-2 result)."""
    from .model import init_student_from_teacher, uniform_mixers

    student = init_student_from_teacher(
        teacher, uniform_mixers(teacher.spec.layers, target_kind), seed=init_seed
    )
    r1 = train_stage(student, teacher, source, cfg1)
    aligned = student.clone()
    r2 = train_stage(student, teacher, source, cfg2)
    return aligned, student, r1, r2


def final_hybrid_distill(
    layout: HybridLayout,
    aligned: Model,
    teacher: Model,
    source: DataSource,
    cfg2: StageConfig,
) -> tuple[Model, TrainResult]:
    """Assemble the hybrid (teacher blocks on layout.softmax_layers, stage-1
    aligned linear blocks elsewhere) and run stage 2 only."""
    if cfg2.stage != 2:
        raise ValueError("final hybrid distillation runs stage 2")
    hybrid = build_hybrid(aligned, layout, teacher)
    result = train_stage(hybrid, teacher, source, cfg2)
    return hybrid, result


def derived_seed(*parts) -> int:
    """Stable sub-seed for per-job streams."""
    return seed_entropy(*parts) % (2**63)


@dataclass
class TeacherTrainResult:
    curve: list  # (step, loss)
    accuracy_trace: list  # (step, {task kind: accuracy})
    converged: bool
    steps_run: int


def train_lm(
    model: Model,
    source: DataSource,
    *,
    steps: int,
    batch_size: int,
    lr: float,
    seed=0,
    warmup_frac: float = 0.05,
    target_accuracy: float | None = None,
    eval_every: int = 25,
    eval_fn=None,
) -> TeacherTrainResult:
    """Masked next/query-token cross-entropy training on a task mixture.

    Stops early once `eval_fn(model)` (a dict of accuracies) clears
    `target_accuracy` on every entry. Converged means the target was reached
    (always True when no target is set)."""
    opt = Adam(set(model.params), lr)
    stream = source.stream(batch_size, seed=seed, partition="train")
    curve = []
    acc_trace = []
    converged = target_accuracy is None
    step = 0
    for step in range(steps):
        batch = next(stream)
        with tt.GradientTape():
            logits = model.forward(batch.tokens)
            loss = tt.cross_entropy(logits, batch.targets)
            tt.backward(loss)
        opt.step(model.params, lr_scale(step, steps, warmup_frac))
        for p in model.params.values():
            p.grad = None
        curve.append((step, loss.item()))
        if eval_fn is not None and (step + 1) % eval_every == 0:
            accs = eval_fn(model)
            acc_trace.append((step + 1, accs))
            if target_accuracy is not None and all(
                v >= target_accuracy for v in accs.values()
            ):
                converged = True
                break
    model.step += step + 1
    return TeacherTrainResult(curve, acc_trace, converged, step + 1)
