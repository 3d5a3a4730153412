"""Layer importance scoring, selection strategies, and stability analysis.

One-swap scoring restores a single teacher block into the distilled all-linear
student, re-runs both distillation stages briefly, and scores the layer by the
negative held-out KL — higher means restoring that layer buys a larger KL
reduction. Jobs for different layers are independent and deterministic (each
derives its stream seeds from (base seed, layer)), so parallel scoring matches
the sequential result bit for bit.

Also here: the greedy-removal variant, the rank-average and uniform selectors,
bypass-probe scoring (activation MSE / perplexity / recall-drop), Jaccard
utilities, the rolling-window early-stopping rule, adjacency diagnostics, and
distance-regularized greedy selection.
"""

from __future__ import annotations

import csv
import io
import json
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import checkpoint as ckpt
from . import distill
from .distill import StageConfig, derived_seed, evaluate_hidden, evaluate_kl, train_stage
from .mixers import MixerKind
from .model import Model, init_student_from_teacher, restore_layer
from .tasks import DataSource, eval_accuracy, eval_perplexity, heldout_batches

METRICS = ("S2-KL", "S1-MSE", "Act-MSE", "LM-PPL", "AR-drop")


class IncompleteTableError(RuntimeError):
    """A scoring job failed; the table is unusable."""

    def __init__(self, layer: int, cause: BaseException):
        super().__init__(f"scoring failed for layer {layer}: {cause!r}")
        self.layer = layer
        self.cause = cause


@dataclass
class ImportanceTable:
    scores: np.ndarray
    metric: str
    direction: str  # GA | GR | n/a
    probe: str  # mixer label used for linear layers
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")

    @property
    def layers(self) -> int:
        return len(self.scores)

    def ranking(self) -> list[int]:
        """Layer indices, most to least important; ties go to the lower index."""
        order = np.lexsort((np.arange(self.layers), -self.scores))
        return [int(i) for i in order]

    def to_json(self) -> str:
        return json.dumps(
            {
                "scores": self.scores.tolist(),
                "metric": self.metric,
                "direction": self.direction,
                "probe": self.probe,
                "metadata": self.metadata,
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "ImportanceTable":
        d = json.loads(text)
        return cls(np.array(d["scores"]), d["metric"], d["direction"], d["probe"], d.get("metadata", {}))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["layer", "score", "metric", "direction", "probe", "seed"])
        seed = self.metadata.get("seed", "")
        for i, s in enumerate(self.scores):
            w.writerow([i, f"{s:.10g}", self.metric, self.direction, self.probe, seed])
        return buf.getvalue()


def table_from_ranking(ranking, metric="S2-KL", direction="GA", probe="gdn") -> ImportanceTable:
    """Synthesize a score table inducing exactly the given ranking."""
    layers = len(ranking)
    if sorted(ranking) != list(range(layers)):
        raise ValueError("ranking must be a permutation of layer indices")
    scores = np.empty(layers)
    for pos, layer in enumerate(ranking):
        scores[layer] = layers - pos
    return ImportanceTable(scores, metric, direction, probe, {"source": "ranking"})


# -- one-swap scoring -----------------------------------------------------------------


@dataclass(frozen=True)
class ScoringBudgets:
    """Stage budgets for the brief per-layer adaptation runs."""

    stage1: StageConfig
    stage2: StageConfig
    eval_sequences: int = 32
    eval_tau: float = 2.0

    def __post_init__(self):
        if self.stage1.stage != 1 or self.stage2.stage != 2:
            raise ValueError("budgets need a stage-1 and a stage-2 config")


def one_swap_importance(
    layer: int,
    base: Model,
    teacher: Model,
    source: DataSource,
    budgets: ScoringBudgets,
    *,
    seed=0,
    probe_every: int = 0,
    metric: str = "S2-KL",
) -> tuple[float, list]:
    """I(layer) after restoring `layer` into the all-linear base and adapting.

    S2-KL (default): stage 1 + stage 2, importance = -(mean held-out KL).
    S1-MSE: stage 1 only, importance = -(mean held-out hidden-state loss).
    Returns (importance, probe trace); the trace lists (stage-2 step,
    held-out KL) when `probe_every` is set."""
    if metric not in ("S2-KL", "S1-MSE"):
        raise ValueError(f"one-swap metric must be S2-KL or S1-MSE, got {metric!r}")
    model = restore_layer(base, layer, teacher)
    cfg1 = replace(budgets.stage1, seed=derived_seed("score-s1", seed, layer))
    eval_seed = derived_seed("score-eval", seed)
    train_stage(model, teacher, source, cfg1)
    if metric == "S1-MSE":
        hidden = evaluate_hidden(
            model,
            teacher,
            source,
            batch_size=budgets.stage1.batch_size,
            n_sequences=budgets.eval_sequences,
            seed=eval_seed,
        )
        return -hidden, []

    def heldout_kl(m):
        return evaluate_kl(
            m,
            teacher,
            source,
            batch_size=budgets.stage2.batch_size,
            n_sequences=budgets.eval_sequences,
            tau=budgets.eval_tau,
            seed=eval_seed,
        )

    cfg2 = replace(budgets.stage2, seed=derived_seed("score-s2", seed, layer))
    result = train_stage(
        model,
        teacher,
        source,
        cfg2,
        probe_every=probe_every,
        probe_fn=heldout_kl if probe_every else None,
    )
    return -heldout_kl(model), result.probes


def _score_job(payload):
    teacher_bytes, base_bytes, layer, source, budgets, seed, probe_every, metric = payload
    teacher = ckpt.load_bytes(teacher_bytes)
    base = ckpt.load_bytes(base_bytes)
    score, probes = one_swap_importance(
        layer, base, teacher, source, budgets, seed=seed, probe_every=probe_every, metric=metric
    )
    return layer, score, probes


def score_all_layers(
    base: Model,
    teacher: Model,
    source: DataSource,
    budgets: ScoringBudgets,
    *,
    seed=0,
    workers: int = 1,
    probe_every: int = 0,
    metric: str = "S2-KL",
) -> tuple[ImportanceTable, dict[int, list]]:
    """One-swap importance for every layer, up to `workers` jobs in parallel.

    Output is independent of worker count (per-job seeds derive from
    (seed, layer)). Returns the table and, when `probe_every` is set, each
    layer's (step, held-out KL) trace."""
    layers = base.spec.layers
    scores = np.empty(layers)
    traces: dict[int, list] = {}
    if workers <= 1:
        for layer in range(layers):
            try:
                scores[layer], probes = one_swap_importance(
                    layer,
                    base,
                    teacher,
                    source,
                    budgets,
                    seed=seed,
                    probe_every=probe_every,
                    metric=metric,
                )
            except Exception as e:  # noqa: BLE001 - rewrapped with layer id
                raise IncompleteTableError(layer, e) from e
            traces[layer] = probes
    else:
        teacher_bytes = ckpt.save_bytes(teacher)
        base_bytes = ckpt.save_bytes(base)
        payloads = [
            (teacher_bytes, base_bytes, layer, source, budgets, seed, probe_every, metric)
            for layer in range(layers)
        ]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_score_job, p): p[2] for p in payloads}
            for fut, layer in futures.items():
                try:
                    lay, score, probes = fut.result()
                except Exception as e:  # noqa: BLE001
                    raise IncompleteTableError(layer, e) from e
                scores[lay] = score
                traces[lay] = probes
    probe_label = next(
        (m.label() for m in base.spec.mixers if m.is_linear), base.spec.mixers[0].label()
    )
    table = ImportanceTable(
        scores,
        metric,
        "GA",
        probe_label,
        {
            "seed": seed,
            "stage1_tokens": budgets.stage1.token_budget,
            "stage2_tokens": budgets.stage2.token_budget,
        },
    )
    return table, traces


def one_swap_removal_importance(
    layer: int,
    teacher: Model,
    source: DataSource,
    budgets: ScoringBudgets,
    probe: MixerKind,
    *,
    metric: str = "S2-KL",
    seed=0,
) -> float:
    """Greedy-removal score: convert only `layer` of a teacher clone to the
    linear probe, adapt briefly, and return how much the removal hurt
    (S1-MSE: -held-out hidden loss is negated so higher = more important;
    S2-KL: +held-out KL)."""
    if metric not in ("S2-KL", "S1-MSE"):
        raise ValueError(f"removal metric must be S2-KL or S1-MSE, got {metric!r}")
    kinds = list(teacher.spec.mixers)
    kinds[layer] = probe
    student = init_student_from_teacher(teacher, kinds, seed=derived_seed("gr-init", seed, layer))
    cfg1 = replace(budgets.stage1, seed=derived_seed("gr-s1", seed, layer))
    train_stage(student, teacher, source, cfg1)
    eval_seed = derived_seed("gr-eval", seed)
    if metric == "S1-MSE":
        return evaluate_hidden(
            student,
            teacher,
            source,
            batch_size=budgets.stage1.batch_size,
            n_sequences=budgets.eval_sequences,
            seed=eval_seed,
        )
    cfg2 = replace(budgets.stage2, seed=derived_seed("gr-s2", seed, layer))
    train_stage(student, teacher, source, cfg2)
    return evaluate_kl(
        student,
        teacher,
        source,
        batch_size=budgets.stage2.batch_size,
        n_sequences=budgets.eval_sequences,
        tau=budgets.eval_tau,
        seed=eval_seed,
    )


def removal_table(
    teacher: Model,
    source: DataSource,
    budgets: ScoringBudgets,
    probe: MixerKind,
    *,
    metric: str = "S2-KL",
    seed=0,
) -> ImportanceTable:
    scores = np.array(
        [
            one_swap_removal_importance(
                layer, teacher, source, budgets, probe, metric=metric, seed=seed
            )
            for layer in range(teacher.spec.layers)
        ]
    )
    return ImportanceTable(scores, metric, "GR", probe.label(), {"seed": seed})


# -- bypass probes ----------------------------------------------------------------------


def _bypassed(teacher: Model, layer: int) -> Model:
    kinds = list(teacher.spec.mixers)
    kinds[layer] = MixerKind("bypass")
    return init_student_from_teacher(teacher, kinds, seed=0)


def bypass_score(layer: int, teacher: Model, metric: str, probe_batches) -> float:
    """Importance of `layer` from bypassing its mixing sublayer.

    Act-MSE: MSE between final hidden states (baseline vs bypassed);
    LM-PPL: perplexity increase; AR-drop: recall accuracy drop.
    Higher = more important."""
    byp = _bypassed(teacher, layer)
    if metric == "Act-MSE":
        total, count = 0.0, 0
        for batch in probe_batches:
            hb = _final_hidden(teacher, batch.tokens)
            hz = _final_hidden(byp, batch.tokens)
            total += float(((hb - hz) ** 2).sum())
            count += hb.size
        return total / count
    if metric == "LM-PPL":
        return eval_perplexity(byp, probe_batches) - eval_perplexity(teacher, probe_batches)
    if metric == "AR-drop":
        return eval_accuracy(teacher, probe_batches) - eval_accuracy(byp, probe_batches)
    raise ValueError(f"unknown bypass metric {metric!r}")


def _final_hidden(model: Model, tokens) -> np.ndarray:
    from . import tensor as tt

    x = tt.embedding(model.params["embed.table"], np.asarray(tokens))
    for i in range(model.spec.layers):
        _, x = model.block_forward(x, i)
    return model._norm(x, "final_norm.g").data


def bypass_table(teacher: Model, metric: str, probe_batches) -> ImportanceTable:
    scores = np.array(
        [bypass_score(layer, teacher, metric, probe_batches) for layer in range(teacher.spec.layers)]
    )
    return ImportanceTable(scores, metric, "n/a", "bypass", {})


# -- selectors ------------------------------------------------------------------------------


def select_top_k(table: ImportanceTable, k: int) -> set[int]:
    """K highest-scoring layers; ties broken toward the lower index."""
    if not 0 <= k <= table.layers:
        raise ValueError(f"K={k} outside [0, {table.layers}]")
    return set(table.ranking()[:k])


def avg_rank_select(ranking_ga, ranking_gr, k: int) -> set[int]:
    """Top-K by mean rank position; ties by GA rank, then lower index."""
    layers = len(ranking_ga)
    for name, r in (("GA", ranking_ga), ("GR", ranking_gr)):
        if sorted(r) != list(range(layers)):
            raise ValueError(f"{name} ranking is not a permutation of 0..{layers - 1}")
    if not 0 <= k <= layers:
        raise ValueError(f"K={k} outside [0, {layers}]")
    pos_ga = {l: i for i, l in enumerate(ranking_ga)}
    pos_gr = {l: i for i, l in enumerate(ranking_gr)}
    order = sorted(range(layers), key=lambda l: ((pos_ga[l] + pos_gr[l]) / 2, pos_ga[l], l))
    return set(order[:k])


def uniform_select(layers: int, k: int) -> set[int]:
    """Evenly interleaved layers via centered strides: floor((i+0.5)*L/K)."""
    if not 0 <= k <= layers:
        raise ValueError(f"K={k} outside [0, {layers}]")
    if k == 0:
        return set()
    picks = []
    for i in range(k):
        idx = int(np.floor((i + 0.5) * layers / k))
        picks.append(min(max(idx, 0), layers - 1))
    out = sorted(set(picks))
    # strictly increasing by construction for K <= L; dedupe is a guard only
    assert len(out) == k, f"centered strides collided: {picks}"
    return set(out)


def distance_regularized_select(
    table: ImportanceTable, k: int, lam: float, sigma: float
) -> set[int]:
    """Greedy selection of argmax I(l) - lam * sum_{j in S} exp(-|l-j|/sigma);
    ties by raw score, then lower index. lam=0 reduces to plain top-K."""
    if not 0 <= k <= table.layers:
        raise ValueError(f"K={k} outside [0, {table.layers}]")
    if lam < 0 or sigma <= 0:
        raise ValueError("need lam >= 0 and sigma > 0")
    chosen: list[int] = []
    remaining = set(range(table.layers))
    scores = table.scores
    while len(chosen) < k:
        best = None
        for cand in sorted(remaining):
            penalty = lam * sum(np.exp(-abs(cand - j) / sigma) for j in chosen)
            key = (scores[cand] - penalty, scores[cand], -cand)
            if best is None or key > best[0]:
                best = (key, cand)
        chosen.append(best[1])
        remaining.discard(best[1])
    return set(chosen)


# -- set agreement / stability ------------------------------------------------------------------


def jaccard(s_a, s_b) -> float:
    """|A n B| / |A u B|; two empty sets agree vacuously (1.0)."""
    a, b = set(s_a), set(s_b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def one_swap_threshold(k: int) -> float:
    return (k - 1) / (k + 1)


def within_one_swap(s, s_ref, k: int) -> bool:
    """Jaccard >= (K-1)/(K+1): at most one element swapped."""
    return jaccard(s, s_ref) >= one_swap_threshold(k)


@dataclass(frozen=True)
class SelectionSnapshot:
    step: int
    layers: frozenset

    @classmethod
    def of(cls, step: int, layers) -> "SelectionSnapshot":
        return cls(step, frozenset(int(x) for x in layers))


@dataclass
class StabilityState:
    """Rolling window over top-K snapshots with the early-stopping rule.

    The primary rule fires at the first full window with
      (1) mean pairwise Jaccard >= jaccard_threshold,
      (2) backbone (window intersection) of size >= K-1, and
      (3) window union of size <= K+1.
    The "union-change" mode instead fires at the first full window where (3)
    holds and the newest snapshot differs from its predecessor."""

    k: int
    window_size: int = 10
    jaccard_threshold: float = 0.90
    mode: str = "full"
    window: deque = field(default_factory=deque)
    prev: frozenset | None = None
    fired_step: int | None = None

    def __post_init__(self):
        if self.mode not in ("full", "union-change"):
            raise ValueError(f"unknown early-stop mode {self.mode!r}")
        if self.window_size < 2:
            raise ValueError("window must hold at least 2 snapshots")


def stability_update(state: StabilityState, snap: SelectionSnapshot):
    """Push one snapshot; returns (state, fired-now flag, diagnostics row)."""
    if len(snap.layers) != state.k:
        raise ValueError(f"snapshot size {len(snap.layers)} != K={state.k}")
    changed = state.prev is not None and snap.layers != state.prev
    state.window.append(snap.layers)
    if len(state.window) > state.window_size:
        state.window.popleft()
    r = len(state.window)
    sets = list(state.window)
    backbone = frozenset.intersection(*sets)
    union = frozenset.union(*sets)
    if r >= 2:
        pair_sum = sum(
            jaccard(sets[i], sets[j]) for i in range(r) for j in range(i + 1, r)
        )
        jmean = 2.0 * pair_sum / (r * (r - 1))
    else:
        jmean = None
    ready = r == state.window_size
    fired_now = False
    if ready and state.fired_step is None:
        if state.mode == "full":
            ok = (
                jmean is not None
                and jmean >= state.jaccard_threshold
                and len(backbone) >= state.k - 1
                and len(union) <= state.k + 1
            )
        else:
            ok = len(union) <= state.k + 1 and changed
        if ok:
            state.fired_step = snap.step
            fired_now = True
    state.prev = snap.layers
    diag = {
        "step": snap.step,
        "window": r,
        "jaccard_mean": jmean,
        "backbone_size": len(backbone),
        "union_size": len(union),
        "ready": ready,
        "fired": fired_now,
    }
    return state, fired_now, diag


def run_stability(snapshots, k: int, *, window_size=10, jaccard_threshold=0.90, mode="full"):
    """Feed a snapshot stream through the rule; returns (trace rows, fired step)."""
    state = StabilityState(k, window_size, jaccard_threshold, mode)
    trace = []
    for snap in snapshots:
        state, _, diag = stability_update(state, snap)
        trace.append(diag)
    return trace, state.fired_step


def stability_trace_csv(trace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["step", "jaccard_mean", "backbone_size", "union_size", "fired"])
    for row in trace:
        jm = "" if row["jaccard_mean"] is None else f"{row['jaccard_mean']:.6f}"
        w.writerow([row["step"], jm, row["backbone_size"], row["union_size"], int(row["fired"])])
    return buf.getvalue()


def snapshots_from_traces(traces: dict[int, list], k: int) -> list[SelectionSnapshot]:
    """Reconstruct top-K snapshots from per-layer (step, held-out KL) traces;
    importance at each step is the negative KL."""
    if not traces or any(not t for t in traces.values()):
        return []
    layers = sorted(traces)
    steps = [s for s, _ in traces[layers[0]]]
    snaps = []
    for si, step in enumerate(steps):
        scores = np.array([-traces[l][si][1] for l in layers])
        table = ImportanceTable(scores, "S2-KL", "GA", "trace", {})
        snaps.append(SelectionSnapshot.of(step, select_top_k(table, k)))
    return snaps


# -- adjacency ---------------------------------------------------------------------------------


def adjacency_index(selected, layers: int) -> int:
    """Number of consecutive pairs (i, i+1) both selected."""
    s = set(selected)
    if s and (min(s) < 0 or max(s) >= layers):
        raise ValueError(f"selection outside [0, {layers})")
    return sum(1 for i in s if i + 1 in s)


def expected_adjacency(k: int, layers: int) -> float:
    """E[A_K] for a uniformly random K-subset: K(K-1)/L."""
    return k * (k - 1) / layers
