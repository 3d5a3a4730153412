"""Experiment runner: every pipeline step as a subcommand.

    hybridkd train-teacher      --config run.ini [--seed N] [--out DIR]
    hybridkd distill-all-linear --config run.ini ...
    hybridkd score-layers       --config run.ini [--workers N] ...
    hybridkd select             --config run.ini ...
    hybridkd distill-hybrid     --config run.ini ...
    hybridkd sweep-k            --config run.ini ...
    hybridkd sweep-window       --config run.ini ...
    hybridkd analyze-stability  --config run.ini ...
    hybridkd analyze-adjacency  --config run.ini ...

Commands communicate through files in the output directory (teacher.ckpt,
all_linear.ckpt, importance.json, selection.json, ...); the [artifacts]
config section overrides any input path. Every artifact embeds the resolved
config and base seed. Exit codes: 0 success, 2 config error, 3 runtime or
convergence failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import traceback
from dataclasses import replace
from functools import partial
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import selection as sel
from .config import ConfigError, RunConfig, load_config
from .distill import (
    StageConfig,
    derived_seed,
    distill_all_linear,
    evaluate_kl,
    final_hybrid_distill,
    train_lm,
    train_stage,
)
from .mixers import MixerKind
from .model import HybridLayout, Model, init_student_from_teacher, uniform_mixers
from .tasks import DataSource, eval_accuracy, heldout_batches

PROBE_BATCH_SIZE = 16


def _write_json(path: Path, payload: dict, cfg: RunConfig) -> None:
    payload = dict(payload)
    payload["seed"] = cfg.seed
    payload["config"] = cfg.resolved()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _probe_batches(cfg: RunConfig, kinds, tag: str):
    spec = cfg.probe_task(kinds)
    if spec is None:
        return None
    n = cfg.selection.get("probe_batches", 8)
    return heldout_batches(spec, PROBE_BATCH_SIZE, n, seed=derived_seed("probe", cfg.seed, tag))


def _teacher_eval_fn(cfg: RunConfig):
    probes = {}
    for spec, _ in cfg.task_specs():
        if spec.kind != "generic" and spec.kind not in probes:
            probes[spec.kind] = heldout_batches(
                spec, PROBE_BATCH_SIZE, 4, seed=derived_seed("teacher-eval", cfg.seed, spec.kind)
            )
    if not probes:
        return None

    def eval_fn(model):
        return {kind: eval_accuracy(model, batches) for kind, batches in probes.items()}

    return eval_fn


def _hybrid_report(cfg: RunConfig, model: Model, teacher: Model, source: DataSource) -> dict:
    report = {
        "heldout_kl": evaluate_kl(
            model,
            teacher,
            source,
            batch_size=cfg.stage_config(2).batch_size,
            n_sequences=cfg.stage_config(2).eval_sequences,
            tau=cfg.stage_config(2).tau,
            seed=derived_seed("report-kl", cfg.seed),
        )
    }
    recall = _probe_batches(cfg, ("kv", "multihop"), "recall")
    local = _probe_batches(cfg, ("localcopy",), "local")
    if recall is not None:
        report["recall_accuracy"] = eval_accuracy(model, recall)
    if local is not None:
        report["local_accuracy"] = eval_accuracy(model, local)
    return report


# -- commands ------------------------------------------------------------------------


def cmd_train_teacher(cfg: RunConfig) -> int:
    spec = cfg.teacher_spec()
    model = Model.init(spec, cfg.seed)
    source = cfg.data_source()
    t = cfg.teacher
    target = t.get("target_accuracy")
    eval_fn = _teacher_eval_fn(cfg)
    if target is not None and eval_fn is None:
        raise ConfigError("target_accuracy set but the mixture has no scoreable task")
    result = train_lm(
        model,
        source,
        steps=t.get("steps", 300),
        batch_size=t.get("batch_size", 8),
        lr=t.get("lr", 3e-3),
        seed=derived_seed("teacher", cfg.seed),
        warmup_frac=t.get("warmup_frac", 0.05),
        target_accuracy=target,
        eval_every=t.get("eval_every", 25),
        eval_fn=eval_fn,
    )
    ckpt.save(model, cfg.out_dir / "teacher.ckpt")
    metrics = {
        "steps_run": result.steps_run,
        "final_loss": result.curve[-1][1],
        "accuracy_trace": result.accuracy_trace,
        "converged": result.converged,
        "planted_layer": cfg.planted_layer(),
        "mixers": [m.label() for m in spec.mixers],
    }
    _write_json(cfg.out_dir / "teacher_metrics.json", metrics, cfg)
    if not result.converged:
        print(f"teacher did not reach target accuracy {target}", file=sys.stderr)
        print(json.dumps(metrics["accuracy_trace"][-3:]), file=sys.stderr)
        return 3
    return 0


def cmd_distill_all_linear(cfg: RunConfig) -> int:
    teacher = ckpt.load(cfg.artifact_path("teacher", "teacher.ckpt"))
    source = cfg.data_source()
    cfg1 = cfg.stage_config(1, seed=derived_seed("al-s1", cfg.seed))
    cfg2 = cfg.stage_config(2, seed=derived_seed("al-s2", cfg.seed))
    aligned, distilled, r1, r2 = distill_all_linear(
        teacher,
        cfg.linear_kind.kind,
        source,
        cfg1,
        cfg2,
        init_seed=derived_seed("al-init", cfg.seed),
    )
    ckpt.save(aligned, cfg.out_dir / "all_linear_stage1.ckpt")
    ckpt.save(distilled, cfg.out_dir / "all_linear.ckpt")
    _write_text(cfg.out_dir / "stage1_curve.csv", r1.curve_csv())
    _write_text(cfg.out_dir / "stage2_curve.csv", r2.curve_csv())
    summary = {
        "stage1_final_loss": r1.final_loss,
        "stage2_final_loss": r2.final_loss,
        "stage1_tokens": r1.tokens_consumed,
        "stage2_tokens": r2.tokens_consumed,
        "linear_mixer": cfg.linear_kind.label(),
    }
    _write_json(cfg.out_dir / "distill_summary.json", summary, cfg)
    return 0


def cmd_score_layers(cfg: RunConfig) -> int:
    teacher = ckpt.load(cfg.artifact_path("teacher", "teacher.ckpt"))
    source = cfg.data_source()
    frac = cfg.selection.get("score_budget_frac", 0.25)
    metric = cfg.selection.get("metric", "S2-KL")
    direction = cfg.selection.get("direction", "GA")
    snapshot_every = cfg.selection.get("snapshot_every", 0)
    budgets = sel.ScoringBudgets(
        stage1=cfg.stage_config(1, frac=frac),
        stage2=cfg.stage_config(2, frac=frac),
        eval_sequences=cfg.stage_config(2).eval_sequences,
        eval_tau=cfg.stage_config(2).tau,
    )
    if metric in ("Act-MSE", "LM-PPL", "AR-drop"):
        kinds = ("kv", "multihop") if metric == "AR-drop" else ("generic", "localcopy", "kv", "multihop")
        probes = _probe_batches(cfg, kinds, f"bypass-{metric}")
        if probes is None:
            raise ConfigError(f"no probe task available for {metric}")
        table = sel.bypass_table(teacher, metric, probes)
    elif direction == "GR":
        base = None
        table = sel.removal_table(
            teacher, source, budgets, cfg.linear_kind, metric=metric, seed=cfg.seed
        )
    else:
        base = ckpt.load(cfg.artifact_path("all_linear", "all_linear.ckpt"))
        table, traces = sel.score_all_layers(
            base,
            teacher,
            source,
            budgets,
            seed=cfg.seed,
            workers=cfg.workers,
            probe_every=snapshot_every,
            metric=metric,
        )
        if snapshot_every:
            _write_json(
                cfg.out_dir / "kl_traces.json",
                {"traces": {str(k): v for k, v in traces.items()}},
                cfg,
            )
            k = cfg.selection.get("k", max(1, teacher.spec.layers // 4))
            snaps = sel.snapshots_from_traces(traces, k)
            rows = ["step,layers"] + [
                f"{s.step},{';'.join(str(i) for i in sorted(s.layers))}" for s in snaps
            ]
            _write_text(cfg.out_dir / "snapshots.csv", "\n".join(rows) + "\n")
            trace, fired = sel.run_stability(
                snaps,
                k,
                window_size=cfg.selection.get("window", 10),
                jaccard_threshold=cfg.selection.get("jaccard_threshold", 0.90),
                mode=cfg.selection.get("early_stop_mode", "full"),
            )
            _write_text(cfg.out_dir / "stability_trace.csv", sel.stability_trace_csv(trace))
            _write_json(
                cfg.out_dir / "early_stop.json",
                {"fired_step": fired, "k": k, "snapshots": len(snaps)},
                cfg,
            )
    _write_text(cfg.out_dir / "importance.csv", table.to_csv())
    _write_text(cfg.out_dir / "importance.json", table.to_json() + "\n")
    return 0


def _load_table(cfg: RunConfig, artifact: str, default: str) -> sel.ImportanceTable:
    path = cfg.artifact_path(artifact, default)
    if not path.exists():
        raise ConfigError(f"importance table not found: {path}")
    return sel.ImportanceTable.from_json(path.read_text())


def cmd_select(cfg: RunConfig) -> int:
    strategy = cfg.selection.get("strategy", "top_k")
    k = cfg.selection.get("k")
    if k is None:
        raise ConfigError("[selection] needs k")
    layers = cfg.model["layers"]
    params: dict = {}
    if strategy == "uniform":
        chosen = sel.uniform_select(layers, k)
    elif strategy == "avg":
        ga = _load_table(cfg, "table_ga", "importance.json")
        gr = _load_table(cfg, "table_gr", "importance_gr.json")
        chosen = sel.avg_rank_select(ga.ranking(), gr.ranking(), k)
    else:
        table = _load_table(cfg, "table", "importance.json")
        if strategy == "distance":
            lam = cfg.selection.get("lambda", 0.0)
            sigma = cfg.selection.get("sigma", 1.0)
            params = {"lambda": lam, "sigma": sigma}
            chosen = sel.distance_regularized_select(table, k, lam, sigma)
        else:
            chosen = sel.select_top_k(table, k)
    payload = {
        "strategy": strategy,
        "k": k,
        "layers": sorted(chosen),
        "params": params,
        "adjacency": {
            "a_k": sel.adjacency_index(chosen, layers),
            "expected_a_k": sel.expected_adjacency(k, layers),
        },
    }
    _write_json(cfg.out_dir / "selection.json", payload, cfg)
    return 0


def _load_selection(cfg: RunConfig) -> list[int]:
    path = cfg.artifact_path("selection", "selection.json")
    if not path.exists():
        raise ConfigError(f"selection not found: {path}")
    return json.loads(path.read_text())["layers"]


def cmd_distill_hybrid(cfg: RunConfig) -> int:
    teacher = ckpt.load(cfg.artifact_path("teacher", "teacher.ckpt"))
    aligned = ckpt.load(cfg.artifact_path("aligned", "all_linear_stage1.ckpt"))
    source = cfg.data_source()
    selected = _load_selection(cfg)
    layout = HybridLayout.from_selection(selected, teacher.spec.layers)
    cfg2 = cfg.stage_config(2, seed=derived_seed("hybrid-s2", cfg.seed))
    hybrid, result = final_hybrid_distill(layout, aligned, teacher, source, cfg2)
    ckpt.save(hybrid, cfg.out_dir / "hybrid.ckpt")
    _write_text(cfg.out_dir / "hybrid_stage2_curve.csv", result.curve_csv())
    report = {"k": len(selected), "layers": sorted(selected)}
    report.update(_hybrid_report(cfg, hybrid, teacher, source))
    _write_json(cfg.out_dir / "hybrid_report.json", report, cfg)
    return 0


def cmd_sweep_k(cfg: RunConfig) -> int:
    teacher = ckpt.load(cfg.artifact_path("teacher", "teacher.ckpt"))
    aligned = ckpt.load(cfg.artifact_path("aligned", "all_linear_stage1.ckpt"))
    table = _load_table(cfg, "table", "importance.json")
    source = cfg.data_source()
    k_list = cfg.sweep.get("k_list")
    if not k_list:
        raise ConfigError("[sweep] needs k_list")
    cfg2 = cfg.stage_config(2, seed=derived_seed("sweep-k-s2", cfg.seed))
    rows = []
    for k in k_list:
        layout = HybridLayout.from_selection(sel.select_top_k(table, k), teacher.spec.layers)
        hybrid, _ = final_hybrid_distill(layout, aligned, teacher, source, cfg2)
        report = _hybrid_report(cfg, hybrid, teacher, source)
        rows.append(
            {
                "k": k,
                "layers": sorted(layout.softmax_layers),
                "recall_accuracy": report.get("recall_accuracy"),
                "local_accuracy": report.get("local_accuracy"),
                "heldout_kl": report["heldout_kl"],
            }
        )
    _write_json(cfg.out_dir / "sweep_k.json", {"rows": rows}, cfg)
    lines = ["k,recall_accuracy,local_accuracy,heldout_kl"]
    for r in rows:
        lines.append(
            f"{r['k']},{_fmt(r['recall_accuracy'])},{_fmt(r['local_accuracy'])},{r['heldout_kl']:.8g}"
        )
    _write_text(cfg.out_dir / "sweep_k.csv", "\n".join(lines) + "\n")
    return 0


def _fmt(x) -> str:
    return "" if x is None else f"{x:.6f}"


def cmd_sweep_window(cfg: RunConfig) -> int:
    teacher = ckpt.load(cfg.artifact_path("teacher", "teacher.ckpt"))
    source = cfg.data_source()
    windows = cfg.sweep.get("windows")
    if not windows:
        raise ConfigError("[sweep] needs windows")
    rows = []
    for w in windows:
        student = init_student_from_teacher(
            teacher,
            uniform_mixers(teacher.spec.layers, "swa", w),
            seed=derived_seed("sweep-w-init", cfg.seed),
        )
        cfg1 = cfg.stage_config(1, seed=derived_seed("sweep-w-s1", cfg.seed))
        cfg2 = cfg.stage_config(2, seed=derived_seed("sweep-w-s2", cfg.seed))
        train_stage(student, teacher, source, cfg1)
        train_stage(student, teacher, source, cfg2)
        report = _hybrid_report(cfg, student, teacher, source)
        rows.append(
            {
                "window": w,
                "recall_accuracy": report.get("recall_accuracy"),
                "local_accuracy": report.get("local_accuracy"),
                "heldout_kl": report["heldout_kl"],
            }
        )
    _write_json(cfg.out_dir / "sweep_window.json", {"rows": rows}, cfg)
    lines = ["window,recall_accuracy,local_accuracy,heldout_kl"]
    for r in rows:
        lines.append(
            f"{r['window']},{_fmt(r['recall_accuracy'])},{_fmt(r['local_accuracy'])},{r['heldout_kl']:.8g}"
        )
    _write_text(cfg.out_dir / "sweep_window.csv", "\n".join(lines) + "\n")
    return 0


def _read_snapshots(path: Path) -> list[sel.SelectionSnapshot]:
    snaps = []
    with open(path) as fh:
        for row in csv.DictReader(fh):
            layers = [int(x) for x in row["layers"].split(";") if x]
            snaps.append(sel.SelectionSnapshot.of(int(row["step"]), layers))
    return snaps


def cmd_analyze_stability(cfg: RunConfig) -> int:
    path = cfg.artifact_path("snapshots", "snapshots.csv")
    if not path.exists():
        raise ConfigError(f"snapshots not found: {path}")
    snaps = _read_snapshots(path)
    if not snaps:
        raise ConfigError(f"no snapshots in {path}")
    k = cfg.selection.get("k", len(snaps[0].layers))
    trace, fired = sel.run_stability(
        snaps,
        k,
        window_size=cfg.selection.get("window", 10),
        jaccard_threshold=cfg.selection.get("jaccard_threshold", 0.90),
        mode=cfg.selection.get("early_stop_mode", "full"),
    )
    _write_text(cfg.out_dir / "stability_trace.csv", sel.stability_trace_csv(trace))
    _write_json(
        cfg.out_dir / "early_stop.json",
        {
            "fired_step": fired,
            "k": k,
            "mode": cfg.selection.get("early_stop_mode", "full"),
            "snapshots": len(snaps),
        },
        cfg,
    )
    return 0


def cmd_analyze_adjacency(cfg: RunConfig) -> int:
    path = cfg.artifact_path("selection", "selection.json")
    if not path.exists():
        raise ConfigError(f"selection not found: {path}")
    data = json.loads(path.read_text())
    layers = cfg.model["layers"]
    chosen = set(data["layers"])
    k = len(chosen)
    payload = {
        "k": k,
        "layers": sorted(chosen),
        "a_k": sel.adjacency_index(chosen, layers),
        "expected_a_k": sel.expected_adjacency(k, layers),
    }
    against = cfg.artifacts.get("against")
    if against:
        other = set(json.loads(Path(against).read_text())["layers"])
        payload["against"] = sorted(other)
        payload["jaccard"] = sel.jaccard(chosen, other)
        payload["within_one_swap"] = sel.within_one_swap(chosen, other, k)
    _write_json(cfg.out_dir / "adjacency.json", payload, cfg)
    return 0


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "distill-all-linear": cmd_distill_all_linear,
    "score-layers": cmd_score_layers,
    "select": cmd_select,
    "distill-hybrid": cmd_distill_hybrid,
    "sweep-k": cmd_sweep_k,
    "sweep-window": cmd_sweep_window,
    "analyze-stability": cmd_analyze_stability,
    "analyze-adjacency": cmd_analyze_adjacency,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="run config (INI)")
    common.add_argument("--seed", type=int, help="override [run] seed")
    common.add_argument("--workers", type=int, help="override [run] workers")
    common.add_argument("--out", help="override [run] out directory")
    parser = argparse.ArgumentParser(prog="hybridkd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.run["seed"] = args.seed
        if args.workers is not None:
            cfg.run["workers"] = args.workers
        if args.out is not None:
            cfg.run["out"] = args.out
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 3


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
