"""Run configuration: one INI document per run, flat sections per subsystem.

Sections:
  [model]      architecture of the teacher/students
  [teacher]    teacher training budget and (optional) planted-hybrid mode
  [task.NAME]  one or more task specs forming the training/distillation mixture
  [stage1] / [stage2]  distillation budgets
  [selection]  scoring + selector settings
  [sweep]      K list and window list for the sweep commands
  [run]        seed, workers, output directory
  [artifacts]  optional explicit input paths (default: <out>/<name>)

Unknown sections or keys are configuration errors. Every emitted artifact
embeds the resolved config and the base seed.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .distill import StageConfig
from .mixers import MixerKind
from .model import ModelSpec, uniform_mixers
from .seeding import rng
from .tasks import DataSource, TaskSpec


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected boolean, got {text!r}")


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace(",", " ").split())


_MODEL_KEYS = {
    "layers": int,
    "width": int,
    "heads": int,
    "vocab": int,
    "seq_max": int,
    "linear_mixer": str,
    "ffn_mult": int,
    "tied_unembed": _bool,
    "rope_base": float,
    "beta_on_additive": _bool,
}

_TEACHER_KEYS = {
    "steps": int,
    "lr": float,
    "batch_size": int,
    "warmup_frac": float,
    "target_accuracy": float,
    "eval_every": int,
    "eval_batches": int,
    "planted_layer": str,
}

_TASK_KEYS = {
    "kind": str,
    "seq_len": int,
    "weight": float,
    "num_pairs": int,
    "key_alphabet": int,
    "value_alphabet": int,
    "hops": int,
    "layout": str,
    "copy_window": int,
    "copy_alphabet": int,
    "alphabet": int,
    "zipf_a": float,
    "copy_prob": float,
    "copy_lag": int,
}

_STAGE_KEYS = {
    "token_budget": int,
    "batch_size": int,
    "lr": float,
    "tau": float,
    "warmup_frac": float,
    "cache_teacher": _bool,
    "eval_sequences": int,
}

_SELECTION_KEYS = {
    "strategy": str,
    "k": int,
    "metric": str,
    "direction": str,
    "score_budget_frac": float,
    "lambda": float,
    "sigma": float,
    "window": int,
    "jaccard_threshold": float,
    "snapshot_every": int,
    "early_stop_mode": str,
    "probe_batches": int,
}

_SWEEP_KEYS = {"k_list": _int_list, "windows": _int_list}

_RUN_KEYS = {"seed": int, "workers": int, "out": str}

_STRATEGIES = ("top_k", "distance", "avg", "uniform")


@dataclass
class RunConfig:
    model: dict
    teacher: dict
    tasks: list  # (name, dict)
    stage1: dict
    stage2: dict
    selection: dict
    sweep: dict
    run: dict
    artifacts: dict = field(default_factory=dict)

    # -- builders ---------------------------------------------------------

    @property
    def seed(self) -> int:
        return self.run.get("seed", 0)

    @property
    def workers(self) -> int:
        return self.run.get("workers", 1)

    @property
    def out_dir(self) -> Path:
        return Path(self.run.get("out", "runs/default"))

    @property
    def seq_len(self) -> int:
        lens = {t["seq_len"] for _, t in self.tasks}
        if len(lens) != 1:
            raise ConfigError(f"tasks disagree on seq_len: {sorted(lens)}")
        return lens.pop()

    @property
    def linear_kind(self) -> MixerKind:
        return MixerKind.parse(self.model.get("linear_mixer", "gdn"))

    def model_spec(self, mixers) -> ModelSpec:
        m = self.model
        return ModelSpec(
            layers=m["layers"],
            width=m["width"],
            heads=m["heads"],
            vocab=m["vocab"],
            seq_max=m.get("seq_max", self.seq_len),
            mixers=tuple(mixers),
            ffn_mult=m.get("ffn_mult", 4),
            tied_unembed=m.get("tied_unembed", True),
            rope_base=m.get("rope_base", 10000.0),
            beta_on_additive=m.get("beta_on_additive", True),
        )

    def planted_layer(self) -> int | None:
        raw = self.teacher.get("planted_layer", "").strip()
        if not raw:
            return None
        if raw == "auto":
            return int(rng("planted-layer", self.seed).integers(self.model["layers"]))
        return int(raw)

    def teacher_spec(self) -> ModelSpec:
        layers = self.model["layers"]
        planted = self.planted_layer()
        if planted is None:
            return self.model_spec(uniform_mixers(layers, "softmax"))
        if not 0 <= planted < layers:
            raise ConfigError(f"planted layer {planted} outside [0, {layers})")
        kinds = [self.linear_kind] * layers
        kinds[planted] = MixerKind("softmax")
        return self.model_spec(kinds)

    def task_specs(self) -> list[tuple[TaskSpec, float]]:
        out = []
        for name, t in self.tasks:
            kw = {k: v for k, v in t.items() if k != "weight"}
            kw.setdefault("vocab", self.model["vocab"])
            try:
                spec = TaskSpec(**kw)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"[task.{name}]: {e}") from e
            out.append((spec, t.get("weight", 1.0)))
        return out

    def data_source(self) -> DataSource:
        return DataSource.of(*self.task_specs())

    def probe_task(self, kinds: tuple[str, ...]) -> TaskSpec | None:
        for spec, _ in self.task_specs():
            if spec.kind in kinds:
                return spec
        return None

    def stage_config(self, stage: int, *, frac: float = 1.0, seed=None) -> StageConfig:
        raw = self.stage1 if stage == 1 else self.stage2
        budget = max(1, int(raw["token_budget"] * frac))
        batch = raw.get("batch_size", 8)
        budget = max(budget, batch * self.seq_len)
        try:
            return StageConfig(
                stage=stage,
                token_budget=budget,
                seq_len=self.seq_len,
                batch_size=batch,
                lr=raw.get("lr", 3e-3),
                tau=raw.get("tau", 2.0),
                seed=self.seed if seed is None else seed,
                warmup_frac=raw.get("warmup_frac", 0.05),
                cache_teacher=raw.get("cache_teacher", False),
                eval_sequences=raw.get("eval_sequences", 32),
            )
        except ValueError as e:
            raise ConfigError(f"[stage{stage}]: {e}") from e

    def artifact_path(self, name: str, default_filename: str) -> Path:
        if name in self.artifacts:
            return Path(self.artifacts[name])
        return self.out_dir / default_filename

    def resolved(self) -> dict:
        return {
            "model": self.model,
            "teacher": self.teacher,
            "tasks": {name: t for name, t in self.tasks},
            "stage1": self.stage1,
            "stage2": self.stage2,
            "selection": self.selection,
            "sweep": self.sweep,
            "run": self.run,
            "artifacts": dict(self.artifacts),
        }


def _parse_section(parser, section: str, schema: dict) -> dict:
    out = {}
    if not parser.has_section(section):
        return out
    for key, raw in parser.items(section):
        if key not in schema:
            raise ConfigError(f"[{section}]: unknown key {key!r}")
        try:
            out[key] = schema[key](raw)
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(f"[{section}] {key}: {e}") from e
    return out


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read(path)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e

    tasks = []
    for section in parser.sections():
        if section.startswith("task."):
            name = section.split(".", 1)[1]
            tasks.append((name, _parse_section(parser, section, _TASK_KEYS)))
        elif section not in (
            "model",
            "teacher",
            "stage1",
            "stage2",
            "selection",
            "sweep",
            "run",
            "artifacts",
        ):
            raise ConfigError(f"unknown section [{section}]")
    if not tasks:
        raise ConfigError("need at least one [task.NAME] section")
    for name, t in tasks:
        if "kind" not in t or "seq_len" not in t:
            raise ConfigError(f"[task.{name}] needs kind and seq_len")

    cfg = RunConfig(
        model=_parse_section(parser, "model", _MODEL_KEYS),
        teacher=_parse_section(parser, "teacher", _TEACHER_KEYS),
        tasks=tasks,
        stage1=_parse_section(parser, "stage1", _STAGE_KEYS),
        stage2=_parse_section(parser, "stage2", _STAGE_KEYS),
        selection=_parse_section(parser, "selection", _SELECTION_KEYS),
        sweep=_parse_section(parser, "sweep", _SWEEP_KEYS),
        run=_parse_section(parser, "run", _RUN_KEYS),
        artifacts={k: v for k, v in (parser.items("artifacts") if parser.has_section("artifacts") else [])},
    )
    for req in ("layers", "width", "heads", "vocab"):
        if req not in cfg.model:
            raise ConfigError(f"[model] needs {req}")
    for stage, raw in (("stage1", cfg.stage1), ("stage2", cfg.stage2)):
        if "token_budget" not in raw:
            raise ConfigError(f"[{stage}] needs token_budget")
    strategy = cfg.selection.get("strategy", "top_k")
    if strategy not in _STRATEGIES:
        raise ConfigError(f"unknown selection strategy {strategy!r}")
    return cfg
