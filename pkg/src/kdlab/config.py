"""Experiment configuration: a strict YAML schema with line-numbered errors.

A config describes one run.  Every mapping is checked against a fixed key
set, so a misspelt ``omgea`` fails loudly instead of silently running with
the default.  Errors carry the dotted field path and the source line.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .datafree import InversionSpec
from .distill import DEFAULT_OPTIMIZER, DEFAULT_SCHEDULE, DEFAULT_BATCH_SIZE, TrainingSetup
from .errors import ConfigError
from .models import KINDS, ModelSpec
from .objectives import KDParams, NastyParams
from .optim import OptimizerSpec, ScheduleSpec

RUN_KINDS = ("train_teacher", "train_nasty", "distill", "teacher_self", "datafree", "sweep")
SWEEP_AXES = ("omega", "tau_s", "alpha", "fraction", "adversary_arch", "student_arch")

_MODEL_KEYS = {"kind": "small_cnn", "widths": []}

# key -> default; a dict default means a nested section with its own keys.
SCHEMA: dict[str, Any] = {
    "kind": None,
    "name": None,
    "seed": 0,
    "data": {
        "source": "digits",
        "root": None,
        "seed": 0,
        "train_per_class": 400,
        "test_per_class": 200,
        "classes": 10,
        "dim": 16,
        "separation": 10.0,
    },
    "model": dict(_MODEL_KEYS),
    "student": {"kind": "tiny_cnn", "widths": []},
    "adversary": {"checkpoint": None, "kind": None, "widths": []},
    "teacher": {"checkpoint": None},
    "nasty_teacher": {"checkpoint": None},
    "kd": {"alpha": 0.9, "tau_s": 4.0, "fraction": 1.0, "baseline": True},
    "nasty": {"omega": 0.004, "tau_a": 4.0, "init_from_adversary": False},
    "optimizer": {
        "kind": DEFAULT_OPTIMIZER.kind,
        "lr": DEFAULT_OPTIMIZER.lr,
        "momentum": DEFAULT_OPTIMIZER.momentum,
        "weight_decay": DEFAULT_OPTIMIZER.weight_decay,
        "grad_clip": DEFAULT_OPTIMIZER.grad_clip,
    },
    "schedule": {
        "epochs": DEFAULT_SCHEDULE.total_epochs,
        "milestones": list(DEFAULT_SCHEDULE.milestones),
        "decay_factor": DEFAULT_SCHEDULE.decay_factor,
    },
    "batch_size": DEFAULT_BATCH_SIZE,
    "eval_every": 1,
    "inversion": {
        "per_class": InversionSpec.per_class,
        "steps": InversionSpec.steps,
        "lr": InversionSpec.lr,
        "tv_weight": InversionSpec.tv_weight,
        "l2_weight": InversionSpec.l2_weight,
        "temperature": InversionSpec.temperature,
        "epochs": 60,
    },
    "sweep": {"axis": None, "values": []},
}


@dataclass
class ExperimentConfig:
    """Resolved configuration; ``raw`` holds the fully defaulted mapping."""

    raw: dict
    source: Path | None = None
    lines: dict[str, int] = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.raw["kind"]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def name(self) -> str:
        return self.raw["name"]

    def section(self, key: str) -> dict:
        return self.raw[key]

    # -------------------------------------------------------------- specs
    def model_spec(self, section: str = "model", input_shape=(1, 28, 28), num_classes: int = 10) -> ModelSpec:
        d = self.raw[section]
        return self._build(section, lambda: ModelSpec(d["kind"], tuple(d["widths"] or ()), num_classes,
                                                      tuple(input_shape)))

    def kd_params(self) -> KDParams:
        d = self.raw["kd"]
        return self._build("kd", lambda: KDParams(float(d["alpha"]), float(d["tau_s"])))

    def nasty_params(self) -> NastyParams:
        d = self.raw["nasty"]
        return self._build("nasty", lambda: NastyParams(float(d["omega"]), float(d["tau_a"])))

    def setup(self, epochs: int | None = None) -> TrainingSetup:
        o, s = self.raw["optimizer"], self.raw["schedule"]
        opt = self._build("optimizer", lambda: OptimizerSpec(
            o["kind"], lr=float(o["lr"]), momentum=float(o["momentum"]),
            weight_decay=float(o["weight_decay"]),
            grad_clip=None if o["grad_clip"] is None else float(o["grad_clip"])))
        total = int(s["epochs"]) if epochs is None else epochs
        milestones = tuple(s["milestones"]) if epochs is None else _rescale(s["milestones"], int(s["epochs"]), total)
        sched = self._build("schedule", lambda: ScheduleSpec(total, milestones, float(s["decay_factor"])))
        if int(self.raw["batch_size"]) < 1:
            raise self.error("batch_size must be >= 1", "batch_size")
        return TrainingSetup(opt, sched, int(self.raw["batch_size"]), int(self.raw["eval_every"]))

    def inversion_spec(self, mean: float, std: float) -> InversionSpec:
        d = self.raw["inversion"]
        return self._build("inversion", lambda: InversionSpec(
            int(d["per_class"]), int(d["steps"]), float(d["lr"]), float(d["tv_weight"]), float(d["l2_weight"]),
            float(d["temperature"]), self.seed, mean, std))

    def _build(self, section: str, make):
        try:
            return make()
        except ConfigError as exc:
            path = f"{section}.{exc.field}" if exc.field else section
            raise self.error(exc.message, path) from None
        except (TypeError, ValueError) as exc:
            raise self.error(str(exc), section) from None

    def error(self, message: str, path: str) -> ConfigError:
        line, probe = self.lines.get(path), path
        while line is None and "." in probe:  # fall back to the nearest enclosing key's line
            probe = probe.rsplit(".", 1)[0]
            line = self.lines.get(probe)
        return ConfigError(message, field=path, line=line)

    # ------------------------------------------------------------ variants
    def with_value(self, dotted: str, value) -> "ExperimentConfig":
        raw = copy.deepcopy(self.raw)
        node = raw
        keys = dotted.split(".")
        for k in keys[:-1]:
            node = node[k]
        node[keys[-1]] = value
        return ExperimentConfig(raw, self.source, dict(self.lines))

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=False, default_flow_style=None)


def _rescale(milestones, old_total: int, new_total: int) -> tuple[int, ...]:
    if old_total <= 0:
        return ()
    out = sorted({max(1, min(new_total - 1, round(m * new_total / old_total))) for m in milestones})
    return tuple(out) if new_total > 1 else ()


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def _to_python(node: yaml.Node, path: str, lines: dict[str, int]) -> Any:
    if isinstance(node, yaml.MappingNode):
        out = {}
        for key_node, value_node in node.value:
            key = key_node.value
            sub = f"{path}.{key}" if path else key
            if key in out:
                raise ConfigError(f"duplicate key {key!r}", field=sub, line=key_node.start_mark.line + 1)
            lines[sub] = key_node.start_mark.line + 1
            out[key] = _to_python(value_node, sub, lines)
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_to_python(v, path, lines) for v in node.value]
    return yaml.SafeLoader("").construct_object(node, deep=True)


def _merge(schema: dict, given: dict, path: str, lines: dict[str, int]) -> dict:
    out = {}
    for key, value in given.items():
        sub = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigError(f"unknown key {key!r}; allowed: {', '.join(schema)}", field=sub, line=lines.get(sub))
        if isinstance(schema[key], dict):
            if value is None:
                value = {}
            if not isinstance(value, dict):
                raise ConfigError(f"{sub} must be a mapping", field=sub, line=lines.get(sub))
            out[key] = _merge(schema[key], value, sub, lines)
        else:
            out[key] = value
    for key, default in schema.items():
        if key not in out:
            out[key] = copy.deepcopy(default) if not isinstance(default, dict) else _merge(default, {}, key, lines)
    return out


def parse_config(text: str, source: Path | None = None) -> ExperimentConfig:
    try:
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"not valid YAML: {getattr(exc, 'problem', exc)}",
                          line=mark.line + 1 if mark else None) from None
    if node is None or not isinstance(node, yaml.MappingNode):
        raise ConfigError("config must be a mapping at the top level", line=1)
    lines: dict[str, int] = {}
    given = _to_python(node, "", lines)
    raw = _merge(SCHEMA, given, "", lines)
    cfg = ExperimentConfig(raw, source, lines)
    _validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, path)


def _validate(cfg: ExperimentConfig) -> None:
    raw = cfg.raw
    if raw["kind"] not in RUN_KINDS:
        raise cfg.error(f"kind must be one of {RUN_KINDS}, got {raw['kind']!r}", "kind")
    if raw["name"] is None:
        raw["name"] = cfg.source.stem if cfg.source is not None else raw["kind"]
    if not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool) or raw["seed"] < 0:
        raise cfg.error(f"seed must be a non-negative integer, got {raw['seed']!r}", "seed")
    data = raw["data"]
    if data["source"] not in ("digits", "blobs"):
        raise cfg.error(f"data.source must be 'digits' or 'blobs', got {data['source']!r}", "data.source")
    for section in ("model", "student"):
        if raw[section]["kind"] not in KINDS:
            raise cfg.error(f"{section}.kind must be one of {KINDS}", f"{section}.kind")
    adv = raw["adversary"]["kind"]
    if adv is not None and adv not in KINDS:
        raise cfg.error(f"adversary.kind must be one of {KINDS}", "adversary.kind")
    frac = raw["kd"]["fraction"]
    if not isinstance(frac, (int, float)) or not 0 < frac <= 1:
        raise cfg.error(f"kd.fraction must lie in (0, 1], got {frac!r}", "kd.fraction")
    cfg.kd_params()
    cfg.nasty_params()
    cfg.setup()
    needs_teacher = {"distill", "teacher_self", "datafree"}
    if raw["kind"] in needs_teacher and raw["teacher"]["checkpoint"] is None:
        raise cfg.error(f"{raw['kind']} runs need teacher.checkpoint", "teacher.checkpoint")
    if raw["kind"] == "sweep":
        axis, values = raw["sweep"]["axis"], raw["sweep"]["values"]
        if axis not in SWEEP_AXES:
            raise cfg.error(f"sweep.axis must be one of {SWEEP_AXES}, got {axis!r}", "sweep.axis")
        if not isinstance(values, list) or not values:
            raise cfg.error("sweep.values must be a non-empty list", "sweep.values")
