"""Config-driven runs, sweeps, metric logs and logit dumps.

Every run writes into its own directory under the output root
(``$KDLAB_OUT``, default ``./kdlab-runs``):

* ``config.yaml``   -- the fully resolved config, enough to rerun it
* ``version.json``  -- package version, a hash of the package source and the seed
* ``metrics.csv``   -- one flat table of MetricRecords
* ``summary.json``  -- final numbers of the run
* ``*.ckpt``        -- every model trained along the way
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import platform
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import datafree as DF
from . import distill as D
from . import models as M
from .config import SWEEP_AXES, ExperimentConfig, load_config
from .datasets import (
    Dataset,
    blob_splits,
    default_data_root,
    ensure_digit_corpus,
    load_dataset,
    load_digit_corpus,
    normalize,
    save_dataset,
)
from .errors import ConfigError
from .models import Model, ModelSpec
from .objectives import softmax_temperature
from . import tensor as T

METRIC_COLUMNS = ("run_id", "epoch", "split", "metric", "value", "wall_clock")
DIVERGED = "DIVERGED"

SUMMARY_COLUMNS = (
    "axis", "value",
    "normal_teacher_acc", "nasty_teacher_acc", "teacher_gap",
    "normal_multi_peak", "nasty_multi_peak",
    "baseline_acc", "student_from_normal_acc", "student_from_nasty_acc",
    "normal_vs_baseline", "nasty_vs_normal",
)

# sweep axis -> config field it overrides
AXIS_FIELDS = {
    "omega": "nasty.omega",
    "tau_s": "kd.tau_s",
    "alpha": "kd.alpha",
    "fraction": "kd.fraction",
    "adversary_arch": "adversary.kind",
    "student_arch": "student.kind",
}


def output_root() -> Path:
    return Path(os.environ.get("KDLAB_OUT", "kdlab-runs"))


def source_hash() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def version_stamp(seed: int) -> dict:
    return {"package": "kdlab", "version": __version__, "source_sha256": source_hash(), "seed": seed,
            "numpy": np.__version__, "python": platform.python_version()}


def format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    v = float(value)
    return repr(v) if math.isfinite(v) else DIVERGED


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

class MetricsLog:
    """Append-only CSV of MetricRecords with a single header line."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.start = time.perf_counter()
        fresh = not self.path.exists()
        self._fh = open(self.path, "a", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        if fresh:
            self._writer.writerow(METRIC_COLUMNS)
            self._fh.flush()

    def record(self, run_id: str, epoch: int, split: str, metric: str, value) -> None:
        wall = format(time.perf_counter() - self.start, ".3f")
        self._writer.writerow((run_id, epoch, split, metric, format_value(value), wall))
        self._fh.flush()

    def epoch_hook(self, run_id: str):
        def hook(stats):
            self.record(run_id, stats.epoch, "train", "lr", stats.lr)
            self.record(run_id, stats.epoch, "train", "loss", stats.train_loss)
            self.record(run_id, stats.epoch, "train", "accuracy", stats.train_acc)
            if stats.test_acc is not None:
                self.record(run_id, stats.epoch, "test", "accuracy", stats.test_acc)
                self.record(run_id, stats.epoch, "test", "loss", stats.test_loss)
        return hook

    def close(self) -> None:
        self._fh.close()


def read_metrics(path, drop_wall_clock: bool = True) -> list[tuple[str, ...]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return [tuple(r[:-1]) if drop_wall_clock else tuple(r) for r in rows]


# ---------------------------------------------------------------------------
# run context
# ---------------------------------------------------------------------------

def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.section("data")
    if d["source"] == "blobs":
        train, test = blob_splits(int(d["classes"]), int(d["train_per_class"]), int(d["test_per_class"]),
                                  int(d["dim"]), float(d["separation"]), int(d["seed"]))
        return normalize(train, test)
    root = Path(d["root"]) if d["root"] else (
        default_data_root() / f"seed{d['seed']}-{d['train_per_class']}-{d['test_per_class']}")
    return ensure_digit_corpus(root, train_per_class=int(d["train_per_class"]),
                               test_per_class=int(d["test_per_class"]), seed=int(d["seed"]))


@dataclass
class RunContext:
    cfg: ExperimentConfig
    directory: Path
    train: Dataset
    test: Dataset
    log: MetricsLog
    cache: dict = field(default_factory=dict)

    def spec(self, section: str, kind: str | None = None) -> ModelSpec:
        spec = self.cfg.model_spec(section, self.train.input_shape, self.train.num_classes)
        if kind is not None and kind != spec.kind:
            spec = ModelSpec(kind, (), spec.num_classes, spec.input_shape)
        return spec

    def final(self, run_id: str, result: D.RunResult, extra: dict | None = None) -> dict:
        report = result.report
        last = report.epochs[-1].epoch if report.epochs else 0
        if report.diverged:
            self.log.record(run_id, last + 1, "train", "status", float("nan"))
        out = {"accuracy": result.summary.get("accuracy")}
        out.update(extra or {})
        for key, value in out.items():
            if value is not None:
                self.log.record(run_id, last, "final", key, value)
        out["diverged"] = report.diverged
        return out

    def checkpoint(self, run_id: str, model: Model) -> Path:
        path = self.directory / f"{run_id}.ckpt"
        M.save(model, path)
        return path


def _resolve_path(ref: str, cfg: ExperimentConfig) -> Path:
    path = Path(ref)
    if path.is_absolute() or path.exists():
        return path
    for base in ([cfg.source.parent] if cfg.source else []) + [output_root()]:
        if (base / path).exists():
            return base / path
    raise ConfigError(f"checkpoint {ref} not found", field="checkpoint")


def _load_ref(ctx: RunContext, section: str) -> Model:
    ref = ctx.cfg.section(section)["checkpoint"]
    return M.load(_resolve_path(ref, ctx.cfg))


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_supervised(ctx: RunContext, run_id: str, spec: ModelSpec, fraction: float = 1.0) -> tuple[Model, dict]:
    key = ("supervised", spec, fraction)
    if key in ctx.cache:
        return ctx.cache[key]
    result = D.train_supervised(spec, ctx.train, ctx.test, ctx.cfg.seed, ctx.cfg.setup(), fraction,
                                on_epoch=ctx.log.epoch_hook(run_id))
    summary = ctx.final(run_id, result, {"multi_peak": _multi_peak(ctx, result.model)})
    ctx.checkpoint(run_id, result.model)
    ctx.cache[key] = (result.model, summary)
    return result.model, summary


def stage_nasty(ctx: RunContext, run_id: str, adversary: Model, spec: ModelSpec, omega: float | None = None) -> tuple[Model, dict]:
    params = ctx.cfg.nasty_params()
    if omega is not None:
        params = type(params)(float(omega), params.tau_a)
    run = D.NastyRun(adversary, spec, params, ctx.cfg.seed,
                     bool(ctx.cfg.section("nasty")["init_from_adversary"]), ctx.cfg.setup())
    result = D.train_nasty_teacher(run, ctx.train, ctx.test, on_epoch=ctx.log.epoch_hook(run_id))
    summary = ctx.final(run_id, result, {
        "adversary_accuracy": result.summary.get("adversary_accuracy"),
        "multi_peak": _multi_peak(ctx, result.model),
        "omega": params.omega,
    })
    ctx.checkpoint(run_id, result.model)
    return result.model, summary


def stage_distill(ctx: RunContext, run_id: str, teacher: Model, spec: ModelSpec, kd=None,
                  fraction: float | None = None) -> dict:
    kd = kd or ctx.cfg.kd_params()
    fraction = float(ctx.cfg.section("kd")["fraction"]) if fraction is None else fraction
    run = D.DistillRun(teacher, spec, kd, fraction, ctx.cfg.seed, setup=ctx.cfg.setup())
    result = D.train_student(run, ctx.train, ctx.test, on_epoch=ctx.log.epoch_hook(run_id))
    ctx.checkpoint(run_id, result.model)
    return ctx.final(run_id, result, {"train_size": result.summary["train_size"]})


def _multi_peak(ctx: RunContext, model: Model) -> float:
    return D.multi_peak_statistic(model, ctx.test, tau=ctx.cfg.nasty_params().tau_a)


# ---------------------------------------------------------------------------
# run kinds
# ---------------------------------------------------------------------------

def _run_train_teacher(ctx: RunContext) -> dict:
    _, summary = stage_supervised(ctx, "teacher", ctx.spec("model"))
    return {"teacher": summary}


def _adversary(ctx: RunContext, kind: str | None = None) -> tuple[Model, dict]:
    adv = ctx.cfg.section("adversary")
    if adv["checkpoint"] is not None and kind is None:
        model = _load_ref(ctx, "adversary")
        return model, {"accuracy": D.evaluate(model, ctx.test)[0]}
    kind = kind or adv["kind"] or ctx.cfg.section("model")["kind"]
    widths = tuple(adv["widths"] or ()) if kind == adv["kind"] else ()
    spec = ModelSpec(kind, widths, ctx.train.num_classes, ctx.train.input_shape)
    return stage_supervised(ctx, f"adversary_{kind}", spec)


def _run_train_nasty(ctx: RunContext) -> dict:
    adversary, adv_summary = _adversary(ctx)
    _, summary = stage_nasty(ctx, "nasty", adversary, ctx.spec("model"))
    return {"adversary": adv_summary, "nasty": summary}


def _run_distill(ctx: RunContext, self_distill: bool = False) -> dict:
    teacher = _load_ref(ctx, "teacher")
    spec = teacher.spec if self_distill else ctx.spec("student")
    out = {}
    fraction = float(ctx.cfg.section("kd")["fraction"])
    if ctx.cfg.section("kd")["baseline"]:
        _, out["baseline"] = stage_supervised(ctx, "baseline", spec, fraction)
    out["student"] = stage_distill(ctx, "student", teacher, spec)
    out["teacher"] = {"accuracy": D.evaluate(teacher, ctx.test)[0]}
    if "baseline" in out and out["student"]["accuracy"] is not None and out["baseline"]["accuracy"] is not None:
        out["student"]["delta_vs_baseline"] = out["student"]["accuracy"] - out["baseline"]["accuracy"]
    return out


def _run_datafree(ctx: RunContext) -> dict:
    teacher = _load_ref(ctx, "teacher")
    inv = ctx.cfg.inversion_spec(ctx.train.mean, ctx.train.std)
    setup = ctx.cfg.setup(epochs=int(ctx.cfg.section("inversion")["epochs"]))
    run = DF.DataFreeRun(teacher, ctx.spec("student"), inv, ctx.cfg.kd_params(), ctx.cfg.seed, setup)
    result, synthetic = DF.datafree_distill(run, ctx.test)
    save_dataset(ctx.directory / "synthetic.kdt", synthetic)
    ctx.checkpoint("student", result.model)
    extra = {k: result.summary[k] for k in ("teacher_confidence", "mean_tv")}
    summary = ctx.final("student", result, extra)
    summary["synthetic_checksum"] = result.summary["synthetic_checksum"]
    return {"teacher": {"accuracy": D.evaluate(teacher, ctx.test)[0]}, "student": summary}


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def parse_values(text: str) -> list:
    """``"0,0.004"`` -> ``[0, 0.004]``; entries are read as YAML scalars."""
    values = [yaml.safe_load(v.strip()) for v in text.split(",") if v.strip()]
    if not values:
        raise ConfigError("sweep values must be non-empty", field="sweep.values")
    return values


def _value_label(value) -> str:
    return str(value).replace("/", "_")


def _shared_teachers(ctx: RunContext) -> dict:
    if "teachers" in ctx.cache:
        return ctx.cache["teachers"]
    cfg = ctx.cfg
    if cfg.section("teacher")["checkpoint"] is not None:
        normal = _load_ref(ctx, "teacher")
        normal_summary = {"accuracy": D.evaluate(normal, ctx.test)[0], "multi_peak": _multi_peak(ctx, normal)}
    else:
        normal, normal_summary = stage_supervised(ctx, "teacher", ctx.spec("model"))
    shared = {"normal": (normal, normal_summary)}
    ctx.cache["teachers"] = shared
    return shared


def _nasty_for(ctx: RunContext, axis: str, value) -> tuple[Model, dict]:
    cfg = ctx.cfg
    normal, _ = _shared_teachers(ctx)["normal"]
    if axis == "omega":
        return stage_nasty(ctx, f"nasty_omega={_value_label(value)}", normal, normal.spec, float(value))
    if axis == "adversary_arch":
        adversary, _ = _adversary(ctx, str(value))
        return stage_nasty(ctx, f"nasty_adv={value}", adversary, normal.spec)
    if "nasty" not in ctx.cache:
        if cfg.section("nasty_teacher")["checkpoint"] is not None:
            nasty = _load_ref(ctx, "nasty_teacher")
            ctx.cache["nasty"] = (nasty, {"accuracy": D.evaluate(nasty, ctx.test)[0],
                                          "multi_peak": _multi_peak(ctx, nasty)})
        else:
            ctx.cache["nasty"] = stage_nasty(ctx, "nasty", normal, normal.spec)
    return ctx.cache["nasty"]


def sweep_point(ctx: RunContext, axis: str, value) -> dict:
    """One row of a sweep summary: both teachers, a baseline and two students."""
    cfg = ctx.cfg.with_value(AXIS_FIELDS[axis], value)
    kd = cfg.kd_params()
    fraction = float(cfg.section("kd")["fraction"])
    student_kind = cfg.section("student")["kind"]
    label = f"{axis}={_value_label(value)}"
    normal, normal_summary = _shared_teachers(ctx)["normal"]
    nasty, nasty_summary = _nasty_for(ctx, axis, value)
    spec = ctx.spec("student", student_kind)
    _, base = stage_supervised(ctx, f"baseline_{student_kind}_f{fraction:g}", spec, fraction)
    key = ("from_normal", student_kind, kd, fraction)
    if key not in ctx.cache:
        ctx.cache[key] = stage_distill(ctx, f"student_normal_{label}", normal, spec, kd, fraction)
    from_normal = ctx.cache[key]
    from_nasty = stage_distill(ctx, f"student_nasty_{label}", nasty, spec, kd, fraction)

    def diff(a, b):
        return None if a is None or b is None else a - b

    return {
        "axis": axis, "value": value,
        "normal_teacher_acc": normal_summary["accuracy"],
        "nasty_teacher_acc": nasty_summary["accuracy"],
        "teacher_gap": diff(nasty_summary["accuracy"], normal_summary["accuracy"]),
        "normal_multi_peak": normal_summary.get("multi_peak"),
        "nasty_multi_peak": nasty_summary.get("multi_peak"),
        "baseline_acc": base["accuracy"],
        "student_from_normal_acc": from_normal["accuracy"],
        "student_from_nasty_acc": from_nasty["accuracy"],
        "normal_vs_baseline": diff(from_normal["accuracy"], base["accuracy"]),
        "nasty_vs_normal": diff(from_nasty["accuracy"], from_normal["accuracy"]),
    }


def write_summary(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        for row in rows:
            writer.writerow([row["axis"], _value_label(row["value"])]
                            + [format_value(row[c]) for c in SUMMARY_COLUMNS[2:]])


def read_summary(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _run_sweep(ctx: RunContext) -> dict:
    axis = ctx.cfg.section("sweep")["axis"]
    values = list(ctx.cfg.section("sweep")["values"])
    rows = []
    for value in values:
        child_dir = ctx.directory / f"{axis}={_value_label(value)}"
        child_dir.mkdir(parents=True, exist_ok=True)
        child_cfg = ctx.cfg.with_value("sweep.values", [value]).with_value(AXIS_FIELDS[axis], value)
        (child_dir / "config.yaml").write_text(child_cfg.to_yaml())
        row = sweep_point(ctx, axis, value)
        (child_dir / "summary.json").write_text(json.dumps(_jsonable(row), indent=2, sort_keys=True) + "\n")
        write_summary(child_dir / "summary.csv", [row])
        rows.append(row)
    write_summary(ctx.directory / "summary.csv", rows)
    return {"rows": rows}


RUNNERS = {
    "train_teacher": _run_train_teacher,
    "train_nasty": _run_train_nasty,
    "distill": _run_distill,
    "teacher_self": lambda ctx: _run_distill(ctx, self_distill=True),
    "datafree": _run_datafree,
    "sweep": _run_sweep,
}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else DIVERGED
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def run_directory(cfg: ExperimentConfig, out_dir=None) -> Path:
    return Path(out_dir) if out_dir is not None else output_root() / cfg.name


def execute(cfg: ExperimentConfig, out_dir=None) -> tuple[Path, dict]:
    """Run ``cfg`` and write its artifacts.  Returns (run directory, summary)."""
    directory = run_directory(cfg, out_dir)
    directory.mkdir(parents=True, exist_ok=True)
    metrics = directory / "metrics.csv"
    if metrics.exists():
        metrics.unlink()
    for stale in ("error.json", "summary.json"):
        (directory / stale).unlink(missing_ok=True)
    (directory / "config.yaml").write_text(cfg.to_yaml())
    (directory / "version.json").write_text(json.dumps(version_stamp(cfg.seed), indent=2) + "\n")
    train, test = load_data(cfg)
    log = MetricsLog(metrics)
    ctx = RunContext(cfg, directory, train, test, log)
    try:
        summary = RUNNERS[cfg.kind](ctx)
    except Exception as exc:
        log.record("run", 0, "status", "failed", 1)
        (directory / "error.json").write_text(json.dumps({
            "type": type(exc).__name__, "message": str(exc),
            "traceback": traceback.format_exc(),
        }, indent=2) + "\n")
        raise
    finally:
        log.close()
    (directory / "summary.json").write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n")
    return directory, summary


def run(config_path, out_dir=None) -> tuple[Path, dict]:
    return execute(load_config(config_path), out_dir)


def sweep(config_path, axis: str, values: list, out_dir=None) -> tuple[Path, dict]:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}", field="axis")
    cfg = load_config(config_path)
    cfg = cfg.with_value("sweep.axis", axis).with_value("sweep.values", list(values))
    cfg.raw["kind"] = "sweep"
    cfg.raw["name"] = f"{cfg.name}-sweep-{axis}"
    return execute(cfg, out_dir)


# ---------------------------------------------------------------------------
# logit dumps
# ---------------------------------------------------------------------------

def resolve_dataset(ref: str) -> Dataset:
    """A tensor file, a directory holding the IDX corpus, or ``digits[:split]``."""
    split = "test"
    if ":" in ref and not Path(ref).exists():
        ref, split = ref.rsplit(":", 1)
    if split not in ("train", "test"):
        raise ConfigError(f"unknown split {split!r}", field="data")
    if ref == "digits":
        train, test = ensure_digit_corpus(default_data_root() / "seed0-400-200")
    elif Path(ref).is_dir():
        train, test = load_digit_corpus(ref)
    elif Path(ref).is_file():
        return load_dataset(ref)
    else:
        raise ConfigError(f"dataset {ref} not found", field="data")
    return train if split == "train" else test


def dump_logits(model, data: Dataset, tau: float, out) -> Path:
    """Write label, raw logits, tempered probabilities and penultimate features per sample."""
    model = D.resolve_model(model)
    model.eval()
    logits = model.predict_logits(data.inputs).astype(np.float64)
    with T.no_grad():
        feats = np.concatenate([model.features(T.Tensor(data.inputs[i:i + 512], dtype=model.dtype)).data
                                for i in range(0, len(data), 512)]).astype(np.float64)
        probs = softmax_temperature(T.Tensor(logits), tau).data
    k, e = logits.shape[1], feats.shape[1]
    header = (["index", "label"] + [f"logit_{i}" for i in range(k)] + [f"prob_{i}" for i in range(k)]
              + [f"emb_{i}" for i in range(e)])
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        fh.write(f"# tau={tau:g} classes={k} embedding={e}; prob_* = softmax(logit_* / tau)\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(len(data)):
            writer.writerow([i, int(data.labels[i])] + [format(v, ".17g") for v in logits[i]]
                            + [format(v, ".17g") for v in probs[i]] + [format(v, ".9g") for v in feats[i]])
    return out


@dataclass
class LogitDump:
    labels: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    embedding: np.ndarray
    tau: float


def read_logit_dump(path) -> LogitDump:
    with open(path) as fh:
        first = fh.readline()
        tau = float(first.split("tau=")[1].split()[0])
        header = fh.readline().strip().split(",")
        table = np.loadtxt(fh, delimiter=",", ndmin=2)
    cols = {name: i for i, name in enumerate(header)}

    def block(prefix):
        idx = [cols[c] for c in header if c.startswith(prefix)]
        return table[:, idx]

    return LogitDump(table[:, cols["label"]].astype(np.int64), block("logit_"), block("prob_"),
                     block("emb_"), tau)


__all__ = ["MetricsLog", "execute", "run", "sweep", "dump_logits", "read_logit_dump", "read_metrics",
           "read_summary", "output_root", "version_stamp", "SUMMARY_COLUMNS", "METRIC_COLUMNS", "DIVERGED"]
