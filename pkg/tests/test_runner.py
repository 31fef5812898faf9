import csv
import json
from pathlib import Path

import numpy as np
import pytest

from kdlab import distill as D
from kdlab import models as M
from kdlab import runner as R
from kdlab.config import parse_config
from kdlab.datasets import save_dataset
from kdlab.errors import ConfigError

GOLDEN = Path(__file__).parent / "golden"

BLOBS = """
data:
  source: blobs
  classes: 3
  dim: 8
  train_per_class: 40
  test_per_class: 20
  separation: 4.0
model:
  kind: mlp
  widths: [16]
student:
  kind: mlp
  widths: [4]
batch_size: 32
"""


def blob_config(kind, extra="", epochs=None):
    text = f"kind: {kind}\n{BLOBS}{extra}"
    if epochs is not None:
        text += f"schedule:\n  epochs: {epochs}\n  milestones: []\n"
    return parse_config(text)


@pytest.fixture(scope="module")
def teacher_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("teacher")
    return R.execute(blob_config("train_teacher"), out)


def test_train_teacher_writes_thirty_epoch_rows(teacher_run):
    directory, summary = teacher_run
    rows = R.read_metrics(directory / "metrics.csv")
    assert rows[0] == R.METRIC_COLUMNS[:-1]
    assert len([r for r in rows[1:] if r[2] == "train" and r[3] == "loss"]) == 30
    for name in ("config.yaml", "version.json", "summary.json", "teacher.ckpt"):
        assert (directory / name).exists()
    assert summary["teacher"]["accuracy"] > 0.9


def test_run_directory_is_self_describing(teacher_run, tmp_path):
    directory, _ = teacher_run
    stamp = json.loads((directory / "version.json").read_text())
    assert stamp["seed"] == 0 and stamp["source_sha256"] == R.source_hash()
    again, _ = R.execute(parse_config((directory / "config.yaml").read_text()), tmp_path)
    assert R.read_metrics(directory / "metrics.csv") == R.read_metrics(again / "metrics.csv")
    assert (directory / "summary.json").read_text() == (again / "summary.json").read_text()


def test_metrics_values_are_finite_or_marked(teacher_run):
    directory, _ = teacher_run
    for row in R.read_metrics(directory / "metrics.csv")[1:]:
        assert row[4] == R.DIVERGED or np.isfinite(float(row[4]))


def test_wall_clock_is_the_only_dropped_column(teacher_run):
    directory, _ = teacher_run
    full = R.read_metrics(directory / "metrics.csv", drop_wall_clock=False)
    assert full[0] == R.METRIC_COLUMNS
    assert [r[:-1] for r in full] == R.read_metrics(directory / "metrics.csv")


def test_distill_with_baseline(teacher_run, tmp_path):
    directory, _ = teacher_run
    cfg = blob_config("distill", f"teacher:\n  checkpoint: {directory / 'teacher.ckpt'}\n", epochs=5)
    _, summary = R.execute(cfg, tmp_path)
    assert set(summary) == {"teacher", "baseline", "student"}
    assert summary["student"]["delta_vs_baseline"] == pytest.approx(
        summary["student"]["accuracy"] - summary["baseline"]["accuracy"])


def test_relative_checkpoint_resolved_against_config(teacher_run, tmp_path):
    directory, _ = teacher_run
    (tmp_path / "t.ckpt").write_bytes((directory / "teacher.ckpt").read_bytes())
    path = tmp_path / "self.yaml"
    path.write_text(f"kind: teacher_self\n{BLOBS}teacher:\n  checkpoint: t.ckpt\nkd:\n  baseline: false\n"
                    "schedule:\n  epochs: 2\n  milestones: []\n")
    out, summary = R.run(path, tmp_path / "out")
    assert summary["student"]["accuracy"] is not None
    assert M.load(out / "student.ckpt").spec.kind == "mlp"


def test_omega_sweep_fans_out(teacher_run, tmp_path):
    directory, _ = teacher_run
    cfg = blob_config("sweep", f"teacher:\n  checkpoint: {directory / 'teacher.ckpt'}\n"
                               "sweep:\n  axis: omega\n  values: [0.0, 0.004, 0.05]\n", epochs=4)
    out, summary = R.execute(cfg, tmp_path)
    children = sorted(p.name for p in out.iterdir() if p.is_dir())
    assert children == ["omega=0.0", "omega=0.004", "omega=0.05"]
    for child in children:
        assert (out / child / "config.yaml").exists()
        assert len(R.read_summary(out / child / "summary.csv")) == 1
    assert len(R.read_summary(out / "summary.csv")) == 3


def test_omega_zero_row_equals_normal_row(tmp_path):
    cfg = blob_config("sweep", "sweep:\n  axis: omega\n  values: [0, 0.004]\n", epochs=4)
    _, summary = R.execute(cfg, tmp_path)
    zero = summary["rows"][0]
    assert zero["nasty_teacher_acc"] == zero["normal_teacher_acc"]
    assert zero["nasty_multi_peak"] == zero["normal_multi_peak"]
    assert zero["student_from_nasty_acc"] == zero["student_from_normal_acc"]
    # same seed and an unchanged loss: the checkpoints are bit-identical
    assert M.load(tmp_path / "teacher.ckpt").checksum() == M.load(tmp_path / "nasty_omega=0.ckpt").checksum()


def test_sweep_summary_matches_golden(tmp_path):
    cfg = blob_config("sweep", "nasty:\n  omega: 0.05\nsweep:\n  axis: tau_s\n  values: [1.0, 4.0]\n", epochs=8)
    out, _ = R.execute(cfg, tmp_path)
    got = (out / "summary.csv").read_text()
    assert got.splitlines()[0] == ",".join(R.SUMMARY_COLUMNS)
    assert got == (GOLDEN / "sweep_tau_s.csv").read_text()


def test_sweep_entry_point_rejects_unknown_axis(tmp_path):
    path = tmp_path / "base.yaml"
    path.write_text(f"kind: train_teacher\n{BLOBS}")
    with pytest.raises(ConfigError):
        R.sweep(path, "depth", [1], tmp_path / "out")


def test_parse_values():
    assert R.parse_values("0, 0.004,0.02") == [0, 0.004, 0.02]
    assert R.parse_values("mlp,tiny_cnn") == ["mlp", "tiny_cnn"]
    with pytest.raises(ConfigError):
        R.parse_values(" , ")


def test_mid_run_failure_leaves_error_record(tmp_path):
    bad = M.build(M.ModelSpec("mlp", (4,), 3, (1, 1, 5)), seed=0)  # wrong input width
    M.save(bad, tmp_path / "bad.ckpt")
    cfg = blob_config("distill", f"teacher:\n  checkpoint: {tmp_path / 'bad.ckpt'}\n", epochs=1)
    with pytest.raises(ConfigError):
        R.execute(cfg, tmp_path / "run")
    record = json.loads((tmp_path / "run" / "error.json").read_text())
    assert record["type"] == "ConfigError"
    assert (tmp_path / "run" / "config.yaml").exists()
    assert R.read_metrics(tmp_path / "run" / "metrics.csv")[-1][2:4] == ("status", "failed")


def test_missing_checkpoint(tmp_path):
    cfg = blob_config("distill", "teacher:\n  checkpoint: nowhere.ckpt\n", epochs=1)
    with pytest.raises(ConfigError):
        R.execute(cfg, tmp_path)


def test_metrics_log_appends_under_one_header(tmp_path):
    path = tmp_path / "m.csv"
    log = R.MetricsLog(path)
    log.record("a", 1, "train", "loss", 0.5)
    log.close()
    log = R.MetricsLog(path)
    log.record("a", 2, "train", "loss", float("nan"))
    log.close()
    rows = R.read_metrics(path)
    assert rows[0] == R.METRIC_COLUMNS[:-1]
    assert rows[1:] == [("a", "1", "train", "loss", "0.5"), ("a", "2", "train", "loss", R.DIVERGED)]


@pytest.mark.parametrize("value, text", [(None, ""), (True, "1"), (3, "3"), (0.1, "0.1"),
                                         (np.float32(0.5), "0.5"), (float("inf"), R.DIVERGED)])
def test_format_value(value, text):
    assert R.format_value(value) == text


class TestLogitDump:
    @pytest.fixture(scope="class")
    @classmethod
    def dumped(cls, tmp_path_factory):
        out = tmp_path_factory.mktemp("dump")
        train, test = R.load_data(blob_config("train_teacher"))
        model = D.train_supervised(M.ModelSpec("mlp", (16,), 3, train.input_shape), train, None, 0,
                                   D.TrainingSetup(schedule=D.ScheduleSpec(3, ()))).model
        save_dataset(out / "test.kdt", test)
        M.save(model, out / "m.ckpt")
        return model, test, R.dump_logits(out / "m.ckpt", R.resolve_dataset(str(out / "test.kdt")), 4.0,
                                          out / "logits.csv")

    def test_row_count_and_header(self, dumped):
        model, test, path = dumped
        lines = path.read_text().splitlines()
        assert lines[0].startswith("# tau=4")
        assert lines[1].split(",")[:3] == ["index", "label", "logit_0"]
        assert len(lines) - 2 == len(test)
        dump = R.read_logit_dump(path)
        assert dump.logits.shape == (len(test), 3) and dump.embedding.shape == (len(test), 16)
        np.testing.assert_array_equal(dump.labels, test.labels)

    def test_probabilities_sum_to_one(self, dumped):
        _, _, path = dumped
        np.testing.assert_allclose(R.read_logit_dump(path).probs.sum(axis=1), 1.0, atol=1e-5)

    def test_multi_peak_from_dump_matches_live_model(self, dumped):
        model, test, path = dumped
        dump = R.read_logit_dump(path)
        live = D.multi_peak_statistic(model, test, tau=4.0, threshold=0.1)
        assert D.multi_peak_statistic(dump.logits, tau=dump.tau, threshold=0.1) == pytest.approx(live, abs=1e-6)

    def test_embedding_matches_features(self, dumped):
        model, test, path = dumped
        from kdlab import tensor as T
        with T.no_grad():
            feats = model.features(T.Tensor(test.inputs)).data
        np.testing.assert_allclose(R.read_logit_dump(path).embedding, feats, rtol=1e-6, atol=1e-6)


def test_resolve_dataset_errors(tmp_path):
    with pytest.raises(ConfigError):
        R.resolve_dataset(str(tmp_path / "nothing"))
    with pytest.raises(ConfigError):
        R.resolve_dataset("digits:validation")


def test_golden_header_is_schema():
    with open(GOLDEN / "sweep_tau_s.csv", newline="") as fh:
        assert tuple(next(csv.reader(fh))) == R.SUMMARY_COLUMNS
