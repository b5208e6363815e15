import csv
import json

import numpy as np
import pytest

from vesper import report
from vesper.audio import energy_profile
from vesper.downstream import compute_metrics
from vesper.errors import ContractViolation, IOFailure
from vesper.masking import MaskConfig, build_plan

from conftest import tone_samples
from vesper.audio import AudioClip

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def step(epoch, s, total, **kw):
    rec = {"event": "step", "epoch": epoch, "step": s, "lr": 1e-3,
           "l_l": total / 2, "l_h": total / 4, "l_x": total / 4, "total": total}
    rec.update(kw)
    return rec


def epoch_rec(e, **kw):
    rec = {"event": "epoch", "epoch": e, "lr": 1e-2, "train_ce": 0.5,
           "train_wa": 0.8, "eval_wa": 0.7, "eval_ua": 0.6, "eval_wf1": 0.65}
    rec.update(kw)
    return rec


PRETRAIN_LOG = [
    {"event": "config", "train": {}},
    step(0, 0, 4.0), step(0, 1, 3.0),
    {"event": "epoch", "epoch": 0, "lr": 1e-3, "mean_total": 3.5},
    step(1, 0, 2.0), step(1, 1, 1.0),
    {"event": "epoch", "epoch": 1, "lr": 5e-4, "mean_total": 1.5},
]

FINETUNE_LOG = [
    {"event": "config", "train": {}},
    epoch_rec(0, eval_wa=0.5),
    epoch_rec(1, eval_wa=0.9, train_wa=1.0),
]


def test_read_log_round_trip(tmp_path):
    p = tmp_path / "log.jsonl"
    p.write_text("\n".join(json.dumps(r) for r in PRETRAIN_LOG) + "\n\n")
    assert report.read_log(p) == PRETRAIN_LOG


def test_read_log_errors(tmp_path):
    with pytest.raises(IOFailure, match="cannot read"):
        report.read_log(tmp_path / "absent.jsonl")
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"event": "step"}\nnot json\n')
    with pytest.raises(IOFailure, match="bad.jsonl:2"):
        report.read_log(bad)


def test_step_csv_columns_and_rows(tmp_path):
    path = report.write_step_csv(PRETRAIN_LOG, tmp_path / "steps.csv")
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    assert list(rows[0]) == ["epoch", "step", "lr", "l_l", "l_h", "l_x", "total"]
    assert float(rows[0]["total"]) == 4.0
    assert float(rows[-1]["total"]) == 1.0
    assert rows[2]["epoch"] == "1"


def test_step_csv_includes_kd_column_when_present(tmp_path):
    log = [step(0, 0, 2.0, kd=2.0)]
    path = report.write_step_csv(log, tmp_path / "steps.csv")
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert "kd" in rows[0]
    assert float(rows[0]["kd"]) == 2.0


def test_step_csv_needs_steps(tmp_path):
    with pytest.raises(ContractViolation, match="no step records"):
        report.write_step_csv(FINETUNE_LOG, tmp_path / "x.csv")


def test_epoch_csv(tmp_path):
    path = report.write_epoch_csv(FINETUNE_LOG, tmp_path / "epochs.csv")
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    assert float(rows[1]["eval_wa"]) == 0.9
    assert "event" not in rows[0]


def _assert_png(path):
    assert path.exists()
    assert path.read_bytes()[:8] == PNG_MAGIC


def test_loss_figure_writes_png(tmp_path):
    _assert_png(report.loss_figure(PRETRAIN_LOG, tmp_path / "loss.png"))


def test_lr_figure_writes_png(tmp_path):
    _assert_png(report.lr_figure(PRETRAIN_LOG, tmp_path / "lr.png"))


def test_accuracy_figure_writes_png(tmp_path):
    _assert_png(report.accuracy_figure(FINETUNE_LOG, tmp_path / "acc.png"))


def test_accuracy_figure_needs_eval_records(tmp_path):
    with pytest.raises(ContractViolation):
        report.accuracy_figure(PRETRAIN_LOG, tmp_path / "acc.png")


def test_confusion_figure(tmp_path):
    m = compute_metrics(np.array([[9, 1], [4, 6]]), ["calm", "tense"])
    m.fold = 2
    _assert_png(report.confusion_figure(m, tmp_path / "conf.png"))


def test_mask_figure(tmp_path):
    clip = AudioClip(tone_samples(250.0, 0.8, 0.5, seed=0), 16000)
    profile = energy_profile(clip)
    cfg = MaskConfig(phoneme_span_ms=60, word_span_ms=100, phoneme_count=4, word_count=2)
    plan = build_plan(cfg, profile, profile.num_frames, seed=1)
    _assert_png(report.mask_figure(profile, plan, tmp_path / "mask.png"))


def test_render_run_report_pretrain(tmp_path):
    written = report.render_run_report(PRETRAIN_LOG, tmp_path / "out")
    names = {p.name for p in written}
    assert names == {"steps.csv", "losses.png", "epochs.csv", "lr.png"}
    for p in written:
        assert p.exists()


def test_render_run_report_finetune_with_metrics(tmp_path):
    m = compute_metrics(np.array([[2, 0], [0, 2]]), ["a", "b"])
    written = report.render_run_report(FINETUNE_LOG, tmp_path / "out", metrics=m)
    names = {p.name for p in written}
    assert names == {"epochs.csv", "lr.png", "accuracy.png", "confusion.png"}


def test_render_run_report_rejects_empty_log(tmp_path):
    with pytest.raises(ContractViolation, match="nothing to report"):
        report.render_run_report([{"event": "config"}], tmp_path / "out")
