import json

import numpy as np
import pytest

from conftest import (
    tiny_mask_config, tiny_student_config, tiny_teacher_config, tone_corpus, write_clip,
)
from vesper.audio import ManifestEntry
from vesper.downstream import ClassifierConfig, RepresentationMode
from vesper.encoder import make_state
from vesper.errors import ContractViolation, IOFailure, ManifestError
from vesper.tensor import Tensor
from vesper.trainer import (
    AdamW, SGD, TrainConfig, cosine_lr, derive_seed, finetune_defaults,
    finetune_loop, pretrain_loop,
)

PRETRAIN_DEFAULTS = TrainConfig()


# ---------------------------------------------------------------------------
# schedule


def test_lr_hits_base_at_end_of_warmup():
    assert cosine_lr(5, PRETRAIN_DEFAULTS) == 5e-4


def test_lr_hits_min_at_last_epoch():
    assert cosine_lr(99, PRETRAIN_DEFAULTS) == pytest.approx(5e-6, abs=0)


def test_lr_warmup_is_linear():
    values = [cosine_lr(e, PRETRAIN_DEFAULTS) for e in range(5)]
    assert values == [pytest.approx(5e-4 * (e + 1) / 5) for e in range(5)]


def test_lr_decay_midpoint():
    # T_c = 94, so epoch 52 sits exactly halfway through the cosine
    assert cosine_lr(52, PRETRAIN_DEFAULTS) == pytest.approx((5e-4 + 5e-6) / 2, abs=1e-9)


def test_lr_non_increasing_after_warmup():
    values = [cosine_lr(e, PRETRAIN_DEFAULTS) for e in range(5, 100)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_lr_no_warmup_starts_at_base():
    cfg = finetune_defaults()
    assert cfg.warmup_epochs == 0
    assert cosine_lr(0, cfg) == 7e-4
    assert cosine_lr(49, cfg) == pytest.approx(7e-6, abs=0)


def test_lr_epoch_out_of_range():
    with pytest.raises(ContractViolation):
        cosine_lr(100, PRETRAIN_DEFAULTS)
    with pytest.raises(ContractViolation):
        cosine_lr(-1, PRETRAIN_DEFAULTS)


def test_table_defaults():
    p = PRETRAIN_DEFAULTS
    assert (p.epochs, p.warmup_epochs, p.batch_size) == (100, 5, 32)
    assert (p.base_lr, p.min_lr) == (5e-4, 5e-6)
    assert (p.optimizer, p.beta1, p.beta2, p.weight_decay) == ("adamw", 0.9, 0.999, 0.01)
    f = finetune_defaults()
    assert (f.epochs, f.base_lr, f.min_lr) == (50, 7e-4, 7e-6)
    assert (f.optimizer, f.momentum, f.weight_decay) == ("sgd", 0.9, 0.01)


# ---------------------------------------------------------------------------
# optimizers


def _scalar_param(value=1.0, grad=None):
    p = Tensor(np.array(value), requires_grad=True)
    if grad is not None:
        p.grad = np.array(grad)
    return p


def test_adamw_first_step_is_minus_lr():
    p = _scalar_param(0.0, grad=1.0)
    opt = AdamW({"p": p}, weight_decay=0.0)
    opt.step(lr=0.1)
    # bias correction makes the first step exactly -lr up to eps
    assert p.data == pytest.approx(-0.1, rel=1e-6)


def test_adamw_zero_grad_no_decay_unchanged():
    p = _scalar_param(3.0, grad=0.0)
    opt = AdamW({"p": p}, weight_decay=0.0)
    opt.step(lr=0.1)
    assert p.data == pytest.approx(3.0)


def test_adamw_decoupled_decay_shrinks():
    p = _scalar_param(2.0, grad=0.0)
    opt = AdamW({"p": p}, weight_decay=0.01)
    opt.step(lr=0.1)
    assert p.data == pytest.approx(2.0 * (1 - 0.1 * 0.01))


def test_adamw_skips_none_grads():
    p = _scalar_param(2.0, grad=None)
    opt = AdamW({"p": p}, weight_decay=0.5)
    opt.step(lr=0.1)
    assert p.data == 2.0
    assert opt.steps["p"] == 0


def test_sgd_momentum_zero_is_plain_descent():
    p = _scalar_param(1.0, grad=0.5)
    opt = SGD({"p": p}, momentum=0.0, weight_decay=0.0)
    opt.step(lr=0.2)
    assert p.data == pytest.approx(1.0 - 0.2 * 0.5)


def test_sgd_second_velocity_is_1_9_g():
    p = _scalar_param(0.0, grad=2.0)
    opt = SGD({"p": p}, momentum=0.9, weight_decay=0.0)
    opt.step(lr=0.0)
    p.grad = np.array(2.0)
    opt.step(lr=0.0)
    assert opt.velocity["p"] == pytest.approx(1.9 * 2.0)


def test_sgd_zero_grad_zero_decay_unchanged():
    p = _scalar_param(4.0, grad=0.0)
    opt = SGD({"p": p}, momentum=0.9)
    opt.step(lr=0.3)
    assert p.data == pytest.approx(4.0)


def test_sgd_weight_decay_enters_velocity():
    p = _scalar_param(2.0, grad=0.0)
    opt = SGD({"p": p}, momentum=0.0, weight_decay=0.1)
    opt.step(lr=1.0)
    assert p.data == pytest.approx(2.0 - 0.2)


# ---------------------------------------------------------------------------
# pretraining loop


def _quick_cfg(**kw):
    kw.setdefault("epochs", 2)
    kw.setdefault("warmup_epochs", 1)
    kw.setdefault("batch_size", 2)
    kw.setdefault("clip_duration_s", 0.5)
    kw.setdefault("seed", 7)
    return TrainConfig(**kw)


def test_pretrain_runs_and_logs(corpus, tiny_pair, tmp_path):
    teacher, student = tiny_pair
    result = pretrain_loop(
        corpus, teacher, student, _quick_cfg(), tiny_mask_config(),
        out_dir=tmp_path / "run", log_path=tmp_path / "log.jsonl",
    )
    events = [r["event"] for r in result.log]
    assert events[0] == "config"
    assert events.count("epoch") == 2
    steps = [r for r in result.log if r["event"] == "step"]
    assert len(steps) == 4  # 4 clips / batch 2 = 2 steps x 2 epochs
    for r in steps:
        assert set(r) >= {"epoch", "step", "lr", "l_l", "l_h", "l_x", "total"}
        assert np.isfinite(r["total"])
    assert (tmp_path / "run" / "student-epoch000.vspr").exists()
    assert (tmp_path / "run" / "student-epoch001.vspr").exists()
    assert result.final_checkpoint.exists()
    # log file mirrors the records
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert [json.loads(l) for l in lines] == result.log


def test_pretrain_config_echoed_in_log_header(corpus, tiny_pair):
    teacher, student = tiny_pair
    cfg = _quick_cfg()
    result = pretrain_loop(corpus, teacher, student, cfg, tiny_mask_config())
    header = result.log[0]
    assert header["train"]["base_lr"] == cfg.base_lr
    assert header["train"]["optimizer"] == "adamw"
    assert header["mask"]["phoneme_count"] == 4


def test_pretrain_updates_only_student_side(corpus, tiny_pair):
    teacher, student = tiny_pair
    t_before = {n: p.data.copy() for n, p in teacher.params.items()}
    s_before = {n: p.data.copy() for n, p in student.params.items()}
    result = pretrain_loop(corpus, teacher, student, _quick_cfg(), tiny_mask_config())
    for n, before in t_before.items():
        assert np.array_equal(teacher.params[n].data, before), f"teacher {n} moved"
    changed = {n for n, before in s_before.items()
               if not np.array_equal(student.params[n].data, before)}
    assert all(n.startswith("layer.") or n == "mask_embedding" for n in changed)
    assert "mask_embedding" in changed
    assert any(n.startswith("layer.") for n in changed)
    for n in student.params:
        if n.startswith(("frontend.", "final_norm.")):
            assert n not in changed, f"frozen {n} moved"
    # predictors trained too
    for p in result.predictors.trainable().values():
        assert p.grad is not None


def test_pretrain_same_seed_bit_identical(corpus, tiny_pair):
    cfg = _quick_cfg()
    logs = []
    finals = []
    for _ in range(2):
        teacher = make_state(tiny_teacher_config(), seed=1)
        student = make_state(tiny_student_config(), seed=2)
        result = pretrain_loop(corpus, teacher, student, cfg, tiny_mask_config())
        logs.append(result.log)
        finals.append({n: p.data.copy() for n, p in student.params.items()})
    assert logs[0] == logs[1]
    for n in finals[0]:
        assert np.array_equal(finals[0][n], finals[1][n])


def test_pretrain_differs_across_seeds(corpus, tiny_pair):
    results = []
    for seed in (1, 2):
        teacher = make_state(tiny_teacher_config(), seed=1)
        student = make_state(tiny_student_config(), seed=2)
        r = pretrain_loop(corpus, teacher, student, _quick_cfg(seed=seed), tiny_mask_config())
        results.append([rec for rec in r.log if rec["event"] == "step"])
    assert results[0] != results[1]


def test_pretrain_zero_weights_is_noop(corpus, tiny_pair):
    teacher, student = tiny_pair
    before = {n: p.data.copy() for n, p in student.params.items()}
    pretrain_loop(
        corpus, teacher, student,
        _quick_cfg(lam_l=0.0, lam_h=0.0, lam_x=0.0, weight_decay=0.0),
        tiny_mask_config(),
    )
    for n, b in before.items():
        assert np.array_equal(student.params[n].data, b), n


def test_pretrain_kd_mode(corpus, tiny_pair):
    teacher, student = tiny_pair
    result = pretrain_loop(
        corpus, teacher, student, _quick_cfg(kd_mode=True), tiny_mask_config(),
    )
    steps = [r for r in result.log if r["event"] == "step"]
    assert all("kd" in r and r["kd"] == r["total"] for r in steps)
    assert all(r["l_l"] == 0.0 and r["l_h"] == 0.0 for r in steps)


def test_pretrain_skips_unreadable_clip(corpus, tmp_path, tiny_pair, capsys):
    bad = tmp_path / "broken.wav"
    bad.write_bytes(b"not audio at all")
    entries = corpus + [ManifestEntry(bad, "tone", "spkX", "train")]
    teacher, student = tiny_pair
    result = pretrain_loop(
        entries, teacher, student,
        _quick_cfg(epochs=1, batch_size=5), tiny_mask_config(),
    )
    assert "broken.wav" in capsys.readouterr().err
    steps = [r for r in result.log if r["event"] == "step"]
    assert steps and steps[0]["batch_clips"] == 4


def test_pretrain_all_unreadable_aborts(tmp_path, tiny_pair):
    bad = tmp_path / "junk.wav"
    bad.write_bytes(b"RIFFgarbage")
    entries = [ManifestEntry(bad, "tone", "s", "train")]
    teacher, student = tiny_pair
    with pytest.raises(IOFailure):
        pretrain_loop(entries, teacher, student,
                      _quick_cfg(epochs=1, batch_size=1), tiny_mask_config())


def test_pretrain_empty_manifest_rejected(tiny_pair):
    teacher, student = tiny_pair
    with pytest.raises(ManifestError):
        pretrain_loop([], teacher, student, _quick_cfg(), tiny_mask_config())


def test_pretrain_batch_larger_than_manifest_rejected(corpus, tiny_pair):
    teacher, student = tiny_pair
    with pytest.raises(ContractViolation):
        pretrain_loop(corpus, teacher, student,
                      _quick_cfg(batch_size=64), tiny_mask_config())


def test_pretrain_overfits_single_clip(tmp_path):
    # student N=4 d=32 against teacher M=8, one clip, 200 steps
    path = write_clip(tmp_path / "one.wav", freq=200, amplitude=0.6,
                      duration_s=0.5, seed=3)
    entries = [ManifestEntry(path, "x", "s", "train")]
    teacher = make_state(tiny_teacher_config(num_layers=8, dim=32, heads=4, ffn_dim=64), seed=5)
    student = make_state(tiny_student_config(num_layers=4, dim=32, heads=4, ffn_dim=64), seed=6)
    cfg = TrainConfig(epochs=200, warmup_epochs=5, batch_size=1,
                      clip_duration_s=0.5, seed=11)
    result = pretrain_loop(entries, teacher, student, cfg, tiny_mask_config())
    steps = [r for r in result.log if r["event"] == "step"]
    assert len(steps) == 200
    first, last = steps[0]["total"], steps[-1]["total"]
    assert last <= 0.1 * first, f"loss {first} -> {last}"


# ---------------------------------------------------------------------------
# fine-tuning loop


def _ft_cfg(**kw):
    kw.setdefault("epochs", 20)
    kw.setdefault("batch_size", 2)
    kw.setdefault("clip_duration_s", 0.5)
    kw.setdefault("seed", 3)
    # tiny-backbone reps are small; the oracle needs a workable step size
    kw.setdefault("base_lr", 0.05)
    kw.setdefault("min_lr", 5e-4)
    return finetune_defaults(**kw)


def _classifier_cfg(dim=8, **kw):
    return ClassifierConfig(dim=dim, class_names=["noise", "tone"], hidden=16, **kw)


def test_finetune_reaches_full_training_accuracy(tmp_path):
    entries = tone_corpus(tmp_path, count=8)
    backbone = make_state(tiny_student_config(), seed=4)
    result = finetune_loop(entries, entries, backbone, _ft_cfg(epochs=50),
                           _classifier_cfg())
    train_was = [r["train_wa"] for r in result.log if r["event"] == "epoch"]
    assert max(train_was) == 1.0


def test_finetune_backbone_bit_identical(corpus):
    backbone = make_state(tiny_student_config(), seed=4)
    before = {n: p.data.copy() for n, p in backbone.params.items()}
    finetune_loop(corpus, corpus, backbone, _ft_cfg(epochs=3), _classifier_cfg())
    for n, b in before.items():
        assert np.array_equal(backbone.params[n].data, b), n


def test_finetune_config_log_echoes_sgd_defaults(corpus):
    backbone = make_state(tiny_student_config(), seed=4)
    cfg = finetune_defaults(epochs=1, batch_size=2, clip_duration_s=0.5)
    result = finetune_loop(corpus, corpus, backbone, cfg, _classifier_cfg())
    header = result.log[0]["train"]
    assert header["optimizer"] == "sgd"
    assert header["momentum"] == 0.9
    assert header["base_lr"] == 7e-4
    assert header["weight_decay"] == 0.01


def test_finetune_label_outside_class_set(corpus):
    backbone = make_state(tiny_student_config(), seed=4)
    bad_cfg = ClassifierConfig(dim=8, class_names=["angry", "sad"], hidden=16)
    with pytest.raises(ManifestError):
        finetune_loop(corpus, corpus, backbone, _ft_cfg(epochs=1), bad_cfg)


def test_finetune_trains_layer_weighting(tmp_path):
    entries = tone_corpus(tmp_path, count=8)
    backbone = make_state(tiny_student_config(), seed=4)
    result = finetune_loop(entries, entries, backbone, _ft_cfg(epochs=10),
                           _classifier_cfg())
    logits = result.classifier.params["weights.logits"].data
    assert logits.shape == (3,)  # frontend + 2 layers
    assert not np.allclose(logits, 0.0)


def test_finetune_last_layer_mode(tmp_path):
    entries = tone_corpus(tmp_path, count=8)
    backbone = make_state(tiny_student_config(), seed=4)
    result = finetune_loop(
        entries, entries, backbone, _ft_cfg(epochs=50),
        _classifier_cfg(mode=RepresentationMode.LAST_LAYER_ONLY),
    )
    assert "weights.logits" not in result.classifier.params
    assert result.metrics.mode == "LastLayerOnly"
    assert max(r["train_wa"] for r in result.log if r["event"] == "epoch") == 1.0


def test_finetune_best_epoch_metrics_returned(corpus):
    backbone = make_state(tiny_student_config(), seed=4)
    result = finetune_loop(corpus, corpus, backbone, _ft_cfg(epochs=5), _classifier_cfg())
    epochs = [r for r in result.log if r["event"] == "epoch"]
    assert result.metrics.wa == max(r["eval_wa"] for r in epochs)
    assert 0 <= result.best_epoch < 5


def test_finetune_deterministic(corpus):
    logs = []
    for _ in range(2):
        backbone = make_state(tiny_student_config(), seed=4)
        result = finetune_loop(corpus, corpus, backbone, _ft_cfg(epochs=4),
                               _classifier_cfg())
        logs.append(result.log)
    assert logs[0] == logs[1]


def test_derive_seed_stable_and_distinct():
    a = derive_seed(1, "mask", 0, 0)
    assert a == derive_seed(1, "mask", 0, 0)
    assert a != derive_seed(1, "mask", 0, 1)
    assert a != derive_seed(2, "mask", 0, 0)
