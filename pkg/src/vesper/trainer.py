"""Optimizers, the cosine schedule, and the two training loops.

Pretraining adapts the student against a frozen teacher with the masked
prediction objectives (or plain distillation in KD mode). Fine-tuning
freezes the whole backbone and trains only the layer weighting and the
classifier head.

Everything is deterministic: per-epoch shuffles and per-clip mask plans
draw from seed streams derived with SeedSequence from the run seed, logs
contain no wall-clock values, and checkpoints are written atomically so
an interrupted run keeps its last complete epoch.
"""

from __future__ import annotations

import json
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tc
from .audio import AudioClip, ManifestEntry, crop_or_pad, energy_profile, load_wav
from .checkpoint import save_state
from .downstream import (
    ClassifierConfig, ClassifierState, MetricsReport, RepresentationMode,
    compute_metrics, confusion_from_pairs, head_logits, make_classifier,
)
from .encoder import EncoderState, final_normalized, forward, student_forward, teacher_forward
from .errors import ContractViolation, IOFailure, ManifestError, VesperError
from .masking import MaskConfig, MaskPlan, Strategy, build_plan, pitch_change_scores
from .objectives import (
    LossReport, LossWeights, Predictors, kd_loss, loss_lh, loss_ll, loss_lx,
    make_predictors, total_loss,
)
from .tensor import Tensor


def derive_seed(*parts) -> int:
    """Stable child seed from mixed string/int parts."""
    ints = []
    for p in parts:
        if isinstance(p, str):
            ints.extend(p.encode("utf-8"))
        else:
            ints.append(int(p) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(ints).generate_state(1)[0])


@dataclass
class TrainConfig:
    epochs: int = 100
    warmup_epochs: int = 5
    batch_size: int = 32
    base_lr: float = 5e-4
    min_lr: float = 5e-6
    weight_decay: float = 0.01
    optimizer: str = "adamw"
    beta1: float = 0.9
    beta2: float = 0.999
    momentum: float = 0.9
    seed: int = 0
    clip_duration_s: float = 5.0
    lam_l: float = 1.0
    lam_h: float = 0.1
    lam_x: float = 1.0
    kd_mode: bool = False
    kd_temperature: float = 1.0

    def __post_init__(self):
        if self.optimizer not in ("adamw", "sgd"):
            raise ContractViolation(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractViolation("epochs and batch_size must be >= 1")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ContractViolation(
                f"warmup_epochs {self.warmup_epochs} outside [0, {self.epochs}]"
            )
        if self.min_lr > self.base_lr:
            raise ContractViolation("min_lr must not exceed base_lr")


def finetune_defaults(**overrides) -> TrainConfig:
    base = dict(
        epochs=50, warmup_epochs=0, batch_size=32,
        base_lr=7e-4, min_lr=7e-6, weight_decay=0.01,
        optimizer="sgd", momentum=0.9, clip_duration_s=6.5,
    )
    base.update(overrides)
    return TrainConfig(**base)


def cosine_lr(epoch: int, config: TrainConfig) -> float:
    """Linear warmup to base_lr, then cosine decay to min_lr at the last epoch."""
    if not 0 <= epoch < config.epochs:
        raise ContractViolation(f"epoch {epoch} outside [0, {config.epochs})")
    if epoch < config.warmup_epochs:
        return config.base_lr * (epoch + 1) / config.warmup_epochs
    t = epoch - config.warmup_epochs
    horizon = max(1, config.epochs - config.warmup_epochs - 1)
    return config.min_lr + 0.5 * (config.base_lr - config.min_lr) * (
        1.0 + math.cos(math.pi * t / horizon)
    )


# ---------------------------------------------------------------------------
# optimizers


class AdamW:
    """Decoupled weight decay, bias-corrected moments."""

    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999,
                 weight_decay=0.01, eps=1e-8):
        self.params = dict(sorted(params.items()))
        self.beta1, self.beta2 = beta1, beta2
        self.weight_decay = weight_decay
        self.eps = eps
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.steps = {n: 0 for n in self.params}

    def step(self, lr: float):
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.steps[name] += 1
            t = self.steps[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / (1 - self.beta1**t)
            v_hat = self.v[name] / (1 - self.beta2**t)
            p.data = p.data - lr * (
                m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data
            )


class SGD:
    """Classical momentum; weight decay folded into the gradient."""

    def __init__(self, params: dict[str, Tensor], momentum=0.9, weight_decay=0.0):
        self.params = dict(sorted(params.items()))
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self, lr: float):
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            self.velocity[name] = self.momentum * self.velocity[name] + g
            p.data = p.data - lr * self.velocity[name]


def make_optimizer(params: dict[str, Tensor], config: TrainConfig):
    if config.optimizer == "adamw":
        return AdamW(params, config.beta1, config.beta2, config.weight_decay)
    return SGD(params, config.momentum, config.weight_decay)


# ---------------------------------------------------------------------------
# shared loop plumbing


def _warn(message: str):
    print(f"warning: {message}", file=sys.stderr)


class _ClipCache:
    """Decoded, cropped waveforms plus frozen per-clip artifacts."""

    def __init__(self, duration_s: float, mask_cfg: MaskConfig | None):
        self.duration_s = duration_s
        self.mask_cfg = mask_cfg
        self.clips: dict[str, AudioClip] = {}
        self.profiles: dict[str, object] = {}
        self.scores: dict[str, np.ndarray] = {}

    def get(self, entry: ManifestEntry) -> AudioClip | None:
        key = str(entry.path)
        if key not in self.clips:
            try:
                clip = crop_or_pad(load_wav(entry.path), self.duration_s)
            except VesperError as exc:
                _warn(f"skipping unreadable clip {entry.path}: {exc}")
                return None
            self.clips[key] = clip
            self.profiles[key] = energy_profile(clip)
            if self.mask_cfg is not None and self.mask_cfg.strategy is Strategy.ENERGY_PITCH:
                self.scores[key] = pitch_change_scores(clip)
        return self.clips[key]

    def plan_for(self, entry: ManifestEntry, t_frames: int, seed: int) -> MaskPlan:
        key = str(entry.path)
        return build_plan(
            self.mask_cfg, self.profiles[key], t_frames, seed=seed,
            scores=self.scores.get(key),
        )


def _batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    full = len(order) // batch_size
    return [order[i * batch_size:(i + 1) * batch_size] for i in range(full)]


class JsonlLog:
    """JSON-lines run log, kept in memory and optionally mirrored to disk."""

    def __init__(self, path: Path | None):
        self.path = path
        self.records: list[dict] = []
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("")

    def write(self, record: dict):
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# pretraining


@dataclass
class PretrainResult:
    student: EncoderState
    predictors: Predictors
    log: list[dict] = field(default_factory=list)
    final_checkpoint: Path | None = None


def pretrain_loop(
    entries: list[ManifestEntry],
    teacher: EncoderState,
    student: EncoderState,
    train_cfg: TrainConfig,
    mask_cfg: MaskConfig,
    out_dir: Path | None = None,
    log_path: Path | None = None,
) -> PretrainResult:
    """Adapt the student to the teacher over the manifest clips.

    Per batch: fresh mask plans, teacher and student traces, the combined
    objective (or KD loss), one optimizer step over student + predictors.
    Per epoch: an atomic checkpoint and a summary log record.
    """
    if not entries:
        raise ManifestError("manifest is empty")
    if len(entries) < train_cfg.batch_size:
        raise ContractViolation(
            f"batch_size {train_cfg.batch_size} exceeds the {len(entries)} manifest clips; "
            "no full batch can be formed"
        )
    predictors = make_predictors(student.config.dim, derive_seed(train_cfg.seed, "predictors"))
    trainable = dict(student.trainable())
    if not train_cfg.kd_mode:
        trainable.update(predictors.trainable())
    if not trainable:
        raise ContractViolation("nothing is trainable in the student state")
    optimizer = make_optimizer(trainable, train_cfg)

    log = JsonlLog(log_path)
    log.write({
        "event": "config",
        "train": asdict(train_cfg),
        "mask": asdict(mask_cfg),
        "student_layers": student.config.num_layers,
        "teacher_layers": teacher.config.num_layers,
    })

    teacher_cache: dict[str, tuple[Tensor, Tensor]] = {}
    cache = _ClipCache(train_cfg.clip_duration_s, mask_cfg)
    frozen_before = {
        n: p.data.copy() for n, p in student.params.items() if not p.requires_grad
    }
    final_path = None
    step = 0
    for epoch in range(train_cfg.epochs):
        lr = cosine_lr(epoch, train_cfg)
        order = np.random.default_rng(
            derive_seed(train_cfg.seed, "shuffle", epoch)
        ).permutation(len(entries))
        epoch_totals = []
        for batch in _batches(order, train_cfg.batch_size):
            reports = []
            for p in trainable.values():
                p.grad = None
            with tc.tape() as tape:
                batch_terms = []
                for clip_idx in batch:
                    entry = entries[int(clip_idx)]
                    clip = cache.get(entry)
                    if clip is None:
                        continue
                    report = _pretrain_clip_term(
                        clip, entry, cache, teacher, student, predictors,
                        train_cfg, epoch, int(clip_idx), teacher_cache, batch_terms,
                    )
                    reports.append(report)
                if not batch_terms:
                    continue
                batch_loss = batch_terms[0]
                for term in batch_terms[1:]:
                    batch_loss = tc.add(batch_loss, term)
                batch_loss = tc.smul(batch_loss, 1.0 / len(batch_terms))
                tape.backward(batch_loss)
            optimizer.step(lr)
            record = {
                "event": "step", "epoch": epoch, "step": step, "lr": lr,
                "batch_clips": len(reports),
                "l_l": float(np.mean([r.l_l for r in reports])),
                "l_h": float(np.mean([r.l_h for r in reports])),
                "l_x": float(np.mean([r.l_x for r in reports])),
                "total": float(np.mean([r.total for r in reports])),
            }
            if train_cfg.kd_mode:
                record["kd"] = float(np.mean([r.kd for r in reports]))
            log.write(record)
            epoch_totals.append(record["total"])
            step += 1
        if epoch == 0 and not cache.clips:
            raise IOFailure("no clip in the manifest could be read")
        summary = {
            "event": "epoch", "epoch": epoch, "lr": lr,
            "mean_total": float(np.mean(epoch_totals)) if epoch_totals else None,
        }
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            ckpt_path = out_dir / f"student-epoch{epoch:03d}.vspr"
            save_state(ckpt_path, student, kind="encoder", seed=train_cfg.seed,
                       extra={"epoch": epoch})
            summary["checkpoint"] = ckpt_path.name
            final_path = out_dir / "student-final.vspr"
            save_state(final_path, student, kind="encoder", seed=train_cfg.seed,
                       extra={"epoch": epoch})
        log.write(summary)

    for n, before in frozen_before.items():
        if not np.array_equal(student.params[n].data, before):
            raise ContractViolation(f"frozen parameter {n} changed during pretraining")
    return PretrainResult(student, predictors, log.records, final_path)


def _pretrain_clip_term(
    clip: AudioClip,
    entry: ManifestEntry,
    cache: _ClipCache,
    teacher: EncoderState,
    student: EncoderState,
    predictors: Predictors,
    train_cfg: TrainConfig,
    epoch: int,
    clip_idx: int,
    teacher_cache: dict,
    batch_terms: list,
) -> LossReport:
    """One clip's loss term, appended to batch_terms.

    The teacher is frozen, so its mid and final representations per clip
    never change and are computed once, outside any tape.
    """
    key = str(entry.path)
    if key not in teacher_cache:
        t_trace = teacher_forward(clip, teacher)
        m = teacher.config.num_layers
        teacher_cache[key] = (
            Tensor(t_trace.rep(m // 2).data),
            Tensor(t_trace.final.data),
        )
    teacher_mid, teacher_final = teacher_cache[key]
    t_frames = teacher_mid.shape[0]

    if train_cfg.kd_mode:
        s_trace = student_forward(clip, student, _empty_plan())
        term = kd_loss(s_trace.final, teacher_final, train_cfg.kd_temperature)
        batch_terms.append(term)
        value = term.item()
        return LossReport(l_l=0.0, l_h=0.0, l_x=0.0, total=value, kd=value)

    seed = derive_seed(train_cfg.seed, "mask", epoch, clip_idx)
    plan = cache.plan_for(entry, t_frames, seed)
    s_trace = student_forward(clip, student, plan)
    n = len(s_trace.layers)
    l_l = loss_ll(s_trace.rep(n // 2), teacher_mid, predictors.p1, plan.phoneme_indices)
    l_h = loss_lh(s_trace.final, teacher_final, predictors.p2, plan.word_indices)
    l_x = loss_lx(s_trace.final, teacher_mid, predictors.p3)
    weights = LossWeights(train_cfg.lam_l, train_cfg.lam_h, train_cfg.lam_x)
    total = total_loss(l_l, l_h, l_x, weights)
    batch_terms.append(total)
    return LossReport(
        l_l=l_l.item(), l_h=l_h.item(), l_x=l_x.item(), total=total.item(),
        masked_phoneme=len(plan.phoneme_indices), masked_word=len(plan.word_indices),
    )


def _empty_plan() -> MaskPlan:
    empty = np.array([], dtype=np.int64)
    return MaskPlan(empty, empty, empty, empty, {}, [])


# ---------------------------------------------------------------------------
# fine-tuning


@dataclass
class FinetuneResult:
    classifier: ClassifierState
    best_epoch: int
    metrics: MetricsReport
    log: list[dict] = field(default_factory=list)


def finetune_loop(
    train_entries: list[ManifestEntry],
    eval_entries: list[ManifestEntry],
    backbone: EncoderState,
    train_cfg: TrainConfig,
    classifier_cfg: ClassifierConfig,
    seed_salt: int = 0,
    log_path: Path | None = None,
) -> FinetuneResult:
    """Train the weighting and classifier head on a frozen backbone.

    Representations are extracted once per clip outside any tape (the
    backbone cannot receive gradients), then the head alone trains with
    cross-entropy. Returns the epoch with the best held-out WA.
    """
    if not train_entries or not eval_entries:
        raise ManifestError("both train and eval splits must be non-empty")
    if len(train_entries) < train_cfg.batch_size:
        raise ContractViolation(
            f"batch_size {train_cfg.batch_size} exceeds the {len(train_entries)} "
            "train clips; no full batch can be formed"
        )
    backbone_before = {n: p.data.copy() for n, p in backbone.params.items()}
    classifier = make_classifier(
        classifier_cfg, backbone.config.num_layers,
        seed=derive_seed(train_cfg.seed, "classifier", seed_salt),
    )
    train_feats, train_labels = _extract_features(train_entries, backbone, classifier, train_cfg)
    eval_feats, eval_labels = _extract_features(eval_entries, backbone, classifier, train_cfg)

    optimizer = make_optimizer(classifier.trainable(), train_cfg)
    log = JsonlLog(log_path)
    log.write({
        "event": "config",
        "train": asdict(train_cfg),
        "mode": classifier_cfg.mode.value,
        "classes": classifier_cfg.class_names,
        "backbone_layers": backbone.config.num_layers,
    })

    c = classifier_cfg.num_classes
    best = None
    for epoch in range(train_cfg.epochs):
        lr = cosine_lr(epoch, train_cfg)
        order = np.random.default_rng(
            derive_seed(train_cfg.seed, "shuffle", seed_salt, epoch)
        ).permutation(len(train_feats))
        ce_values = []
        for batch in _batches(order, train_cfg.batch_size):
            for p in classifier.trainable().values():
                p.grad = None
            with tc.tape() as tape:
                rows = [tc.reshape(head_logits(train_feats[int(i)], classifier), (1, c))
                        for i in batch]
                loss = tc.cross_entropy_logits(
                    tc.concat(rows, axis=0),
                    np.array([train_labels[int(i)] for i in batch]),
                )
                tape.backward(loss)
            optimizer.step(lr)
            ce_values.append(loss.item())

        train_report = _predict_metrics(train_feats, train_labels, classifier)
        eval_report = _predict_metrics(eval_feats, eval_labels, classifier)
        log.write({
            "event": "epoch", "epoch": epoch, "lr": lr,
            "train_ce": float(np.mean(ce_values)) if ce_values else None,
            "train_wa": train_report.wa,
            "eval_wa": eval_report.wa, "eval_ua": eval_report.ua,
            "eval_wf1": eval_report.wf1,
        })
        if best is None or eval_report.wa > best[1].wa:
            best = (epoch, eval_report,
                    {n: p.data.copy() for n, p in classifier.params.items()})

    best_epoch, best_report, best_params = best
    for n, data in best_params.items():
        classifier.params[n].data = data
    best_report.mode = classifier_cfg.mode.value
    for n, before in backbone_before.items():
        if not np.array_equal(backbone.params[n].data, before):
            raise ContractViolation(f"backbone parameter {n} changed during fine-tuning")
    return FinetuneResult(classifier, best_epoch, best_report, log.records)


def _extract_features(
    entries: list[ManifestEntry],
    backbone: EncoderState,
    classifier: ClassifierState,
    train_cfg: TrainConfig,
) -> tuple[list[list[Tensor]], list[int]]:
    """Per-clip representation lists plus integer labels, detached."""
    cfg = classifier.config
    feats, labels = [], []
    for entry in entries:
        clip = crop_or_pad(load_wav(entry.path), train_cfg.clip_duration_s)
        trace = forward(clip, backbone)
        if cfg.mode is RepresentationMode.LAST_LAYER_ONLY:
            reps = [Tensor(final_normalized(trace, backbone).data)]
        else:
            reps = [Tensor(r.data) for r in trace.reps]
            if not cfg.include_frontend:
                reps = reps[1:]
        feats.append(reps)
        labels.append(classifier.label_index(entry.label))
    return feats, labels


def _predict_metrics(feats, labels, classifier: ClassifierState) -> MetricsReport:
    preds = [int(np.argmax(head_logits(reps, classifier).data)) for reps in feats]
    conf = confusion_from_pairs(labels, preds, classifier.config.num_classes)
    return compute_metrics(conf, classifier.config.class_names)
