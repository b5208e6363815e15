"""Frozen-backbone evaluation head and metrics.

The backbone never trains here. A softmax-weighted sum over the stored
per-layer representations (frontend output included by default) feeds a
two-FC classifier with mean pooling between the layers; accuracy is
reported as WA, UA and weighted F1 from the raw confusion matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from . import tensor as tc
from .audio import ManifestEntry
from .errors import ContractViolation, ManifestError
from .tensor import Tensor

CLASSIFIER_HIDDEN = 256


class RepresentationMode(str, Enum):
    WEIGHTED = "Weighted"
    LAST_LAYER_ONLY = "LastLayerOnly"


class SplitMode(str, Enum):
    BY_SPEAKER = "BySpeaker"
    RANDOM = "Random"


@dataclass
class ClassifierConfig:
    dim: int
    class_names: list[str]
    hidden: int = CLASSIFIER_HIDDEN
    mode: RepresentationMode = RepresentationMode.WEIGHTED
    include_frontend: bool = True

    def __post_init__(self):
        self.mode = RepresentationMode(self.mode)
        if self.dim < 1 or self.hidden < 1:
            raise ContractViolation("dim and hidden must be >= 1")
        if len(self.class_names) < 2:
            raise ContractViolation("need at least 2 classes")
        if len(set(self.class_names)) != len(self.class_names):
            raise ContractViolation("class_names contains duplicates")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


@dataclass
class ClassifierState:
    config: ClassifierConfig
    params: dict[str, Tensor]

    def trainable(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if p.requires_grad}

    def label_index(self, label: str) -> int:
        try:
            return self.config.class_names.index(label)
        except ValueError:
            raise ManifestError(
                f"label {label!r} outside class set {self.config.class_names}"
            ) from None


def num_reps(num_layers: int, config: ClassifierConfig) -> int:
    """How many per-layer representations the weighting spans."""
    if config.mode is RepresentationMode.LAST_LAYER_ONLY:
        return 1
    return num_layers + (1 if config.include_frontend else 0)


def make_classifier(config: ClassifierConfig, num_layers: int, seed: int = 0) -> ClassifierState:
    rng = np.random.default_rng(seed)

    def fc(d_in, d_out):
        # fan-in uniform keeps logit scale workable regardless of rep scale
        bound = 1.0 / np.sqrt(d_in)
        return Tensor(rng.uniform(-bound, bound, (d_in, d_out)), requires_grad=True)

    params = {
        "fc1.weight": fc(config.dim, config.hidden),
        "fc1.bias": Tensor(np.zeros(config.hidden), requires_grad=True),
        "fc2.weight": fc(config.hidden, config.num_classes),
        "fc2.bias": Tensor(np.zeros(config.num_classes), requires_grad=True),
    }
    if config.mode is RepresentationMode.WEIGHTED:
        params["weights.logits"] = Tensor(
            np.zeros(num_reps(num_layers, config)), requires_grad=True
        )
    return ClassifierState(config, params)


def weighted_layer_sum(reps: Sequence[Tensor], logits: Tensor) -> Tensor:
    """Softmax-weighted combination of per-layer representations."""
    if logits.ndim != 1 or len(reps) != logits.shape[0]:
        raise ContractViolation(
            f"{len(reps)} representations vs {logits.shape} weight logits"
        )
    weights = tc.softmax(logits)
    out = None
    for k, rep in enumerate(reps):
        term = tc.scale_by(rep, tc.take_rows(weights, np.array([k])))
        out = term if out is None else tc.add(out, term)
    return out


def classify(rep: Tensor, state: ClassifierState) -> Tensor:
    """Utterance logits: frame-wise FC, mean pool over time, FC to classes."""
    p = state.params
    if rep.ndim != 2 or rep.shape[1] != state.config.dim:
        raise ContractViolation(f"classify: rep shape {rep.shape}")
    h = tc.add_bias(tc.matmul(rep, p["fc1.weight"]), p["fc1.bias"])
    pooled = tc.reshape(tc.mean(h, axis=0), (1, state.config.hidden))
    logits = tc.add_bias(tc.matmul(pooled, p["fc2.weight"]), p["fc2.bias"])
    return tc.reshape(logits, (state.config.num_classes,))


def head_logits(reps: Sequence[Tensor], state: ClassifierState) -> Tensor:
    """Mode-aware front half: weighted sum over reps, or the single rep."""
    if state.config.mode is RepresentationMode.WEIGHTED:
        rep = weighted_layer_sum(reps, state.params["weights.logits"])
    else:
        if len(reps) != 1:
            raise ContractViolation(
                f"last-layer mode expects exactly one representation, got {len(reps)}"
            )
        rep = reps[0]
    return classify(rep, state)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsReport:
    confusion: np.ndarray
    per_class: list[dict]
    wa: float
    ua: float
    wf1: float
    mode: str | None = None
    fold: int | None = None

    def to_json_dict(self) -> dict:
        return {
            "mode": self.mode,
            "fold": self.fold,
            "confusion": self.confusion.tolist(),
            "wa": self.wa,
            "ua": self.ua,
            "wf1": self.wf1,
            "per_class": self.per_class,
        }


def compute_metrics(confusion: np.ndarray, class_names: list[str] | None = None) -> MetricsReport:
    """WA, UA and weighted F1 from a rows-are-truth confusion matrix.

    A class with no true samples contributes zero accuracy and F1 but
    still counts in the UA denominator.
    """
    conf = np.asarray(confusion, dtype=np.int64)
    if conf.ndim != 2 or conf.shape[0] != conf.shape[1]:
        raise ContractViolation(f"confusion matrix must be square, got {conf.shape}")
    if (conf < 0).any():
        raise ContractViolation("confusion counts must be nonnegative")
    total = int(conf.sum())
    if total == 0:
        raise ContractViolation("confusion matrix is all zero")
    c = conf.shape[0]
    names = class_names if class_names is not None else [str(i) for i in range(c)]
    if len(names) != c:
        raise ContractViolation(f"{len(names)} names for {c} classes")

    row = conf.sum(axis=1)
    col = conf.sum(axis=0)
    diag = np.diag(conf)
    per_class = []
    f1 = np.zeros(c)
    acc = np.zeros(c)
    for i in range(c):
        acc[i] = diag[i] / row[i] if row[i] else 0.0
        precision = diag[i] / col[i] if col[i] else 0.0
        denom = precision + acc[i]
        f1[i] = 2 * precision * acc[i] / denom if denom else 0.0
        per_class.append({
            "label": names[i], "count": int(row[i]),
            "acc": float(acc[i]), "f1": float(f1[i]),
        })
    wa = float(diag.sum() / total)
    ua = float(acc.mean())
    wf1 = float((row * f1).sum() / row.sum())
    return MetricsReport(conf, per_class, wa, ua, wf1)


def confusion_from_pairs(truths: Sequence[int], preds: Sequence[int], c: int) -> np.ndarray:
    conf = np.zeros((c, c), dtype=np.int64)
    for t, p in zip(truths, preds, strict=True):
        conf[t, p] += 1
    return conf


# ---------------------------------------------------------------------------
# cross-validation


def kfold_split(
    entries: list[ManifestEntry],
    k: int,
    mode: SplitMode = SplitMode.BY_SPEAKER,
    seed: int = 0,
) -> list[tuple[list[int], list[int]]]:
    """k (train, test) index partitions; test folds tile the manifest.

    BySpeaker keeps every speaker entirely on one side of each fold,
    assigning speakers to the lightest fold so clip counts stay balanced.
    """
    mode = SplitMode(mode)
    if k < 2:
        raise ContractViolation(f"k must be >= 2, got {k}")
    if len(entries) < k:
        raise ContractViolation(f"{len(entries)} clips cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    if mode is SplitMode.RANDOM:
        order = rng.permutation(len(entries))
        for fold, chunk in zip(folds, np.array_split(order, k)):
            fold.extend(int(i) for i in chunk)
    else:
        by_speaker: dict[str, list[int]] = {}
        for i, entry in enumerate(entries):
            by_speaker.setdefault(entry.speaker, []).append(i)
        speakers = sorted(by_speaker)
        if len(speakers) < k:
            raise ContractViolation(f"{len(speakers)} speakers cannot fill {k} folds")
        for s in rng.permutation(len(speakers)):
            lightest = min(range(k), key=lambda f: (len(folds[f]), f))
            folds[lightest].extend(by_speaker[speakers[int(s)]])
    out = []
    for f in range(k):
        test = sorted(folds[f])
        test_set = set(test)
        train = [i for i in range(len(entries)) if i not in test_set]
        out.append((train, test))
    return out


@dataclass
class EvaluationResult:
    folds: list[MetricsReport]
    mean_wa: float
    mean_ua: float
    mean_wf1: float

    def to_json_dict(self) -> dict:
        return {
            "folds": [r.to_json_dict() for r in self.folds],
            "mean_wa": self.mean_wa,
            "mean_ua": self.mean_ua,
            "mean_wf1": self.mean_wf1,
        }


def evaluate(
    backbone,
    entries: list[ManifestEntry],
    train_cfg,
    classifier_cfg: ClassifierConfig,
    k: int = 5,
    split: SplitMode = SplitMode.BY_SPEAKER,
    seed: int = 0,
) -> EvaluationResult:
    """k-fold cross-validated classification on a frozen backbone.

    Each fold trains the head on the train side via the fine-tuning loop
    and reports the best epoch's metrics on the held-out side.
    """
    from .trainer import finetune_loop  # deferred: trainer imports this module

    partitions = kfold_split(entries, k, split, seed)
    reports = []
    for fold_id, (train_idx, test_idx) in enumerate(partitions):
        result = finetune_loop(
            [entries[i] for i in train_idx],
            [entries[i] for i in test_idx],
            backbone,
            train_cfg,
            classifier_cfg,
            seed_salt=fold_id,
        )
        report = result.metrics
        report.fold = fold_id
        reports.append(report)
    return EvaluationResult(
        reports,
        mean_wa=float(np.mean([r.wa for r in reports])),
        mean_ua=float(np.mean([r.ua for r in reports])),
        mean_wf1=float(np.mean([r.wf1 for r in reports])),
    )
