"""Pretraining objectives.

Three prediction losses tie the student to the frozen teacher:

- loss_ll: student mid-stack vs teacher mid-stack, masked (phoneme) rows;
- loss_lh: student final vs teacher final, masked (word) rows;
- loss_lx: student final vs teacher mid-stack, every row.

Each loss runs the corresponding predictor (two linears with a GELU
between) on the student side and takes a mean squared error; means (not
sums) keep the loss weights independent of mask counts. A plain
distillation loss over softened feature distributions covers the
KD-compression baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .encoder import INIT_STD, ForwardTrace
from .errors import ContractViolation
from .masking import MaskPlan
from .tensor import Tensor


@dataclass
class Predictor:
    """Two linear layers with a GELU in between; hidden dim defaults to d."""

    params: dict[str, Tensor]

    def __call__(self, x: Tensor) -> Tensor:
        h = tc.add_bias(tc.matmul(x, self.params["w1"]), self.params["b1"])
        h = tc.gelu(h)
        return tc.add_bias(tc.matmul(h, self.params["w2"]), self.params["b2"])

    def trainable(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if p.requires_grad}


def make_predictor(d_in: int, d_out: int, seed: int, d_hidden: int | None = None) -> Predictor:
    d_hidden = d_in if d_hidden is None else d_hidden
    rng = np.random.default_rng(seed)
    return Predictor(
        {
            "w1": Tensor(rng.normal(0.0, INIT_STD, size=(d_in, d_hidden)), requires_grad=True),
            "b1": Tensor(np.zeros(d_hidden), requires_grad=True),
            "w2": Tensor(rng.normal(0.0, INIT_STD, size=(d_hidden, d_out)), requires_grad=True),
            "b2": Tensor(np.zeros(d_out), requires_grad=True),
        }
    )


@dataclass
class LossWeights:
    lam_l: float = 1.0
    lam_h: float = 0.1
    lam_x: float = 1.0

    def __post_init__(self):
        vals = (self.lam_l, self.lam_h, self.lam_x)
        if any(not np.isfinite(v) or v < 0 for v in vals):
            raise ContractViolation(f"loss weights must be finite and >= 0, got {vals}")


@dataclass
class LossReport:
    l_l: float
    l_h: float
    l_x: float
    total: float
    kd: float | None = None
    masked_phoneme: int = 0
    masked_word: int = 0

    def to_json_dict(self) -> dict:
        out = {
            "l_l": self.l_l,
            "l_h": self.l_h,
            "l_x": self.l_x,
            "total": self.total,
            "masked_phoneme": self.masked_phoneme,
            "masked_word": self.masked_word,
        }
        if self.kd is not None:
            out["kd"] = self.kd
        return out


def _zero() -> Tensor:
    return Tensor(np.zeros(()))


def loss_ll(student_mid: Tensor, teacher_mid: Tensor, predictor, indices: np.ndarray) -> Tensor:
    """Masked-row MSE between predicted student mid and teacher mid."""
    if student_mid.shape != teacher_mid.shape:
        raise ContractViolation(
            f"loss_ll: student {student_mid.shape} vs teacher {teacher_mid.shape}"
        )
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        return _zero()
    return tc.mse(predictor(tc.take_rows(student_mid, idx)), tc.take_rows(teacher_mid, idx))


def loss_lh(student_final: Tensor, teacher_final: Tensor, predictor, indices: np.ndarray) -> Tensor:
    """Masked-row MSE between predicted student final and teacher final."""
    return loss_ll(student_final, teacher_final, predictor, indices)


def loss_lx(student_final: Tensor, teacher_mid: Tensor, predictor) -> Tensor:
    """All-position MSE between predicted student final and teacher mid."""
    if student_final.shape != teacher_mid.shape:
        raise ContractViolation(
            f"loss_lx: student {student_final.shape} vs teacher {teacher_mid.shape}"
        )
    return tc.mse(predictor(student_final), teacher_mid)


def total_loss(l_l: Tensor, l_h: Tensor, l_x: Tensor, weights: LossWeights) -> Tensor:
    return tc.add(
        tc.add(tc.smul(l_l, weights.lam_l), tc.smul(l_h, weights.lam_h)),
        tc.smul(l_x, weights.lam_x),
    )


def kd_loss(student_final: Tensor, teacher_final: Tensor, temperature: float) -> Tensor:
    """Distillation: KL between softened feature distributions, teacher
    leading, averaged over positions and scaled by temperature squared."""
    if temperature <= 0:
        raise ContractViolation(f"temperature must be > 0, got {temperature}")
    if student_final.shape != teacher_final.shape:
        raise ContractViolation(
            f"kd_loss: student {student_final.shape} vs teacher {teacher_final.shape}"
        )
    inv = 1.0 / temperature
    kl = tc.kl_softmax(tc.smul(teacher_final, inv), tc.smul(student_final, inv))
    return tc.smul(kl, temperature * temperature)


@dataclass
class Predictors:
    p1: Predictor
    p2: Predictor
    p3: Predictor

    def trainable(self) -> dict[str, Tensor]:
        out = {}
        for tag, pred in (("p1", self.p1), ("p2", self.p2), ("p3", self.p3)):
            for n, p in pred.trainable().items():
                out[f"predictor.{tag}.{n}"] = p
        return out


def make_predictors(d: int, seed: int) -> Predictors:
    return Predictors(
        p1=make_predictor(d, d, seed=np.random.SeedSequence([seed, 1]).generate_state(1)[0]),
        p2=make_predictor(d, d, seed=np.random.SeedSequence([seed, 2]).generate_state(1)[0]),
        p3=make_predictor(d, d, seed=np.random.SeedSequence([seed, 3]).generate_state(1)[0]),
    )


def pretrain_losses(
    student_trace: ForwardTrace,
    teacher_trace: ForwardTrace,
    predictors: Predictors,
    plan: MaskPlan,
    weights: LossWeights,
) -> tuple[Tensor, LossReport]:
    """Assemble the full pretraining objective from two traces.

    The student's mid representation is the trace entry before the word
    mask was injected; the teacher's mid is layer M/2.
    """
    n = len(student_trace.layers)
    m = len(teacher_trace.layers)
    if n % 2 or m % 2:
        raise ContractViolation(f"layer counts must be even, got N={n}, M={m}")
    student_mid = student_trace.rep(n // 2)
    teacher_mid = teacher_trace.rep(m // 2)
    l_l = loss_ll(student_mid, teacher_mid, predictors.p1, plan.phoneme_indices)
    l_h = loss_lh(student_trace.final, teacher_trace.final, predictors.p2, plan.word_indices)
    l_x = loss_lx(student_trace.final, teacher_mid, predictors.p3)
    total = total_loss(l_l, l_h, l_x, weights)
    report = LossReport(
        l_l=l_l.item(),
        l_h=l_h.item(),
        l_x=l_x.item(),
        total=total.item(),
        masked_phoneme=int(len(plan.phoneme_indices)),
        masked_word=int(len(plan.word_indices)),
    )
    return total, report
