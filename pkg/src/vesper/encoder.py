"""Convolutional frontend plus pre-norm Transformer stack.

Student and teacher share this implementation; they differ in depth, in the
presence of the mask embedding, and in what is trainable. The student's
forward pass injects the mask embedding twice: at the stack input
(phoneme-scale spans) and halfway up the stack (word-scale spans).

Architecture notes, relative to the usual speech-encoder recipe:
- positional information comes from a grouped convolution added to the
  latent sequence (kernel 128, groups 16 at full scale), not a gated
  relative position bias;
- residual blocks are pre-norm; the FFN uses ReLU, frontend and positional
  convolutions use GELU;
- no dropout anywhere, which keeps every forward pass deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import tensor as tc
from .audio import AudioClip
from .errors import ContractViolation, ShapeMismatch
from .masking import MaskPlan
from .tensor import Tensor

INIT_STD = 0.02


class Role(str, Enum):
    STUDENT = "student"
    TEACHER = "teacher"


DESK_FRONTEND = ((64, 10, 5), (64, 8, 8), (64, 8, 8))
# full-scale extractor geometry: seven stages, total stride 320
WAVLM_FRONTEND = (
    (512, 10, 5),
    (512, 3, 2),
    (512, 3, 2),
    (512, 3, 2),
    (512, 3, 2),
    (512, 2, 2),
    (512, 2, 2),
)


@dataclass
class EncoderConfig:
    num_layers: int
    dim: int = 64
    heads: int = 4
    ffn_dim: int = 256
    conv_frontend: tuple = DESK_FRONTEND
    pos_conv: tuple | None = (128, 16)  # (kernel, groups)
    role: Role = Role.STUDENT
    apply_final_ln: bool = True
    pos_conv_trainable: bool = True

    def __post_init__(self):
        self.role = Role(self.role)
        self.conv_frontend = tuple(tuple(s) for s in self.conv_frontend)
        if self.pos_conv is not None:
            self.pos_conv = tuple(self.pos_conv)
            if self.dim % self.pos_conv[1]:
                raise ContractViolation(
                    f"dim {self.dim} not divisible by pos_conv groups {self.pos_conv[1]}"
                )
        if self.num_layers < 0:
            raise ContractViolation(f"num_layers must be >= 0, got {self.num_layers}")
        if self.dim % self.heads:
            raise ContractViolation(
                f"dim {self.dim} not divisible by heads {self.heads}"
            )

    @property
    def stride_total(self) -> int:
        out = 1
        for _, _, s in self.conv_frontend:
            out *= s
        return out

    def frame_count(self, num_samples: int) -> int:
        return math.ceil(num_samples / self.stride_total)


PRESETS: dict[str, EncoderConfig] = {
    "desk-student": EncoderConfig(4, role=Role.STUDENT),
    "desk-teacher": EncoderConfig(8, role=Role.TEACHER),
    "wavlm-base": EncoderConfig(
        12, dim=768, heads=12, ffn_dim=3072,
        conv_frontend=WAVLM_FRONTEND, role=Role.TEACHER,
    ),
    "wavlm-large": EncoderConfig(
        24, dim=1024, heads=16, ffn_dim=4096,
        conv_frontend=WAVLM_FRONTEND, role=Role.TEACHER,
    ),
    "vesper-4": EncoderConfig(
        4, dim=1024, heads=16, ffn_dim=4096,
        conv_frontend=WAVLM_FRONTEND, role=Role.STUDENT,
    ),
    "vesper-12": EncoderConfig(
        12, dim=1024, heads=16, ffn_dim=4096,
        conv_frontend=WAVLM_FRONTEND, role=Role.STUDENT,
    ),
}


def preset(name: str) -> EncoderConfig:
    if name not in PRESETS:
        raise ContractViolation(
            f"unknown preset {name!r}; choose from {sorted(PRESETS)}"
        )
    return replace(PRESETS[name])


def config_to_dict(config: EncoderConfig) -> dict:
    """JSON-safe form, used in checkpoint metadata and logs."""
    return {
        "num_layers": config.num_layers,
        "dim": config.dim,
        "heads": config.heads,
        "ffn_dim": config.ffn_dim,
        "conv_frontend": [list(s) for s in config.conv_frontend],
        "pos_conv": list(config.pos_conv) if config.pos_conv else None,
        "role": config.role.value,
        "apply_final_ln": config.apply_final_ln,
        "pos_conv_trainable": config.pos_conv_trainable,
    }


def config_from_dict(d: dict) -> EncoderConfig:
    known = {
        "num_layers", "dim", "heads", "ffn_dim", "conv_frontend",
        "pos_conv", "role", "apply_final_ln", "pos_conv_trainable",
    }
    unknown = set(d) - known
    if unknown:
        raise ContractViolation(f"unknown encoder config keys: {sorted(unknown)}")
    d = dict(d)
    if d.get("pos_conv") is not None:
        d["pos_conv"] = tuple(d["pos_conv"])
    return EncoderConfig(**d)


def parameter_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Canonical name → shape inventory. Drives init, counting, checkpoint
    completeness checks, and the external converter."""
    d = config.dim
    shapes: dict[str, tuple[int, ...]] = {}
    c_prev = 1
    for i, (c, k, _s) in enumerate(config.conv_frontend):
        shapes[f"frontend.{i}.weight"] = (c, c_prev, k)
        shapes[f"frontend.{i}.bias"] = (c,)
        c_prev = c
    shapes["frontend.norm.gain"] = (c_prev,)
    shapes["frontend.norm.bias"] = (c_prev,)
    shapes["frontend.proj.weight"] = (c_prev, d)
    shapes["frontend.proj.bias"] = (d,)
    if config.pos_conv is not None:
        k, g = config.pos_conv
        shapes["pos_conv.weight"] = (d, d // g, k)
        shapes["pos_conv.bias"] = (d,)
    for i in range(config.num_layers):
        p = f"layer.{i}"
        shapes[f"{p}.ln1.gain"] = (d,)
        shapes[f"{p}.ln1.bias"] = (d,)
        for proj in ("q", "k", "v", "o"):
            shapes[f"{p}.attn.{proj}.weight"] = (d, d)
            shapes[f"{p}.attn.{proj}.bias"] = (d,)
        shapes[f"{p}.ln2.gain"] = (d,)
        shapes[f"{p}.ln2.bias"] = (d,)
        shapes[f"{p}.ffn.w1.weight"] = (d, config.ffn_dim)
        shapes[f"{p}.ffn.w1.bias"] = (config.ffn_dim,)
        shapes[f"{p}.ffn.w2.weight"] = (config.ffn_dim, d)
        shapes[f"{p}.ffn.w2.bias"] = (d,)
    if config.apply_final_ln:
        shapes["final_norm.gain"] = (d,)
        shapes["final_norm.bias"] = (d,)
    if config.role is Role.STUDENT:
        shapes["mask_embedding"] = (d,)
    return shapes


def is_trainable(name: str, config: EncoderConfig) -> bool:
    """Trainability policy. The frontend stays frozen in every mode; the
    teacher is frozen wholesale; the final norm is carried but not tuned."""
    if config.role is Role.TEACHER:
        return False
    if name.startswith("frontend.") or name.startswith("final_norm."):
        return False
    if name.startswith("pos_conv."):
        return config.pos_conv_trainable
    return True


@dataclass
class EncoderState:
    config: EncoderConfig
    params: dict[str, Tensor]

    def trainable(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if p.requires_grad}

    def freeze_all(self):
        for p in self.params.values():
            p.requires_grad = False

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def _init_array(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    if name.endswith(".gain"):
        return np.ones(shape)
    if name.endswith(".bias"):
        return np.zeros(shape)
    return rng.normal(0.0, INIT_STD, size=shape)


def make_state(config: EncoderConfig, seed: int = 0) -> EncoderState:
    """Fresh state with seeded random init (projections normal(0, 0.02),
    biases zero, norm gains one)."""
    rng = np.random.default_rng(seed)
    params = {
        name: Tensor(_init_array(name, shape, rng), requires_grad=is_trainable(name, config))
        for name, shape in parameter_shapes(config).items()
    }
    return EncoderState(config, params)


@dataclass
class ForwardTrace:
    """x_0 plus every layer output, each T×d.

    For a masked student pass, ``layers[N/2 - 1]`` holds the mid-stack
    representation before the word-level mask is injected; the masked
    version only ever exists as the next layer's input.
    """

    x0: Tensor
    layers: list[Tensor]
    config: EncoderConfig = field(repr=False)

    def rep(self, j: int) -> Tensor:
        """Representation after layer j; rep(0) is the frontend output."""
        if not 0 <= j <= len(self.layers):
            raise ContractViolation(
                f"rep({j}) out of range for {len(self.layers)} layers"
            )
        return self.x0 if j == 0 else self.layers[j - 1]

    @property
    def reps(self) -> list[Tensor]:
        return [self.x0] + list(self.layers)

    @property
    def final(self) -> Tensor:
        return self.rep(len(self.layers))

    @property
    def num_frames(self) -> int:
        return self.x0.shape[0]


# ---------------------------------------------------------------------------
# forward pieces


def conv_frontend(clip: AudioClip, state: EncoderState) -> Tensor:
    """Strided conv stages with GELU, then channel layer-norm and a linear
    projection to model dim. Produces T = ceil(len / stride_total) frames."""
    cfg = state.config
    n = len(clip.samples)
    if n < cfg.stride_total:
        raise ContractViolation(
            f"clip of {n} samples is shorter than one stride ({cfg.stride_total})"
        )
    x = Tensor(clip.samples.reshape(1, -1))
    for i, (_c, k, s) in enumerate(cfg.conv_frontend):
        w = state.params[f"frontend.{i}.weight"]
        b = state.params[f"frontend.{i}.bias"]
        # right-pad k-1 so each stage yields ceil(L/s) head-aligned frames
        x = tc.conv1d(x, w, b, stride=s, padding=(0, k - 1))
        x = tc.gelu(x)
    x = tc.transpose(x)  # (T, C)
    x = tc.layer_norm(x, state.params["frontend.norm.gain"], state.params["frontend.norm.bias"])
    x = tc.add_bias(tc.matmul(x, state.params["frontend.proj.weight"]), state.params["frontend.proj.bias"])
    return x


def _with_positional(x0: Tensor, state: EncoderState) -> Tensor:
    if state.config.pos_conv is None:
        return x0
    k, g = state.config.pos_conv
    pe = tc.conv1d(
        tc.transpose(x0),
        state.params["pos_conv.weight"],
        state.params["pos_conv.bias"],
        stride=1,
        padding=(k // 2, k - 1 - k // 2),
        groups=g,
    )
    return tc.add(x0, tc.transpose(tc.gelu(pe)))


def transformer_layer(x: Tensor, state: EncoderState, index: int) -> Tensor:
    """Pre-norm block: x + MSA(LN(x)), then + FFN(LN(.))."""
    cfg = state.config
    if x.ndim != 2 or x.shape[1] != cfg.dim:
        raise ShapeMismatch(f"transformer_layer: got {x.shape}, dim {cfg.dim}")
    p = state.params
    pre = f"layer.{index}"
    t_frames = x.shape[0]
    h = cfg.heads
    dh = cfg.dim // h

    def linear(inp, name):
        return tc.add_bias(tc.matmul(inp, p[f"{name}.weight"]), p[f"{name}.bias"])

    def heads_first(inp):  # (T, d) -> (h, T, dh)
        return tc.transpose(tc.reshape(inp, (t_frames, h, dh)), (1, 0, 2))

    normed = tc.layer_norm(x, p[f"{pre}.ln1.gain"], p[f"{pre}.ln1.bias"])
    q = heads_first(linear(normed, f"{pre}.attn.q"))
    k = heads_first(linear(normed, f"{pre}.attn.k"))
    v = heads_first(linear(normed, f"{pre}.attn.v"))
    scores = tc.smul(tc.matmul(q, tc.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    ctx = tc.matmul(tc.softmax(scores), v)  # (h, T, dh)
    ctx = tc.reshape(tc.transpose(ctx, (1, 0, 2)), (t_frames, cfg.dim))
    x = tc.add(x, linear(ctx, f"{pre}.attn.o"))

    normed = tc.layer_norm(x, p[f"{pre}.ln2.gain"], p[f"{pre}.ln2.bias"])
    f1 = tc.relu(linear(normed, f"{pre}.ffn.w1"))
    return tc.add(x, linear(f1, f"{pre}.ffn.w2"))


def add_mask(x: Tensor, mask_embedding: Tensor, indices: np.ndarray) -> Tensor:
    """Substitute the mask embedding at the given frame rows."""
    return tc.row_replace(x, np.asarray(indices, dtype=np.int64), mask_embedding)


def forward(clip: AudioClip, state: EncoderState, plan: MaskPlan | None = None) -> ForwardTrace:
    """Run the stack; with a plan, inject phoneme masks at the input and
    word masks after layer N/2."""
    cfg = state.config
    x0 = _with_positional(conv_frontend(clip, state), state)
    if plan is not None:
        if cfg.num_layers % 2:
            raise ContractViolation(
                f"masked forward needs an even layer count, got {cfg.num_layers}"
            )
        mk = state.params["mask_embedding"]
        x = add_mask(x0, mk, plan.phoneme_indices)
    else:
        x = x0
    mid = cfg.num_layers // 2
    layers: list[Tensor] = []
    for i in range(cfg.num_layers):
        x = transformer_layer(x, state, i)
        layers.append(x)
        if plan is not None and i == mid - 1:
            x = add_mask(x, mk, plan.word_indices)
    return ForwardTrace(x0, layers, cfg)


def student_forward(clip: AudioClip, state: EncoderState, plan: MaskPlan) -> ForwardTrace:
    if state.config.role is not Role.STUDENT:
        raise ContractViolation("student_forward needs a student state")
    if state.config.num_layers % 2:
        raise ContractViolation(
            f"student layer count must be even, got {state.config.num_layers}"
        )
    return forward(clip, state, plan)


def teacher_forward(clip: AudioClip, state: EncoderState) -> ForwardTrace:
    if state.config.role is not Role.TEACHER:
        raise ContractViolation("teacher_forward needs a teacher state")
    return forward(clip, state, None)


def final_normalized(trace: ForwardTrace, state: EncoderState) -> Tensor:
    """Final layer output with the carried final norm applied (when present)."""
    out = trace.final
    if state.config.apply_final_ln and "final_norm.gain" in state.params:
        out = tc.layer_norm(out, state.params["final_norm.gain"], state.params["final_norm.bias"])
    return out


# ---------------------------------------------------------------------------
# accounting


def param_count(config: EncoderConfig) -> int:
    """Exact element count over the canonical parameter inventory."""
    return sum(int(np.prod(s)) for s in parameter_shapes(config).values())


def flops_estimate(config: EncoderConfig, t_frames: int) -> float:
    """Analytic multiply-accumulate count for one forward pass.

    Counts convolutions and matrix products only (norms, activations, and
    softmax are excluded); one MAC = one multiply + one add.
    """
    if t_frames < 1:
        raise ContractViolation(f"t_frames must be >= 1, got {t_frames}")
    d = config.dim
    macs = 0.0
    length = t_frames * config.stride_total
    c_prev = 1
    for c, k, s in config.conv_frontend:
        length = math.ceil(length / s)
        macs += c * c_prev * k * length
        c_prev = c
    macs += c_prev * d * t_frames  # projection
    if config.pos_conv is not None:
        k, g = config.pos_conv
        macs += d * (d // g) * k * t_frames
    per_layer = 4 * t_frames * d * d + 2 * t_frames * t_frames * d + 2 * t_frames * d * config.ffn_dim
    macs += config.num_layers * per_layer
    return float(macs)
