"""Shared builders for loop-level tests: tiny encoder configs whose frame
rate matches the 320-sample energy frames, and small synthetic corpora."""

import numpy as np
import pytest

from vesper.audio import ManifestEntry, write_wav
from vesper.encoder import EncoderConfig, Role, make_state
from vesper.masking import MaskConfig

SR = 16000

# single conv stage with stride 320 keeps encoder frames aligned with
# energy frames, so mask plans built from profiles fit the traces
TINY_FRONTEND = ((8, 320, 320),)


def tiny_student_config(num_layers=2, dim=8, **kw):
    kw.setdefault("heads", 2)
    kw.setdefault("ffn_dim", 16)
    kw.setdefault("conv_frontend", TINY_FRONTEND)
    kw.setdefault("pos_conv", None)
    return EncoderConfig(num_layers, dim, role=Role.STUDENT, **kw)


def tiny_teacher_config(num_layers=4, dim=8, **kw):
    kw.setdefault("heads", 2)
    kw.setdefault("ffn_dim", 16)
    kw.setdefault("conv_frontend", TINY_FRONTEND)
    kw.setdefault("pos_conv", None)
    return EncoderConfig(num_layers, dim, role=Role.TEACHER, **kw)


def tiny_mask_config(**kw):
    kw.setdefault("phoneme_span_ms", 60)
    kw.setdefault("word_span_ms", 100)
    kw.setdefault("phoneme_count", 4)
    kw.setdefault("word_count", 2)
    return MaskConfig(**kw)


def tone_samples(freq, amplitude, duration_s, seed=None):
    t = np.arange(int(round(duration_s * SR))) / SR
    x = amplitude * np.sin(2 * np.pi * freq * t)
    if seed is not None:
        x = x + np.random.default_rng(seed).normal(0, 0.01, t.size)
    return np.clip(x, -0.999, 0.999)


def write_clip(path, freq=220.0, amplitude=0.5, duration_s=0.5, seed=None):
    write_wav(path, tone_samples(freq, amplitude, duration_s, seed))
    return path


def noise_samples(amplitude, duration_s, seed):
    rng = np.random.default_rng(seed)
    return np.clip(amplitude * rng.normal(0, 1, int(round(duration_s * SR))), -0.999, 0.999)


def tone_corpus(root, count=4, duration_s=0.5):
    """Tone/noise two-class corpus, one speaker per clip pair.

    Tones sit at 250 Hz, a multiple of the 50 Hz frame rate, so every
    320-sample frame sees the same waveform and the class signal survives
    mean pooling; broadband noise pools to near zero. A linear head on
    frozen random features separates the two reliably.
    """
    entries = []
    for i in range(count):
        is_tone = i % 2 == 0
        path = root / f"clip{i:02d}.wav"
        if is_tone:
            samples = tone_samples(250.0, 0.5 + 0.05 * (i // 2), duration_s, seed=i)
        else:
            samples = noise_samples(0.35, duration_s, seed=100 + i)
        write_wav(path, samples)
        entries.append(ManifestEntry(
            path=path,
            label="tone" if is_tone else "noise",
            speaker=f"spk{i // 2}",
            split="train",
        ))
    return entries


@pytest.fixture
def corpus(tmp_path):
    return tone_corpus(tmp_path, count=4)


@pytest.fixture
def tiny_pair():
    teacher = make_state(tiny_teacher_config(), seed=1)
    student = make_state(tiny_student_config(), seed=2)
    return teacher, student
