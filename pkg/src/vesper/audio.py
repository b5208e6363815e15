"""Waveform ingest and framing.

Hand-rolled RIFF/WAVE reader (PCM16 and IEEE float32), fixed-duration
crop/pad, per-frame RMS energy with the three-zone labelling used by the
masking strategy, and the JSON-lines dataset manifest.

Frame length and hop default to the encoder stride (320 samples = 20 ms) so
energy frames index latent frames 1:1.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ManifestError, UnsupportedRate, WavParseError

SAMPLE_RATE = 16000
FRAME_SAMPLES = 320  # 20 ms at 16 kHz, equal to the encoder stride


class Zone(str, Enum):
    HIGH = "High"
    LOW = "Low"
    NOISE = "Noise"


@dataclass
class AudioClip:
    samples: np.ndarray  # float64 mono in [-1, 1]
    sample_rate: int
    source_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class EnergyProfile:
    frame_length: int
    hop: int
    rms: np.ndarray
    normalized: np.ndarray = field(default=None)  # type: ignore[assignment]
    zones: list[Zone] = field(default=None)  # type: ignore[assignment]

    @property
    def num_frames(self) -> int:
        return len(self.rms)


def _read_exact(buf: bytes, offset: int, count: int, what: str) -> bytes:
    if offset + count > len(buf):
        raise WavParseError(f"truncated while reading {what}", offset)
    return buf[offset:offset + count]


def load_wav(path) -> AudioClip:
    """Decode a RIFF/WAVE file to a mono float clip.

    PCM16 samples are scaled by 1/32768; float32 is taken as-is.
    Multichannel audio is averaged down to mono. Rates other than 16 kHz
    are rejected rather than resampled.
    """
    path = Path(path)
    buf = path.read_bytes()
    if _read_exact(buf, 0, 4, "container magic") != b"RIFF":
        raise WavParseError("not a RIFF container", 0)
    if _read_exact(buf, 8, 4, "RIFF form type") != b"WAVE":
        raise WavParseError("RIFF form type is not WAVE", 8)

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(buf):
        chunk_id = buf[pos:pos + 4]
        (size,) = struct.unpack_from("<I", buf, pos + 4)
        body = _read_exact(buf, pos + 8, size, f"chunk {chunk_id!r}")
        if chunk_id == b"fmt ":
            if size < 16:
                raise WavParseError("fmt chunk shorter than 16 bytes", pos + 4)
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            data = (pos + 8, body)
        pos += 8 + size + (size & 1)  # chunks are word-aligned

    if fmt is None:
        raise WavParseError("no fmt chunk", pos)
    if data is None:
        raise WavParseError("no data chunk", pos)
    audio_format, channels, rate, _byte_rate, _block_align, bits = fmt
    data_offset, payload = data

    if audio_format == 1 and bits == 16:
        raw = np.frombuffer(payload, dtype="<i2")
        samples = raw.astype(np.float64) / 32768.0
    elif audio_format == 3 and bits == 32:
        samples = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    else:
        raise WavParseError(
            f"unsupported encoding (format {audio_format}, {bits}-bit)", data_offset
        )
    if channels < 1:
        raise WavParseError("zero channels", data_offset)
    if channels > 1:
        usable = (len(samples) // channels) * channels
        samples = samples[:usable].reshape(-1, channels).mean(axis=1)
    if rate != SAMPLE_RATE:
        raise UnsupportedRate(f"{path}: sample rate {rate}, expected {SAMPLE_RATE}")
    return AudioClip(samples, rate, source_id=str(path))


def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE):
    """Write mono PCM16. Used by the demo generator and fixtures."""
    clipped = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.round(clipped * 32767.0).astype("<i2")
    payload = pcm.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack(
        "<IHHIIHH", 16, 1, 1, sample_rate, sample_rate * 2, 2, 16
    )
    header += b"data" + struct.pack("<I", len(payload))
    Path(path).write_bytes(header + payload)


def crop_or_pad(clip: AudioClip, duration_s: float) -> AudioClip:
    """Fix the clip length: truncate from the head, zero-pad at the tail."""
    target = round(duration_s * clip.sample_rate)
    x = clip.samples
    if len(x) > target:
        x = x[:target]
    elif len(x) < target:
        x = np.concatenate([x, np.zeros(target - len(x))])
    return AudioClip(x, clip.sample_rate, clip.source_id)


def rms_energy(
    clip: AudioClip,
    frame_length: int = FRAME_SAMPLES,
    hop: int = FRAME_SAMPLES,
) -> EnergyProfile:
    """Per-frame root-mean-square energy over head-aligned frames.

    The trailing partial frame is zero-padded to full length, and the frame
    count is ceil(len / hop) to match the encoder latent length.
    """
    x = clip.samples
    if len(x) == 0:
        return EnergyProfile(frame_length, hop, np.zeros(0))
    frames = math.ceil(len(x) / hop)
    padded_len = (frames - 1) * hop + frame_length
    padded = np.concatenate([x, np.zeros(max(0, padded_len - len(x)))])
    idx = np.arange(frames)[:, None] * hop + np.arange(frame_length)[None, :]
    windows = padded[idx]
    rms = np.sqrt((windows**2).mean(axis=1))
    return EnergyProfile(frame_length, hop, rms)


def normalize_and_zone(profile: EnergyProfile) -> EnergyProfile:
    """Divide by the peak and label each frame High/Low/Noise.

    High is (0.5, 1], Low is (0.2, 0.5], Noise is [0, 0.2]; an all-zero
    profile stays zero and is all Noise.
    """
    peak = profile.rms.max() if profile.num_frames else 0.0
    normalized = profile.rms / peak if peak > 0 else np.zeros_like(profile.rms)
    zones = [
        Zone.HIGH if v > 0.5 else Zone.LOW if v > 0.2 else Zone.NOISE
        for v in normalized
    ]
    return EnergyProfile(profile.frame_length, profile.hop, profile.rms, normalized, zones)


def energy_profile(clip: AudioClip) -> EnergyProfile:
    """rms_energy followed by normalize_and_zone at the default framing."""
    return normalize_and_zone(rms_energy(clip))


# ---------------------------------------------------------------------------
# dataset manifest


@dataclass
class ManifestEntry:
    path: Path
    label: str
    speaker: str
    split: str


def load_manifest(path, require_exists: bool = True) -> list[ManifestEntry]:
    """Read a JSON-lines manifest of {path, label, speaker, split}.

    Relative audio paths resolve against the manifest's directory.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    entries = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: bad JSON: {exc}") from exc
        missing = {"path", "label", "speaker", "split"} - set(record)
        if missing:
            raise ManifestError(
                f"{path}:{lineno}: missing fields {sorted(missing)}"
            )
        wav = Path(record["path"])
        if not wav.is_absolute():
            wav = path.parent / wav
        if require_exists and not wav.is_file():
            raise ManifestError(f"{path}:{lineno}: no such file {wav}")
        entries.append(
            ManifestEntry(wav, str(record["label"]), str(record["speaker"]), str(record["split"]))
        )
    if not entries:
        raise ManifestError(f"{path}: manifest is empty")
    return entries


def save_manifest(path, entries: list[ManifestEntry]):
    lines = [
        json.dumps(
            {
                "path": str(e.path),
                "label": e.label,
                "speaker": e.speaker,
                "split": e.split,
            },
            sort_keys=True,
        )
        for e in entries
    ]
    Path(path).write_text("\n".join(lines) + "\n")
