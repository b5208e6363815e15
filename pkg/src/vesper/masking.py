"""Emotion-guided mask placement.

Centers are sampled from energy zones (half High, half Low), optionally
restricted to frames with strong pitch variation, then expanded to
phoneme-scale (160 ms) and word-scale (800 ms) spans. Word-level centers
are a subsample of the phoneme-level centers, so word masks inherit
phoneme mask positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .audio import AudioClip, EnergyProfile, Zone
from .errors import ContractViolation

F0_MIN_HZ = 60.0
F0_MAX_HZ = 400.0
PITCH_WINDOW_SAMPLES = 640  # 40 ms at 16 kHz
_VOICING_THRESHOLD = 0.3
_OCTAVE_TOLERANCE = 0.9  # prefer the smallest lag within this factor of the peak


class Strategy(str, Enum):
    ENERGY = "energy"
    ENERGY_PITCH = "energy_pitch"
    RANDOM = "random"


@dataclass
class MaskConfig:
    phoneme_span_ms: int = 160
    word_span_ms: int = 800
    phoneme_count: int = 20
    word_count: int = 4
    stride_ms: int = 20
    strategy: Strategy = Strategy.ENERGY
    pitch_variation_threshold: float | None = None
    seed: int = 0

    def __post_init__(self):
        self.strategy = Strategy(self.strategy)
        if min(self.phoneme_span_ms, self.word_span_ms, self.phoneme_count,
               self.word_count, self.stride_ms) <= 0:
            raise ContractViolation("mask spans and counts must be positive")
        if self.word_count > self.phoneme_count:
            raise ContractViolation(
                f"word_count {self.word_count} exceeds phoneme_count {self.phoneme_count}"
            )
        if self.strategy is Strategy.ENERGY_PITCH and self.pitch_variation_threshold is None:
            raise ContractViolation(
                "energy_pitch strategy needs pitch_variation_threshold"
            )

    @property
    def phoneme_span_frames(self) -> int:
        return max(1, round(self.phoneme_span_ms / self.stride_ms))

    @property
    def word_span_frames(self) -> int:
        return max(1, round(self.word_span_ms / self.stride_ms))


@dataclass
class MaskPlan:
    phoneme_centers: np.ndarray  # sorted frame indices
    word_centers: np.ndarray  # sorted, subset of phoneme_centers
    phoneme_indices: np.ndarray  # sorted masked frame set (phoneme spans)
    word_indices: np.ndarray  # sorted masked frame set (word spans)
    zone_of_center: dict[int, Zone]
    flags: list[str] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "centers_p": self.phoneme_centers.tolist(),
            "centers_w": self.word_centers.tolist(),
            "zones": {str(c): z.value for c, z in sorted(self.zone_of_center.items())},
            "I_p": self.phoneme_indices.tolist(),
            "I_w": self.word_indices.tolist(),
            "flags": sorted(self.flags),
        }


def _zone_pools(profile: EnergyProfile) -> dict[Zone, np.ndarray]:
    zones = profile.zones
    if zones is None:
        raise ContractViolation("profile has no zone labels; normalize it first")
    return {
        z: np.array([f for f, zf in enumerate(zones) if zf is z], dtype=np.int64)
        for z in (Zone.HIGH, Zone.LOW, Zone.NOISE)
    }


def _select_zone_centers(
    profile: EnergyProfile,
    count: int,
    seed: int,
    scores: np.ndarray | None,
    threshold: float,
) -> tuple[np.ndarray, dict[int, Zone], set[str]]:
    """Shared selector behind the energy and energy+pitch strategies.

    The RNG consumption order is fixed (High preferred, High rest, Low
    preferred, Low rest, Noise) so that a threshold of zero reproduces the
    pure-energy plan exactly.
    """
    flags: set[str] = set()
    t_frames = profile.num_frames
    if count > t_frames:
        count = t_frames
        flags.add("count_reduced")
    pools = _zone_pools(profile)
    rng = np.random.default_rng(seed)

    ordered: dict[Zone, np.ndarray] = {}
    below_threshold: set[int] = set()
    for zone in (Zone.HIGH, Zone.LOW):
        pool = pools[zone]
        if scores is not None:
            passing = pool[scores[pool] >= threshold]
            rest = pool[scores[pool] < threshold]
            below_threshold.update(int(f) for f in rest)
        else:
            passing, rest = pool, pool[:0]
        ordered[zone] = np.concatenate([rng.permutation(passing), rng.permutation(rest)])
    noise_order = rng.permutation(pools[Zone.NOISE])

    need_high = math.ceil(count / 2)
    need_low = count - need_high
    take_high = min(need_high, len(ordered[Zone.HIGH]))
    take_low = min(need_low, len(ordered[Zone.LOW]))

    selected = list(ordered[Zone.HIGH][:take_high]) + list(ordered[Zone.LOW][:take_low])
    deficit = count - len(selected)
    if deficit > 0:
        flags.add("zone_deficit")
        leftovers = np.concatenate(
            [ordered[Zone.LOW][take_low:], ordered[Zone.HIGH][take_high:]]
        )
        selected += list(leftovers[:deficit])
        deficit -= len(leftovers[:deficit])
    if deficit > 0:
        selected += list(noise_order[:deficit])
    if any(int(c) in below_threshold for c in selected):
        flags.add("pitch_backfill")

    centers = np.array(sorted(int(c) for c in selected), dtype=np.int64)
    zone_map = {int(c): profile.zones[int(c)] for c in centers}
    return centers, zone_map, flags


def select_centers_energy(
    profile: EnergyProfile, count: int, seed: int
) -> tuple[np.ndarray, dict[int, Zone], set[str]]:
    """Sample ceil(count/2) High-zone and floor(count/2) Low-zone centers."""
    if count < 1:
        raise ContractViolation(f"count must be >= 1, got {count}")
    return _select_zone_centers(profile, count, seed, None, 0.0)


def select_centers_energy_pitch(
    profile: EnergyProfile,
    scores: np.ndarray,
    threshold: float,
    count: int,
    seed: int,
) -> tuple[np.ndarray, dict[int, Zone], set[str]]:
    """Energy selection with candidate pools restricted to frames whose
    pitch-variation score reaches the threshold; short pools are backfilled
    from the unrestricted zone pool and flagged."""
    if count < 1:
        raise ContractViolation(f"count must be >= 1, got {count}")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (profile.num_frames,):
        raise ContractViolation(
            f"scores length {scores.shape} does not match {profile.num_frames} frames"
        )
    return _select_zone_centers(profile, count, seed, scores, threshold)


# ---------------------------------------------------------------------------
# pitch variation


def _estimate_f0(segment: np.ndarray, rate: int) -> float:
    seg = segment - segment.mean()
    power = float((seg * seg).sum())
    if power < 1e-8:
        return 0.0
    ac = np.correlate(seg, seg, mode="full")[len(seg) - 1:]
    ac = ac / ac[0]
    lag_min = int(rate / F0_MAX_HZ)
    lag_max = min(int(math.ceil(rate / F0_MIN_HZ)), len(ac) - 1)
    if lag_max <= lag_min:
        return 0.0
    window = ac[lag_min:lag_max + 1]
    peak = float(window.max())
    if peak < _VOICING_THRESHOLD:
        return 0.0
    # a pure tone peaks at every multiple of its period; take the smallest
    # lag close to the best peak so octave errors do not masquerade as
    # pitch changes
    good = np.nonzero(window >= _OCTAVE_TOLERANCE * peak)[0]
    lag = lag_min + int(good[0])
    return rate / lag


def pitch_change_scores(clip: AudioClip, stride: int = 320) -> np.ndarray:
    """Per latent frame, |F0(f) - F0(f-1)| from a 40 ms autocorrelation
    estimate (search range 60-400 Hz, unvoiced frames give F0 = 0)."""
    x = clip.samples
    frames = math.ceil(len(x) / stride) if len(x) else 0
    pad = max(0, (frames - 1) * stride + PITCH_WINDOW_SAMPLES - len(x))
    padded = np.concatenate([x, np.zeros(pad)])
    f0 = np.array(
        [
            _estimate_f0(padded[f * stride:f * stride + PITCH_WINDOW_SAMPLES], clip.sample_rate)
            for f in range(frames)
        ]
    )
    scores = np.zeros(frames)
    if frames > 1:
        scores[1:] = np.abs(np.diff(f0))
    return scores


# ---------------------------------------------------------------------------
# plan assembly


def expand_spans(centers: np.ndarray, span_frames: int, t_frames: int) -> np.ndarray:
    """Union of [c - floor(s/2), c + ceil(s/2)) per center, clipped to [0, T)."""
    lo_off = span_frames // 2
    hi_off = span_frames - lo_off
    masked: set[int] = set()
    for c in centers:
        start = max(0, int(c) - lo_off)
        stop = min(t_frames, int(c) + hi_off)
        masked.update(range(start, stop))
    return np.array(sorted(masked), dtype=np.int64)


def build_plan(
    config: MaskConfig,
    profile: EnergyProfile,
    t_frames: int,
    seed: int | None = None,
    scores: np.ndarray | None = None,
) -> MaskPlan:
    """Select centers by the configured strategy and expand them to spans.

    The word-level centers are a seeded without-replacement subsample of
    the phoneme-level centers.
    """
    if t_frames == 0:
        raise ContractViolation("cannot build a mask plan for an empty clip")
    if profile.num_frames != t_frames:
        raise ContractViolation(
            f"profile has {profile.num_frames} frames, encoder expects {t_frames}"
        )
    seed = config.seed if seed is None else seed

    if config.strategy is Strategy.RANDOM:
        rng = np.random.default_rng(seed)
        count = min(config.phoneme_count, t_frames)
        flags = {"count_reduced"} if count < config.phoneme_count else set()
        centers = np.sort(rng.choice(t_frames, size=count, replace=False))
        zone_map = (
            {int(c): profile.zones[int(c)] for c in centers}
            if profile.zones is not None
            else {}
        )
    elif config.strategy is Strategy.ENERGY_PITCH:
        if scores is None:
            raise ContractViolation("energy_pitch strategy needs pitch scores")
        centers, zone_map, flags = select_centers_energy_pitch(
            profile, scores, config.pitch_variation_threshold, config.phoneme_count, seed
        )
    else:
        centers, zone_map, flags = select_centers_energy(
            profile, config.phoneme_count, seed
        )

    sub_rng = np.random.default_rng(_mix_seed(seed, 0x77))
    word_n = min(config.word_count, len(centers))
    word_centers = np.sort(sub_rng.choice(centers, size=word_n, replace=False))

    return MaskPlan(
        phoneme_centers=centers,
        word_centers=word_centers,
        phoneme_indices=expand_spans(centers, config.phoneme_span_frames, t_frames),
        word_indices=expand_spans(word_centers, config.word_span_frames, t_frames),
        zone_of_center=zone_map,
        flags=sorted(flags),
    )


def _mix_seed(seed: int, salt: int) -> int:
    return int(np.random.SeedSequence([seed, salt]).generate_state(1)[0])
