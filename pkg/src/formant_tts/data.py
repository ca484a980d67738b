"""Synthetic source-filter corpus.

Each target frame is built additively in the log-mel domain::

    mel[t] = formant_profile[phoneme] + speaker_offset[speaker] + excitation(f0[t])

where ``excitation`` is a Gaussian bump centred on the bin

    bin(f) = round((M - 1) * (log f - log f_min) / (log f_max - log f_min))

so pitch is recoverable from the bump position.  Profiles are stored on a
2**-20 grid, which keeps every sum above exact in float64 and makes the
decomposition testable bit for bit.  This is a deliberately favourable corpus
for a summation-based decoder.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import container
from .errors import ConfigurationError, ContractError, LoadError

UNVOICED_ID = 0
CORPUS_MAGIC = b"FTTSCORP"
CORPUS_VERSION = 1
_GRID = 2.0 ** -20


@dataclass
class CorpusConfig:
    n_utterances: int = 64
    vocab_size: int = 16  # voiced phonemes; id 0 is the extra unvoiced phoneme
    n_speakers: int = 1
    n_mel_bins: int = 16
    f_min: float = 80.0
    f_max: float = 400.0
    min_phonemes: int = 4
    max_phonemes: int = 10
    min_duration: int = 2
    max_duration: int = 6
    unvoiced_prob: float = 0.15
    excitation_amplitude: float = 2.0
    excitation_width: float = 0.7
    pitch_step_semitones: float = 1.5
    pitch_span_semitones: float = 5.0
    utterance_register_semitones: float = 4.0
    speaker_spread_semitones: float = 3.0
    frame_jitter_semitones: float = 0.15
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.f_min > 0:
            raise ConfigurationError(f"f_min must be positive, got {self.f_min}")
        if not self.f_max > self.f_min:
            raise ConfigurationError(f"f_max ({self.f_max}) must exceed f_min ({self.f_min})")
        if not 1 <= self.min_phonemes <= self.max_phonemes:
            raise ConfigurationError(
                f"min_phonemes/max_phonemes range [{self.min_phonemes}, {self.max_phonemes}] invalid")
        if not 1 <= self.min_duration <= self.max_duration:
            raise ConfigurationError(
                f"min_duration/max_duration range [{self.min_duration}, {self.max_duration}] invalid")
        if self.n_mel_bins < 2:
            raise ConfigurationError("n_mel_bins must be at least 2")
        for name in ("n_utterances", "vocab_size", "n_speakers"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if not 0.0 <= self.unvoiced_prob < 1.0:
            raise ConfigurationError(f"unvoiced_prob must be in [0, 1), got {self.unvoiced_prob}")
        if min(self.pitch_step_semitones, self.pitch_span_semitones, self.utterance_register_semitones,
               self.speaker_spread_semitones, self.frame_jitter_semitones) < 0:
            raise ConfigurationError("pitch variation parameters must be non-negative")
        if self.excitation_amplitude <= 0 or self.excitation_width <= 0:
            raise ConfigurationError("excitation_amplitude and excitation_width must be positive")

    @property
    def model_vocab_size(self) -> int:
        return self.vocab_size + 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class F0Track:
    frame_hz: np.ndarray
    voiced: np.ndarray

    def __post_init__(self):
        self.frame_hz = np.asarray(self.frame_hz, dtype=np.float64)
        self.voiced = np.asarray(self.voiced, dtype=bool)
        if self.frame_hz.shape != self.voiced.shape:
            raise ContractError("frame_hz and voiced differ in length")

    @classmethod
    def from_hz(cls, frame_hz) -> "F0Track":
        frame_hz = np.asarray(frame_hz, dtype=np.float64)
        return cls(np.where(frame_hz > 0, frame_hz, 0.0), frame_hz > 0)

    def __len__(self) -> int:
        return self.frame_hz.size


@dataclass
class PhonemeUtterance:
    phoneme_ids: np.ndarray
    durations: np.ndarray
    phoneme_pitch_hz: np.ndarray
    speaker_id: int
    target_mel: np.ndarray
    frame_f0_hz: Optional[np.ndarray] = None

    @property
    def n_frames(self) -> int:
        return int(self.durations.sum())

    @property
    def log_durations(self) -> np.ndarray:
        return np.log(self.durations.astype(np.float64) + 1.0)

    def frame_pitch_hz(self, shift: Optional[np.ndarray] = None) -> np.ndarray:
        """Phoneme-level pitch expanded to frames."""
        pitch = self.phoneme_pitch_hz if shift is None else shift
        return np.repeat(pitch, self.durations)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PhonemeUtterance):
            return NotImplemented
        return (self.speaker_id == other.speaker_id
                and all(_same(getattr(self, k), getattr(other, k))
                        for k in ("phoneme_ids", "durations", "phoneme_pitch_hz",
                                  "target_mel", "frame_f0_hz")))


def _same(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


@dataclass
class PitchStats:
    """Per-speaker mean/std of voiced phoneme pitch in Hz."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def default(cls, n_speakers: int) -> "PitchStats":
        return cls(np.full(n_speakers, 180.0), np.full(n_speakers, 40.0))

    def standardize(self, pitch_hz: np.ndarray, speaker: int) -> np.ndarray:
        pitch_hz = np.asarray(pitch_hz, dtype=np.float64)
        z = (pitch_hz - self.mean[speaker]) / self.std[speaker]
        return np.where(pitch_hz > 0, z, 0.0)

    def destandardize(self, z: np.ndarray, speaker: int) -> np.ndarray:
        return np.asarray(z) * self.std[speaker] + self.mean[speaker]


# ---------------------------------------------------------------- pitch <-> bin


def pitch_to_bin(f_hz, cfg: CorpusConfig) -> np.ndarray:
    """Nearest bump bin for each pitch, clipped to ``[0, M-1]``."""
    f = np.asarray(f_hz, dtype=np.float64)
    span = np.log(cfg.f_max) - np.log(cfg.f_min)
    pos = (cfg.n_mel_bins - 1) * (np.log(np.maximum(f, 1e-12)) - np.log(cfg.f_min)) / span
    return np.clip(np.rint(pos), 0, cfg.n_mel_bins - 1).astype(np.int64)


def bin_to_pitch(b, cfg: CorpusConfig) -> np.ndarray:
    span = np.log(cfg.f_max) - np.log(cfg.f_min)
    return np.exp(np.log(cfg.f_min) + np.asarray(b, dtype=np.float64) * span / (cfg.n_mel_bins - 1))


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.rint(x / _GRID) * _GRID


def bump_shapes(cfg: CorpusConfig) -> np.ndarray:
    """``[M, M]`` matrix; row ``b`` is the unit-height bump centred on bin ``b``."""
    m = np.arange(cfg.n_mel_bins, dtype=np.float64)
    return np.exp(-0.5 * ((m[None, :] - m[:, None]) / cfg.excitation_width) ** 2)


def excitation_profile(frame_f0_hz, cfg: CorpusConfig) -> np.ndarray:
    f = np.atleast_1d(np.asarray(frame_f0_hz, dtype=np.float64))
    bumps = _quantize(cfg.excitation_amplitude * bump_shapes(cfg))
    out = bumps[pitch_to_bin(f, cfg)]
    out[f <= 0] = 0.0
    return out


def formant_profiles(cfg: CorpusConfig) -> np.ndarray:
    """``[vocab_size + 1, M]`` fixed band pattern per phoneme id."""
    rng = np.random.default_rng([cfg.seed, 1])
    M = cfg.n_mel_bins
    m = np.arange(M, dtype=np.float64)
    profiles = np.full((cfg.model_vocab_size, M), -2.0)
    for v in range(cfg.model_vocab_size):
        for _ in range(int(rng.integers(2, 4))):
            centre = rng.uniform(0, M - 1)
            width = rng.uniform(0.8, 2.0)
            profiles[v] += rng.uniform(1.0, 3.0) * np.exp(-0.5 * ((m - centre) / width) ** 2)
    return _quantize(profiles)


def speaker_offsets(cfg: CorpusConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, 2])
    m = np.arange(cfg.n_mel_bins, dtype=np.float64)
    slope = rng.uniform(-0.05, 0.05, size=(cfg.n_speakers, 1))
    level = rng.uniform(-0.5, 0.5, size=(cfg.n_speakers, 1))
    return _quantize(level + slope * m[None, :])


def speaker_base_pitch(cfg: CorpusConfig) -> np.ndarray:
    """Speaker registers scattered around the geometric centre of the pitch range."""
    rng = np.random.default_rng([cfg.seed, 3])
    centre = np.sqrt(cfg.f_min * cfg.f_max)
    spread = rng.uniform(-1.0, 1.0, size=cfg.n_speakers) * cfg.speaker_spread_semitones
    return centre * 2.0 ** (spread / 12.0)


# ---------------------------------------------------------------- generation


def average_pitch_per_phoneme(track: F0Track, durations: Sequence[int]) -> np.ndarray:
    """Mean of voiced frame pitch over each phoneme's span; 0 if none voiced."""
    durations = np.asarray(durations, dtype=np.int64)
    if durations.sum() != len(track):
        raise ContractError(f"durations sum to {durations.sum()} but track has {len(track)} frames")
    bounds = np.concatenate([[0], np.cumsum(durations)])
    out = np.zeros(durations.size)
    for i in range(durations.size):
        sl = slice(bounds[i], bounds[i + 1])
        voiced = track.voiced[sl]
        if voiced.any():
            out[i] = track.frame_hz[sl][voiced].mean()
    return out


def compose_mel(phoneme_ids, durations, frame_f0_hz, speaker_id: int,
                cfg: CorpusConfig, profiles=None, offsets=None) -> np.ndarray:
    profiles = formant_profiles(cfg) if profiles is None else profiles
    offsets = speaker_offsets(cfg) if offsets is None else offsets
    frame_ids = np.repeat(np.asarray(phoneme_ids), durations)
    return (profiles[frame_ids] + offsets[speaker_id]) + excitation_profile(frame_f0_hz, cfg)


def generate_corpus(cfg: CorpusConfig) -> list[PhonemeUtterance]:
    cfg.validate()
    profiles, offsets = formant_profiles(cfg), speaker_offsets(cfg)
    base = speaker_base_pitch(cfg)
    rng = np.random.default_rng([cfg.seed, 4])
    corpus = []
    for _ in range(cfg.n_utterances):
        speaker = int(rng.integers(cfg.n_speakers))
        n = int(rng.integers(cfg.min_phonemes, cfg.max_phonemes + 1))
        ids = rng.integers(1, cfg.vocab_size + 1, size=n)
        ids[rng.random(n) < cfg.unvoiced_prob] = UNVOICED_ID
        durations = rng.integers(cfg.min_duration, cfg.max_duration + 1, size=n)

        walk = np.cumsum(rng.normal(0.0, cfg.pitch_step_semitones, size=n))
        walk = np.clip(walk - walk.mean(), -cfg.pitch_span_semitones, cfg.pitch_span_semitones)
        walk += rng.uniform(-1.0, 1.0) * cfg.utterance_register_semitones
        target_hz = base[speaker] * 2.0 ** (walk / 12.0)
        frame_hz = np.repeat(target_hz, durations)
        frame_hz = frame_hz * 2.0 ** (rng.normal(0.0, cfg.frame_jitter_semitones, frame_hz.size) / 12.0)
        frame_hz[np.repeat(ids == UNVOICED_ID, durations)] = 0.0

        pitch = average_pitch_per_phoneme(F0Track.from_hz(frame_hz), durations)
        mel = compose_mel(ids, durations, frame_hz, speaker, cfg, profiles, offsets)
        corpus.append(PhonemeUtterance(ids.astype(np.int64), durations.astype(np.int64),
                                       pitch, speaker, mel, frame_hz))
    return corpus


def split_corpus(corpus: Sequence[PhonemeUtterance], test_fraction: float,
                 seed: int = 0) -> tuple[list[PhonemeUtterance], list[PhonemeUtterance]]:
    """Deterministic train/test split; ``test_fraction=0`` gives an empty test set."""
    n_test = int(round(test_fraction * len(corpus)))
    order = np.random.default_rng([seed, 5]).permutation(len(corpus))
    test = set(order[:n_test].tolist())
    return ([u for i, u in enumerate(corpus) if i not in test],
            [u for i, u in enumerate(corpus) if i in test])


# ---------------------------------------------------------------- pitch extraction


def extract_f0_synthetic(mel: np.ndarray, cfg: CorpusConfig,
                         threshold: float = 0.5) -> F0Track:
    """Template-matching pitch tracker for mels in this corpus' convention.

    For every frame and every (phoneme, speaker) template, the residual after
    removing the template is fitted with a non-negative bump at each bin; the
    jointly best fit wins.  Frames whose fitted bump height is below
    ``threshold * excitation_amplitude`` are reported unvoiced.
    """
    mel = np.atleast_2d(np.asarray(mel, dtype=np.float64))
    templates = (formant_profiles(cfg)[:, None, :] + speaker_offsets(cfg)[None, :, :])
    templates = templates.reshape(-1, cfg.n_mel_bins)  # [C, M]
    shapes = bump_shapes(cfg)  # [B, M]
    norms = (shapes * shapes).sum(axis=1)  # [B]

    resid = mel[:, None, :] - templates[None, :, :]  # [T, C, M]
    amp = np.maximum(resid @ shapes.T / norms, 0.0)  # [T, C, B]
    energy = ((resid * resid).sum(-1)[..., None]
              - 2.0 * amp * (resid @ shapes.T) + amp * amp * norms)
    T = mel.shape[0]
    flat = energy.reshape(T, -1).argmin(axis=1)
    c, b = np.unravel_index(flat, energy.shape[1:])
    height = amp[np.arange(T), c, b]
    voiced = height >= threshold * cfg.excitation_amplitude
    return F0Track(np.where(voiced, bin_to_pitch(b, cfg), 0.0), voiced)


def compute_pitch_stats(corpus: Sequence[PhonemeUtterance], n_speakers: int) -> "PitchStats":
    mean = np.full(n_speakers, 180.0)
    std = np.full(n_speakers, 40.0)
    for s in range(n_speakers):
        voiced = np.concatenate([u.phoneme_pitch_hz[u.phoneme_pitch_hz > 0]
                                 for u in corpus if u.speaker_id == s] or [np.zeros(0)])
        if voiced.size:
            mean[s] = voiced.mean()
        if voiced.size > 1 and voiced.std() > 1e-6:
            std[s] = voiced.std()
    return PitchStats(mean, std)


# ---------------------------------------------------------------- persistence


_FIELDS = ("phoneme_ids", "durations", "phoneme_pitch_hz", "target_mel", "frame_f0_hz")


def save_corpus(corpus: Sequence[PhonemeUtterance], path, cfg: Optional[CorpusConfig] = None) -> None:
    header = {"n_utterances": len(corpus),
              "config": cfg.to_dict() if cfg is not None else None,
              "speakers": [int(u.speaker_id) for u in corpus]}
    records = []
    for i, u in enumerate(corpus):
        for name in _FIELDS:
            value = getattr(u, name)
            if value is not None:
                records.append((f"{i}/{name}", value))
    container.write(path, CORPUS_MAGIC, CORPUS_VERSION, header, records)


def load_corpus(path) -> tuple[list[PhonemeUtterance], Optional[CorpusConfig]]:
    header, records = container.read(path, CORPUS_MAGIC, CORPUS_VERSION)
    try:
        speakers = header["speakers"]
        n = int(header["n_utterances"])
    except (KeyError, TypeError, ValueError) as exc:
        raise LoadError(f"corpus header missing field: {exc}") from exc
    fields: list[dict] = [{} for _ in range(n)]
    for name, arr in records:
        idx, _, key = name.partition("/")
        if not idx.isdigit() or int(idx) >= n or key not in _FIELDS:
            raise LoadError(f"unexpected record {name!r}")
        fields[int(idx)][key] = arr
    corpus = []
    for i, f in enumerate(fields):
        missing = [k for k in _FIELDS[:4] if k not in f]
        if missing:
            raise LoadError(f"record {i} lacks {', '.join(missing)}")
        utt = PhonemeUtterance(f["phoneme_ids"], f["durations"], f["phoneme_pitch_hz"],
                               int(speakers[i]), f["target_mel"], f.get("frame_f0_hz"))
        if utt.target_mel.shape[0] != utt.n_frames:
            raise LoadError(f"record {i}: mel has {utt.target_mel.shape[0]} frames, "
                            f"durations sum to {utt.n_frames}")
        corpus.append(utt)
    cfg = CorpusConfig(**header["config"]) if header.get("config") else None
    return corpus, cfg


def export_corpus_json(corpus: Sequence[PhonemeUtterance], path) -> None:
    """Human-readable dump for inspection; not read back."""
    rows = []
    for u in corpus:
        rows.append({
            "speaker_id": int(u.speaker_id),
            "phoneme_ids": u.phoneme_ids.tolist(),
            "durations": u.durations.tolist(),
            "phoneme_pitch_hz": [round(float(x), 3) for x in u.phoneme_pitch_hz],
            "target_mel": [[round(float(x), 4) for x in row] for row in u.target_mel],
        })
    Path(path).write_text(json.dumps(rows, indent=1))
