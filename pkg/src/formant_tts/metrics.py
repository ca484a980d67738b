"""Objective metrics: f0 frame error, mel-cepstral distortion, cepstral envelopes."""

from __future__ import annotations

import numpy as np
from scipy.fft import dct, idct

from .data import F0Track
from .errors import ConfigurationError, ContractError, InputError

MCD_SCALE = 10.0 / np.log(10.0)
DEFAULT_MCD_ORDER = 13
DEFAULT_ENVELOPE_ORDER = 4


def ffe(reference: F0Track, test: F0Track, threshold: float = 0.2) -> float:
    """F0 frame error in percent.

    A frame counts as an error when the voicing decisions disagree, or when
    both are voiced and the pitch deviates from the reference by more than
    ``threshold`` (relative).
    """
    if len(reference) != len(test):
        raise ContractError(f"track lengths differ: {len(reference)} vs {len(test)}")
    if len(reference) == 0:
        raise InputError("FFE of an empty track is undefined")
    voicing_errors = reference.voiced != test.voiced
    both = reference.voiced & test.voiced
    ref_hz = np.where(both, reference.frame_hz, 1.0)
    gross = both & (np.abs(test.frame_hz - reference.frame_hz) > threshold * ref_hz)
    return 100.0 * float((voicing_errors | gross).sum()) / len(reference)


def mel_to_cepstrum(mel, order: int) -> np.ndarray:
    """Orthonormal DCT-II of each log-mel frame, coefficients ``0..order``."""
    mel = np.atleast_2d(np.asarray(mel, dtype=np.float64))
    if not 0 <= order < mel.shape[-1]:
        raise ConfigurationError(f"cepstral order {order} must be below {mel.shape[-1]} mel bins")
    return dct(mel, type=2, norm="ortho", axis=-1)[..., : order + 1]


def cepstrum_to_mel(cep, n_mel_bins: int) -> np.ndarray:
    cep = np.atleast_2d(np.asarray(cep, dtype=np.float64))
    full = np.zeros(cep.shape[:-1] + (n_mel_bins,))
    full[..., : cep.shape[-1]] = cep
    return idct(full, type=2, norm="ortho", axis=-1)


def mcd(mel_a, mel_b, order: int = DEFAULT_MCD_ORDER) -> float:
    """Frame-averaged mel-cepstral distortion in dB, ``c0`` excluded."""
    mel_a = np.atleast_2d(np.asarray(mel_a, dtype=np.float64))
    mel_b = np.atleast_2d(np.asarray(mel_b, dtype=np.float64))
    if mel_a.shape != mel_b.shape:
        raise ContractError(f"mel shapes differ: {mel_a.shape} vs {mel_b.shape}")
    order = min(order, mel_a.shape[-1] - 1)
    diff = mel_to_cepstrum(mel_a, order)[:, 1:] - mel_to_cepstrum(mel_b, order)[:, 1:]
    return float(np.mean(MCD_SCALE * np.sqrt(2.0 * (diff * diff).sum(axis=-1))))


def spectral_envelope(mel_frame, order: int = DEFAULT_ENVELOPE_ORDER) -> np.ndarray:
    """Low-quefrency liftered log-mel envelope of one frame."""
    frame = np.asarray(mel_frame, dtype=np.float64).reshape(-1)
    return cepstrum_to_mel(mel_to_cepstrum(frame, order), frame.size)[0]
