"""Acoustic feature extraction: log-mel spectrogram, pYIN pitch, frame energy."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable

import librosa
import numpy as np

from .config import HOP_LENGTH, MEL_PER_VIDEO, N_MELS, SAMPLE_RATE, WIN_LENGTH
from .errors import DataError, InvalidInputError

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-5
LOG_FLOOR_VALUE = float(np.log(LOG_FLOOR))
F0_MIN = 65.0
F0_MAX = 600.0


@dataclass
class MelSpectrogram:
    values: np.ndarray  # (T_m, 80) log-magnitude
    sample_rate: int = SAMPLE_RATE
    hop: float = HOP_LENGTH / SAMPLE_RATE
    window: float = WIN_LENGTH / SAMPLE_RATE

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2 or self.values.shape[1] != N_MELS:
            raise InvalidInputError(f"mel must have shape (T, {N_MELS}), got {self.values.shape}")

    def __len__(self):
        return self.values.shape[0]


@lru_cache(maxsize=4)
def mel_basis(sr: int = SAMPLE_RATE, n_fft: int = WIN_LENGTH, n_mels: int = N_MELS) -> np.ndarray:
    """HTK-scale triangular filterbank, peak-normalised, shape (n_mels, n_fft//2+1)."""
    fb = librosa.filters.mel(sr=sr, n_fft=n_fft, n_mels=n_mels, fmin=0.0,
                             fmax=sr / 2, htk=True, norm=None)
    fb.setflags(write=False)
    return fb


def mel_center_frequencies(n_mels: int = N_MELS, sr: int = SAMPLE_RATE) -> np.ndarray:
    return librosa.mel_frequencies(n_mels + 2, fmin=0.0, fmax=sr / 2, htk=True)[1:-1]


def _check_waveform(waveform, sample_rate: int) -> np.ndarray:
    if sample_rate != SAMPLE_RATE:
        raise InvalidInputError(
            f"expected {SAMPLE_RATE} Hz audio, got {sample_rate} Hz; resample before extraction")
    wav = np.asarray(waveform, dtype=np.float64)
    if wav.ndim != 1:
        raise InvalidInputError(f"waveform must be mono 1-D, got shape {wav.shape}")
    if wav.size == 0:
        raise InvalidInputError("waveform is empty")
    return wav


def n_mel_frames(n_samples: int) -> int:
    return n_samples // HOP_LENGTH


def extract_mel(waveform, sample_rate: int = SAMPLE_RATE) -> MelSpectrogram:
    """Log-mel spectrogram with 40 ms Hann window and 10 ms hop.

    Framing is centre-padded and truncated to ``len(waveform) // hop`` frames,
    so one second of audio yields exactly 100 frames.
    """
    wav = _check_waveform(waveform, sample_rate)
    n_frames = n_mel_frames(wav.size)
    if n_frames == 0:
        raise InvalidInputError(f"waveform shorter than one hop ({HOP_LENGTH} samples)")
    spec = np.abs(librosa.stft(wav, n_fft=WIN_LENGTH, hop_length=HOP_LENGTH,
                               win_length=WIN_LENGTH, window="hann", center=True,
                               pad_mode="constant"))
    mel = mel_basis() @ spec[:, :n_frames]
    return MelSpectrogram(np.log(np.maximum(mel, LOG_FLOOR)).T.astype(np.float32))


def mean_pool(seq, factor: int = MEL_PER_VIDEO) -> np.ndarray:
    """Average consecutive blocks of ``factor`` frames along axis 0."""
    seq = np.asarray(seq)
    if seq.shape[0] % factor:
        raise InvalidInputError(f"length {seq.shape[0]} is not divisible by {factor}")
    return seq.reshape(seq.shape[0] // factor, factor, *seq.shape[1:]).mean(axis=1)


def extract_energy(mel: MelSpectrogram | np.ndarray) -> np.ndarray:
    """Frequency-axis L2 norm of each mel frame, mean-pooled to video rate."""
    values = mel.values if isinstance(mel, MelSpectrogram) else np.asarray(mel)
    frame_energy = np.linalg.norm(values.astype(np.float64), axis=1)
    return mean_pool(frame_energy)


def raw_f0(waveform, sample_rate: int = SAMPLE_RATE, fmin: float = F0_MIN,
           fmax: float = F0_MAX) -> tuple[np.ndarray, np.ndarray]:
    """Frame-level F0 in Hz at mel rate via pYIN.

    Returns ``(f0, voiced)`` with ``f0`` NaN on unvoiced frames and exactly
    ``len(waveform) // hop`` entries.
    """
    wav = _check_waveform(waveform, sample_rate)
    n_frames = n_mel_frames(wav.size)
    f0, voiced, _ = librosa.pyin(wav, fmin=fmin, fmax=fmax, sr=sample_rate,
                                 frame_length=1024, hop_length=HOP_LENGTH,
                                 center=True, pad_mode="constant")
    f0 = f0[:n_frames]
    voiced = voiced[:n_frames] & np.isfinite(f0)
    if f0.shape[0] < n_frames:
        pad = n_frames - f0.shape[0]
        f0 = np.concatenate([f0, np.full(pad, np.nan)])
        voiced = np.concatenate([voiced, np.zeros(pad, bool)])
    f0 = np.where(voiced, f0, np.nan)
    return f0, voiced


@dataclass(frozen=True)
class PitchStats:
    """Corpus-level pitch statistics (over voiced frames of the training split)."""

    mean: float
    std: float
    log: bool = False

    @classmethod
    def from_tracks(cls, tracks: Iterable[np.ndarray], log: bool = False) -> "PitchStats":
        vals = [np.asarray(t, dtype=np.float64) for t in tracks]
        vals = np.concatenate([v[np.isfinite(v)] for v in vals]) if vals else np.empty(0)
        if vals.size == 0:
            raise DataError("no voiced frames in corpus; cannot compute pitch statistics")
        if log:
            vals = np.log(vals)
        std = float(vals.std())
        if std == 0.0:
            raise DataError("pitch standard deviation is zero (degenerate corpus)")
        return cls(float(vals.mean()), std, log)

    def standardise(self, f0: np.ndarray) -> np.ndarray:
        if not self.std > 0:
            raise DataError("pitch standard deviation is zero (degenerate corpus)")
        f0 = np.asarray(f0, dtype=np.float64)
        x = np.log(f0) if self.log else f0
        # unvoiced frames take the corpus mean, i.e. 0 after standardisation
        x = np.where(np.isfinite(x), x, self.mean)
        return (x - self.mean) / self.std


@dataclass
class PitchInfo:
    all_unvoiced: bool
    voiced_fraction: float
    extra: dict = field(default_factory=dict)


def pitch_from_f0(f0: np.ndarray, stats: PitchStats) -> tuple[np.ndarray, PitchInfo]:
    """Standardise a mel-rate F0 track and pool it to video rate."""
    f0 = np.asarray(f0, dtype=np.float64)
    voiced = np.isfinite(f0)
    info = PitchInfo(all_unvoiced=not voiced.any(),
                     voiced_fraction=float(voiced.mean()) if f0.size else 0.0)
    if info.all_unvoiced:
        logger.warning("all frames unvoiced; pitch filled with corpus mean")
    return mean_pool(stats.standardise(f0)), info


def extract_pitch(waveform, stats: PitchStats, sample_rate: int = SAMPLE_RATE,
                  return_info: bool = False, fmin: float = F0_MIN, fmax: float = F0_MAX):
    """Standardised pYIN pitch at video rate (one value per 4 mel frames).

    The mel-rate track is truncated to a multiple of 4 frames before pooling.
    """
    f0, _ = raw_f0(waveform, sample_rate, fmin, fmax)
    f0 = f0[: len(f0) - len(f0) % MEL_PER_VIDEO]
    pitch, info = pitch_from_f0(f0, stats)
    return (pitch, info) if return_info else pitch
