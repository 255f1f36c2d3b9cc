"""Aligned training examples, manifests, the per-clip feature cache, windowing."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from . import audio
from .audio import MelSpectrogram, PitchStats
from .config import MEL_PER_VIDEO, SAMPLE_RATE
from .errors import DataError, InvalidInputError
from .video import VideoClip, load_frames, to_uint8

logger = logging.getLogger(__name__)

CACHE_VERSION = 1
CACHE_ENV = "LIP2SPEECH_CACHE"


@dataclass
class VarianceTargets:
    linguistic: np.ndarray | None  # (T_v,) int; None until units are fitted
    pitch: np.ndarray  # (T_v,) standardised
    energy: np.ndarray  # (T_v,) >= 0

    def __post_init__(self):
        self.pitch = np.asarray(self.pitch, dtype=np.float32)
        self.energy = np.asarray(self.energy, dtype=np.float32)
        if self.linguistic is not None:
            self.linguistic = np.asarray(self.linguistic, dtype=np.int64)
            if self.linguistic.shape != self.pitch.shape:
                raise InvalidInputError("linguistic and pitch lengths differ")
        if self.pitch.shape != self.energy.shape or self.pitch.ndim != 1:
            raise InvalidInputError("pitch and energy must be 1-D of equal length")
        if (self.energy < 0).any():
            raise InvalidInputError("energy must be non-negative")

    def __len__(self):
        return self.pitch.shape[0]

    def slice(self, start: int, stop: int) -> "VarianceTargets":
        ling = None if self.linguistic is None else self.linguistic[start:stop]
        return VarianceTargets(ling, self.pitch[start:stop], self.energy[start:stop])


@dataclass
class Example:
    """One aligned clip: video, mel and variance targets at a fixed 1:4 ratio."""

    clip_id: str
    clip: VideoClip
    mel: MelSpectrogram
    targets: VarianceTargets
    text: str = ""
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        check_alignment(len(self.clip), len(self.mel))
        if len(self.targets) != len(self.clip):
            raise InvalidInputError(
                f"{self.clip_id}: targets length {len(self.targets)} != T_v {len(self.clip)}")


def check_alignment(t_v: int, t_m: int) -> None:
    if t_m != MEL_PER_VIDEO * t_v:
        raise InvalidInputError(f"alignment violated: T_m={t_m} != 4*T_v={MEL_PER_VIDEO * t_v}")


# ---------------------------------------------------------------------------
# windows


def sample_window(example: Example, length: int, rng: np.random.Generator | None = None,
                  start: int | None = None, pad: bool = False) -> Example:
    """Contiguous ``length``-frame window with the matching ``4*length`` mel frames.

    Clips shorter than ``length`` are zero/floor padded when ``pad`` is set
    and rejected otherwise.
    """
    t_v = len(example.clip)
    if t_v < length:
        if not pad:
            raise DataError(f"{example.clip_id}: clip has {t_v} frames < window {length}")
        return pad_example(example, length)
    if start is None:
        rng = rng if rng is not None else np.random.default_rng()
        start = int(rng.integers(0, t_v - length + 1))
    if not 0 <= start <= t_v - length:
        raise InvalidInputError(f"window start {start} outside [0, {t_v - length}]")
    stop = start + length
    return replace(
        example,
        clip=replace(example.clip, frames=example.clip.frames[start:stop]),
        mel=MelSpectrogram(example.mel.values[MEL_PER_VIDEO * start:MEL_PER_VIDEO * stop]),
        targets=example.targets.slice(start, stop),
        meta={**example.meta, "window_start": start},
    )


def pad_example(example: Example, length: int) -> Example:
    t_v = len(example.clip)
    extra = length - t_v
    frames = np.concatenate([example.clip.frames,
                             np.zeros((extra, *example.clip.frames.shape[1:]), np.float32)])
    mel = np.concatenate([example.mel.values,
                          np.full((MEL_PER_VIDEO * extra, example.mel.values.shape[1]),
                                  audio.LOG_FLOOR_VALUE, np.float32)])
    tg = example.targets
    ling = None if tg.linguistic is None else np.concatenate([tg.linguistic, np.zeros(extra, np.int64)])
    floor_energy = float(np.linalg.norm(np.full(mel.shape[1], audio.LOG_FLOOR_VALUE)))
    targets = VarianceTargets(ling, np.concatenate([tg.pitch, np.zeros(extra)]),
                              np.concatenate([tg.energy, np.full(extra, floor_energy)]))
    return replace(example, clip=replace(example.clip, frames=frames), mel=MelSpectrogram(mel),
                   targets=targets, meta={**example.meta, "window_start": 0, "padded": extra})


# ---------------------------------------------------------------------------
# manifest


@dataclass
class ManifestRecord:
    clip_id: str
    video: str
    audio: str
    speaker: int
    split: str
    text: str = ""
    landmarks: str | None = None


def read_manifest(path: str | Path) -> list[ManifestRecord]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    base = path.parent
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                rec = ManifestRecord(**raw)
            except (json.JSONDecodeError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad manifest record ({exc})") from None
            for attr in ("video", "audio", "landmarks"):
                val = getattr(rec, attr)
                if val and not os.path.isabs(val):
                    setattr(rec, attr, str(base / val))
            records.append(rec)
    if not records:
        raise DataError(f"manifest {path} is empty")
    return records


def write_manifest(records: Iterable[ManifestRecord | dict], path: str | Path) -> None:
    lines = []
    for r in records:
        d = r if isinstance(r, dict) else {k: v for k, v in r.__dict__.items() if v is not None}
        lines.append(json.dumps(d, sort_keys=True))
    atomic_write_text(Path(path), "\n".join(lines) + "\n")


def atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def load_audio(path: str | Path) -> np.ndarray:
    """Mono float waveform at 16 kHz (explicitly resampled if needed)."""
    import soundfile as sf

    path = Path(path)
    if not path.exists():
        raise DataError(f"audio file not found: {path}")
    wav, sr = sf.read(str(path), dtype="float64", always_2d=True)
    wav = wav.mean(axis=1)
    if sr != SAMPLE_RATE:
        import librosa

        wav = librosa.resample(wav, orig_sr=sr, target_sr=SAMPLE_RATE)
    return wav


# ---------------------------------------------------------------------------
# cache


def default_cache_dir(manifest: str | Path | None = None) -> Path:
    env = os.environ.get(CACHE_ENV)
    if env:
        return Path(env)
    if manifest is not None:
        return Path(manifest).parent / "cache"
    return Path("cache")


def cache_path(cache_dir: Path, clip_id: str) -> Path:
    return Path(cache_dir) / f"{clip_id}.npz"


def save_cached(cache_dir: Path, ex: Example, f0: np.ndarray) -> Path:
    path = cache_path(cache_dir, ex.clip_id)
    tmp = path.with_name(path.name + ".tmp")
    ling = ex.targets.linguistic
    with open(tmp, "wb") as fh:
        np.savez(fh, version=CACHE_VERSION, clip_id=ex.clip_id, frames=to_uint8(ex.clip.frames[:, 0]),
                 mel=ex.mel.values, pitch=ex.targets.pitch, energy=ex.targets.energy,
                 linguistic=np.array([], np.int64) if ling is None else ling,
                 has_linguistic=ling is not None, f0=f0.astype(np.float32),
                 speaker_id=ex.clip.speaker_id, text=ex.text, split=ex.split,
                 codebook_hash=ex.meta.get("codebook_hash", ""))
    tmp.replace(path)
    return path


def load_cached(path: str | Path) -> tuple[Example, np.ndarray]:
    with np.load(path) as z:
        if int(z["version"]) != CACHE_VERSION:
            raise DataError(f"{path}: cache version {int(z['version'])} != {CACHE_VERSION}; "
                            "re-run `preprocess`")
        ling = z["linguistic"] if bool(z["has_linguistic"]) else None
        ex = Example(
            clip_id=str(z["clip_id"]),
            clip=VideoClip(z["frames"], speaker_id=int(z["speaker_id"])),
            mel=MelSpectrogram(z["mel"]),
            targets=VarianceTargets(ling, z["pitch"], z["energy"]),
            text=str(z["text"]), split=str(z["split"]),
            meta={"codebook_hash": str(z["codebook_hash"])},
        )
        f0 = z["f0"]
    return ex, f0


def load_corpus(cache_dir: str | Path, records: list[ManifestRecord],
                splits: Iterable[str] | None = None, need_units: bool = True) -> list[Example]:
    cache_dir = Path(cache_dir)
    wanted = set(splits) if splits is not None else None
    out = []
    for rec in records:
        if wanted is not None and rec.split not in wanted:
            continue
        path = cache_path(cache_dir, rec.clip_id)
        if not path.exists():
            raise DataError(f"no cached features for {rec.clip_id} in {cache_dir}; "
                            "run `lip2speech preprocess --manifest ...` first")
        ex, _ = load_cached(path)
        if need_units and ex.targets.linguistic is None:
            raise DataError(f"{rec.clip_id} has no linguistic units; run `lip2speech fit-units` first")
        out.append(ex)
    return out


def align_lengths(frames: np.ndarray, mel: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Trim video/mel so that T_m == 4*T_v (mel padded with the log floor if short)."""
    t_v = min(frames.shape[0], -(-mel.shape[0] // MEL_PER_VIDEO))
    if t_v < 1:
        raise DataError("clip too short to align")
    frames = frames[:t_v]
    need = MEL_PER_VIDEO * t_v
    if mel.shape[0] < need:
        pad = np.full((need - mel.shape[0], mel.shape[1]), audio.LOG_FLOOR_VALUE, mel.dtype)
        mel = np.concatenate([mel, pad])
    return frames, mel[:need]


def _pad_f0(f0: np.ndarray, n: int) -> np.ndarray:
    if f0.shape[0] >= n:
        return f0[:n]
    return np.concatenate([f0, np.full(n - f0.shape[0], np.nan)])


def preprocess_corpus(records: list[ManifestRecord], cache_dir: str | Path,
                      pitch_log: bool = False) -> PitchStats:
    """Build the feature cache for every manifest record.

    Pitch statistics come from the training split only and are written to
    ``pitch_stats.json`` next to the per-clip archives.
    """
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    staged = []
    for rec in records:
        frames = load_frames(rec.video, rec.landmarks)
        wav = load_audio(rec.audio)
        mel = audio.extract_mel(wav).values
        frames, mel = align_lengths(frames, mel)
        f0, _ = audio.raw_f0(wav)
        staged.append((rec, frames, mel, _pad_f0(f0, mel.shape[0])))
    train_f0 = [f0 for rec, _, _, f0 in staged if rec.split == "train"]
    if not train_f0:
        raise DataError("manifest has no 'train' split records; cannot fit pitch statistics")
    stats = PitchStats.from_tracks(train_f0, log=pitch_log)
    for rec, frames, mel, f0 in staged:
        pitch, info = audio.pitch_from_f0(f0, stats)
        ex = Example(rec.clip_id, VideoClip(frames, speaker_id=rec.speaker), MelSpectrogram(mel),
                     VarianceTargets(None, pitch, audio.extract_energy(mel)),
                     text=rec.text, split=rec.split)
        save_cached(cache_dir, ex, f0)
    atomic_write_text(cache_dir / "pitch_stats.json",
                      json.dumps({"mean": stats.mean, "std": stats.std, "log": stats.log},
                                 sort_keys=True) + "\n")
    return stats


def iter_cache(cache_dir: str | Path) -> Iterator[Path]:
    yield from sorted(Path(cache_dir).glob("*.npz"))


def write_units(cache_dir: str | Path, clip_id: str, units: np.ndarray, codebook_hash: str) -> None:
    path = cache_path(Path(cache_dir), clip_id)
    ex, f0 = load_cached(path)
    ex.targets = VarianceTargets(units, ex.targets.pitch, ex.targets.energy)
    ex.meta["codebook_hash"] = codebook_hash
    save_cached(Path(cache_dir), ex, f0)
