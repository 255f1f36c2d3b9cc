"""Deterministic toy audio-visual corpus.

A hidden phoneme-like state sequence drives both a rendered mouth (an
ellipse whose aperture depends on the state) and the audio (state-dependent
harmonic tones or noise), so video determines audio up to speaker identity.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import FRAME_SIZE, SAMPLE_RATE, VIDEO_FPS
from .data import ManifestRecord, atomic_write_text, write_manifest


@dataclass(frozen=True)
class State:
    name: str
    height: float  # mouth aperture, pixels
    width: float
    f0_ratio: float  # multiplier on the speaker's base F0; 0 = unvoiced
    formant: float  # Hz, centre of the harmonic emphasis
    noise: float = 0.0


STATES = {
    "sil": State("sil", 2.0, 26.0, 0.0, 0.0),
    "a": State("a", 26.0, 34.0, 1.0, 800.0),
    "o": State("o", 20.0, 18.0, 0.9, 500.0),
    "e": State("e", 12.0, 40.0, 1.15, 1800.0),
    "m": State("m", 3.0, 30.0, 0.85, 250.0),
    "s": State("s", 6.0, 36.0, 0.0, 0.0, noise=0.08),
}

LEXICON = {
    "ama": ["a", "m", "a"],
    "oso": ["o", "s", "o"],
    "eme": ["e", "m", "e"],
    "mao": ["m", "a", "o"],
    "sea": ["s", "e", "a"],
    "moe": ["m", "o", "e"],
}

SPEAKERS = [
    {"f0": 120.0, "skin": 0.55},
    {"f0": 210.0, "skin": 0.70},
]

SAMPLES_PER_FRAME = SAMPLE_RATE // VIDEO_FPS


def sample_sentence(rng: np.random.Generator, n_frames: int) -> tuple[list[str], list[str]]:
    """Words and a per-video-frame state sequence of exactly ``n_frames`` frames."""
    words: list[str] = []
    states: list[str] = ["sil"] * int(rng.integers(2, 5))
    vocab = sorted(LEXICON)
    while True:
        w = vocab[int(rng.integers(len(vocab)))]
        seg: list[str] = []
        for ph in LEXICON[w]:
            seg += [ph] * int(rng.integers(3, 7))
        seg += ["sil"] * int(rng.integers(2, 4))
        if len(states) + len(seg) > n_frames:
            break
        words.append(w)
        states += seg
    states += ["sil"] * (n_frames - len(states))
    return words, states


def render_frames(states: list[str], speaker: int) -> np.ndarray:
    """uint8 frames (T, 112, 112)."""
    h = np.array([STATES[s].height for s in states])
    w = np.array([STATES[s].width for s in states])
    # co-articulation: 3-tap smoothing of the aperture trajectory
    k = np.array([0.25, 0.5, 0.25])
    h = np.convolve(np.pad(h, 1, mode="edge"), k, mode="valid")
    w = np.convolve(np.pad(w, 1, mode="edge"), k, mode="valid")
    yy, xx = np.mgrid[0:FRAME_SIZE, 0:FRAME_SIZE].astype(np.float64)
    cy, cx = FRAME_SIZE / 2 + 6, FRAME_SIZE / 2
    skin = SPEAKERS[speaker]["skin"]
    frames = np.empty((len(states), FRAME_SIZE, FRAME_SIZE))
    for t in range(len(states)):
        r = ((yy - cy) / (h[t] / 2 + 1)) ** 2 + ((xx - cx) / (w[t] / 2 + 1)) ** 2
        lips = ((yy - cy) / (h[t] / 2 + 7)) ** 2 + ((xx - cx) / (w[t] / 2 + 7)) ** 2
        img = np.full((FRAME_SIZE, FRAME_SIZE), skin)
        img[lips <= 1.0] = skin - 0.25
        img[r <= 1.0] = 0.05
        frames[t] = img
    return np.clip(np.rint(frames * 255), 0, 255).astype(np.uint8)


def render_audio(states: list[str], speaker: int, rng: np.random.Generator) -> np.ndarray:
    n = len(states) * SAMPLES_PER_FRAME
    per_sample = np.repeat(np.arange(len(states)), SAMPLES_PER_FRAME)
    base = SPEAKERS[speaker]["f0"]
    f0 = np.array([base * STATES[s].f0_ratio for s in states])[per_sample]
    formant = np.array([STATES[s].formant for s in states])[per_sample]
    noise_amp = np.array([STATES[s].noise for s in states])[per_sample]
    voiced = f0 > 0
    t = np.arange(n) / SAMPLE_RATE
    f0 = f0 * (1.0 + 0.02 * np.sin(2 * np.pi * 3.0 * t))
    phase = 2 * np.pi * np.cumsum(np.where(voiced, f0, 0.0)) / SAMPLE_RATE
    wav = np.zeros(n)
    for k in range(1, 11):
        fk = k * f0
        amp = np.exp(-0.5 * ((fk - formant) / 400.0) ** 2) + 0.3 / k
        amp = np.where(voiced & (fk < SAMPLE_RATE / 2), amp, 0.0)
        wav += amp * np.sin(k * phase)
    wav = 0.12 * wav + noise_amp * rng.standard_normal(n)
    # 5 ms ramps smooth the envelope at state boundaries
    env = np.convolve((voiced | (noise_amp > 0)).astype(float), np.ones(80) / 80, mode="same")
    return (wav * np.maximum(env, 0.0)).astype(np.float64)


def generate_dataset(out_dir: str | Path, n_clips: int = 4, seed: int = 0,
                     n_frames: int = 75) -> list[ManifestRecord]:
    """Write ``video/*.npy``, ``audio/*.wav``, ``lexicon.json`` and ``manifest.jsonl``."""
    import soundfile as sf

    out_dir = Path(out_dir)
    (out_dir / "video").mkdir(parents=True, exist_ok=True)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    n_holdout = max(1, n_clips // 10) if n_clips >= 4 else 0
    records = []
    for i in range(n_clips):
        rng = np.random.default_rng([seed, i])
        speaker = i % len(SPEAKERS)
        words, states = sample_sentence(rng, n_frames)
        frames = render_frames(states, speaker)
        wav = render_audio(states, speaker, rng)
        clip_id = f"syn{i:04d}"
        np.save(out_dir / "video" / f"{clip_id}.npy", frames)
        sf.write(str(out_dir / "audio" / f"{clip_id}.wav"), wav, SAMPLE_RATE, subtype="PCM_16")
        if i >= n_clips - n_holdout:
            split = "test"
        elif i >= n_clips - 2 * n_holdout:
            split = "val"
        else:
            split = "train"
        records.append(ManifestRecord(clip_id, f"video/{clip_id}.npy", f"audio/{clip_id}.wav",
                                      speaker, split, " ".join(words)))
        atomic_write_text(out_dir / "video" / f"{clip_id}.states.json", json.dumps(states) + "\n")
    write_manifest(records, out_dir / "manifest.jsonl")
    atomic_write_text(out_dir / "lexicon.json", json.dumps(LEXICON, sort_keys=True, indent=1) + "\n")
    return records

