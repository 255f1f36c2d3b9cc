"""Inference: silent clip -> refined mel -> waveform."""
from __future__ import annotations

import logging
import shlex
import subprocess
import tempfile
from pathlib import Path

import numpy as np
import torch

from . import audio
from .config import HOP_LENGTH, SAMPLE_RATE, WIN_LENGTH
from .errors import DependencyError, InvalidInputError
from .flow import FlowCondition, FlowPostNet
from .model import LipToSpeech
from .video import VideoClip

logger = logging.getLogger(__name__)

GRIFFIN_LIM_ITERS = 60


class Synthesizer:
    """Frozen model + post-net. Has no entry point that accepts audio or targets."""

    def __init__(self, model: LipToSpeech, postnet: FlowPostNet):
        self.model = model.eval()
        self.postnet = postnet.eval()

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> "Synthesizer":
        from .training import build_postnet, checkpoint_configs, load_checkpoint

        state = load_checkpoint(path)
        mcfg, _ = checkpoint_configs(state)
        model = LipToSpeech(mcfg)
        model.load_state_dict(state["model"])
        postnet = build_postnet(mcfg)
        postnet.load_state_dict(state["postnet"])
        return cls(model, postnet)

    @torch.no_grad()
    def coarse(self, clip: VideoClip, speaker_id: int | None = None):
        spk = clip.speaker_id if speaker_id is None else speaker_id
        frames = torch.from_numpy(clip.frames)[None]
        out = self.model.infer(frames, torch.tensor([spk]))
        return out, FlowCondition(out.decoder_input, out.coarse_mel, out.speaker_embedding)

    @torch.no_grad()
    def synthesise_mel(self, clip: VideoClip, speaker_id: int | None = None,
                       temperature: float = 1.0, seed: int = 0) -> np.ndarray:
        """Refined log-mel of shape (4*T_v, 80) using predicted variances only."""
        if temperature < 0:
            raise InvalidInputError("temperature must be >= 0")
        _, cond = self.coarse(clip, speaker_id)
        gen = torch.Generator().manual_seed(seed)
        mel = self.postnet.sample(cond, temperature, gen)[0]
        return mel.numpy()


def synthesise_mel(synth: Synthesizer, clip: VideoClip, speaker_id: int | None = None,
                   temperature: float = 1.0, seed: int = 0) -> np.ndarray:
    return synth.synthesise_mel(clip, speaker_id, temperature, seed)


# ---------------------------------------------------------------------------
# vocoders


def mel_to_linear(mel: np.ndarray) -> np.ndarray:
    """Log-mel (T, 80) -> non-negative linear magnitude (n_fft//2+1, T) via pseudo-inverse."""
    mag = np.exp(np.asarray(mel, dtype=np.float64)).T
    inv = np.linalg.pinv(audio.mel_basis())
    lin = np.maximum(inv @ mag, 0.0)
    # log floor maps back to ~floor-level magnitudes; zero them so silence stays silent
    lin[lin <= audio.LOG_FLOOR * 1.0001] = 0.0
    return lin


def griffin_lim(mel: np.ndarray, n_iter: int = GRIFFIN_LIM_ITERS, seed: int = 0) -> np.ndarray:
    import librosa

    lin = mel_to_linear(mel)
    n_frames = lin.shape[1]
    wav = librosa.griffinlim(lin, n_iter=n_iter, hop_length=HOP_LENGTH, win_length=WIN_LENGTH,
                             n_fft=WIN_LENGTH, window="hann", center=True,
                             random_state=seed, init="random")
    # centred framing yields hop*(T-1) samples; pad to the T*hop the mel came from
    return librosa.util.fix_length(wav, size=n_frames * HOP_LENGTH).astype(np.float32)


class ExternalVocoder:
    """Adapter for an out-of-process neural vocoder.

    ``command`` is a template with ``{mel}`` (input ``.npy`` of shape
    (T, 80)) and ``{wav}`` (16 kHz output path) placeholders.
    """

    def __init__(self, command: str, fallback: bool = True, timeout: float = 600):
        self.command = command
        self.fallback = fallback
        self.timeout = timeout

    def __call__(self, mel: np.ndarray) -> np.ndarray:
        import soundfile as sf

        with tempfile.TemporaryDirectory() as tmp:
            mel_path, wav_path = Path(tmp) / "mel.npy", Path(tmp) / "out.wav"
            np.save(mel_path, np.asarray(mel, np.float32))
            cmd = self.command.format(mel=shlex.quote(str(mel_path)), wav=shlex.quote(str(wav_path)))
            try:
                subprocess.run(cmd, shell=True, check=True, timeout=self.timeout,
                               capture_output=True)
                wav, sr = sf.read(str(wav_path), dtype="float32")
            except (OSError, subprocess.SubprocessError, RuntimeError) as exc:
                if not self.fallback:
                    raise DependencyError(f"external vocoder failed: {exc}") from exc
                logger.warning("external vocoder failed (%s); falling back to Griffin-Lim", exc)
                return griffin_lim(mel)
        if sr != SAMPLE_RATE:
            raise DependencyError(f"external vocoder returned {sr} Hz audio, expected {SAMPLE_RATE}")
        return wav


def vocode(mel: np.ndarray, backend: str | ExternalVocoder = "griffinlim") -> np.ndarray:
    mel = np.asarray(mel)
    if mel.ndim != 2 or mel.shape[1] != audio.N_MELS:
        raise InvalidInputError(f"mel must be (T, {audio.N_MELS}), got {mel.shape}")
    if isinstance(backend, ExternalVocoder):
        return backend(mel)
    if backend == "griffinlim":
        return griffin_lim(mel)
    raise DependencyError(f"unknown vocoder backend {backend!r}")


def write_wav(path: str | Path, wav: np.ndarray) -> None:
    import soundfile as sf

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.wav")
    sf.write(str(tmp), np.asarray(wav, np.float32), SAMPLE_RATE, subtype="PCM_16")
    tmp.replace(path)
