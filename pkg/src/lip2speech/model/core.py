"""Video encoder, variance predictors, conditioning and the conformer decoder."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from ..config import MEL_PER_VIDEO, ModelConfig
from ..errors import InvalidInputError
from .conformer import Conformer
from .frontend import VisualFrontend


@dataclass
class VariancePrediction:
    linguistic_logits: torch.Tensor  # (B, T_v, K)
    pitch: torch.Tensor  # (B, T_v)
    energy: torch.Tensor  # (B, T_v)


@dataclass
class ModelOutput:
    h_v: torch.Tensor
    speaker_embedding: torch.Tensor  # (B, d)
    prediction: VariancePrediction
    decoder_input: torch.Tensor  # (B, 4T_v, d)
    coarse_mel: torch.Tensor  # (B, 4T_v, 80)


class VariancePredictor(nn.Module):
    """Conv1d -> ReLU -> LayerNorm -> Dropout, repeated, then a zero-initialised projection."""

    def __init__(self, d_in: int, channels: int, n_layers: int, kernel: int, dropout: float,
                 out_dim: int):
        super().__init__()
        self.convs = nn.ModuleList()
        self.norms = nn.ModuleList()
        for i in range(n_layers):
            self.convs.append(nn.Conv1d(d_in if i == 0 else channels, channels, kernel,
                                        padding=kernel // 2))
            self.norms.append(nn.LayerNorm(channels))
        self.drop = nn.Dropout(dropout)
        self.proj = nn.Linear(channels, out_dim)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for conv, norm in zip(self.convs, self.norms):
            x = self.drop(norm(torch.relu(conv(x.transpose(1, 2)).transpose(1, 2))))
        return self.proj(x)


def upsample(x: torch.Tensor, factor: int = MEL_PER_VIDEO) -> torch.Tensor:
    """Repeat every time step ``factor`` times: (a, b) -> (a, a, a, a, b, b, b, b)."""
    return torch.repeat_interleave(x, factor, dim=1)


class LipToSpeech(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        vc = cfg.variance_channels or d
        self.frontend = VisualFrontend(d, cfg.frontend_channels)
        self.speaker_table = nn.Embedding(cfg.n_speakers, d)
        self.encoder = Conformer(d, cfg.n_heads, cfg.enc_layers, cfg.conv_kernel, cfg.ff_mult,
                                 cfg.dropout)
        k = cfg.variance_kernel
        self.linguistic_predictor = VariancePredictor(d, vc, 4, k, cfg.dropout, cfg.K)
        self.pitch_predictor = VariancePredictor(d, vc, 2, k, cfg.dropout, 1)
        self.energy_predictor = VariancePredictor(d, vc, 2, k, cfg.dropout, 1)
        self.linguistic_embedding = nn.Embedding(cfg.K, d)
        self.pitch_embedding = nn.Conv1d(1, d, k, padding=k // 2)
        self.energy_embedding = nn.Conv1d(1, d, k, padding=k // 2)
        self.decoder = Conformer(d, cfg.n_heads, cfg.dec_layers, cfg.conv_kernel, cfg.ff_mult,
                                 cfg.dropout)
        self.mel_out = nn.Linear(d, cfg.mel_bands)

    # -- pieces -------------------------------------------------------------

    def speaker_embedding(self, speaker: torch.Tensor) -> torch.Tensor:
        speaker = torch.as_tensor(speaker, device=self.speaker_table.weight.device).long().reshape(-1)
        if self.cfg.closed_set and ((speaker < 0) | (speaker >= self.cfg.n_speakers)).any():
            raise InvalidInputError(
                f"speaker id(s) {speaker.tolist()} outside closed set [0, {self.cfg.n_speakers})")
        return self.speaker_table(speaker.clamp(0, self.cfg.n_speakers - 1))

    def encode(self, frames: torch.Tensor, speaker: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """frames (B, T, 1, 112, 112) -> h_v (B, T, d), speaker embedding (B, d)."""
        if frames.dim() == 4:
            frames = frames.unsqueeze(0)
        e_spk = self.speaker_embedding(speaker)
        x = self.frontend(frames) + e_spk[:, None, :]
        return self.encoder(x), e_spk

    def predict_variances(self, h_v: torch.Tensor) -> VariancePrediction:
        cfg = self.cfg
        return VariancePrediction(
            self.linguistic_predictor(h_v),
            self.pitch_predictor(h_v).squeeze(-1),
            cfg.energy_mean + cfg.energy_std * self.energy_predictor(h_v).squeeze(-1),
        )

    def variance_embeddings(self, linguistic, pitch, energy) -> torch.Tensor:
        cfg = self.cfg
        e_l = self.linguistic_embedding(linguistic)
        e_p = self.pitch_embedding(pitch[:, None, :]).transpose(1, 2)
        e_e = self.energy_embedding(((energy - cfg.energy_mean) / cfg.energy_std)[:, None, :])
        return e_l + e_p + e_e.transpose(1, 2)

    def condition(self, h_v, linguistic, pitch, energy) -> torch.Tensor:
        t = h_v.shape[1]
        for name, seq in (("linguistic", linguistic), ("pitch", pitch), ("energy", energy)):
            if seq.shape[:2] != h_v.shape[:2]:
                raise InvalidInputError(f"{name} length {tuple(seq.shape)} != h_v length {t}")
        return h_v + self.variance_embeddings(linguistic, pitch, energy)

    def decode(self, adapted: torch.Tensor, e_spk: torch.Tensor | None = None):
        """Upsample x4 by repetition and run the decoder; returns (decoder_input, coarse_mel)."""
        dec_in = upsample(adapted)
        if self.cfg.decoder_speaker and e_spk is not None:
            dec_in = dec_in + e_spk[:, None, :]
        return dec_in, self.mel_out(self.decoder(dec_in))

    def condition_and_decode(self, h_v, linguistic, pitch, energy, e_spk=None):
        return self.decode(self.condition(h_v, linguistic, pitch, energy), e_spk)

    # -- full passes --------------------------------------------------------

    def forward(self, frames, speaker, linguistic=None, pitch=None, energy=None) -> ModelOutput:
        """Teacher-forced when targets are given, otherwise conditioned on predictions."""
        h_v, e_spk = self.encode(frames, speaker)
        pred = self.predict_variances(h_v)
        if linguistic is None:
            linguistic = pred.linguistic_logits.argmax(-1)
        if pitch is None:
            pitch = pred.pitch
        if energy is None:
            energy = pred.energy
        dec_in, coarse = self.condition_and_decode(h_v, linguistic, pitch, energy, e_spk)
        return ModelOutput(h_v, e_spk, pred, dec_in, coarse)

    def infer(self, frames, speaker) -> ModelOutput:
        return self.forward(frames, speaker)
