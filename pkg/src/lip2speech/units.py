"""Discrete linguistic units: SSL feature backends, length matching, K-means."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import SAMPLE_RATE
from .errors import DataError, DependencyError, InvalidInputError

logger = logging.getLogger(__name__)

CODEBOOK_VERSION = 1


@dataclass
class SSLFeatureSequence:
    features: np.ndarray  # (T_f, D)
    layer_index: int
    backend_id: str

    def __post_init__(self):
        self.features = np.asarray(self.features)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise InvalidInputError(f"features must be (T_f>=1, D), got {self.features.shape}")


# ---------------------------------------------------------------------------
# backends


class SyntheticSSLBackend:
    """Deterministic stand-in for a self-supervised speech model.

    Log filterbank energies (25 ms window, 20 ms stride) pushed through a
    fixed random tanh network whose depth grows with ``layer``. Needs no
    external weights, so the whole pipeline runs offline.
    """

    stride = 320
    n_fft = 400
    n_bands = 40

    def __init__(self, layer: int = 12, dim: int = 64, seed: int = 0):
        self.layer = layer
        self.dim = dim
        self.backend_id = f"synthetic-d{dim}-s{seed}"
        rng = np.random.default_rng([seed, 1013])
        depth = 1 + (layer - 1) // 6
        sizes = [self.n_bands] + [dim] * depth
        self._weights = [rng.standard_normal((a, b)) / np.sqrt(a) for a, b in zip(sizes[:-1], sizes[1:])]
        self._bias = [0.1 * rng.standard_normal(b) for b in sizes[1:]]

    def n_frames(self, n_samples: int) -> int:
        return n_samples // self.stride + 1

    def extract(self, waveform, sample_rate: int = SAMPLE_RATE) -> SSLFeatureSequence:
        import librosa

        if sample_rate != SAMPLE_RATE:
            raise InvalidInputError(f"SSL backends expect {SAMPLE_RATE} Hz audio")
        wav = np.asarray(waveform, dtype=np.float64)
        if wav.ndim != 1 or wav.size == 0:
            raise InvalidInputError("waveform must be non-empty and mono")
        spec = np.abs(librosa.stft(wav, n_fft=self.n_fft, hop_length=self.stride,
                                   center=True, pad_mode="constant")) ** 2
        fb = librosa.filters.mel(sr=SAMPLE_RATE, n_fft=self.n_fft, n_mels=self.n_bands, htk=True)
        x = np.log(fb @ spec + 1e-6).T
        x = (x - x.mean(axis=1, keepdims=True)) / 4.0
        for w, b in zip(self._weights, self._bias):
            x = np.tanh(x @ w + b)
        return SSLFeatureSequence(x.astype(np.float32), self.layer, self.backend_id)


class HubertBackend:
    """Hidden states of a pretrained HuBERT checkpoint via ``transformers``."""

    stride = 320

    def __init__(self, layer: int = 12, model_name: str = "facebook/hubert-large-ls960-ft",
                 device: str = "cpu"):
        try:
            import torch  # noqa: F401
            from transformers import AutoFeatureExtractor, HubertModel
        except ImportError as exc:
            raise DependencyError(f"backend 'hubert' needs transformers+torch: {exc}") from exc
        try:
            self.model = HubertModel.from_pretrained(model_name).to(device).eval()
            self.processor = AutoFeatureExtractor.from_pretrained(model_name)
        except Exception as exc:  # network or cache miss
            raise DependencyError(f"backend 'hubert' could not load {model_name!r}: {exc}") from exc
        self.layer = layer
        self.device = device
        self.backend_id = f"hubert:{model_name}"
        self.dim = self.model.config.hidden_size

    def extract(self, waveform, sample_rate: int = SAMPLE_RATE) -> SSLFeatureSequence:
        import torch

        if sample_rate != SAMPLE_RATE:
            raise InvalidInputError(f"SSL backends expect {SAMPLE_RATE} Hz audio")
        inputs = self.processor(np.asarray(waveform, np.float32), sampling_rate=sample_rate,
                                return_tensors="pt")
        with torch.no_grad():
            out = self.model(inputs.input_values.to(self.device), output_hidden_states=True)
        feats = out.hidden_states[self.layer][0].cpu().numpy()
        return SSLFeatureSequence(feats, self.layer, self.backend_id)


BACKENDS = {"synthetic": SyntheticSSLBackend, "hubert": HubertBackend}


def get_backend(name: str, layer: int = 12, **kwargs):
    try:
        cls = BACKENDS[name]
    except KeyError:
        raise DependencyError(f"SSL backend {name!r} is not registered "
                              f"(available: {sorted(BACKENDS)})") from None
    return cls(layer=layer, **kwargs)


# ---------------------------------------------------------------------------
# length matching and quantisation


def nearest_indices(t_f: int, t_v: int) -> np.ndarray:
    """Source row for each of ``t_v`` output rows: round(i * t_f / t_v), half up, clamped."""
    if t_f < 1 or t_v < 1:
        raise InvalidInputError("lengths must be >= 1")
    i = np.arange(t_v, dtype=np.int64)
    return np.minimum((2 * i * t_f + t_v) // (2 * t_v), t_f - 1)


def length_match(features: SSLFeatureSequence | np.ndarray, t_v: int) -> np.ndarray:
    feats = features.features if isinstance(features, SSLFeatureSequence) else np.asarray(features)
    return feats[nearest_indices(feats.shape[0], t_v)]


def _sq_dists(x: np.ndarray, c: np.ndarray, chunk: int = 4096) -> np.ndarray:
    out = np.empty((x.shape[0], c.shape[0]))
    for s in range(0, x.shape[0], chunk):
        d = x[s:s + chunk, None, :] - c[None, :, :]
        out[s:s + chunk] = np.einsum("tkd,tkd->tk", d, d)
    return out


@dataclass
class Codebook:
    centroids: np.ndarray  # (K, D)
    seed: int = 0
    backend_id: str = ""
    layer_index: int = -1
    inertia_history: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2:
            raise InvalidInputError("centroids must be (K, D)")
        if not np.isfinite(self.centroids).all():
            raise InvalidInputError("centroids must be finite")

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def D(self) -> int:
        return self.centroids.shape[1]

    def hash(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.centroids).tobytes()).hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as fh:
            np.savez(fh, version=CODEBOOK_VERSION, centroids=self.centroids, K=self.K, D=self.D,
                     seed=self.seed, backend_id=self.backend_id, layer_index=self.layer_index)
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "Codebook":
        with np.load(path) as z:
            if int(z["version"]) != CODEBOOK_VERSION:
                raise DataError(f"{path}: unsupported codebook version {int(z['version'])}")
            cb = cls(z["centroids"], int(z["seed"]), str(z["backend_id"]), int(z["layer_index"]))
            if (cb.K, cb.D) != (int(z["K"]), int(z["D"])):
                raise DataError(f"{path}: header does not match centroid matrix")
        return cb


def quantise(features: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Nearest-centroid index per frame; ties go to the lowest index."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != codebook.D:
        raise InvalidInputError(f"features {x.shape} do not match codebook dim {codebook.D}")
    return np.argmin(_sq_dists(x, codebook.centroids), axis=1).astype(np.int64)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = _sq_dists(x, centers[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        idx = int(rng.choice(n, p=closest / total)) if total > 0 else int(rng.integers(n))
        centers[j] = x[idx]
        closest = np.minimum(closest, _sq_dists(x, centers[j:j + 1])[:, 0])
    return centers


def fit_codebook(features: Sequence[SSLFeatureSequence | np.ndarray] | np.ndarray, K: int,
                 seed: int = 0, max_iter: int = 100, tol: float = 1e-4) -> Codebook:
    """Lloyd's K-means with k-means++ seeding.

    Stops after ``max_iter`` iterations or once the relative inertia
    improvement drops below ``tol``. Inertia after every iteration is kept
    in ``Codebook.inertia_history``.
    """
    if isinstance(features, (np.ndarray, SSLFeatureSequence)):
        seqs = [features]
    else:
        seqs = list(features)
    meta = next((s for s in seqs if isinstance(s, SSLFeatureSequence)), None)
    x = np.concatenate([s.features if isinstance(s, SSLFeatureSequence) else np.asarray(s)
                        for s in seqs]).astype(np.float64)
    if K < 1:
        raise InvalidInputError("K must be >= 1")
    if x.shape[0] < K:
        raise DataError(f"need at least K={K} frames, got {x.shape[0]}")
    n_distinct = np.unique(x, axis=0).shape[0]
    if n_distinct < K:
        raise DataError(f"only {n_distinct} distinct points for K={K} clusters")

    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, K, rng)
    history: list[float] = []
    for _ in range(max_iter):
        d = _sq_dists(x, centers)
        labels = np.argmin(d, axis=1)
        inertia = float(d[np.arange(len(x)), labels].sum())
        history.append(inertia)
        counts = np.bincount(labels, minlength=K)
        new = np.zeros_like(centers)
        np.add.at(new, labels, x)
        filled = counts > 0
        new[filled] /= counts[filled, None]
        if not filled.all():
            # move empty clusters onto the worst-served points
            worst = np.argsort(-d[np.arange(len(x)), labels], kind="stable")
            taken = {tuple(c) for c in new[filled]}
            it = iter(worst)
            for j in np.flatnonzero(~filled):
                for idx in it:
                    if tuple(x[idx]) not in taken:
                        new[j] = x[idx]
                        taken.add(tuple(x[idx]))
                        break
        centers = new
        if len(history) > 1 and history[-2] > 0 and (history[-2] - inertia) / history[-2] < tol:
            break
    # final assignment inertia with the updated centers
    d = _sq_dists(x, centers)
    history.append(float(d.min(axis=1).sum()))
    return Codebook(centers, seed,
                    meta.backend_id if meta else "",
                    meta.layer_index if meta else -1,
                    history)


def units_for_clip(backend, waveform, t_v: int, codebook: Codebook) -> np.ndarray:
    """SSL features → length-matched to ``t_v`` → cluster indices."""
    return quantise(length_match(backend.extract(waveform), t_v), codebook)
