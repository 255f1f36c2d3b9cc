"""Analysis metrics: pitch moments, energy MAE, WER/CER/PER, ASR adapters, mel plots."""
from __future__ import annotations

import logging
import re
import shlex
import shutil
import string
import subprocess
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import DependencyError, InvalidInputError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PitchMoments:
    mean: float
    std: float
    skewness: float
    excess_kurtosis: float

    def row(self, label: str = "") -> str:
        """One table row: mean/std to 2 decimals, skewness/kurtosis to 3."""
        cells = [f"{self.mean:.2f}", f"{self.std:.2f}", f"{self.skewness:.3f}",
                 f"{self.excess_kurtosis:.3f}"]
        return " & ".join(([label] if label else []) + cells)


PITCH_HEADER = ("mu", "sigma", "gamma", "kappa_excess")


def pitch_moments(values: Iterable[float]) -> PitchMoments:
    """Moments of a pooled pitch sample (raw Hz; NaNs/unvoiced frames dropped).

    ``std`` is the sample (n-1) standard deviation; skewness and excess
    kurtosis use the population central moments m2, m3, m4.
    """
    x = np.asarray(list(values) if not isinstance(values, np.ndarray) else values, dtype=np.float64)
    x = x[np.isfinite(x)]
    if x.size < 2:
        raise InvalidInputError("need at least two pitch values")
    mu = x.mean()
    d = x - mu
    m2 = np.mean(d ** 2)
    if m2 == 0:
        raise InvalidInputError("pitch values are constant (sigma = 0)")
    m3, m4 = np.mean(d ** 3), np.mean(d ** 4)
    return PitchMoments(float(mu), float(x.std(ddof=1)), float(m3 / m2 ** 1.5),
                        float(m4 / m2 ** 2 - 3.0))


def pooled_pitch_moments(tracks: Sequence[np.ndarray], per_utterance: bool = False) -> PitchMoments:
    """Pool voiced frames globally, or average per-utterance moments."""
    if not per_utterance:
        return pitch_moments(np.concatenate([np.asarray(t, np.float64) for t in tracks]))
    ms = [pitch_moments(t) for t in tracks]
    return PitchMoments(*np.mean([[m.mean, m.std, m.skewness, m.excess_kurtosis] for m in ms], axis=0))


def energy_mae(gen, ref) -> float:
    gen = np.asarray(gen, dtype=np.float64).ravel()
    ref = np.asarray(ref, dtype=np.float64).ravel()
    if gen.size == 0 or ref.size == 0:
        raise InvalidInputError("energy sequences must be non-empty")
    if gen.size != ref.size:
        n = min(gen.size, ref.size)
        logger.warning("energy lengths differ (%d vs %d); truncating to %d", gen.size, ref.size, n)
        gen, ref = gen[:n], ref[:n]
    return float(np.mean(np.abs(gen - ref)))


# ---------------------------------------------------------------------------
# error rates

_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")


def normalise_text(text: str) -> str:
    return " ".join(_PUNCT.sub("", text.lower()).split())


def edit_distance(hyp: Sequence, ref: Sequence) -> int:
    """Levenshtein distance (unit-cost substitutions, insertions, deletions)."""
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, 1):
        cur = [i] + [0] * len(ref)
        for j, r in enumerate(ref, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    return prev[-1]


class LexiconG2P:
    """Dictionary grapheme-to-phoneme lookup; unknown words fall back to letters."""

    def __init__(self, lexicon: Mapping[str, Sequence[str]] | None = None):
        self.lexicon = {k.lower(): list(v) for k, v in (lexicon or {}).items()}

    def __call__(self, text: str) -> list[str]:
        out: list[str] = []
        for w in normalise_text(text).split():
            out.extend(self.lexicon.get(w, list(w)))
        return out


class ExternalG2P:
    """Runs ``command`` with the text on stdin; expects space-separated phonemes on stdout."""

    def __init__(self, command: str):
        self.command = command

    def __call__(self, text: str) -> list[str]:
        exe = shlex.split(self.command)[0]
        if shutil.which(exe) is None:
            raise DependencyError(f"grapheme-to-phoneme command {exe!r} not found")
        res = subprocess.run(shlex.split(self.command), input=text, capture_output=True,
                             text=True, check=True)
        return res.stdout.split()


def tokenise(text: str, unit: str, g2p: Callable[[str], list[str]] | None = None) -> list[str]:
    if unit == "word":
        return normalise_text(text).split()
    if unit == "char":
        return list(normalise_text(text))
    if unit == "phoneme":
        return list((g2p or LexiconG2P())(text))
    raise InvalidInputError(f"unknown unit {unit!r}; expected word|char|phoneme")


def error_rates(hypothesis: str | Sequence[str], reference: str | Sequence[str],
                unit: str = "word", g2p: Callable[[str], list[str]] | None = None) -> float:
    """Edit distance over reference length, as a percentage.

    Strings are tokenised per ``unit``; pre-tokenised sequences are used as is.
    """
    hyp = tokenise(hypothesis, unit, g2p) if isinstance(hypothesis, str) else list(hypothesis)
    ref = tokenise(reference, unit, g2p) if isinstance(reference, str) else list(reference)
    if not ref:
        raise InvalidInputError("reference is empty")
    return 100.0 * edit_distance(hyp, ref) / len(ref)


def corpus_error_rate(hyps: Sequence[str], refs: Sequence[str], unit: str = "word",
                      g2p=None) -> float:
    """Total edits over total reference tokens across a corpus."""
    errs = total = 0
    for h, r in zip(hyps, refs, strict=True):
        rt = tokenise(r, unit, g2p)
        errs += edit_distance(tokenise(h, unit, g2p), rt)
        total += len(rt)
    if total == 0:
        raise InvalidInputError("references are empty")
    return 100.0 * errs / total


# ---------------------------------------------------------------------------
# ASR adapters


class EchoASR:
    """Hermetic backend: returns injected transcripts verbatim.

    ``inject(text)`` sets the default answer; ``transcripts`` maps utterance
    keys to answers for ``transcribe(wav, key=...)``.
    """

    name = "echo"

    def __init__(self, transcripts: Mapping[str, str] | None = None, default: str = ""):
        self.transcripts = dict(transcripts or {})
        self.default = default

    def inject(self, text: str, key: str | None = None) -> None:
        if key is None:
            self.default = text
        else:
            self.transcripts[key] = text

    def transcribe(self, waveform, key: str | None = None) -> str:
        if key is not None and key in self.transcripts:
            return self.transcripts[key]
        return self.default


class ExternalCommandASR:
    """Runs ``command`` (with a ``{wav}`` placeholder) and reads the transcript from stdout."""

    name = "external-cmd"

    def __init__(self, command: str, timeout: float = 600):
        self.command = command
        self.timeout = timeout
        exe = shlex.split(command)[0] if command.strip() else ""
        if not exe or shutil.which(exe) is None:
            raise DependencyError(f"ASR backend command {exe!r} is not available")

    def transcribe(self, waveform, key: str | None = None) -> str:
        from .synthesis import write_wav

        with tempfile.TemporaryDirectory() as tmp:
            wav_path = Path(tmp) / "utt.wav"
            write_wav(wav_path, waveform)
            cmd = self.command.format(wav=shlex.quote(str(wav_path)))
            try:
                res = subprocess.run(cmd, shell=True, capture_output=True, text=True, check=True,
                                     timeout=self.timeout)
            except subprocess.SubprocessError as exc:
                raise DependencyError(f"ASR command failed: {exc}") from exc
        return res.stdout.strip()


def get_asr(name: str, command: str | None = None, transcripts: Mapping[str, str] | None = None):
    if name == "echo":
        return EchoASR(transcripts)
    if name == "external-cmd":
        if not command:
            raise DependencyError("external-cmd ASR needs --asr-command")
        return ExternalCommandASR(command)
    raise DependencyError(f"ASR backend {name!r} is not registered (available: echo, external-cmd)")


def asr_transcribe(waveform, backend, key: str | None = None) -> str:
    return backend.transcribe(waveform, key=key)


# ---------------------------------------------------------------------------
# reports and plots


@dataclass
class EvalReport:
    n_samples: int
    wer: float | None = None
    cer: float | None = None
    per: float | None = None
    energy_mae: float | None = None
    pitch_moments: dict = field(default_factory=dict)  # {"ground_truth": {...}, "generated": {...}}

    def __post_init__(self):
        if self.n_samples <= 0:
            raise InvalidInputError("report needs n_samples > 0")
        for name in ("wer", "cer", "per"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 100.0:
                # insertions can push raw rates above 100; clip for reporting
                setattr(self, name, float(min(max(v, 0.0), 100.0)))

    def to_dict(self) -> dict:
        return asdict(self)


def plot_mel_comparison(mels: Sequence[tuple[str, np.ndarray]] | Mapping[str, np.ndarray],
                        out_path: str | Path, ncols: int = 3):
    """Side-by-side spectrogram panels with one shared colour scale.

    Six inputs give the 2x3 arrangement used for ground truth, vocoded and
    four systems. Returns the matplotlib figure after saving it.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    items = list(mels.items()) if isinstance(mels, Mapping) else list(mels)
    if not items:
        raise InvalidInputError("no mel-spectrograms to plot")
    bands = {np.asarray(m).shape[1] for _, m in items}
    if len(bands) != 1:
        raise InvalidInputError(f"mel band counts differ: {sorted(bands)}")
    vmin = min(float(np.min(m)) for _, m in items)
    vmax = max(float(np.max(m)) for _, m in items)
    ncols = min(ncols, len(items))
    nrows = -(-len(items) // ncols)
    fig, axes = plt.subplots(nrows, ncols, figsize=(3.2 * ncols, 2.4 * nrows), squeeze=False)
    for ax in axes.flat[len(items):]:
        ax.axis("off")
    for ax, (name, mel) in zip(axes.flat, items):
        ax.imshow(np.asarray(mel).T, origin="lower", aspect="auto", vmin=vmin, vmax=vmax,
                  cmap="magma", interpolation="nearest")
        ax.set_title(name, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(out_path, dpi=100, metadata={"Software": None})
    return fig
