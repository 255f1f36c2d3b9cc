"""Corpus-level workflows behind the CLI: unit fitting, evaluation, the unit sweep."""
from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path
from typing import Sequence

import numpy as np

from . import audio, evaluation, units
from .config import ModelConfig, TrainConfig, merge
from .data import (Example, ManifestRecord, VarianceTargets, atomic_write_text, cache_path,
                   load_audio, load_cached, load_corpus, write_units)
from .errors import DataError
from .synthesis import Synthesizer, vocode
from .training import Trainer, energy_stats

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ["#clusters", "layer", "WER", "PER", "CER"]
# probe-model scale for the unit sweep
SWEEP_MODEL = dict(d_model=48, n_heads=4, enc_layers=1, dec_layers=1, frontend_channels=4,
                   flow_hidden=32, flow_layers=2, n_speakers=2)
SWEEP_TRAIN = dict(batch_size=4, window_length=25, augment=False)


def _train_records(records: Sequence[ManifestRecord]) -> list[ManifestRecord]:
    train = [r for r in records if r.split == "train"]
    if not train:
        raise DataError("no 'train' records to fit the codebook on")
    return train


def fit_units(records: Sequence[ManifestRecord], cache_dir: str | Path, K: int, layer: int,
              backend: str = "synthetic", seed: int = 0, write: bool = True,
              ) -> tuple[units.Codebook, dict[str, np.ndarray]]:
    """Fit a codebook on training-split audio and quantise every clip to video rate."""
    ssl = units.get_backend(backend, layer=layer)
    feats = {r.clip_id: ssl.extract(load_audio(r.audio)) for r in records}
    codebook = units.fit_codebook([feats[r.clip_id] for r in _train_records(records)], K, seed)
    out = {}
    for r in records:
        path = cache_path(Path(cache_dir), r.clip_id)
        if not path.exists():
            raise DataError(f"no cached features for {r.clip_id}; run `lip2speech preprocess` first")
        ex, _ = load_cached(path)
        out[r.clip_id] = units.quantise(units.length_match(feats[r.clip_id], len(ex.clip)), codebook)
        if write:
            write_units(cache_dir, r.clip_id, out[r.clip_id], codebook.hash())
    return codebook, out


def with_units(examples: Sequence[Example], unit_map: dict[str, np.ndarray]) -> list[Example]:
    return [dataclasses.replace(ex, targets=VarianceTargets(unit_map[ex.clip_id], ex.targets.pitch,
                                                            ex.targets.energy))
            for ex in examples]


def evaluate_synthesizer(synth: Synthesizer, examples: Sequence[Example], asr, g2p=None,
                         temperature: float = 0.0, vocoder="griffinlim", audio_paths=None,
                         seed: int = 0) -> dict:
    """WER/CER/PER, energy MAE and pitch moments for generated vs ground-truth speech."""
    hyps, refs, gen_e, ref_e, gen_f0, ref_f0 = [], [], [], [], [], []
    for ex in examples:
        mel = synth.synthesise_mel(ex.clip, temperature=temperature, seed=seed)
        wav = vocode(mel, vocoder)
        hyps.append(evaluation.asr_transcribe(wav, asr, key=ex.clip_id))
        refs.append(ex.text)
        gen_e.append(audio.extract_energy(mel))
        ref_e.append(ex.targets.energy)
        f0, _ = audio.raw_f0(wav)
        gen_f0.append(f0)
        if audio_paths and ex.clip_id in audio_paths:
            ref_f0.append(audio.raw_f0(load_audio(audio_paths[ex.clip_id]))[0])
    report: dict = {"n_samples": len(examples)}
    scored = [(h, r) for h, r in zip(hyps, refs) if r.strip()]
    if scored:
        h, r = zip(*scored)
        report["wer"] = evaluation.corpus_error_rate(h, r, "word")
        report["cer"] = evaluation.corpus_error_rate(h, r, "char")
        report["per"] = evaluation.corpus_error_rate(h, r, "phoneme", g2p)
    report["energy_mae"] = float(np.mean([evaluation.energy_mae(g, r) for g, r in zip(gen_e, ref_e)]))
    moments = {}
    for name, tracks in (("generated", gen_f0), ("ground_truth", ref_f0)):
        pooled = np.concatenate(tracks) if tracks else np.empty(0)
        if np.isfinite(pooled).sum() >= 2:
            try:
                moments[name] = dataclasses.asdict(evaluation.pitch_moments(pooled))
            except Exception as exc:  # constant or empty voiced set
                logger.warning("pitch moments for %s unavailable: %s", name, exc)
    report["pitch_moments"] = moments
    report["transcripts"] = [{"clip_id": ex.clip_id, "hyp": h, "ref": r}
                             for ex, h, r in zip(examples, hyps, refs)]
    return report


def _probe_train(train: list[Example], mcfg: ModelConfig, tcfg: TrainConfig, steps: int) -> Trainer:
    mean, std = energy_stats(train)
    trainer = Trainer(merge(mcfg, {"energy_mean": mean, "energy_std": std}), tcfg)
    while trainer.step < steps:
        for batch in trainer.make_batches(train):
            trainer.train_step(batch)
            if trainer.step >= steps:
                break
    return trainer


def run_unit_sweep(records: Sequence[ManifestRecord], cache_dir: str | Path,
                   layers: Sequence[int] = (1, 12, 24), clusters: Sequence[int] = (100, 200),
                   mcfg: ModelConfig | None = None, tcfg: TrainConfig | None = None,
                   probe_steps: int = 10, asr=None, g2p=None, backend: str = "synthetic",
                   seed: int = 0, eval_split: str = "val") -> dict:
    """Fit units, train a probe model and score intelligibility for each (K, layer) cell."""
    mcfg = mcfg or ModelConfig(**SWEEP_MODEL)
    tcfg = tcfg or TrainConfig(**SWEEP_TRAIN)
    base_train = load_corpus(cache_dir, records, splits=["train"], need_units=False)
    base_eval = load_corpus(cache_dir, records, splits=[eval_split], need_units=False) or base_train
    if asr is None:
        asr = evaluation.EchoASR({ex.clip_id: ex.text for ex in base_eval})
    rows = []
    for K in clusters:
        for layer in layers:
            logger.info("unit sweep cell K=%d layer=%d", K, layer)
            _, unit_map = fit_units(records, cache_dir, K, layer, backend, seed, write=False)
            trainer = _probe_train(with_units(base_train, unit_map), merge(mcfg, {"K": K}),
                                   tcfg, probe_steps)
            synth = Synthesizer(trainer.model, trainer.postnet)
            rep = evaluate_synthesizer(synth, with_units(base_eval, unit_map), asr, g2p,
                                       audio_paths=None, seed=seed)
            rows.append({"#clusters": K, "layer": layer, "WER": rep.get("wer"),
                         "PER": rep.get("per"), "CER": rep.get("cer")})
    return {"columns": SWEEP_COLUMNS, "rows": rows, "eval_split": eval_split,
            "probe_steps": probe_steps, "backend": backend}


def write_report(report: dict, path: str | Path) -> None:
    atomic_write_text(Path(path), json.dumps(report, indent=2, sort_keys=True, default=float) + "\n")


# reduced-width GRID model for the overfit smoke run
OVERFIT_MODEL = dict(d_model=96, enc_layers=2, dec_layers=2, frontend_channels=8,
                     flow_hidden=64, flow_layers=2, K=50)


def prepare_synthetic(out_dir: str | Path, n_clips: int = 2, K: int = 50, layer: int = 12,
                      seed: int = 0, n_frames: int = 75) -> tuple[list[ManifestRecord], Path]:
    """Generate, preprocess and unit-label a toy corpus; every clip is in the train split."""
    from .data import preprocess_corpus
    from .synthetic import generate_dataset

    out_dir = Path(out_dir)
    records = generate_dataset(out_dir, n_clips, seed, n_frames)
    records = [dataclasses.replace(r, split="train", video=str(out_dir / r.video),
                                   audio=str(out_dir / r.audio)) for r in records]
    cache = out_dir / "cache"
    preprocess_corpus(records, cache)
    fit_units(records, cache, K, layer, seed=seed)
    return records, cache


def block_means(values: Sequence[float], block: int = 100) -> list[float]:
    n = len(values) // block
    return [float(np.mean(values[i * block:(i + 1) * block])) for i in range(n)]


def overfit_smoke(work_dir: str | Path, steps: int = 2000, n_clips: int = 2, seed: int = 0,
                  block: int = 100, log_every: int = 0, eval_every: int = 0,
                  **model_overrides) -> dict:
    """Train the reduced GRID model on two toy clips and summarise the loss trace."""
    from .config import preset

    records, cache = prepare_synthetic(work_dir, n_clips, K=model_overrides.get("K", 50), seed=seed)
    train = load_corpus(cache, records, splits=["train"])
    gm, gt = preset("grid")
    mcfg = merge(gm, {**OVERFIT_MODEL, "n_speakers": 2, **model_overrides})
    tcfg = merge(gt, {"batch_size": n_clips, "augment": False, "seed": seed})
    mean, std = energy_stats(train)
    trainer = Trainer(merge(mcfg, {"energy_mean": mean, "energy_std": std}), tcfg)
    # validation-on-train: teacher-forced, eval mode, whole clips
    eval_mel = [(0, trainer.evaluate(train)["mel"])]
    mel, post = [], []
    while trainer.step < steps:
        for batch in trainer.make_batches(train):
            rec = trainer.train_step(batch)
            # training mel L1 reported as a per-element mean
            mel.append(rec["mel"] / batch.mel[0].numel())
            post.append(rec["post"])
            if log_every and trainer.step % log_every == 0:
                logger.info("step %d mel %.4f post %.4f", trainer.step, mel[-1], post[-1])
            if eval_every and trainer.step % eval_every == 0 and trainer.step < steps:
                eval_mel.append((trainer.step, trainer.evaluate(train)["mel"]))
            if trainer.step >= steps:
                break
    eval_mel.append((trainer.step, trainer.evaluate(train)["mel"]))
    post_blocks = block_means(post, block)
    return {
        "steps": trainer.step,
        "mel_l1": mel,
        "post_nll": post,
        "eval_mel": eval_mel,
        "mel_ratio": eval_mel[-1][1] / eval_mel[0][1],
        "train_mel_ratio": mel[-1] / mel[0],
        "post_blocks": post_blocks,
        "post_monotone": all(b < a for a, b in zip(post_blocks, post_blocks[1:])),
        "trainer": trainer,
    }
