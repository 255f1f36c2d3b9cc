"""Command-line entry point.

Exit codes: 0 ok, 2 usage, 3 missing dependency/backend, 4 data error,
5 numerical failure. ``LIP2SPEECH_CACHE`` overrides the cache directory.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import config as config_mod
from .errors import Lip2SpeechError, UsageError

logger = logging.getLogger("lip2speech")

MODEL_FLAGS = {"d_model": int, "n_heads": int, "enc_layers": int, "dec_layers": int, "K": int,
               "n_speakers": int, "frontend_channels": int, "n_flow_steps": int, "dropout": float}
TRAIN_FLAGS = {"lr": float, "batch_size": int, "window_length": int, "epochs": int, "seed": int,
               "lambda_var": float, "lambda_post": float}


def _parse_set(pairs: list[str]) -> tuple[dict, dict]:
    model, train = {}, {}
    for item in pairs or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        key, raw = item.split("=", 1)
        section, name = key.split(".", 1)
        target = {"model": model, "train": train}.get(section)
        if target is None:
            raise UsageError(f"--set section must be model or train, got {section!r}")
        target[name] = yaml.safe_load(raw)
    return model, train


def resolve_configs(args) -> tuple[config_mod.ModelConfig, config_mod.TrainConfig]:
    """Defaults < preset < config file < explicit flags / --set."""
    m_set, t_set = _parse_set(getattr(args, "set", None))
    m_flags = {k: getattr(args, k, None) for k in MODEL_FLAGS}
    t_flags = {k: getattr(args, k, None) for k in TRAIN_FLAGS}
    m_flags.update(m_set)
    t_flags.update(t_set)
    return config_mod.resolve(getattr(args, "config", None), m_flags, t_flags,
                              getattr(args, "preset", None))


def _cache(args) -> Path:
    from .data import default_cache_dir

    return Path(args.cache) if getattr(args, "cache", None) else default_cache_dir(args.manifest)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_synthetic(args) -> int:
    from .synthetic import generate_dataset

    recs = generate_dataset(args.out, args.clips, args.seed, args.frames)
    print(f"wrote {len(recs)} clips to {args.out}")
    return 0


def cmd_preprocess(args) -> int:
    from .data import preprocess_corpus, read_manifest

    stats = preprocess_corpus(read_manifest(args.manifest), _cache(args), pitch_log=args.pitch_log)
    print(f"cached features in {_cache(args)} (pitch mean {stats.mean:.2f}, std {stats.std:.2f})")
    return 0


def cmd_fit_units(args) -> int:
    from .data import read_manifest
    from .pipeline import fit_units

    cache = _cache(args)
    codebook, _ = fit_units(read_manifest(args.manifest), cache, args.clusters, args.layer,
                            args.backend, args.seed)
    out = Path(args.out) if args.out else cache / "codebook.npz"
    codebook.save(out)
    print(f"codebook K={codebook.K} D={codebook.D} layer={args.layer} -> {out} ({codebook.hash()})")
    return 0


def cmd_train(args) -> int:
    from .training import run_experiment

    mcfg, tcfg = resolve_configs(args)
    trainer = run_experiment(args.manifest, tcfg, mcfg, args.out, _cache(args), args.resume,
                             args.max_steps)
    print(f"trained to step {trainer.step} (epoch {trainer.epoch}); checkpoints in {args.out}")
    return 0


def cmd_synth(args) -> int:
    from .synthesis import ExternalVocoder, Synthesizer, vocode, write_wav
    from .video import VideoClip, load_frames

    synth = Synthesizer.from_checkpoint(args.checkpoint)
    clip = VideoClip(load_frames(args.video, args.landmarks), speaker_id=args.speaker)
    mel = synth.synthesise_mel(clip, args.speaker, args.temperature, args.seed)
    if args.dump_mel:
        np.save(args.dump_mel, mel)
    if args.out:
        backend = (ExternalVocoder(args.vocoder_command, fallback=not args.no_fallback)
                   if args.vocoder == "external" else "griffinlim")
        if args.vocoder == "external" and not args.vocoder_command:
            raise UsageError("--vocoder external needs --vocoder-command")
        write_wav(args.out, vocode(mel, backend))
    print(f"synthesised mel {mel.shape}")
    return 0


def _g2p(args):
    from .evaluation import ExternalG2P, LexiconG2P

    if getattr(args, "g2p_command", None):
        return ExternalG2P(args.g2p_command)
    lex = getattr(args, "lexicon", None)
    if lex is None:
        cand = Path(args.manifest).parent / "lexicon.json"
        lex = cand if cand.exists() else None
    return LexiconG2P(json.loads(Path(lex).read_text()) if lex else None)


def _asr(args, examples):
    from .evaluation import get_asr

    transcripts = None
    if args.asr == "echo":
        if args.transcripts:
            transcripts = json.loads(Path(args.transcripts).read_text())
        else:
            transcripts = {ex.clip_id: ex.text for ex in examples}
    return get_asr(args.asr, args.asr_command, transcripts)


def cmd_eval(args) -> int:
    from .data import load_corpus, read_manifest
    from .pipeline import evaluate_synthesizer, write_report
    from .synthesis import Synthesizer

    records = read_manifest(args.manifest)
    examples = load_corpus(_cache(args), records, splits=[args.split], need_units=False)
    if not examples:
        raise UsageError(f"no clips in split {args.split!r}")
    synth = Synthesizer.from_checkpoint(args.checkpoint)
    report = evaluate_synthesizer(synth, examples, _asr(args, examples), _g2p(args),
                                  args.temperature, audio_paths={r.clip_id: r.audio for r in records},
                                  seed=args.seed)
    report = {"intelligibility": {k: report.get(k) for k in ("wer", "cer", "n_samples")},
              "pitch": report["pitch_moments"], "energy": {"energy_mae": report["energy_mae"]},
              "per": report.get("per"), "transcripts": report["transcripts"]}
    write_report(report, args.report)
    print(json.dumps(report["intelligibility"]))
    return 0


def cmd_sweep_units(args) -> int:
    from .data import load_corpus, read_manifest
    from .pipeline import SWEEP_MODEL, SWEEP_TRAIN, run_unit_sweep, write_report

    if args.config or args.preset:
        mcfg, tcfg = resolve_configs(args)
    else:
        # the sweep's own probe scale, with flags / --set layered on top
        m_set, t_set = _parse_set(args.set)
        mcfg = config_mod.merge(config_mod.ModelConfig(**SWEEP_MODEL),
                                {**{k: getattr(args, k) for k in MODEL_FLAGS}, **m_set})
        tcfg = config_mod.merge(config_mod.TrainConfig(**SWEEP_TRAIN),
                                {**{k: getattr(args, k) for k in TRAIN_FLAGS}, **t_set})
    records = read_manifest(args.manifest)
    asr = None
    if args.asr != "echo" or args.transcripts:
        asr = _asr(args, load_corpus(_cache(args), records, need_units=False))
    report = run_unit_sweep(records, _cache(args), args.layers, args.clusters, mcfg, tcfg,
                            args.probe_steps, asr, _g2p(args), args.backend, tcfg.seed, args.split)
    write_report(report, args.report)
    for row in report["rows"]:
        print(json.dumps(row))
    return 0


# ---------------------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config with model/train sections")
    p.add_argument("--preset", choices=sorted(config_mod.PRESETS))
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override any config field, e.g. model.d_model=96")
    for name, typ in {**MODEL_FLAGS, **TRAIN_FLAGS}.items():
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lip2speech", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write the synthetic audio-visual toy corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--clips", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=75)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("preprocess", help="build the feature cache from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache")
    p.add_argument("--pitch-log", action="store_true", help="standardise log-F0 instead of Hz")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("fit-units", help="fit the K-means codebook and write unit targets")
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache")
    p.add_argument("--clusters", type=int, default=200)
    p.add_argument("--layer", type=int, default=12)
    p.add_argument("--backend", default="synthetic")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit_units)

    p = sub.add_parser("train", help="train model and post-net")
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache")
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    p.add_argument("--max-steps", type=int)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="synthesise speech from a silent clip")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--video", required=True)
    p.add_argument("--landmarks")
    p.add_argument("--speaker", type=int, default=0)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vocoder", choices=["griffinlim", "external"], default="griffinlim")
    p.add_argument("--vocoder-command", help="template with {mel} and {wav} placeholders")
    p.add_argument("--no-fallback", action="store_true")
    p.add_argument("--out")
    p.add_argument("--dump-mel")
    p.set_defaults(func=cmd_synth)

    def add_asr(p):
        p.add_argument("--asr", choices=["echo", "external-cmd"], default="echo")
        p.add_argument("--asr-command", help="template with a {wav} placeholder")
        p.add_argument("--transcripts", help="JSON clip_id->text for the echo backend")
        p.add_argument("--lexicon", help="JSON word->phonemes for PER")
        p.add_argument("--g2p-command")

    p = sub.add_parser("eval", help="evaluate a checkpoint (WER/CER/PER, pitch, energy)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache")
    p.add_argument("--split", default="test")
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", required=True)
    add_asr(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-units", help="layer x clusters grid (fit-units + probe + eval)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache")
    p.add_argument("--layers", type=int, nargs="+", default=[1, 12, 24])
    p.add_argument("--clusters", type=int, nargs="+", default=[100, 200])
    p.add_argument("--probe-steps", type=int, default=10)
    p.add_argument("--backend", default="synthetic")
    p.add_argument("--split", default="val")
    p.add_argument("--report", required=True)
    add_asr(p)
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep_units)
    return parser


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Lip2SpeechError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
