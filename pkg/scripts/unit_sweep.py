"""Run the units sweep (layer x clusters) on a fresh synthetic corpus.

    python scripts/unit_sweep.py --out runs/sweep --clips 8
"""
import argparse
import logging
from pathlib import Path

from lip2speech import cli


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/sweep")
    ap.add_argument("--clips", type=int, default=8)
    ap.add_argument("--frames", type=int, default=75)
    ap.add_argument("--probe-steps", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    steps = [
        ["gen-synthetic", "--out", str(out / "corpus"), "--clips", str(args.clips),
         "--frames", str(args.frames), "--seed", str(args.seed)],
        ["preprocess", "--manifest", str(out / "corpus" / "manifest.jsonl"), "--cache", str(out / "cache")],
        ["sweep-units", "--manifest", str(out / "corpus" / "manifest.jsonl"), "--cache", str(out / "cache"),
         "--asr", "echo", "--probe-steps", str(args.probe_steps), "--report", str(out / "table.json")],
    ]
    for argv in steps:
        code = cli.dispatch(argv)
        if code:
            raise SystemExit(code)
    print((out / "table.json").read_text())


if __name__ == "__main__":
    main()
