"""Loss assembly, the optimisation loop, checkpoints and metric logging."""
from __future__ import annotations

import io
import json
import logging
import math
import os
import pickle
import random
import time
import types
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from . import config as config_mod
from .config import ModelConfig, TrainConfig
from .data import Example, load_corpus, read_manifest, sample_window
from .errors import DataError, NumericalError
from .flow import FlowCondition, FlowPostNet
from .model import LipToSpeech, mel_loss, variance_losses
from .video import augment

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOSS_NAMES = ("mel", "linguistic", "pitch", "energy", "post")


def total_loss(l_mel, l_l, l_p, l_e, l_post, cfg: TrainConfig | None = None,
               lambda_var: float | None = None, lambda_post: float | None = None):
    """``L_mel + lambda_var * (L_l + L_p + L_e) + lambda_post * L_post``."""
    cfg = cfg or TrainConfig()
    lv = cfg.lambda_var if lambda_var is None else lambda_var
    lp = cfg.lambda_post if lambda_post is None else lambda_post
    for name, v in zip(LOSS_NAMES, (l_mel, l_l, l_p, l_e, l_post)):
        val = float(v.detach()) if torch.is_tensor(v) else float(v)
        if not math.isfinite(val):
            raise NumericalError(f"loss component {name!r} is not finite ({val})")
    return l_mel + lv * (l_l + l_p + l_e) + lp * l_post


def set_seed(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


def build_postnet(cfg: ModelConfig) -> FlowPostNet:
    return FlowPostNet(cfg.mel_bands, cfg.d_model, cfg.flow_hidden, cfg.flow_layers,
                       cfg.flow_kernel, cfg.n_flow_steps, residual=cfg.flow_residual)


@dataclass
class Batch:
    frames: torch.Tensor  # (B, T, 1, 112, 112)
    speaker: torch.Tensor  # (B,)
    mel: torch.Tensor  # (B, 4T, 80)
    linguistic: torch.Tensor
    pitch: torch.Tensor
    energy: torch.Tensor
    clip_ids: list[str] = field(default_factory=list)

    @classmethod
    def collate(cls, examples: Sequence[Example]) -> "Batch":
        lengths = {len(e.clip) for e in examples}
        if len(lengths) != 1:
            raise DataError(f"batch windows differ in length: {sorted(lengths)}")
        return cls(
            frames=torch.from_numpy(np.stack([e.clip.frames for e in examples])),
            speaker=torch.tensor([e.clip.speaker_id for e in examples]),
            mel=torch.from_numpy(np.stack([e.mel.values for e in examples]).astype(np.float32)),
            linguistic=torch.from_numpy(np.stack([e.targets.linguistic for e in examples])),
            pitch=torch.from_numpy(np.stack([e.targets.pitch for e in examples])),
            energy=torch.from_numpy(np.stack([e.targets.energy for e in examples])),
            clip_ids=[e.clip_id for e in examples],
        )


def compute_losses(model: LipToSpeech, postnet: FlowPostNet, batch: Batch, tcfg: TrainConfig,
                   detach_cond: bool = True) -> dict[str, torch.Tensor]:
    out = model(batch.frames, batch.speaker, batch.linguistic, batch.pitch, batch.energy)
    l_l, l_p, l_e = variance_losses(out.prediction, batch.linguistic, batch.pitch, batch.energy,
                                    tcfg.loss_reduction)
    l_mel = mel_loss(out.coarse_mel, batch.mel, tcfg.loss_reduction)
    cond = FlowCondition(out.decoder_input, out.coarse_mel, out.speaker_embedding)
    if detach_cond:
        cond = cond.detach()
    l_post = postnet.loss(batch.mel, cond, tcfg.flow_reduction)
    losses = dict(zip(LOSS_NAMES, (l_mel, l_l, l_p, l_e, l_post)))
    losses["total"] = total_loss(l_mel, l_l, l_p, l_e, l_post, tcfg)
    return losses


class Trainer:
    """Owns the model, post-net and AdamW optimiser for one training run."""

    def __init__(self, mcfg: ModelConfig, tcfg: TrainConfig, codebook_hash: str = ""):
        set_seed(tcfg.seed, tcfg.deterministic)
        self.mcfg, self.tcfg = mcfg, tcfg
        self.model = LipToSpeech(mcfg)
        self.postnet = build_postnet(mcfg)
        self.optimizer = torch.optim.AdamW(self.parameters(), lr=tcfg.lr, betas=tcfg.betas,
                                           eps=tcfg.eps, weight_decay=tcfg.weight_decay)
        self.step = 0
        self.epoch = 0
        self.best_val = math.inf
        self.codebook_hash = codebook_hash
        self.rng = np.random.default_rng(tcfg.seed)

    def parameters(self):
        return list(self.model.parameters()) + list(self.postnet.parameters())

    def train(self):
        self.model.train()
        self.postnet.train()

    def eval(self):
        self.model.eval()
        self.postnet.eval()

    def train_step(self, batch: Batch) -> dict[str, float]:
        """One teacher-forced forward/backward pass and AdamW update."""
        self.train()
        t0 = time.perf_counter()
        self.optimizer.zero_grad(set_to_none=True)
        losses = compute_losses(self.model, self.postnet, batch, self.tcfg, self.mcfg.flow_detach_cond)
        losses["total"].backward()
        params = [p for p in self.parameters() if p.grad is not None]
        grad_norm = torch.linalg.vector_norm(torch.stack(
            [torch.linalg.vector_norm(p.grad) for p in params]))
        if not torch.isfinite(grad_norm):
            raise NumericalError(f"non-finite gradient norm at step {self.step}")
        if self.tcfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, self.tcfg.grad_clip)
        self.optimizer.step()
        self.step += 1
        record = {"step": self.step, **{k: float(v.detach()) for k, v in losses.items()},
                  "grad_norm": float(grad_norm), "time": time.perf_counter() - t0}
        return record

    @torch.no_grad()
    def evaluate(self, examples: Iterable[Example]) -> dict[str, float]:
        """Teacher-forced losses averaged over whole validation clips (eval mode)."""
        self.eval()
        sums: dict[str, float] = {}
        n = 0
        for ex in examples:
            batch = Batch.collate([ex])
            losses = compute_losses(self.model, self.postnet, batch, self.tcfg)
            for k, v in losses.items():
                sums[k] = sums.get(k, 0.0) + float(v)
            n += 1
        return {k: v / max(n, 1) for k, v in sums.items()}

    def make_batches(self, examples: Sequence[Example]) -> list[Batch]:
        """One random window per clip, shuffled, grouped into batches (one epoch)."""
        order = self.rng.permutation(len(examples))
        windows = []
        for i in order:
            ex = sample_window(examples[i], self.tcfg.window_length, self.rng,
                               pad=self.tcfg.pad_short)
            if self.tcfg.augment:
                ex.clip = augment(ex.clip, self.rng)
            windows.append(ex)
        bs = self.tcfg.batch_size
        return [Batch.collate(windows[s:s + bs]) for s in range(0, len(windows), bs)]

    # -- checkpoints --------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "model_config": config_mod.to_dict(self.mcfg),
            "train_config": config_mod.to_dict(self.tcfg),
            "model": self.model.state_dict(),
            "postnet": self.postnet.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "step": self.step,
            "epoch": self.epoch,
            "best_val": self.best_val,
            "codebook_hash": self.codebook_hash,
            "torch_rng": torch.get_rng_state(),
            "numpy_rng": json.dumps(self.rng.bit_generator.state),
        }

    def save(self, path: str | Path) -> Path:
        return save_checkpoint(self.state_dict(), path)

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> "Trainer":
        state = load_checkpoint(path)
        mcfg, tcfg = checkpoint_configs(state)
        trainer = cls(mcfg, tcfg, state["codebook_hash"])
        trainer.load_state_dict(state)
        return trainer

    def load_state_dict(self, state: dict) -> None:
        self.model.load_state_dict(state["model"])
        self.postnet.load_state_dict(state["postnet"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.step = state["step"]
        self.epoch = state["epoch"]
        self.best_val = state["best_val"]
        self.codebook_hash = state["codebook_hash"]
        torch.set_rng_state(state["torch_rng"])
        self.rng.bit_generator.state = json.loads(state["numpy_rng"])


class _CanonicalPickler(pickle.Pickler):
    # no memo: the byte stream depends on values only, not on which equal
    # strings happen to be the same object (tensors are deduplicated by torch)
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.fast = True


_canonical_pickle = types.ModuleType("canonical_pickle")
_canonical_pickle.__dict__.update(Pickler=_CanonicalPickler, Unpickler=pickle.Unpickler,
                                  load=pickle.load, dump=pickle.dump)


def save_checkpoint(state: dict, path: str | Path) -> Path:
    """Serialise to a temporary file and atomically rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(state, buf, pickle_module=_canonical_pickle)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    state = torch.load(path, map_location="cpu", weights_only=False)
    if state.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {state.get('version')}")
    return state


def checkpoint_configs(state: dict) -> tuple[ModelConfig, TrainConfig]:
    return ModelConfig(**state["model_config"]), TrainConfig(**state["train_config"])


class MetricLog:
    """Append-only JSON-lines metric log."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: dict) -> None:
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def energy_stats(examples: Sequence[Example]) -> tuple[float, float]:
    e = np.concatenate([ex.targets.energy for ex in examples])
    return float(e.mean()), float(max(e.std(), 1e-3))


def run_experiment(manifest: str | Path, tcfg: TrainConfig, mcfg: ModelConfig,
                   out_dir: str | Path, cache_dir: str | Path | None = None,
                   resume: str | Path | None = None, max_steps: int | None = None) -> Trainer:
    """Epoch loop with per-epoch validation and best/periodic checkpoints.

    Writes ``metrics.jsonl``, ``last.pt``, ``best.pt`` and ``epoch_XXXX.pt``
    under ``out_dir``. An epoch draws one window per training clip.
    """
    from .data import default_cache_dir

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = read_manifest(manifest)
    cache_dir = Path(cache_dir) if cache_dir else default_cache_dir(manifest)
    train_set = load_corpus(cache_dir, records, splits=["train"])
    val_set = load_corpus(cache_dir, records, splits=["val"]) or train_set
    if not train_set:
        raise DataError("no training clips in manifest")

    codebook_hash = train_set[0].meta.get("codebook_hash", "")
    if resume:
        trainer = Trainer.from_checkpoint(resume)
    else:
        mean, std = energy_stats(train_set)
        mcfg = config_mod.merge(mcfg, {"energy_mean": mean, "energy_std": std})
        trainer = Trainer(mcfg, tcfg, codebook_hash)
    log = MetricLog(out_dir / "metrics.jsonl")
    if trainer.step == 0 and trainer.epoch == 0:
        trainer.save(out_dir / "epoch_0000.pt")
        trainer.save(out_dir / "last.pt")

    while trainer.epoch < trainer.tcfg.epochs:
        for batch in trainer.make_batches(train_set):
            rec = trainer.train_step(batch)
            rec["epoch"] = trainer.epoch
            log.write(rec)
            if max_steps is not None and trainer.step >= max_steps:
                break
        trainer.epoch += 1
        if trainer.epoch % trainer.tcfg.val_every == 0 or trainer.epoch == trainer.tcfg.epochs:
            val = trainer.evaluate(val_set)
            log.write({"epoch": trainer.epoch, "step": trainer.step,
                       **{f"val_{k}": v for k, v in val.items()}})
            if val["mel"] < trainer.best_val:
                trainer.best_val = val["mel"]
                trainer.save(out_dir / "best.pt")
        if trainer.epoch % trainer.tcfg.checkpoint_every == 0:
            trainer.save(out_dir / f"epoch_{trainer.epoch:04d}.pt")
        trainer.save(out_dir / "last.pt")
        if max_steps is not None and trainer.step >= max_steps:
            break
    return trainer
