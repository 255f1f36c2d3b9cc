import warnings

import numpy as np
import pytest
import torch

from lip2speech.config import ModelConfig
from lip2speech.data import load_corpus, preprocess_corpus, read_manifest
from lip2speech.pipeline import fit_units
from lip2speech.synthetic import generate_dataset

warnings.filterwarnings("ignore", message=".*deterministic.*")


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(d_model=32, n_heads=4, enc_layers=1, dec_layers=1, frontend_channels=4, K=10,
                n_speakers=2, flow_hidden=16, flow_layers=2, conv_kernel=3, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """Six-clip synthetic corpus, preprocessed and unit-labelled (K=20)."""
    root = tmp_path_factory.mktemp("corpus")
    generate_dataset(root, n_clips=6, seed=0, n_frames=60)
    records = read_manifest(root / "manifest.jsonl")
    cache = root / "cache"
    preprocess_corpus(records, cache)
    fit_units(records, cache, K=20, layer=12)
    return {"root": root, "records": records, "cache": cache,
            "examples": load_corpus(cache, records)}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


ACCEPTANCE: list[str] = []


def record_criterion(number: int, name: str, ok: bool, detail: str = "") -> None:
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
