import hashlib
import json
import shutil
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from codecweave.codec_stream import CodecSpec
from codecweave.model import ModelConfig
from codecweave.toy_codec import ToyLanguageSpec

FIXTURES = Path(__file__).parent / "fixtures"
SRC = Path(__file__).resolve().parents[1] / "src" / "codecweave"

SMALL_SPEC = CodecSpec(num_codebooks=4, vocab_size=64)
SMALL_LANG = ToyLanguageSpec(4, 2, 2, SMALL_SPEC)


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(num_layers=2, dim=32, num_heads=4, text_vocab=4, codec=SMALL_SPEC,
                speaker_dim=2, max_len=96, seed=3, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


TINY_CLI_CONFIG = {
    "toy_language": SMALL_LANG.to_dict(),
    "data": {"num_utterances": 120, "split": [0.8, 0.1, 0.1], "length_range": [1, 5]},
    "model": {"dim": 32, "num_layers": 1, "num_heads": 2, "text_vocab": 4, "speaker_dim": 2,
              "max_len": 64},
    "train": {"total_steps": 12, "warmup_steps": 3, "batch_size": 4, "log_every": 4,
              "checkpoint_every": 4},
    "sampler": {"max_new_columns": 24},
    "eval": {"num_utterances": 6},
}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_lang():
    return SMALL_LANG


@pytest.fixture
def tiny_cli_config(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY_CLI_CONFIG))
    return p


# -- the desk-scale toy model, trained once and cached by code + config hash --

def _source_digest(cfg: dict) -> str:
    h = hashlib.sha256(json.dumps(cfg, sort_keys=True).encode())
    for f in sorted(SRC.glob("*.py")) + sorted(SRC.glob("*.pyx")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()[:16]


def train_cached(request, cfg: dict, tag: str, layout: str | None = None):
    """Train on the default gen-data splits; reuse an identical earlier run if cached.

    Returns ``(model, splits, info)`` where ``info["train_seconds"]`` is the
    wall time measured when the run was actually trained.
    """
    from codecweave.cli import Resolved, make_splits, train_run
    from codecweave.model import load_model

    r = Resolved(cfg)
    d = cfg["data"]
    splits = make_splits(r.lang, r.seed, int(d["num_utterances"]), d["split"], d["length_range"])
    key = _source_digest({**cfg, "layout": layout})
    cache = Path(request.config.cache.mkdir("codecweave")) / f"{tag}-{key}"
    info_path = cache / "info.json"
    if info_path.exists():
        model, _ = load_model(cache / "checkpoint.bin")
        return model, splits, {**json.loads(info_path.read_text()), "dir": str(cache), "cached": True}
    if cache.exists():
        shutil.rmtree(cache)
    t0 = time.perf_counter()
    tr = train_run(r, splits["train"], cache, cfg, layout=layout)
    info = {"train_seconds": time.perf_counter() - t0, "steps": tr.step, "cached_key": key}
    info_path.write_text(json.dumps(info))
    return tr.model, splits, {**info, "dir": str(cache), "cached": False}


@pytest.fixture(scope="session")
def trained_toy(request):
    from codecweave.cli import default_config
    from codecweave.cli import Resolved
    cfg = default_config()
    model, splits, info = train_cached(request, cfg, "default")
    return SimpleNamespace(model=model, lang=Resolved(cfg).lang, cfg=cfg, info=info, **splits)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
