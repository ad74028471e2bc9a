"""Weighted cross-entropy, AdamW with linear warmup/decay, and the training loop."""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import kernels as K_
from .alignment import AlignedUtterance, SplitPolicy, sample_split, slice_utterance
from .layout import NONAUDIO, SegmentWeights, speaker_vector, training_layout_from_segments
from .model import Batch, CodecLM, ModelConfig, collate, read_checkpoint, write_checkpoint

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 20_000
    warmup_steps: int = 500
    peak_lr: float = 3e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-6
    weight_decay: float = 0.01
    accum_micro_batches: int = 1
    batch_size: int = 8
    codebook_weights: tuple = (1.0, 0.8, 0.6, 0.4)
    segment_weights: tuple = (1.0, 1.0, 3.0)
    normalize_loss: bool = True
    p_tts: float = 0.3
    layout: str = "reordered"
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")
        if self.accum_micro_batches < 1 or self.batch_size < 1:
            raise ValueError("accum_micro_batches and batch_size must be >= 1")
        if self.layout not in ("reordered", "natural"):
            raise ValueError("layout must be 'reordered' or 'natural'")
        object.__setattr__(self, "betas", tuple(self.betas))
        object.__setattr__(self, "codebook_weights", tuple(self.codebook_weights))
        object.__setattr__(self, "segment_weights", tuple(self.segment_weights))

    def seg_weights(self) -> SegmentWeights:
        return SegmentWeights(*self.segment_weights)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("betas", "codebook_weights", "segment_weights"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def weighted_ce(logits: np.ndarray, targets: np.ndarray, segment_tags: np.ndarray,
                alpha: Sequence[float], seg_weights: SegmentWeights = SegmentWeights(),
                normalize: bool = True, grad: bool = False):
    """Segment- and codebook-weighted cross-entropy over ``(M, K, V)`` logits.

    ``targets`` is ``(M, K)`` with ``-1`` where a codebook has no target;
    ``segment_tags`` is ``(M,)``. The raw objective is
    ``sum_i w_seg(i) * alpha_k(i) * CE_i``; with ``normalize`` it is divided by
    the sum of the weights of all scored cells.

    Returns the loss, or ``(loss, dlogits, weight_sum)`` when ``grad`` is set.
    ``logits`` is left untouched.
    """
    raw, weight_sum, dlogits = _weighted_ce_sum(logits, targets, segment_tags, alpha, seg_weights)
    scale = 1.0 / weight_sum if normalize and weight_sum > 0 else 1.0
    if not grad:
        return raw * scale
    dlogits *= dlogits.dtype.type(scale)
    return raw * scale, dlogits, weight_sum


def _weighted_ce_sum(logits, targets, segment_tags, alpha, seg_weights):
    M, Kc, V = logits.shape
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (Kc,):
        raise ContractError(f"need {Kc} codebook weights, got {alpha.shape}")
    targets = np.asarray(targets, dtype=np.int64).reshape(M, Kc)
    tags = np.asarray(segment_tags).reshape(M)
    has_target = (targets >= 0).any(axis=1)
    if np.any(has_target & (tags == NONAUDIO)):
        raise ContractError("target present at a position tagged nonaudio")
    w = seg_weights.lookup()[tags][:, None] * alpha[None, :]
    w = np.where(targets >= 0, w, 0.0)
    work = np.array(logits, dtype=logits.dtype, order="C", copy=True).reshape(M * Kc, V)
    raw = K_.softmax_xent(work, targets.reshape(-1), w.reshape(-1).astype(logits.dtype))
    return raw, float(w.sum()), work.reshape(M, Kc, V)


def lr_at(step: int, cfg: TrainConfig) -> float:
    if step <= 0:
        return 0.0
    if step <= cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    if span <= 0:
        return 0.0
    return cfg.peak_lr * max(0.0, (cfg.total_steps - step) / span)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def decays(name: str, arr: np.ndarray) -> bool:
    """Weight decay applies to matrices and embedding tables, not gains/biases."""
    return arr.ndim >= 2


def adamw_step(params: dict, grads: dict, state: AdamState, lr: float,
               betas=(0.9, 0.999), eps=1e-6, weight_decay=0.01) -> None:
    """In-place decoupled-decay Adam update with bias correction."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise TrainingAborted(f"non-finite gradient in {name} ({bad} entries)")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        shrink = 1.0 - lr * weight_decay if weight_decay and decays(name, p) else 1.0
        K_.adamw_update(p, grads[name], state.m[name], state.v[name], lr, b1, b2, c1, c2, eps, shrink)


def batch_rows(batch: Batch) -> np.ndarray:
    """Flat positions carrying at least one target."""
    return np.flatnonzero((batch.target >= 0).any(axis=-1).reshape(-1))


def loss_and_grads(model: CodecLM, batch: Batch, cfg: TrainConfig):
    """Raw (unnormalized) weighted loss sum, its gradients and the weight sum."""
    rows = batch_rows(batch)
    logits, cache = model.forward(batch, rows)
    Kc = model.config.codec.num_codebooks
    targets = batch.target.reshape(-1, Kc)[rows]
    tags = batch.target_tag.reshape(-1)[rows]
    raw, wsum, dlogits = _weighted_ce_sum(logits, targets, tags, cfg.codebook_weights,
                                          cfg.seg_weights())
    grads = model.backward(dlogits, cache)
    return raw, grads, wsum, int(len(rows))


def make_layout(utt: AlignedUtterance, rng: np.random.Generator, cfg: TrainConfig, speaker_dim: int):
    split = sample_split(utt, rng, SplitPolicy(p_tts=cfg.p_tts))
    segs = slice_utterance(utt, split)
    return training_layout_from_segments(segs, speaker_vector(utt.speaker_id, speaker_dim),
                                         cfg.seg_weights(), natural=cfg.layout == "natural")


def accumulate_step(model: CodecLM, micro_batches: Sequence[Batch], cfg: TrainConfig):
    """Sum raw losses/grads over micro-batches, then normalize once by the total weight."""
    total_raw, total_w, grads, positions = 0.0, 0.0, None, 0
    for mb in micro_batches:
        raw, g, wsum, n = loss_and_grads(model, mb, cfg)
        total_raw += raw
        total_w += wsum
        positions += n
        if grads is None:
            grads = g
        else:
            for k in grads:
                grads[k] += g[k]
    scale = 1.0 / total_w if cfg.normalize_loss and total_w > 0 else 1.0
    for k in grads:
        grads[k] *= grads[k].dtype.type(scale)
    return total_raw * scale, grads, positions


class Trainer:
    """Owns model, optimizer state, data RNG and the metrics log."""

    def __init__(self, corpus: Sequence[AlignedUtterance], model_cfg: ModelConfig,
                 cfg: TrainConfig, out_dir=None, run_meta: dict | None = None):
        if not corpus:
            raise ValueError("training corpus is empty")
        self.corpus = list(corpus)
        self.cfg = cfg
        self.model = CodecLM(model_cfg)
        self.opt = AdamState.zeros_like(self.model.params)
        self.rng = np.random.default_rng([cfg.seed, 1])
        self.step = 0
        self.run_meta = dict(run_meta or {})
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    @property
    def metrics_path(self):
        return self.out_dir / "metrics.jsonl"

    @property
    def checkpoint_path(self):
        return self.out_dir / "checkpoint.bin"

    def sample_batch(self) -> Batch:
        dim = self.model.config.speaker_dim
        picks = self.rng.integers(0, len(self.corpus), size=self.cfg.batch_size)
        lays = [make_layout(self.corpus[int(i)], self.rng, self.cfg, dim) for i in picks]
        return collate(lays, dtype=self.model.config.dtype)

    def train_step(self) -> dict:
        cfg = self.cfg
        micro = [self.sample_batch() for _ in range(cfg.accum_micro_batches)]
        loss, grads, positions = accumulate_step(self.model, micro, cfg)
        if not np.isfinite(loss):
            raise TrainingAborted(f"loss is {loss} at step {self.step + 1}")
        self.step += 1
        lr = lr_at(self.step, cfg)
        adamw_step(self.model.params, grads, self.opt, lr, cfg.betas, cfg.eps, cfg.weight_decay)
        return {"step": self.step, "loss": round(float(loss), 6), "lr": lr, "positions": positions}

    def run(self, until: int | None = None, progress=None) -> list:
        until = self.cfg.total_steps if until is None else min(until, self.cfg.total_steps)
        records = []
        fh = None
        if self.out_dir is not None:
            fresh = not self.metrics_path.exists() or self.metrics_path.stat().st_size == 0
            fh = open(self.metrics_path, "a", encoding="utf-8")
            if fresh:
                fh.write(json.dumps(self.header(), sort_keys=True) + "\n")
        timing = open(self.out_dir / "timing.jsonl", "a", encoding="utf-8") if self.out_dir else None
        t0, tok = time.perf_counter(), 0
        try:
            while self.step < until:
                rec = self.train_step()
                tok += rec["positions"]
                records.append(rec)
                if fh is not None:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
                if self.step % self.cfg.log_every == 0 or self.step == until:
                    dt = time.perf_counter() - t0
                    tps = tok / dt if dt > 0 else 0.0
                    if timing is not None:
                        timing.write(json.dumps({"step": self.step, "tokens_per_sec": round(tps, 1)}) + "\n")
                    log.info("step %d loss %.4f lr %.2e (%.0f pos/s)", self.step, rec["loss"], rec["lr"], tps)
                    if progress:
                        progress(rec)
                    t0, tok = time.perf_counter(), 0
                if (self.out_dir is not None and self.cfg.checkpoint_every
                        and self.step % self.cfg.checkpoint_every == 0):
                    self.save()
        finally:
            if fh is not None:
                fh.close()
            if timing is not None:
                timing.close()
        if self.out_dir is not None:
            self.save()
        return records

    def header(self) -> dict:
        """First metrics record: everything needed to reproduce the run."""
        return {"step": 0, "header": True, "seed": self.cfg.seed, "code_version": __version__,
                "model_config": self.model.config.to_dict(), "train_config": self.cfg.to_dict(),
                "run": self.run_meta}

    def save(self, path=None) -> None:
        sections = {}
        for name, p in self.model.params.items():
            sections[f"param/{name}"] = p
        for name in self.model.params:
            sections[f"adam_m/{name}"] = self.opt.m[name]
            sections[f"adam_v/{name}"] = self.opt.v[name]
        meta = {
            "model_config": self.model.config.to_dict(),
            "train_config": self.cfg.to_dict(),
            "step": self.step,
            "adam_t": self.opt.t,
            "rng_state": self.rng.bit_generator.state,
            "seed": self.cfg.seed,
            "code_version": __version__,
            "run": self.run_meta,
        }
        write_checkpoint(path or self.checkpoint_path, sections, meta)

    @classmethod
    def resume(cls, corpus, path, out_dir=None, cfg: TrainConfig | None = None) -> "Trainer":
        sections, meta = read_checkpoint(path)
        model_cfg = ModelConfig.from_dict(meta["model_config"])
        cfg = cfg or TrainConfig.from_dict(meta["train_config"])
        tr = cls(corpus, model_cfg, cfg, out_dir, meta.get("run"))
        for name in tr.model.params:
            tr.model.params[name] = sections[f"param/{name}"]
            tr.opt.m[name] = sections[f"adam_m/{name}"]
            tr.opt.v[name] = sections[f"adam_v/{name}"]
        tr.opt.t = int(meta["adam_t"])
        tr.step = int(meta["step"])
        tr.rng.bit_generator.state = meta["rng_state"]
        if tr.out_dir is not None and tr.metrics_path.exists():
            _truncate_log(tr.metrics_path, tr.step)
        return tr


def _truncate_log(path: Path, step: int) -> None:
    """Drop records past ``step`` so a resumed run rewrites them identically."""
    keep = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip() and json.loads(line)["step"] <= step:
                keep.append(line)
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.writelines(keep)
    os.replace(tmp, path)


def train(corpus, cfg: TrainConfig, model_cfg: ModelConfig, out_dir=None,
          run_meta: dict | None = None) -> Trainer:
    tr = Trainer(corpus, model_cfg, cfg, out_dir, run_meta)
    tr.run()
    return tr
