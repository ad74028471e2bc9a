"""Nucleus sampling and delay-aware autoregressive generation for editing and TTS."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .alignment import AlignedUtterance
from .codec_stream import CodebookGrid
from .layout import (AUDIO, MIDDLE, LayoutSequence, build_edit_inference,
                     build_natural_edit_inference, build_tts_inference, speaker_vector,
                     splice_edit)
from .model import CodecLM, collate

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SamplerConfig:
    top_k: int = 20
    top_p: float = 1.0
    temperature: float = 1.0
    seed: int = 0
    max_new_columns: int = 200

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must be in (0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.max_new_columns < 1:
            raise ValueError("max_new_columns must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def truncated_distribution(logits: np.ndarray, cfg: SamplerConfig,
                           allowed: np.ndarray | None = None) -> np.ndarray:
    """The renormalized distribution :func:`sample_token` draws from.

    Temperature, softmax, keep the ``top_k`` most probable ids (ties to the
    lower id), then the shortest prefix of those whose renormalized mass
    reaches ``top_p``.
    """
    z = np.asarray(logits, dtype=np.float64) / cfg.temperature
    if allowed is not None:
        z = np.where(allowed, z, -np.inf)
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    ids = np.arange(len(p))
    order = np.lexsort((ids, -p))
    live = int(np.count_nonzero(p[order] > 0))
    keep = order[: max(1, min(cfg.top_k, live))]
    kept = p[keep] / p[keep].sum()
    if cfg.top_p < 1.0:
        cut = int(np.searchsorted(np.cumsum(kept), cfg.top_p - 1e-12)) + 1
        keep = keep[:cut]
        kept = p[keep] / p[keep].sum()
    out = np.zeros_like(p)
    out[keep] = kept
    return out


def sample_token(logits: np.ndarray, cfg: SamplerConfig, rng: np.random.Generator,
                 allowed: np.ndarray | None = None) -> int:
    probs = truncated_distribution(logits, cfg, allowed)
    if cfg.top_k == 1:
        return int(np.argmax(probs))
    cdf = np.cumsum(probs)
    i = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(i, len(probs) - 1) if probs[min(i, len(probs) - 1)] > 0 else int(np.flatnonzero(probs)[-1])


class Generation(NamedTuple):
    grid: CodebookGrid
    stop_reason: str  # "end" or "max_length"
    columns: int
    truncated: bool


class _Stream:
    """Per-request generation state for one middle segment."""

    def __init__(self, layout: LayoutSequence, rng, max_new: int, max_len: int):
        self.layout = layout
        self.max_len = max_len
        self.spec = layout.spec
        self.prime = layout.prime
        self.P = self.prime.shape[1]
        self.j = self.P
        self.frames_end = None
        self.extra_kinds: list[int] = []
        self.extra_audio: list[np.ndarray] = []
        self.cells: list[np.ndarray] = []
        self.rng = rng
        self.max_new = max_new
        self.reason = None

    def current(self) -> LayoutSequence:
        if not self.extra_kinds:
            return self.layout
        L, n = self.layout, len(self.extra_kinds)
        return LayoutSequence(
            self.spec,
            np.concatenate([L.kinds, np.full(n, AUDIO, dtype=np.int8)]),
            np.concatenate([L.text, np.full(n, -1, dtype=np.int64)]),
            np.concatenate([L.audio, np.stack(self.extra_audio)]),
            np.concatenate([L.element_tag, np.full(n, MIDDLE, dtype=np.int8)]),
            L.speaker, L.prime)

    def step(self, logits: np.ndarray, cfg: SamplerConfig) -> None:
        spec = self.spec
        K, V = spec.num_codebooks, spec.vocab_size
        j = self.j
        codec_only = np.zeros(spec.total_ids, dtype=bool)
        codec_only[:V] = True
        head0 = codec_only.copy()
        head0[spec.pad_id] = head0[spec.end_id] = True
        col = np.full(K, spec.pad_id, dtype=np.int64)
        for k in range(K):
            t = j - k
            if t < 0 or (self.frames_end is not None and t >= self.frames_end):
                continue
            if t < self.P:
                col[k] = self.prime[k, t]
                continue
            allowed = head0 if k == 0 else codec_only
            tok = sample_token(logits[k], cfg, self.rng, allowed)
            if k == 0 and tok in (spec.pad_id, spec.end_id):
                self.frames_end = j
                continue
            col[k] = tok
        self.cells.append(col)
        self.extra_kinds.append(AUDIO)
        self.extra_audio.append(col)
        self.j += 1
        if self.frames_end is not None and self.j >= self.frames_end + K - 1:
            self.reason = "end"
        elif (self.j - self.P >= self.max_new
              or len(self.layout) + len(self.extra_kinds) >= self.max_len):
            self.reason = "max_length"

    @property
    def done(self) -> bool:
        return self.reason is not None

    def result(self) -> Generation:
        K = self.spec.num_codebooks
        n = len(self.cells)
        end = self.frames_end if self.reason == "end" else max(self.P, self.j - K + 1)
        T = end - self.P
        out = np.empty((K, max(T, 0)), dtype=np.int64)
        for k in range(K):
            for t in range(self.P, end):
                out[k, t - self.P] = self.cells[t + k - self.P][k]
        if self.reason == "max_length":
            log.info("generation hit its column budget; truncated to %d frames", T)
        return Generation(CodebookGrid(self.spec, out), self.reason, n, self.reason != "end")


def generate_many(model: CodecLM, layouts: Sequence[LayoutSequence], cfg: SamplerConfig,
                  rngs: Sequence[np.random.Generator] | None = None) -> list[Generation]:
    """Batched generation; item ``i`` draws from ``rngs[i]`` (default seeded by ``(seed, i)``)."""
    if rngs is None:
        rngs = [np.random.default_rng([cfg.seed, i]) for i in range(len(layouts))]
    max_len = model.config.max_len
    for lay in layouts:
        if len(lay) >= max_len:
            raise ValueError(f"layout of {len(lay)} elements leaves no room under max_len={max_len}")
    streams = [_Stream(lay, rng, cfg.max_new_columns, max_len) for lay, rng in zip(layouts, rngs)]
    while True:
        active = [s for s in streams if not s.done]
        if not active:
            break
        batch = collate([s.current() for s in active], dtype=model.config.dtype)
        logits = model.logits_at_last(batch).astype(np.float64)
        for s, lg in zip(active, logits):
            s.step(lg, cfg)
    return [s.result() for s in streams]


def generate(model: CodecLM, layout: LayoutSequence, cfg: SamplerConfig,
             rng: np.random.Generator | None = None) -> Generation:
    rng = np.random.default_rng([cfg.seed, 0]) if rng is None else rng
    return generate_many(model, [layout], cfg, [rng])[0]


class EditRequest(NamedTuple):
    utterance: AlignedUtterance
    start: int  # first replaced unit
    stop: int  # one past the last replaced unit
    new_text: tuple


class EditResult(NamedTuple):
    grid: CodebookGrid
    prefix_frames: int
    suffix_frames: int
    middle: Generation
    start: int
    stop: int
    new_text: tuple


def _widen(req: EditRequest) -> EditRequest:
    """A pure deletion regenerates one neighbouring unit so the middle is never empty."""
    utt, a, b, new = req
    if new:
        return req
    syms = utt.symbols
    if a > 0:
        return EditRequest(utt, a - 1, b, (syms[a - 1],))
    if b < len(syms):
        return EditRequest(utt, a, b + 1, (syms[b],))
    return req


def edit_layout(model: CodecLM, req: EditRequest, natural: bool = False):
    utt, a, b, new = req
    n = len(utt)
    if not 0 <= a <= b <= n:
        raise ValueError(f"edit span [{a}, {b}) outside utterance of {n} units")
    syms = utt.symbols
    grid = utt.grid
    pre_end = utt.units[a - 1].end_frame if a > 0 else 0
    suf_start = utt.units[b].start_frame if b < n else grid.num_frames
    ap, as_ = grid.columns(0, pre_end), grid.columns(suf_start, grid.num_frames)
    spk = speaker_vector(utt.speaker_id, model.config.speaker_dim)
    build = build_natural_edit_inference if natural else build_edit_inference
    lay = build(syms[:a], syms[b:], tuple(new), ap, as_, spk)
    return lay, ap, as_


def edit_many(model: CodecLM, requests: Sequence[EditRequest], cfg: SamplerConfig,
              natural: bool = False, widen_deletions: bool = True) -> list[EditResult]:
    reqs = [_widen(r) if widen_deletions else r for r in requests]
    built = [edit_layout(model, r, natural) for r in reqs]
    gens = generate_many(model, [b[0] for b in built], cfg)
    out = []
    for r, (lay, ap, as_), g in zip(reqs, built, gens):
        out.append(EditResult(splice_edit(ap, g.grid, as_), ap.num_frames, as_.num_frames, g,
                              r.start, r.stop, tuple(r.new_text)))
    return out


def edit(model: CodecLM, utt: AlignedUtterance, span: tuple, new_text: Sequence[int],
         cfg: SamplerConfig, natural: bool = False) -> EditResult:
    return edit_many(model, [EditRequest(utt, span[0], span[1], tuple(new_text))], cfg, natural)[0]


class TTSRequest(NamedTuple):
    target_text: tuple
    speaker_id: int | None = None
    prompt: AlignedUtterance | None = None
    variant: str = "middle"


class TTSResult(NamedTuple):
    grid: CodebookGrid
    speaker_id: int
    generation: Generation


def tts_layout(model: CodecLM, req: TTSRequest, rng: np.random.Generator):
    S = model.config.speaker_dim
    spec = model.config.codec
    if req.prompt is not None:
        speaker = req.prompt.speaker_id if req.speaker_id is None else req.speaker_id
        ptext, paudio = req.prompt.symbols, req.prompt.grid
    else:
        # no prompt: draw a speaker embedding at random
        speaker = int(rng.integers(S)) if req.speaker_id is None else req.speaker_id
        ptext, paudio = (), None
    lay = build_tts_inference(ptext, tuple(req.target_text), paudio, speaker_vector(speaker, S),
                              req.variant, spec=spec)
    return lay, speaker


def tts_many(model: CodecLM, requests: Sequence[TTSRequest], cfg: SamplerConfig) -> list[TTSResult]:
    rngs = [np.random.default_rng([cfg.seed, i]) for i in range(len(requests))]
    built = [tts_layout(model, r, rng) for r, rng in zip(requests, rngs)]
    gens = generate_many(model, [b[0] for b in built], cfg, rngs)
    return [TTSResult(g.grid, spk, g) for (_, spk), g in zip(built, gens)]


def tts(model: CodecLM, target_text: Sequence[int], cfg: SamplerConfig, speaker_id: int | None = None,
        prompt: AlignedUtterance | None = None, variant: str = "middle") -> TTSResult:
    return tts_many(model, [TTSRequest(tuple(target_text), speaker_id, prompt, variant)], cfg)[0]
