"""Scoring generated grids against the toy language: symbol error rate and speaker match."""
from __future__ import annotations

from collections import Counter
from typing import Sequence

import numpy as np

from .alignment import AlignedUtterance
from .inference import (EditRequest, SamplerConfig, TTSRequest, edit_many, tts_many)
from .model import CodecLM
from .toy_codec import ToyLanguageSpec, decode


def levenshtein(a: Sequence, b: Sequence) -> int:
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def result_record(lang: ToyLanguageSpec, grid, generation=None) -> dict:
    """JSON-ready description of one generated grid."""
    d = decode(lang, grid)
    rec = {"symbols": list(d.symbols), "speaker": d.speaker_id,
           "frame_valid": [bool(v) for v in d.frame_valid]}
    if generation is not None:
        rec["columns"] = generation.columns
        rec["stop_reason"] = generation.stop_reason
    return rec


class Scorer:
    """Corpus-level SER (total edits / total reference symbols) and speaker match."""

    def __init__(self):
        self.edits = 0
        self.ref_len = 0
        self.matches = 0
        self.n = 0
        self.stops = Counter()
        self.records = []

    def add(self, ref: Sequence[int], speaker: int, rec: dict) -> None:
        e = levenshtein(rec["symbols"], ref)
        self.edits += e
        self.ref_len += len(ref)
        self.matches += int(rec["speaker"] == speaker)
        self.n += 1
        if "stop_reason" in rec:
            self.stops[rec["stop_reason"]] += 1
        self.records.append({**rec, "reference": list(ref), "ref_speaker": speaker, "edits": e})

    def report(self, keep_records: bool = False) -> dict:
        out = {
            "n": self.n,
            "ser": self.edits / self.ref_len if self.ref_len else 0.0,
            "speaker_match": self.matches / self.n if self.n else 0.0,
            "stop_reasons": dict(sorted(self.stops.items())),
        }
        if keep_records:
            out["records"] = self.records
        return out


def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield i, seq[i:i + size]


def evaluate_tts(model: CodecLM, lang: ToyLanguageSpec, utts: Sequence[AlignedUtterance],
                 sampler: SamplerConfig, prompts: Sequence[AlignedUtterance] | None = None,
                 variant: str = "middle", batch: int = 32, keep_records: bool = False) -> dict:
    """Synthesize each utterance's text in its speaker's voice and score the decode.

    Without ``prompts`` the speaker slot carries the reference speaker. With
    prompts, ``prompts[i]`` supplies text+audio and should share the speaker.
    """
    sc = Scorer()
    for i0, chunk in _chunks(list(utts), batch):
        reqs = []
        for j, u in enumerate(chunk):
            p = prompts[i0 + j] if prompts is not None else None
            reqs.append(TTSRequest(u.symbols, u.speaker_id, p, variant))
        cfg = SamplerConfig(**{**sampler.to_dict(), "seed": sampler.seed + i0})
        for u, r in zip(chunk, tts_many(model, reqs, cfg)):
            sc.add(u.symbols, u.speaker_id, result_record(lang, r.grid, r.generation))
    return sc.report(keep_records)


OPS = ("substitution", "insertion", "deletion")


def make_edit_requests(lang: ToyLanguageSpec, utts: Sequence[AlignedUtterance],
                       rng: np.random.Generator, ops: Sequence[str] = OPS,
                       max_span: int = 3) -> list:
    """Cycle through edit operations, drawing a span and fresh replacement symbols."""
    out = []
    for i, u in enumerate(utts):
        op = ops[i % len(ops)]
        n = len(u)
        if op == "insertion":
            a = int(rng.integers(0, n + 1))
            b = a
            new = tuple(int(s) for s in rng.integers(0, lang.alphabet_size, int(rng.integers(1, max_span + 1))))
        else:
            a = int(rng.integers(0, n))
            b = int(rng.integers(a + 1, min(n, a + max_span) + 1))
            if op == "deletion":
                new = ()
            else:
                new = tuple(int(s) for s in rng.integers(0, lang.alphabet_size, int(rng.integers(1, max_span + 1))))
        out.append((op, EditRequest(u, a, b, new)))
    return out


def evaluate_edits(model: CodecLM, lang: ToyLanguageSpec, requests: Sequence, sampler: SamplerConfig,
                   natural: bool = False, batch: int = 32, keep_records: bool = False) -> dict:
    """Edited-region SER, per-op SER, and the prefix/suffix preservation check."""
    total, by_op = Scorer(), {}
    preserved = 0
    for i0, chunk in _chunks(list(requests), batch):
        cfg = SamplerConfig(**{**sampler.to_dict(), "seed": sampler.seed + i0})
        results = edit_many(model, [r for _, r in chunk], cfg, natural=natural)
        for (op, req), res in zip(chunk, results):
            rec = result_record(lang, res.middle.grid, res.middle)
            total.add(res.new_text, req.utterance.speaker_id, rec)
            by_op.setdefault(op, Scorer()).add(res.new_text, req.utterance.speaker_id, rec)
            preserved += int(_kept_context(req.utterance, res))
    out = total.report(keep_records)
    out["by_op"] = {op: {k: v for k, v in s.report().items() if k != "stop_reasons"}
                    for op, s in sorted(by_op.items())}
    out["context_preserved"] = preserved / total.n if total.n else 1.0
    return out


def _kept_context(utt: AlignedUtterance, res) -> bool:
    src = utt.grid.tokens
    out = res.grid.tokens
    P, S = res.prefix_frames, res.suffix_frames
    T = src.shape[1]
    ok = np.array_equal(out[:, :P], src[:, :P])
    if S:
        ok = ok and np.array_equal(out[:, out.shape[1] - S:], src[:, T - S:])
    return bool(ok)
