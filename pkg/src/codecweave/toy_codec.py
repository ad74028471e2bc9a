"""Deterministic synthetic codec standing in for a neural audio tokenizer.

Symbol ``s`` spoken by speaker ``p`` occupies ``d`` frames whose codebook-``k``
token is ``(s*K + k + p*A*K) mod V``. The rule is injective whenever
``A * S * K <= V``, so grids can be decoded exactly and model outputs can be
scored by symbol error rate.
"""
from __future__ import annotations

import hashlib
import io
from collections import Counter
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .alignment import AlignedUnit, AlignedUtterance, write_corpus
from .codec_stream import CodebookGrid, CodecSpec


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class ToyLanguageSpec:
    alphabet_size: int = 16
    frames_per_symbol: int = 2
    num_speakers: int = 4
    codec: CodecSpec = field(default_factory=CodecSpec)

    def __post_init__(self):
        if self.frames_per_symbol < 1:
            raise ValueError("frames_per_symbol must be >= 1")
        if self.alphabet_size < 1 or self.num_speakers < 1:
            raise ValueError("alphabet_size and num_speakers must be positive")
        K, V = self.codec.num_codebooks, self.codec.vocab_size
        if self.alphabet_size * self.num_speakers * K > V:
            raise ValueError(
                f"A*S*K = {self.alphabet_size * self.num_speakers * K} exceeds V = {V}; "
                "encoding would not be injective")

    def to_dict(self) -> dict:
        return {"alphabet_size": self.alphabet_size,
                "frames_per_symbol": self.frames_per_symbol,
                "num_speakers": self.num_speakers,
                "codec": self.codec.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "ToyLanguageSpec":
        return cls(int(d["alphabet_size"]), int(d["frames_per_symbol"]), int(d["num_speakers"]),
                   CodecSpec.from_dict(d["codec"]))


def token_for(lang: ToyLanguageSpec, symbol: int, speaker_id: int, k: int) -> int:
    K, V, A = lang.codec.num_codebooks, lang.codec.vocab_size, lang.alphabet_size
    return (symbol * K + k + speaker_id * A * K) % V


def encode(lang: ToyLanguageSpec, symbols: Sequence[int], speaker_id: int) -> AlignedUtterance:
    A, S, d = lang.alphabet_size, lang.num_speakers, lang.frames_per_symbol
    K = lang.codec.num_codebooks
    symbols = [int(s) for s in symbols]
    if any(not 0 <= s < A for s in symbols):
        raise DomainError(f"symbols must lie in [0, {A})")
    if not 0 <= speaker_id < S:
        raise DomainError(f"speaker_id must lie in [0, {S})")
    col = (np.asarray(symbols, dtype=np.int64)[None, :] * K + np.arange(K)[:, None]
           + speaker_id * A * K) % lang.codec.vocab_size
    tokens = np.repeat(col.reshape(K, -1), d, axis=1)
    units = tuple(AlignedUnit(s, i * d, (i + 1) * d) for i, s in enumerate(symbols))
    return AlignedUtterance(units, CodebookGrid(lang.codec, tokens), int(speaker_id))


class Decoded(NamedTuple):
    symbols: tuple
    speaker_id: int  # -1 when no cell decodes
    frame_valid: np.ndarray


def _cell_values(lang: ToyLanguageSpec, tokens: np.ndarray):
    """Per-cell (symbol, speaker, ok) arrays for a raw ``K x T`` id matrix."""
    K, V, A, S = lang.codec.num_codebooks, lang.codec.vocab_size, lang.alphabet_size, lang.num_speakers
    k = np.arange(K)[:, None]
    in_vocab = (tokens >= 0) & (tokens < V)
    u = (tokens - k) % V
    q = u // K
    ok = in_vocab & (u % K == 0) & (q < A * S)
    return q % A, q // A, ok


def decode(lang: ToyLanguageSpec, grid) -> Decoded:
    """Best-effort inversion of :func:`encode`.

    Accepts a :class:`CodebookGrid` or a raw ``K x T`` id matrix (which may hold
    specials). Frames are grouped into ``d``-frame windows; each window's symbol
    is the majority over its valid cells, windows without a valid cell are
    dropped. A frame is valid when all K cells decode to the same pair.
    """
    tokens = grid.tokens if isinstance(grid, CodebookGrid) else np.asarray(grid, dtype=np.int64)
    K = lang.codec.num_codebooks
    tokens = tokens.reshape(K, -1)
    T = tokens.shape[1]
    d = lang.frames_per_symbol
    sym, spk, ok = _cell_values(lang, tokens)
    frame_valid = ok.all(axis=0)
    if T:
        frame_valid &= (sym == sym[0]).all(axis=0) & (spk == spk[0]).all(axis=0)
    symbols = []
    for w in range(0, T, d):
        votes = Counter(sym[:, w:w + d][ok[:, w:w + d]].tolist())
        if votes:
            # most_common breaks ties by first occurrence; make it by lowest id
            best = max(votes.items(), key=lambda kv: (kv[1], -kv[0]))[0]
            symbols.append(int(best))
    spk_votes = Counter(spk[ok].tolist())
    speaker = max(spk_votes.items(), key=lambda kv: (kv[1], -kv[0]))[0] if spk_votes else -1
    return Decoded(tuple(symbols), int(speaker), frame_valid)


def gen_utterances(lang: ToyLanguageSpec, rng: np.random.Generator, size: int,
                   length_range: tuple = (1, 12)) -> list[AlignedUtterance]:
    lo, hi = length_range
    if not 1 <= lo <= hi:
        raise ValueError(f"bad length_range {length_range}")
    out = []
    for _ in range(size):
        n = int(rng.integers(lo, hi + 1))
        symbols = rng.integers(0, lang.alphabet_size, size=n)
        speaker = int(rng.integers(0, lang.num_speakers))
        out.append(encode(lang, symbols.tolist(), speaker))
    return out


def gen_corpus(lang: ToyLanguageSpec, rng: np.random.Generator, size: int,
               length_range: tuple = (1, 12), meta: dict | None = None) -> bytes:
    """Serialize a freshly generated corpus; see :func:`alignment.write_corpus`."""
    utts = gen_utterances(lang, rng, size, length_range)
    buf = io.BytesIO()
    header = {"toy_language": lang.to_dict(), "length_range": list(length_range)}
    header.update(meta or {})
    write_corpus(buf, lang.codec, utts, header)
    return buf.getvalue()


def corpus_digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
