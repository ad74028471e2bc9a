"""Time-aligned transcripts and the prefix/middle/suffix training split."""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, NamedTuple, Sequence

import numpy as np

from .codec_stream import CodebookGrid, CodecSpec, GridError, concat_grids

CORPUS_MAGIC = b"CWDS"
CORPUS_VERSION = 1

PREFIX, SUFFIX, MIDDLE = "prefix", "suffix", "middle"


class AlignedUnit(NamedTuple):
    symbol: int
    start_frame: int
    end_frame: int


@dataclass(frozen=True, eq=False)
class AlignedUtterance:
    units: tuple
    grid: CodebookGrid
    speaker_id: int

    def __post_init__(self):
        units = tuple(AlignedUnit(*map(int, u)) for u in self.units)
        object.__setattr__(self, "units", units)
        cursor = 0
        for u in units:
            if u.start_frame >= u.end_frame:
                raise GridError(f"empty or inverted span {u}")
            if u.start_frame != cursor:
                raise GridError(f"unit spans must tile the grid; gap or overlap at {u}")
            cursor = u.end_frame
        if cursor != self.grid.num_frames:
            raise GridError(f"units end at frame {cursor} but grid has {self.grid.num_frames}")

    @property
    def symbols(self) -> tuple:
        return tuple(u.symbol for u in self.units)

    def __len__(self) -> int:
        return len(self.units)

    def __eq__(self, other) -> bool:
        if not isinstance(other, AlignedUtterance):
            return NotImplemented
        return (self.units == other.units and self.grid == other.grid
                and self.speaker_id == other.speaker_id)


@dataclass(frozen=True)
class SegmentSplit:
    """Cut points ``0 <= a < b <= n``: prefix ``[0,a)``, middle ``[a,b)``, suffix ``[b,n)``."""

    start: int
    stop: int
    num_units: int

    def __post_init__(self):
        if not 0 <= self.start < self.stop <= self.num_units:
            raise GridError(f"invalid split [{self.start}, {self.stop}) over {self.num_units} units")

    @property
    def prefix(self) -> range:
        return range(0, self.start)

    @property
    def middle(self) -> range:
        return range(self.start, self.stop)

    @property
    def suffix(self) -> range:
        return range(self.stop, self.num_units)

    @property
    def is_tts(self) -> bool:
        return self.start == 0 and self.stop == self.num_units


@dataclass(frozen=True)
class SplitPolicy:
    """Training split distribution.

    With probability ``p_tts`` the whole utterance is the middle. Otherwise a
    pair of cut points is drawn uniformly from the pairs that leave at least one
    of prefix/suffix non-empty.
    """

    p_tts: float = 0.3
    min_middle: int = 1

    def __post_init__(self):
        if not 0.0 <= self.p_tts <= 1.0:
            raise ValueError("p_tts must be in [0, 1]")
        if self.min_middle < 1:
            raise ValueError("min_middle must be >= 1")


def sample_split(utt: AlignedUtterance | int, rng: np.random.Generator,
                 policy: SplitPolicy = SplitPolicy()) -> SegmentSplit:
    n = utt if isinstance(utt, int) else len(utt)
    if n < 1:
        raise GridError("cannot split an utterance with no units")
    m = min(policy.min_middle, n)
    # pairs (a, b) with b - a >= m, excluding the whole-utterance pair
    pairs = [(a, b) for a in range(n) for b in range(a + m, n + 1) if (a, b) != (0, n)]
    if not pairs or rng.random() < policy.p_tts:
        return SegmentSplit(0, n, n)
    a, b = pairs[int(rng.integers(len(pairs)))]
    return SegmentSplit(a, b, n)


class Segments(NamedTuple):
    texts: tuple  # (prefix, suffix, middle) id tuples
    grids: tuple  # (prefix, suffix, middle) CodebookGrid


def _span_grid(utt: AlignedUtterance, idx: range) -> CodebookGrid:
    if len(idx) == 0:
        return CodebookGrid.empty(utt.grid.spec)
    return utt.grid.columns(utt.units[idx.start].start_frame, utt.units[idx.stop - 1].end_frame)


def slice_utterance(utt: AlignedUtterance, split: SegmentSplit) -> Segments:
    """Cut text and audio by the split; returned in prefix, suffix, middle order."""
    if split.num_units != len(utt):
        raise GridError(f"split covers {split.num_units} units, utterance has {len(utt)}")
    parts = (split.prefix, split.suffix, split.middle)
    texts = tuple(tuple(utt.units[i].symbol for i in r) for r in parts)
    grids = tuple(_span_grid(utt, r) for r in parts)
    return Segments(texts, grids)


def natural_order(segments: Segments) -> CodebookGrid:
    """Reassemble prefix, middle, suffix grids into the original time order."""
    p, s, m = segments.grids
    return concat_grids([p, m, s])


# Corpus container: magic "CWDS", u16 version, u32 header length, UTF-8 JSON
# header (sorted keys), u32 record count, then per record little-endian u32
# speaker_id, u32 n_units, n_units x (symbol, start, end) u32, u32 T and K*T
# int32 tokens row-major.
_PREAMBLE = struct.Struct("<4sHI")
_U32 = struct.Struct("<I")


def write_corpus(fh: BinaryIO, spec: CodecSpec, utterances: Sequence[AlignedUtterance],
                 meta: dict | None = None) -> None:
    header = {"codec": spec.to_dict(), "meta": meta or {}}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    fh.write(_PREAMBLE.pack(CORPUS_MAGIC, CORPUS_VERSION, len(blob)))
    fh.write(blob)
    fh.write(_U32.pack(len(utterances)))
    for utt in utterances:
        if utt.grid.spec != spec:
            raise GridError("utterance spec differs from corpus spec")
        units = np.asarray(utt.units, dtype="<u4").reshape(-1, 3)
        fh.write(struct.pack("<II", utt.speaker_id, len(utt.units)))
        fh.write(units.tobytes())
        fh.write(_U32.pack(utt.grid.num_frames))
        fh.write(utt.grid.tokens.astype("<i4").tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise GridError("truncated corpus file")
    return data


def read_corpus(fh: BinaryIO) -> tuple[CodecSpec, list[AlignedUtterance], dict]:
    magic, version, hlen = _PREAMBLE.unpack(_read_exact(fh, _PREAMBLE.size))
    if magic != CORPUS_MAGIC:
        raise GridError(f"bad corpus magic {magic!r}")
    if version != CORPUS_VERSION:
        raise GridError(f"unsupported corpus version {version}")
    header = json.loads(_read_exact(fh, hlen).decode("utf-8"))
    spec = CodecSpec.from_dict(header["codec"])
    K = spec.num_codebooks
    (count,) = _U32.unpack(_read_exact(fh, 4))
    out = []
    for _ in range(count):
        speaker, n_units = struct.unpack("<II", _read_exact(fh, 8))
        units = np.frombuffer(_read_exact(fh, 12 * n_units), dtype="<u4").reshape(n_units, 3)
        (T,) = _U32.unpack(_read_exact(fh, 4))
        tok = np.frombuffer(_read_exact(fh, 4 * K * T), dtype="<i4").reshape(K, T)
        out.append(AlignedUtterance(tuple(map(tuple, units.tolist())),
                                    CodebookGrid(spec, tok.astype(np.int64)), int(speaker)))
    return spec, out, header.get("meta", {})


def load_corpus(path) -> tuple[CodecSpec, list[AlignedUtterance], dict]:
    with open(path, "rb") as fh:
        return read_corpus(fh)


def save_corpus(path, spec: CodecSpec, utterances: Iterable[AlignedUtterance],
                meta: dict | None = None) -> str:
    """Write a corpus file and return the SHA-256 of its bytes."""
    buf = io.BytesIO()
    write_corpus(buf, spec, list(utterances), meta)
    data = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()
