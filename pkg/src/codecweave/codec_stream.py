"""K-codebook token grids and the one-step-per-codebook delay pattern.

A :class:`CodebookGrid` is the undelayed ``K x T`` matrix produced by a
residual vector quantizer. :func:`apply_delay` shifts codebook ``k`` right by
``k`` frames so that, reading the delayed matrix column by column, the cell
for ``(t, k)`` comes after the cells for ``(t, 0..k-1)``.

Special ids are appended after the codec vocabulary: ``pad = V``,
``mask = V + 1``, ``end = V + 2``.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

GRID_MAGIC = b"CWGR"
GRID_VERSION = 1


class GridError(ValueError):
    """Structural problem with a grid (ragged rows, bad ids, spec mismatch)."""


class MalformedDelayError(GridError):
    """A delayed grid whose pad cells are not where the pattern puts them."""


@dataclass(frozen=True)
class CodecSpec:
    num_codebooks: int = 4
    vocab_size: int = 2048
    frame_rate_hz: int = 50

    def __post_init__(self):
        if self.num_codebooks < 1:
            raise ValueError("num_codebooks must be >= 1")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.frame_rate_hz < 1:
            raise ValueError("frame_rate_hz must be >= 1")

    @property
    def pad_id(self) -> int:
        return self.vocab_size

    @property
    def mask_id(self) -> int:
        return self.vocab_size + 1

    @property
    def end_id(self) -> int:
        return self.vocab_size + 2

    @property
    def total_ids(self) -> int:
        """Size of the audio id space including the three specials."""
        return self.vocab_size + 3

    def to_dict(self) -> dict:
        return {
            "num_codebooks": self.num_codebooks,
            "vocab_size": self.vocab_size,
            "frame_rate_hz": self.frame_rate_hz,
            "pad_id": self.pad_id,
            "mask_id": self.mask_id,
            "end_id": self.end_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CodecSpec":
        spec = cls(int(d["num_codebooks"]), int(d["vocab_size"]), int(d["frame_rate_hz"]))
        for key in ("pad_id", "mask_id", "end_id"):
            if key in d and int(d[key]) != getattr(spec, key):
                raise GridError(f"{key}={d[key]} does not match the V+offset allocation")
        return spec


def _as_matrix(tokens, num_rows: int) -> np.ndarray:
    if isinstance(tokens, np.ndarray):
        arr = tokens
    else:
        rows = list(tokens)
        lengths = {len(r) for r in rows}
        if len(lengths) > 1:
            raise GridError(f"ragged rows: lengths {sorted(lengths)}")
        arr = np.asarray(rows)
        if arr.size == 0:
            arr = arr.reshape(len(rows), 0)
    if arr.ndim != 2:
        raise GridError(f"expected a 2-D token matrix, got shape {arr.shape}")
    if arr.shape[0] != num_rows:
        raise GridError(f"expected {num_rows} rows, got {arr.shape[0]}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        raise GridError("token matrix must be integer")
    return np.ascontiguousarray(arr, dtype=np.int64)


@dataclass(frozen=True, eq=False)
class CodebookGrid:
    """Undelayed ``K x T`` codec tokens, every entry in ``[0, V)``."""

    spec: CodecSpec
    tokens: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = _as_matrix(self.tokens, self.spec.num_codebooks)
        if arr.size and (arr.min() < 0 or arr.max() >= self.spec.vocab_size):
            raise GridError("grid contains ids outside the codec vocabulary")
        arr.setflags(write=False)
        object.__setattr__(self, "tokens", arr)

    @classmethod
    def empty(cls, spec: CodecSpec) -> "CodebookGrid":
        return cls(spec, np.zeros((spec.num_codebooks, 0), dtype=np.int64))

    @property
    def num_frames(self) -> int:
        return self.tokens.shape[1]

    def __len__(self) -> int:
        return self.num_frames

    def __eq__(self, other) -> bool:
        if not isinstance(other, CodebookGrid):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.tokens, other.tokens)

    def __repr__(self) -> str:
        return f"CodebookGrid(K={self.spec.num_codebooks}, T={self.num_frames})"

    def columns(self, start: int, stop: int) -> "CodebookGrid":
        if not 0 <= start <= stop <= self.num_frames:
            raise GridError(f"column range [{start}, {stop}) outside grid of width {self.num_frames}")
        return CodebookGrid(self.spec, self.tokens[:, start:stop])


@dataclass(frozen=True, eq=False)
class DelayedGrid:
    """``K x (T + K - 1)`` matrix; row ``k`` is the source row shifted by ``k``."""

    spec: CodecSpec
    tokens: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = _as_matrix(self.tokens, self.spec.num_codebooks)
        arr.setflags(write=False)
        object.__setattr__(self, "tokens", arr)

    @property
    def num_frames(self) -> int:
        return self.tokens.shape[1] - (self.spec.num_codebooks - 1)

    @property
    def width(self) -> int:
        return self.tokens.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, DelayedGrid):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.tokens, other.tokens)


def delay_matrix(tokens: np.ndarray, pad_id: int) -> np.ndarray:
    """Array-level delay: ``out[k, t + k] = tokens[k, t]``, pads elsewhere."""
    K, T = tokens.shape
    out = np.full((K, T + K - 1), pad_id, dtype=np.int64)
    for k in range(K):
        out[k, k:k + T] = tokens[k]
    return out


def apply_delay(grid: CodebookGrid) -> DelayedGrid:
    return DelayedGrid(grid.spec, delay_matrix(grid.tokens, grid.spec.pad_id))


def delay_mask(num_codebooks: int, num_frames: int) -> np.ndarray:
    """Boolean ``K x (T+K-1)`` array, True on data cells of a delayed grid."""
    K, T = num_codebooks, num_frames
    cols = np.arange(T + K - 1)[None, :]
    rows = np.arange(K)[:, None]
    return (cols >= rows) & (cols < rows + T)


def remove_delay(delayed: DelayedGrid) -> CodebookGrid:
    spec = delayed.spec
    K = spec.num_codebooks
    width = delayed.width
    T = width - (K - 1)
    if T < 0:
        raise MalformedDelayError(f"delayed width {width} is shorter than K-1={K - 1}")
    data = delay_mask(K, T)
    tok = delayed.tokens
    if np.any(tok[~data] != spec.pad_id):
        raise MalformedDelayError("non-pad id in a pad cell of the delay pattern")
    if np.any(tok[data] == spec.pad_id):
        raise MalformedDelayError("pad id found in a data cell")
    out = np.empty((K, T), dtype=np.int64)
    for k in range(K):
        out[k] = tok[k, k:k + T]
    return CodebookGrid(spec, out)


def concat_grids(grids) -> CodebookGrid:
    grids = list(grids)
    if not grids:
        raise GridError("nothing to concatenate")
    spec = grids[0].spec
    for g in grids[1:]:
        if g.spec != spec:
            raise GridError(f"spec mismatch: {g.spec} vs {spec}")
    return CodebookGrid(spec, np.concatenate([g.tokens for g in grids], axis=1))


# Grid container: magic "CWGR", u16 version, then little-endian u32 fields
# num_codebooks, vocab_size, frame_rate_hz, pad_id, mask_id, end_id, T,
# followed by K*T little-endian int32 tokens in row-major order.
_GRID_HEADER = struct.Struct("<4sH7I")


def write_grid(grid: CodebookGrid, fh: BinaryIO) -> None:
    s = grid.spec
    fh.write(_GRID_HEADER.pack(GRID_MAGIC, GRID_VERSION, s.num_codebooks, s.vocab_size,
                               s.frame_rate_hz, s.pad_id, s.mask_id, s.end_id, grid.num_frames))
    fh.write(grid.tokens.astype("<i4").tobytes(order="C"))


def read_grid(fh: BinaryIO) -> CodebookGrid:
    raw = fh.read(_GRID_HEADER.size)
    if len(raw) != _GRID_HEADER.size:
        raise GridError("truncated grid header")
    magic, version, K, V, fr, pad, mask, end, T = _GRID_HEADER.unpack(raw)
    if magic != GRID_MAGIC:
        raise GridError(f"bad magic {magic!r}")
    if version != GRID_VERSION:
        raise GridError(f"unsupported grid version {version}")
    spec = CodecSpec.from_dict(dict(num_codebooks=K, vocab_size=V, frame_rate_hz=fr,
                                    pad_id=pad, mask_id=mask, end_id=end))
    body = fh.read(4 * K * T)
    if len(body) != 4 * K * T:
        raise GridError("truncated grid body")
    return CodebookGrid(spec, np.frombuffer(body, dtype="<i4").reshape(K, T).astype(np.int64))


def grid_to_bytes(grid: CodebookGrid) -> bytes:
    buf = io.BytesIO()
    write_grid(grid, buf)
    return buf.getvalue()


def grid_from_bytes(data: bytes) -> CodebookGrid:
    return read_grid(io.BytesIO(data))
