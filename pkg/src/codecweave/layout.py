"""Interleaved text / speaker / mask / delayed-audio sequences.

Training order (reordered)::

    T_P, T_S, T_M, <SPK>, d(A_P), <M>, d(A_S), <M>, d(A_M), <END>

Each audio segment is delayed on its own. Position ``i`` carries a target
when element ``i + 1`` is an audio column (all K ids, pads included) or the
end token (codebook 0 only). Segment weights follow the target's segment.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .alignment import Segments
from .codec_stream import CodebookGrid, CodecSpec, GridError, concat_grids, delay_matrix

TEXT, SPEAKER, MASK, AUDIO, END = 0, 1, 2, 3, 4
KIND_NAMES = {TEXT: "T", SPEAKER: "SPK", MASK: "M", AUDIO: "A", END: "END"}

NONAUDIO, PREFIX, SUFFIX, MIDDLE = 0, 1, 2, 3
TAG_NAMES = {NONAUDIO: "nonaudio", PREFIX: "prefix", SUFFIX: "suffix", MIDDLE: "middle"}

TTS_VARIANTS = ("middle", "prefix", "suffix")


class LayoutConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SegmentWeights:
    prefix: float = 1.0
    suffix: float = 1.0
    middle: float = 3.0

    def lookup(self) -> np.ndarray:
        """Weight table indexed by segment tag."""
        return np.array([0.0, self.prefix, self.suffix, self.middle])


def speaker_vector(speaker_id: int, dim: int) -> np.ndarray:
    if not 0 <= speaker_id < dim:
        raise GridError(f"speaker_id {speaker_id} outside [0, {dim})")
    v = np.zeros(dim)
    v[speaker_id] = 1.0
    return v


@dataclass(eq=False)
class LayoutSequence:
    """Model input: parallel per-position arrays.

    ``prime`` holds undelayed middle-segment frames already present at the tail
    of the sequence (prompt audio in the middle TTS variant); generation
    continues that segment's delay diagonal.
    """

    spec: CodecSpec
    kinds: np.ndarray
    text: np.ndarray
    audio: np.ndarray
    element_tag: np.ndarray
    speaker: np.ndarray
    prime: np.ndarray = None

    def __post_init__(self):
        if self.prime is None:
            self.prime = np.zeros((self.spec.num_codebooks, 0), dtype=np.int64)

    def __len__(self) -> int:
        return len(self.kinds)

    def elements(self) -> list:
        """Tagged-tuple view, e.g. ``("T", 3)``, ``("A", (12, 13, 2048, 2048))``."""
        out = []
        for i, kind in enumerate(self.kinds.tolist()):
            if kind == TEXT:
                out.append(("T", int(self.text[i])))
            elif kind == AUDIO:
                out.append(("A", tuple(int(x) for x in self.audio[i])))
            else:
                out.append((KIND_NAMES[kind],))
        return out


@dataclass(eq=False)
class TrainingLayout(LayoutSequence):
    target: np.ndarray = None
    weight: np.ndarray = None
    target_tag: np.ndarray = None


class _Builder:
    def __init__(self, spec: CodecSpec):
        self.spec = spec
        self.kinds: list[int] = []
        self.text: list[int] = []
        self.audio: list[np.ndarray] = []
        self.tags: list[int] = []
        self._blank = np.full(spec.num_codebooks, -1, dtype=np.int64)

    def _push(self, kind, text=-1, audio=None, tag=NONAUDIO):
        self.kinds.append(kind)
        self.text.append(text)
        self.audio.append(self._blank if audio is None else audio)
        self.tags.append(tag)

    def texts(self, ids: Sequence[int]):
        for t in ids:
            self._push(TEXT, int(t))

    def token(self, kind):
        self._push(kind)

    def columns(self, delayed: np.ndarray, tag: int):
        for j in range(delayed.shape[1]):
            self._push(AUDIO, audio=delayed[:, j].copy(), tag=tag)

    def segment(self, grid: CodebookGrid, tag: int):
        if grid.spec != self.spec:
            raise GridError(f"grid spec {grid.spec} differs from layout spec {self.spec}")
        if grid.num_frames:
            self.columns(delay_matrix(grid.tokens, self.spec.pad_id), tag)

    def finish(self, speaker: np.ndarray, cls=LayoutSequence, **extra):
        K = self.spec.num_codebooks
        audio = np.stack(self.audio) if self.audio else np.zeros((0, K), dtype=np.int64)
        return cls(self.spec, np.asarray(self.kinds, dtype=np.int8),
                   np.asarray(self.text, dtype=np.int64), audio.astype(np.int64),
                   np.asarray(self.tags, dtype=np.int8), np.asarray(speaker, dtype=np.float64),
                   **extra)


def _attach_targets(seq: LayoutSequence, weights: SegmentWeights,
                    only_tags: tuple | None = None) -> TrainingLayout:
    N, K = seq.audio.shape
    target = np.full((N, K), -1, dtype=np.int64)
    tag = np.zeros(N, dtype=np.int8)
    for i in range(N - 1):
        nxt = seq.kinds[i + 1]
        if nxt == AUDIO:
            target[i] = seq.audio[i + 1]
            tag[i] = seq.element_tag[i + 1]
        elif nxt == END:
            target[i, 0] = seq.spec.end_id
            tag[i] = MIDDLE
    if only_tags is not None:
        drop = ~np.isin(tag, only_tags)
        target[drop] = -1
        tag[drop] = NONAUDIO
    weight = weights.lookup()[tag]
    return TrainingLayout(seq.spec, seq.kinds, seq.text, seq.audio, seq.element_tag, seq.speaker,
                          seq.prime, target=target, weight=weight, target_tag=tag)


def build_training_sequence(texts: Sequence[Sequence[int]], grids: Sequence[CodebookGrid],
                            speaker: np.ndarray,
                            weights: SegmentWeights = SegmentWeights()) -> TrainingLayout:
    """Reordered training layout; ``texts``/``grids`` are in prefix, suffix, middle order."""
    (tp, ts, tm), (ap, as_, am) = texts, grids
    b = _Builder(am.spec)
    b.texts(tp)
    b.texts(ts)
    b.texts(tm)
    b.token(SPEAKER)
    b.segment(ap, PREFIX)
    b.token(MASK)
    b.segment(as_, SUFFIX)
    b.token(MASK)
    b.segment(am, MIDDLE)
    b.token(END)
    return _attach_targets(b.finish(speaker), weights)


def build_natural_training_sequence(texts: Sequence[Sequence[int]], grids: Sequence[CodebookGrid],
                                    speaker: np.ndarray,
                                    weights: SegmentWeights = SegmentWeights()) -> TrainingLayout:
    """Ablation baseline: time order kept, middle masked in place, loss on middle only.

    ``T_P, T_M, T_S, <SPK>, d(A_P), <M>, d(A_M), <END>, <M>, d(A_S)``
    """
    (tp, ts, tm), (ap, as_, am) = texts, grids
    b = _Builder(am.spec)
    b.texts(tp)
    b.texts(tm)
    b.texts(ts)
    b.token(SPEAKER)
    b.segment(ap, PREFIX)
    b.token(MASK)
    b.segment(am, MIDDLE)
    b.token(END)
    b.token(MASK)
    b.segment(as_, SUFFIX)
    return _attach_targets(b.finish(speaker), weights, only_tags=(MIDDLE,))


def training_layout_from_segments(segments: Segments, speaker: np.ndarray,
                                  weights: SegmentWeights = SegmentWeights(),
                                  natural: bool = False) -> TrainingLayout:
    build = build_natural_training_sequence if natural else build_training_sequence
    return build(segments.texts, segments.grids, speaker, weights)


def build_edit_inference(text_prefix, text_suffix, text_middle_new, audio_prefix: CodebookGrid,
                         audio_suffix: CodebookGrid, speaker: np.ndarray) -> LayoutSequence:
    b = _Builder(audio_prefix.spec)
    b.texts(text_prefix)
    b.texts(text_suffix)
    b.texts(text_middle_new)
    b.token(SPEAKER)
    b.segment(audio_prefix, PREFIX)
    b.token(MASK)
    b.segment(audio_suffix, SUFFIX)
    b.token(MASK)
    return b.finish(speaker)


def build_natural_edit_inference(text_prefix, text_suffix, text_middle_new,
                                 audio_prefix: CodebookGrid, audio_suffix: CodebookGrid,
                                 speaker: np.ndarray) -> LayoutSequence:
    """Ablation baseline: the middle is generated right after the prefix audio."""
    del audio_suffix  # not visible to a causal model before the middle
    b = _Builder(audio_prefix.spec)
    b.texts(text_prefix)
    b.texts(text_middle_new)
    b.texts(text_suffix)
    b.token(SPEAKER)
    b.segment(audio_prefix, PREFIX)
    b.token(MASK)
    return b.finish(speaker)


def build_tts_inference(text_prompt, text_target, audio_prompt: CodebookGrid | None,
                        speaker: np.ndarray, variant: str = "middle",
                        spec: CodecSpec | None = None) -> LayoutSequence:
    """Zero-shot TTS input for one of the three prompt placements.

    ``middle``: ``T_prompt, T_target, <SPK>, <M>, <M>`` then the prompt frames
    as the head of the middle stream. ``prefix`` / ``suffix``: the prompt text
    and audio fill that segment and the middle holds only the target.
    """
    if variant not in TTS_VARIANTS:
        raise LayoutConfigError(f"unknown TTS variant {variant!r}; expected one of {TTS_VARIANTS}")
    if audio_prompt is None:
        if spec is None:
            raise LayoutConfigError("spec is required when there is no prompt audio")
        audio_prompt = CodebookGrid.empty(spec)
    spec = audio_prompt.spec
    empty = CodebookGrid.empty(spec)
    if variant == "prefix":
        return build_edit_inference(text_prompt, (), text_target, audio_prompt, empty, speaker)
    if variant == "suffix":
        return build_edit_inference((), text_prompt, text_target, empty, audio_prompt, speaker)
    b = _Builder(spec)
    b.texts(text_prompt)
    b.texts(text_target)
    b.token(SPEAKER)
    b.token(MASK)
    b.token(MASK)
    P = audio_prompt.num_frames
    if P:
        # first P delayed columns only involve prompt frames
        b.columns(delay_matrix(audio_prompt.tokens, spec.pad_id)[:, :P], MIDDLE)
    return b.finish(speaker, prime=audio_prompt.tokens.copy())


def splice_edit(audio_prefix: CodebookGrid, audio_middle: CodebookGrid,
                audio_suffix: CodebookGrid) -> CodebookGrid:
    return concat_grids([audio_prefix, audio_middle, audio_suffix])


def expected_edit_length(n_prefix_text, n_suffix_text, n_middle_text, prefix_frames,
                         suffix_frames, K) -> int:
    n = n_prefix_text + n_suffix_text + n_middle_text + 1
    n += (prefix_frames + K - 1) if prefix_frames else 0
    n += 1
    n += (suffix_frames + K - 1) if suffix_frames else 0
    return n + 1


def _fmt_ids(ids, spec: CodecSpec) -> str:
    names = {spec.pad_id: "P", spec.mask_id: "MASK", spec.end_id: "E", -1: "_"}
    return " ".join(names.get(int(x), str(int(x))) for x in ids)


def format_layout(seq: LayoutSequence) -> str:
    """Diffable one-element-per-line rendering used for golden fixtures."""
    lines = [f"# K={seq.spec.num_codebooks} V={seq.spec.vocab_size} "
             f"speaker={_fmt_vec(seq.speaker)} prime_frames={seq.prime.shape[1]}"]
    training = isinstance(seq, TrainingLayout)
    for i, kind in enumerate(seq.kinds.tolist()):
        if kind == TEXT:
            s = f"T {int(seq.text[i])}"
        elif kind == AUDIO:
            s = f"A[{TAG_NAMES[int(seq.element_tag[i])]}] {_fmt_ids(seq.audio[i], seq.spec)}"
        else:
            s = KIND_NAMES[kind]
        if training:
            tag = int(seq.target_tag[i])
            if tag != NONAUDIO:
                s += (f" -> {_fmt_ids(seq.target[i], seq.spec)} "
                      f"w={seq.weight[i]:g} seg={TAG_NAMES[tag]}")
        lines.append(s)
    return "\n".join(lines) + "\n"


def _fmt_vec(v: np.ndarray) -> str:
    return "[" + ",".join(f"{x:g}" for x in np.asarray(v).ravel()) + "]"
