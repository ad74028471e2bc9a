import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from codecweave.alignment import SegmentSplit, slice_utterance
from codecweave.codec_stream import CodebookGrid, CodecSpec, GridError
from codecweave.layout import (AUDIO, END, MASK, MIDDLE, NONAUDIO, PREFIX, SPEAKER, SUFFIX, TEXT,
                               LayoutConfigError, build_edit_inference,
                               build_natural_training_sequence, build_training_sequence,
                               build_tts_inference, expected_edit_length, format_layout,
                               speaker_vector, splice_edit, training_layout_from_segments)
from codecweave.toy_codec import ToyLanguageSpec, encode

from conftest import FIXTURES

# K=2, V=16, alphabet 4, 2 frames per symbol: speaker 1 maps symbol s to ids (2s+8, 2s+9)
FIX_LANG = ToyLanguageSpec(4, 2, 2, CodecSpec(2, 16))
FIX_UTT = encode(FIX_LANG, [3, 1, 2, 0, 1], 1)
SPK = speaker_vector(1, 2)


def golden(name):
    return (FIXTURES / name).read_text()


def fixture_segments():
    return slice_utterance(FIX_UTT, SegmentSplit(2, 3, 5))


def test_training_layout_matches_fixture():
    seg = fixture_segments()
    lay = build_training_sequence(seg.texts, seg.grids, SPK)
    assert format_layout(lay) == golden("training_5unit.txt")


def test_natural_layout_matches_fixture():
    seg = fixture_segments()
    lay = build_natural_training_sequence(seg.texts, seg.grids, SPK)
    assert format_layout(lay) == golden("natural_5unit.txt")


def test_edit_layout_matches_fixture():
    p, s, _ = fixture_segments().grids
    lay = build_edit_inference([3, 1], [0, 1], [3, 3], p, s, SPK)
    assert format_layout(lay) == golden("edit_5unit.txt")


@pytest.mark.parametrize("variant", ["middle", "prefix", "suffix"])
def test_tts_layouts_match_fixtures(variant):
    prompt = FIX_UTT.grid.columns(0, 4)
    lay = build_tts_inference([3, 1], [2, 0], prompt, SPK, variant)
    assert format_layout(lay) == golden(f"tts_{variant}.txt")


def test_tts_without_prompt_matches_fixture():
    lay = build_tts_inference([], [2, 0], None, SPK, spec=FIX_LANG.codec)
    assert format_layout(lay) == golden("tts_no_prompt.txt")
    assert not (lay.kinds == AUDIO).any()


def test_prefix_variant_puts_prompt_before_first_mask():
    lay = build_tts_inference([3, 1], [2, 0], FIX_UTT.grid.columns(0, 4), SPK, "prefix")
    first_mask = int(np.flatnonzero(lay.kinds == MASK)[0])
    audio = np.flatnonzero(lay.kinds == AUDIO)
    assert audio.size and audio.max() < first_mask


def test_unknown_variant():
    with pytest.raises(LayoutConfigError):
        build_tts_inference([1], [2], None, SPK, "sideways", spec=FIX_LANG.codec)
    with pytest.raises(LayoutConfigError):
        build_tts_inference([1], [2], None, SPK)


def test_empty_prefix_and_suffix_collapse():
    u = encode(FIX_LANG, [2, 3], 0)
    seg = slice_utterance(u, SegmentSplit(0, 2, 2))
    lay = build_training_sequence(seg.texts, seg.grids, speaker_vector(0, 2))
    kinds = lay.kinds.tolist()
    # T_M, SPK, M, M, d(A_M) (4 frames + 1), END
    assert kinds == [TEXT, TEXT, SPEAKER, MASK, MASK] + [AUDIO] * 5 + [END]


def test_segment_weights_on_audio_targets():
    spec = CodecSpec(1, 16)
    ap = CodebookGrid(spec, [[1, 2]])
    am = CodebookGrid(spec, [[3, 4, 5]])
    lay = build_training_sequence(((9,), (), (7,)), (ap, CodebookGrid.empty(spec), am),
                                  speaker_vector(0, 1))
    nxt_audio = np.append(lay.kinds[1:] == AUDIO, False)
    assert lay.weight[nxt_audio].tolist() == [1, 1, 3, 3, 3]
    end_pos = int(np.flatnonzero(lay.kinds == END)[0]) - 1
    assert lay.target[end_pos].tolist() == [spec.end_id] and lay.weight[end_pos] == 3


def random_segments(rng, lang=ToyLanguageSpec()):
    n = int(rng.integers(1, 10))
    u = encode(lang, rng.integers(0, lang.alphabet_size, n).tolist(), int(rng.integers(lang.num_speakers)))
    a = int(rng.integers(0, n))
    b = int(rng.integers(a + 1, n + 1))
    return u, slice_utterance(u, SegmentSplit(a, b, n))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10**6), natural=st.booleans())
def test_training_layout_invariants(seed, natural):
    rng = np.random.default_rng(seed)
    u, seg = random_segments(rng)
    lay = training_layout_from_segments(seg, speaker_vector(u.speaker_id, 4), natural=natural)
    kinds = lay.kinds
    spk = int(np.flatnonzero(kinds == SPEAKER)[0])
    # text, then speaker, then audio/masks
    assert (kinds[:spk] == TEXT).all() and not (kinds[spk + 1:] == TEXT).any()
    assert (kinds == MASK).sum() == 2 and (kinds == END).sum() == 1
    # no target at nonaudio tags, weight zero there
    none = lay.target_tag == NONAUDIO
    assert (lay.target[none] == -1).all() and (lay.weight[none] == 0).all()
    # every audio column (of a scored segment) is the target of its predecessor
    scored = (MIDDLE,) if natural else (PREFIX, SUFFIX, MIDDLE)
    for i in np.flatnonzero(kinds == AUDIO):
        if lay.element_tag[i] in scored:
            assert lay.target[i - 1].tolist() == lay.audio[i].tolist()
            assert lay.target_tag[i - 1] == lay.element_tag[i]
    # audio segments appear in prefix, suffix, middle order
    tags = [t for t in lay.element_tag[kinds == AUDIO].tolist()]
    order = [PREFIX, MIDDLE, SUFFIX] if natural else [PREFIX, SUFFIX, MIDDLE]
    assert tags == sorted(tags, key=order.index)


@settings(max_examples=100, deadline=None)
@given(p=st.lists(st.integers(0, 15), max_size=5), s=st.lists(st.integers(0, 15), max_size=5),
       m=st.lists(st.integers(0, 15), min_size=1, max_size=5))
def test_edit_element_count(p, s, m):
    lang = ToyLanguageSpec()
    K = lang.codec.num_codebooks
    ap, as_ = encode(lang, p, 0).grid, encode(lang, s, 0).grid
    lay = build_edit_inference(p, s, m, ap, as_, speaker_vector(0, 4))
    TP, TS = ap.num_frames, as_.num_frames
    count = len(p) + len(s) + len(m) + 1 + (TP + K - 1 if TP else 0) + 1 + (TS + K - 1 if TS else 0) + 1
    assert len(lay) == count == expected_edit_length(len(p), len(s), len(m), TP, TS, K)
    assert lay.kinds[-1] == MASK


def test_edit_with_empty_context_is_tts_shaped():
    e = CodebookGrid.empty(FIX_LANG.codec)
    a = build_edit_inference([], [], [2, 0], e, e, SPK)
    b = build_tts_inference([], [2, 0], None, SPK, spec=FIX_LANG.codec)
    assert format_layout(a) == format_layout(b)


def test_splice():
    spec = FIX_LANG.codec
    e = CodebookGrid.empty(spec)
    m = FIX_UTT.grid.columns(2, 5)
    assert splice_edit(e, m, e) == m
    p, s = FIX_UTT.grid.columns(0, 2), FIX_UTT.grid.columns(5, 10)
    out = splice_edit(p, m, s)
    assert out.num_frames == p.num_frames + m.num_frames + s.num_frames
    assert out == FIX_UTT.grid
    assert out.columns(0, 2) == p and out.columns(2, 5) == m and out.columns(5, 10) == s
    with pytest.raises(GridError):
        splice_edit(p, CodebookGrid(CodecSpec(2, 32), [[1], [2]]), s)


def test_speaker_vector():
    assert speaker_vector(2, 4).tolist() == [0, 0, 1, 0]
    with pytest.raises(GridError):
        speaker_vector(4, 4)


def test_elements_view():
    seg = fixture_segments()
    lay = build_training_sequence(seg.texts, seg.grids, SPK)
    el = lay.elements()
    assert el[0] == ("T", 3) and el[5] == ("SPK",) and el[6] == ("A", (14, 16))
    assert el[-1] == ("END",)
