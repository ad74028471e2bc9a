import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from codecweave.alignment import read_corpus
from codecweave.codec_stream import CodebookGrid, CodecSpec
from codecweave.toy_codec import (DomainError, ToyLanguageSpec, corpus_digest, decode, encode,
                                  gen_corpus, gen_utterances, token_for)

LANG = ToyLanguageSpec()


def test_single_symbol_column_pattern():
    lang = ToyLanguageSpec(alphabet_size=8, frames_per_symbol=2, num_speakers=1)
    u = encode(lang, [3], 0)
    assert u.grid.tokens.T.tolist() == [[12, 13, 14, 15], [12, 13, 14, 15]]
    assert u.units == ((3, 0, 2),)


def test_speaker_offset():
    assert token_for(LANG, 0, 2, 1) == 0 * 4 + 1 + 2 * 16 * 4


def test_empty_symbols_give_empty_grid():
    u = encode(LANG, [], 2)
    assert u.grid.num_frames == 0 and len(u) == 0


def test_domain_errors():
    with pytest.raises(DomainError):
        encode(LANG, [16], 0)
    with pytest.raises(DomainError):
        encode(LANG, [1], 4)
    with pytest.raises(ValueError):
        ToyLanguageSpec(alphabet_size=600, num_speakers=1)  # 600*4 > 2048


@settings(max_examples=200, deadline=None)
@given(symbols=st.lists(st.integers(0, 15), max_size=20), speaker=st.integers(0, 3),
       d=st.integers(1, 3))
def test_decode_inverts_encode(symbols, speaker, d):
    lang = ToyLanguageSpec(frames_per_symbol=d)
    u = encode(lang, symbols, speaker)
    out = decode(lang, u.grid)
    assert out.symbols == tuple(symbols)
    assert out.speaker_id == (speaker if symbols else -1)
    assert out.frame_valid.all()


def test_majority_survives_one_corrupted_cell():
    u = encode(LANG, [5, 9, 2], 1)
    tok = u.grid.tokens.copy()
    tok[2, 3] = token_for(LANG, 7, 3, 2)
    out = decode(LANG, CodebookGrid(LANG.codec, tok))
    assert out.symbols == (5, 9, 2) and out.speaker_id == 1
    assert out.frame_valid.tolist() == [True, True, True, False, True, True]


def test_all_pad_grid_decodes_to_nothing():
    pad = np.full((4, 6), LANG.codec.pad_id)
    out = decode(LANG, pad)
    assert out.symbols == () and out.speaker_id == -1
    assert not out.frame_valid.any()


def test_misaligned_token_is_invalid():
    # an id whose codebook offset is wrong for its row is not a valid cell
    tok = encode(LANG, [1], 0).grid.tokens.copy()
    tok[0, :] = tok[1, 0]
    out = decode(LANG, tok)
    assert out.symbols == (1,)
    assert not out.frame_valid.any()


def test_corpus_is_reproducible():
    a = gen_corpus(LANG, np.random.default_rng(5), 40)
    b = gen_corpus(LANG, np.random.default_rng(5), 40)
    c = gen_corpus(LANG, np.random.default_rng(6), 40)
    assert a == b
    assert corpus_digest(a) != corpus_digest(c)


def test_empty_corpus_is_header_only():
    raw = gen_corpus(LANG, np.random.default_rng(0), 0)
    spec, utts, meta = read_corpus(io.BytesIO(raw))
    assert utts == [] and spec == LANG.codec
    assert meta["toy_language"] == LANG.to_dict()


def test_gen_utterances_respects_ranges():
    utts = gen_utterances(LANG, np.random.default_rng(2), 300, (2, 5))
    assert all(2 <= len(u) <= 5 for u in utts)
    assert {u.speaker_id for u in utts} == {0, 1, 2, 3}
    with pytest.raises(ValueError):
        gen_utterances(LANG, np.random.default_rng(2), 1, (0, 3))


def test_language_spec_roundtrip():
    lang = ToyLanguageSpec(8, 3, 2, CodecSpec(2, 64))
    assert ToyLanguageSpec.from_dict(lang.to_dict()) == lang
