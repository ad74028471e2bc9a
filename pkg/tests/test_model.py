import json

import numpy as np
import pytest

from codecweave.alignment import SegmentSplit, slice_utterance
from codecweave.codec_stream import CodecSpec
from codecweave.layout import (AUDIO, SPEAKER, LayoutSequence, build_tts_inference, speaker_vector,
                               training_layout_from_segments)
from codecweave.model import (CodecLM, ModelConfig, ModelError, collate, load_model, param_shapes,
                              read_checkpoint, save_model, write_checkpoint)
from codecweave.toy_codec import encode
from codecweave.trainer import TrainConfig, loss_and_grads

from conftest import FIXTURES, SMALL_LANG, SMALL_SPEC, tiny_model_config
from gradcheck import check_gradients


def _layout(symbols, split, speaker=1):
    u = encode(SMALL_LANG, list(symbols), speaker)
    return training_layout_from_segments(slice_utterance(u, SegmentSplit(*split, len(symbols))),
                                         speaker_vector(speaker, 2))


def training_batch(symbols=(1, 3, 0, 2, 1), split=(1, 3), speaker=1):
    return collate([_layout(symbols, split, speaker)])


def single_audio(ids, spec=SMALL_SPEC, speaker_dim=2):
    K = spec.num_codebooks
    return LayoutSequence(spec, np.array([AUDIO], dtype=np.int8), np.array([-1]),
                          np.asarray(ids, dtype=np.int64).reshape(1, K), np.array([0], dtype=np.int8),
                          np.zeros(speaker_dim))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(dim=30, num_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(positional="alibi")
    cfg = tiny_model_config()
    assert ModelConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_default_shapes():
    cfg = ModelConfig()
    assert (cfg.num_layers, cfg.dim, cfg.num_heads) == (2, 128, 4)
    s = param_shapes(cfg)
    assert s["audio_emb"] == (4, 2051, 128) and s["head_w"] == (128, 4, 2051)
    assert s["spk_w"] == (4, 128)


def test_audio_embedding_sums_codebooks():
    m = CodecLM(tiny_model_config())
    pad = SMALL_SPEC.pad_id
    x = m.embed(collate([single_audio([pad] * 4)]))[0, 0]
    np.testing.assert_allclose(x, m.params["audio_emb"][:, pad].sum(axis=0))
    ids = [3, 17, pad, 40]
    x = m.embed(collate([single_audio(ids)]))[0, 0]
    np.testing.assert_allclose(x, sum(m.embed_single(k, i) for k, i in enumerate(ids)))


def test_single_codebook_embedding_is_lookup():
    spec = CodecSpec(1, 16)
    m = CodecLM(tiny_model_config(codec=spec))
    x = m.embed(collate([single_audio([5], spec)]))[0, 0]
    np.testing.assert_array_equal(x, m.params["audio_emb"][0, 5])


def test_speaker_slot_is_projected():
    m = CodecLM(tiny_model_config())
    lay = build_tts_inference([], [1], None, speaker_vector(1, 2), spec=SMALL_SPEC)
    x = m.embed(collate([lay]))[0]
    i = int(np.flatnonzero(lay.kinds == SPEAKER)[0])
    np.testing.assert_allclose(x[i], m.params["spk_w"][1] + m.params["spk_b"])


def _ln(x, g, b, eps=1e-5):
    mu = x.mean()
    var = ((x - mu) ** 2).mean()
    return (x - mu) / np.sqrt(var + eps) * g + b


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))


def test_single_position_forward_by_hand():
    # with one position attention is the identity on v and rotary is a no-op
    m = CodecLM(tiny_model_config())
    p, D = m.params, 32
    ids = [1, 2, 3, 4]
    x = sum(p["audio_emb"][k, i] for k, i in enumerate(ids))
    for l in range(2):
        q = f"blocks.{l}."
        h = _ln(x, p[q + "ln1_g"], p[q + "ln1_b"])
        v = (h @ p[q + "w_qkv"] + p[q + "b_qkv"])[2 * D:]
        x = x + v @ p[q + "w_o"] + p[q + "b_o"]
        h = _ln(x, p[q + "ln2_g"], p[q + "ln2_b"])
        x = x + _gelu(h @ p[q + "w_ff1"] + p[q + "b_ff1"]) @ p[q + "w_ff2"] + p[q + "b_ff2"]
    h = _ln(x, p["lnf_g"], p["lnf_b"])
    expect = np.einsum("d,dkv->kv", h, p["head_w"]) + p["head_b"]
    logits, _ = m.forward(collate([single_audio(ids)]))
    np.testing.assert_allclose(logits[0], expect, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("positional", ["rope", "sinusoidal", "learned"])
def test_causality(positional):
    m = CodecLM(tiny_model_config(positional=positional))
    b = training_batch()
    base, _ = m.forward(b)
    t = b.shape[1] // 2
    b.kinds[0, t] = AUDIO
    b.audio[0, t] = [5, 6, 7, 8]
    pert, _ = m.forward(b)
    np.testing.assert_array_equal(pert[:t], base[:t])
    assert not np.array_equal(pert[t:], base[t:])


def test_padding_does_not_change_real_positions():
    m = CodecLM(tiny_model_config())
    short = _layout((1, 2), (0, 2))
    long_ = _layout((1, 3, 0, 2, 1, 1, 2), (1, 3))
    alone, _ = m.forward(collate([short]))
    mixed, _ = m.forward(collate([short, long_]))
    n = len(short)
    assert len(long_) > n
    np.testing.assert_allclose(mixed[:n], alone, rtol=1e-12, atol=1e-12)


def test_golden_forward():
    m = CodecLM(tiny_model_config())
    logits, _ = m.forward(training_batch())
    golden = json.loads((FIXTURES / "forward_golden.json").read_text())
    np.testing.assert_allclose(logits.sum(axis=(1, 2)), golden["row_sums"], rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(logits[3, 2, :8], golden["row3_cb2_head"], rtol=1e-9, atol=1e-9)


def test_determinism():
    a = CodecLM(tiny_model_config())
    b = CodecLM(tiny_model_config())
    batch = training_batch()
    np.testing.assert_array_equal(a.forward(batch)[0], b.forward(batch)[0])
    c = CodecLM(tiny_model_config(seed=4))
    assert not np.array_equal(a.params["head_w"], c.params["head_w"])


def test_input_errors():
    m = CodecLM(tiny_model_config(max_len=8))
    with pytest.raises(ModelError):
        m.forward(training_batch())
    m = CodecLM(tiny_model_config())
    with pytest.raises(ModelError):
        m.forward(collate([single_audio([1, 2, 3, 999])]))
    b = training_batch()
    b.text[0, 0] = 7
    with pytest.raises(ModelError):
        m.forward(b)
    with pytest.raises(ModelError):
        CodecLM(tiny_model_config(), params={"x": np.zeros(1)})


@pytest.mark.parametrize("positional", ["rope", "learned"])
def test_gradients_match_finite_differences(positional):
    m = CodecLM(tiny_model_config(positional=positional, init_std=0.3))
    worst, per = check_gradients(m, training_batch(), TrainConfig(), np.random.default_rng(0))
    assert worst < 1e-3, sorted(per.items(), key=lambda kv: -kv[1])[:3]


def test_zero_weight_loss_gives_zero_gradients():
    m = CodecLM(tiny_model_config())
    cfg = TrainConfig(codebook_weights=(0, 0, 0, 0), normalize_loss=False)
    _, grads, _, _ = loss_and_grads(m, training_batch(), cfg)
    assert all(not g.any() for g in grads.values())


def test_unused_embedding_rows_have_zero_gradient():
    m = CodecLM(tiny_model_config())
    b = training_batch()
    _, grads, _, _ = loss_and_grads(m, b, TrainConfig())
    used = set(b.audio[0][b.kinds[0] == AUDIO][:, 0].tolist())
    unused = [i for i in range(SMALL_SPEC.total_ids) if i not in used]
    assert not grads["audio_emb"][0, unused].any()
    assert grads["audio_emb"][0, sorted(used)].any()


def test_checkpoint_roundtrip(tmp_path):
    m = CodecLM(tiny_model_config())
    save_model(tmp_path / "m.bin", m, {"note": 1})
    back, meta = load_model(tmp_path / "m.bin")
    assert back.config == m.config and meta["note"] == 1
    for k in m.params:
        assert back.params[k].dtype == m.params[k].dtype
        np.testing.assert_array_equal(back.params[k], m.params[k])
    raw = (tmp_path / "m.bin").read_bytes()
    save_model(tmp_path / "m2.bin", back, {"note": 1})
    assert (tmp_path / "m2.bin").read_bytes() == raw


def test_checkpoint_errors(tmp_path):
    write_checkpoint(tmp_path / "c.bin", {"a": np.arange(3)}, {})
    raw = bytearray((tmp_path / "c.bin").read_bytes())
    (tmp_path / "bad.bin").write_bytes(b"NOPE" + bytes(raw[4:]))
    with pytest.raises(ModelError):
        read_checkpoint(tmp_path / "bad.bin")
    raw[4] = 9
    (tmp_path / "ver.bin").write_bytes(bytes(raw))
    with pytest.raises(ModelError):
        read_checkpoint(tmp_path / "ver.bin")
