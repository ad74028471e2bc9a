"""Small decoder-only transformer over layout sequences, with manual backprop.

Audio positions embed as the sum of K per-codebook lookups, the speaker slot
as a linear projection of the speaker vector, and the final hidden state feeds
K independent output heads over the audio id space (codec ids + specials).
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import kernels as K_
from .codec_stream import CodecSpec
from .layout import AUDIO, END, MASK, SPEAKER, TEXT, LayoutSequence, TrainingLayout

POSITIONAL = ("rope", "sinusoidal", "learned")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    dim: int = 128
    num_heads: int = 4
    text_vocab: int = 16
    codec: CodecSpec = field(default_factory=CodecSpec)
    speaker_dim: int = 4
    max_len: int = 128
    ffn_mult: int = 4
    positional: str = "rope"
    rope_base: float = 10000.0
    ln_eps: float = 1e-5
    init_std: float = 0.02
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.dim % self.num_heads:
            raise ModelError(f"dim {self.dim} not divisible by num_heads {self.num_heads}")
        if (self.dim // self.num_heads) % 2 and self.positional == "rope":
            raise ModelError("rotary embedding needs an even head dimension")
        if self.positional not in POSITIONAL:
            raise ModelError(f"positional must be one of {POSITIONAL}")
        if self.dtype not in ("float32", "float64"):
            raise ModelError("dtype must be float32 or float64")

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads

    @property
    def audio_ids(self) -> int:
        return self.codec.total_ids

    def to_dict(self) -> dict:
        d = asdict(self)
        d["codec"] = self.codec.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["codec"] = CodecSpec.from_dict(d["codec"])
        return cls(**d)


def param_shapes(cfg: ModelConfig) -> dict:
    D, Kc, V = cfg.dim, cfg.codec.num_codebooks, cfg.audio_ids
    F = cfg.ffn_mult * D
    shapes = {
        "text_emb": (cfg.text_vocab, D),
        "audio_emb": (Kc, V, D),
        "mask_emb": (D,),
        "end_emb": (D,),
        "spk_w": (cfg.speaker_dim, D),
        "spk_b": (D,),
    }
    if cfg.positional == "learned":
        shapes["pos_emb"] = (cfg.max_len, D)
    for l in range(cfg.num_layers):
        p = f"blocks.{l}."
        shapes.update({
            p + "ln1_g": (D,), p + "ln1_b": (D,),
            p + "w_qkv": (D, 3 * D), p + "b_qkv": (3 * D,),
            p + "w_o": (D, D), p + "b_o": (D,),
            p + "ln2_g": (D,), p + "ln2_b": (D,),
            p + "w_ff1": (D, F), p + "b_ff1": (F,),
            p + "w_ff2": (F, D), p + "b_ff2": (D,),
        })
    shapes["lnf_g"] = (D,)
    shapes["lnf_b"] = (D,)
    shapes["head_w"] = (D, Kc, V)
    shapes["head_b"] = (Kc, V)
    return shapes


def init_params(cfg: ModelConfig) -> dict:
    rng = np.random.default_rng(cfg.seed)
    dt = np.dtype(cfg.dtype)
    resid_std = cfg.init_std / np.sqrt(2 * cfg.num_layers)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            arr = np.ones(shape)
        elif leaf.startswith("b_") or leaf.endswith("_b"):
            arr = np.zeros(shape)
        elif leaf in ("w_o", "w_ff2"):
            arr = rng.normal(0.0, resid_std, shape)
        else:
            arr = rng.normal(0.0, cfg.init_std, shape)
        params[name] = arr.astype(dt)
    return params


@dataclass
class Batch:
    """Right-padded batch; ``kinds == -1`` marks padding."""

    kinds: np.ndarray
    text: np.ndarray
    audio: np.ndarray
    speaker: np.ndarray
    lengths: np.ndarray
    target: np.ndarray | None = None
    target_tag: np.ndarray | None = None

    @property
    def shape(self):
        return self.kinds.shape


def collate(layouts: Sequence[LayoutSequence], dtype="float64") -> Batch:
    if not layouts:
        raise ModelError("empty batch")
    Kc = layouts[0].spec.num_codebooks
    B, N = len(layouts), max(len(l) for l in layouts)
    kinds = np.full((B, N), -1, dtype=np.int8)
    text = np.full((B, N), -1, dtype=np.int64)
    audio = np.full((B, N, Kc), -1, dtype=np.int64)
    speaker = np.zeros((B, layouts[0].speaker.shape[0]), dtype=dtype)
    lengths = np.array([len(l) for l in layouts])
    training = all(isinstance(l, TrainingLayout) for l in layouts)
    target = np.full((B, N, Kc), -1, dtype=np.int64) if training else None
    tag = np.zeros((B, N), dtype=np.int8) if training else None
    for i, lay in enumerate(layouts):
        n = len(lay)
        kinds[i, :n] = lay.kinds
        text[i, :n] = lay.text
        audio[i, :n] = lay.audio
        speaker[i] = lay.speaker
        if training:
            target[i, :n] = lay.target
            tag[i, :n] = lay.target_tag
    return Batch(kinds, text, audio, speaker, lengths, target, tag)


def _rope_tables(n: int, head_dim: int, base: float, dtype):
    half = head_dim // 2
    inv = base ** (-np.arange(half) / half)
    ang = np.arange(n)[:, None] * inv[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def _rope(x, cos, sin, inverse=False):
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    if inverse:
        sin = -sin
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def _sinusoidal(n: int, dim: int, dtype):
    pos = np.arange(n)[:, None]
    i = np.arange(dim // 2)[None, :]
    ang = pos / 10000.0 ** (2 * i / dim)
    out = np.zeros((n, dim))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)[:, : (dim - dim // 2)]
    return out.astype(dtype)


class CodecLM:
    def __init__(self, config: ModelConfig, params: dict | None = None):
        self.config = config
        self.params = init_params(config) if params is None else params
        expected = param_shapes(config)
        if list(self.params) != list(expected):
            raise ModelError("parameter names/order do not match config")
        for name, shape in expected.items():
            if self.params[name].shape != tuple(shape):
                raise ModelError(f"{name}: shape {self.params[name].shape} != {shape}")

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    # -- embedding ---------------------------------------------------------

    def _check_ids(self, batch: Batch):
        cfg = self.config
        k = batch.kinds
        t = batch.text[k == TEXT]
        if t.size and (t.min() < 0 or t.max() >= cfg.text_vocab):
            raise ModelError("text id out of range")
        a = batch.audio[k == AUDIO]
        if a.size and (a.min() < 0 or a.max() >= cfg.audio_ids):
            raise ModelError("audio id out of range")

    def embed(self, batch: Batch):
        cfg, p = self.config, self.params
        B, N = batch.shape
        if N > cfg.max_len:
            raise ModelError(f"sequence length {N} exceeds max_len {cfg.max_len}")
        self._check_ids(batch)
        x = np.zeros((B, N, cfg.dim), dtype=self.dtype)
        kinds = batch.kinds
        tpos = kinds == TEXT
        x[tpos] = p["text_emb"][batch.text[tpos]]
        apos = kinds == AUDIO
        ids = batch.audio[apos]
        if ids.size:
            acc = p["audio_emb"][0][ids[:, 0]].copy()
            for k in range(1, cfg.codec.num_codebooks):
                acc += p["audio_emb"][k][ids[:, k]]
            x[apos] = acc
        spos = kinds == SPEAKER
        if spos.any():
            proj = batch.speaker.astype(self.dtype) @ p["spk_w"] + p["spk_b"]
            b_idx = np.nonzero(spos)[0]
            x[spos] = proj[b_idx]
        x[kinds == MASK] = p["mask_emb"]
        x[kinds == END] = p["end_emb"]
        if cfg.positional == "learned":
            x += p["pos_emb"][:N]
        elif cfg.positional == "sinusoidal":
            x += _sinusoidal(N, cfg.dim, self.dtype)
        return x

    def embed_single(self, k: int, token_id: int) -> np.ndarray:
        return self.params["audio_emb"][k][token_id]

    # -- forward -----------------------------------------------------------

    def _block_fwd(self, x, l, rope):
        cfg, p = self.config, self.params
        pre = f"blocks.{l}."
        B, N, D = x.shape
        H, hd = cfg.num_heads, cfg.head_dim
        h1, xh1, rs1 = K_.layernorm_fwd(x, p[pre + "ln1_g"], p[pre + "ln1_b"], cfg.ln_eps)
        qkv = (h1 @ p[pre + "w_qkv"] + p[pre + "b_qkv"]).reshape(B, N, 3, H, hd)
        qkv = qkv.transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        if rope is not None:
            q = _rope(q, *rope)
            k = _rope(k, *rope)
        scale = 1.0 / np.sqrt(hd)
        att = np.ascontiguousarray((q @ k.swapaxes(-1, -2)) * self.dtype.type(scale))
        K_.causal_softmax(att)
        o = (att @ v).transpose(0, 2, 1, 3).reshape(B, N, D)
        x = x + (o @ p[pre + "w_o"] + p[pre + "b_o"])
        h2, xh2, rs2 = K_.layernorm_fwd(x, p[pre + "ln2_g"], p[pre + "ln2_b"], cfg.ln_eps)
        a = h2 @ p[pre + "w_ff1"] + p[pre + "b_ff1"]
        f, th = K_.gelu_fwd(a)
        x = x + (f @ p[pre + "w_ff2"] + p[pre + "b_ff2"])
        return x, (xh1, rs1, h1, q, k, v, att, o, xh2, rs2, h2, a, th, f)

    def hidden(self, batch: Batch):
        """Final-layer-normed hidden states ``(B, N, D)`` plus the backward cache."""
        cfg = self.config
        x = self.embed(batch)
        N = x.shape[1]
        rope = _rope_tables(N, cfg.head_dim, cfg.rope_base, self.dtype) if cfg.positional == "rope" else None
        caches = []
        for l in range(cfg.num_layers):
            x, c = self._block_fwd(x, l, rope)
            caches.append(c)
        hf, xhf, rsf = K_.layernorm_fwd(x, self.params["lnf_g"], self.params["lnf_b"], cfg.ln_eps)
        return hf, {"batch": batch, "rope": rope, "blocks": caches, "lnf": (xhf, rsf)}

    def heads(self, h: np.ndarray) -> np.ndarray:
        """``(M, D)`` hidden rows to ``(M, K, V+3)`` logits."""
        cfg, p = self.config, self.params
        Kc, V = cfg.codec.num_codebooks, cfg.audio_ids
        W = p["head_w"].reshape(cfg.dim, Kc * V)
        return (h @ W + p["head_b"].reshape(-1)).reshape(-1, Kc, V)

    def forward(self, batch: Batch, rows: np.ndarray | None = None):
        """Logits at flat positions ``rows`` (default: every position).

        Returns ``(logits, cache)``; ``logits`` is ``(len(rows), K, V+3)``.
        """
        hf, cache = self.hidden(batch)
        B, N, D = hf.shape
        if rows is None:
            rows = np.arange(B * N)
        rows = np.asarray(rows, dtype=np.int64)
        h = hf.reshape(B * N, D)[rows]
        cache["rows"] = rows
        cache["h"] = h
        return self.heads(h), cache

    def logits_at_last(self, batch: Batch) -> np.ndarray:
        B, N = batch.shape
        rows = np.arange(B) * N + (batch.lengths - 1)
        logits, _ = self.forward(batch, rows)
        return logits

    # -- backward ----------------------------------------------------------

    def _block_bwd(self, dx, l, cache, rope, grads):
        cfg, p = self.config, self.params
        pre = f"blocks.{l}."
        xh1, rs1, h1, q, k, v, att, o, xh2, rs2, h2, a, th, f = cache
        B, N, D = dx.shape
        H, hd = cfg.num_heads, cfg.head_dim
        F = a.shape[-1]
        dx2 = dx.reshape(-1, D)
        grads[pre + "w_ff2"] = f.reshape(-1, F).T @ dx2
        grads[pre + "b_ff2"] = dx2.sum(axis=0)
        da = K_.gelu_bwd(dx @ p[pre + "w_ff2"].T, a, th)
        da2 = da.reshape(-1, F)
        grads[pre + "w_ff1"] = h2.reshape(-1, D).T @ da2
        grads[pre + "b_ff1"] = da2.sum(axis=0)
        dln2, grads[pre + "ln2_g"], grads[pre + "ln2_b"] = K_.layernorm_bwd(
            da @ p[pre + "w_ff1"].T, xh2, rs2, p[pre + "ln2_g"])
        dx = dx + dln2
        dx2 = dx.reshape(-1, D)
        grads[pre + "w_o"] = o.reshape(-1, D).T @ dx2
        grads[pre + "b_o"] = dx2.sum(axis=0)
        do = (dx @ p[pre + "w_o"].T).reshape(B, N, H, hd).transpose(0, 2, 1, 3)
        datt = do @ v.swapaxes(-1, -2)
        dv = att.swapaxes(-1, -2) @ do
        ds = K_.softmax_bwd(att, datt) * self.dtype.type(1.0 / np.sqrt(hd))
        dq = ds @ k
        dk = ds.swapaxes(-1, -2) @ q
        if rope is not None:
            dq = _rope(dq, *rope, inverse=True)
            dk = _rope(dk, *rope, inverse=True)
        dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(B, N, 3 * D)
        dqkv2 = dqkv.reshape(-1, 3 * D)
        grads[pre + "w_qkv"] = h1.reshape(-1, D).T @ dqkv2
        grads[pre + "b_qkv"] = dqkv2.sum(axis=0)
        dln1, grads[pre + "ln1_g"], grads[pre + "ln1_b"] = K_.layernorm_bwd(
            dqkv @ p[pre + "w_qkv"].T, xh1, rs1, p[pre + "ln1_g"])
        return dx + dln1

    def backward(self, dlogits: np.ndarray, cache: dict) -> dict:
        """Gradients of ``sum(dlogits * logits)`` for every parameter."""
        cfg, p = self.config, self.params
        Kc, V, D = cfg.codec.num_codebooks, cfg.audio_ids, cfg.dim
        batch: Batch = cache["batch"]
        B, N = batch.shape
        rows, h = cache["rows"], cache["h"]
        grads = {name: None for name in p}
        dl = dlogits.reshape(len(rows), Kc * V).astype(self.dtype, copy=False)
        grads["head_w"] = (h.T @ dl).reshape(D, Kc, V)
        grads["head_b"] = dl.sum(axis=0).reshape(Kc, V)
        dh = np.zeros((B * N, D), dtype=self.dtype)
        dh[rows] = dl @ p["head_w"].reshape(D, Kc * V).T  # rows are unique
        xhf, rsf = cache["lnf"]
        dx, grads["lnf_g"], grads["lnf_b"] = K_.layernorm_bwd(dh.reshape(B, N, D), xhf, rsf, p["lnf_g"])
        for l in reversed(range(cfg.num_layers)):
            dx = self._block_bwd(dx, l, cache["blocks"][l], cache["rope"], grads)
        self._embed_bwd(dx, batch, grads)
        return grads

    def _embed_bwd(self, dx, batch: Batch, grads: dict):
        cfg, p = self.config, self.params
        kinds = batch.kinds
        g = np.zeros_like(p["text_emb"])
        tpos = kinds == TEXT
        K_.scatter_add_rows(g, batch.text[tpos], dx[tpos])
        grads["text_emb"] = g
        g = np.zeros_like(p["audio_emb"])
        apos = kinds == AUDIO
        ids = batch.audio[apos]
        rows = dx[apos]
        for k in range(cfg.codec.num_codebooks):
            K_.scatter_add_rows(g[k], ids[:, k], rows)
        grads["audio_emb"] = g
        spos = kinds == SPEAKER
        b_idx = np.nonzero(spos)[0]
        ds = dx[spos]
        grads["spk_w"] = batch.speaker[b_idx].astype(self.dtype).T @ ds
        grads["spk_b"] = ds.sum(axis=0)
        grads["mask_emb"] = dx[kinds == MASK].sum(axis=0)
        grads["end_emb"] = dx[kinds == END].sum(axis=0)
        if cfg.positional == "learned":
            g = np.zeros_like(p["pos_emb"])
            g[: dx.shape[1]] = dx.sum(axis=0)
            grads["pos_emb"] = g


# Checkpoint container: magic "CWCK", u16 version, u32 header length, UTF-8
# JSON header (sorted keys) listing sections {name, dtype, shape, offset,
# nbytes}, then the concatenated little-endian section bytes.
CKPT_MAGIC = b"CWCK"
CKPT_VERSION = 1
_CKPT_PRE = struct.Struct("<4sHI")


def write_checkpoint(path, sections: dict, meta: dict) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in sections.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "sections": entries}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_PRE.pack(CKPT_MAGIC, CKPT_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def read_checkpoint(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    magic, version, hlen = _CKPT_PRE.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise ModelError(f"not a checkpoint: magic {magic!r}")
    if version != CKPT_VERSION:
        raise ModelError(f"unsupported checkpoint version {version}")
    start = _CKPT_PRE.size
    header = json.loads(data[start:start + hlen].decode("utf-8"))
    base = start + hlen
    sections = {}
    for e in header["sections"]:
        raw = data[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        sections[e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return sections, header["meta"]


def save_model(path, model: CodecLM, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    meta["model_config"] = model.config.to_dict()
    write_checkpoint(path, {f"param/{k}": v for k, v in model.params.items()}, meta)


def load_model(path) -> tuple[CodecLM, dict]:
    sections, meta = read_checkpoint(path)
    cfg = ModelConfig.from_dict(meta["model_config"])
    params = {name: sections[f"param/{name}"] for name in param_shapes(cfg)}
    return CodecLM(cfg, params), meta
