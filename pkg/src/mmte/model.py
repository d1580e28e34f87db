"""Transformer encoder-decoder for translation, encoder extraction, greedy
decoding, and the externally-encoded target-language-token variant.

Layout is pre-norm with sinusoidal positions; the embedding matrix is shared
between encoder input, decoder input, and the output projection. Forward
functions operate on padded batches [batch, seq]; the single-sequence entry
points wrap them.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .tokenizer import BOS_ID, EOS_ID, PAD_ID

NEG_MASK = -1e9
IN_SOURCE, EXTERNAL = "in_source", "external"


@dataclass(frozen=True)
class TransformerConfig:
    vocab_size: int
    layers: int = 2
    heads: int = 4
    model_dim: int = 128
    hidden_dim: int = 512
    max_len: int = 64
    dropout_rate: float = 0.1
    token_conditioning: str = IN_SOURCE

    def __post_init__(self):
        for name in ("vocab_size", "layers", "heads", "model_dim", "hidden_dim", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.model_dim % self.heads != 0:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.token_conditioning not in (IN_SOURCE, EXTERNAL):
            raise ValueError(f"token_conditioning must be {IN_SOURCE!r} or {EXTERNAL!r}")

    def to_text(self) -> str:
        lines = [f"{f.name}={getattr(self, f.name)!r}" for f in sorted(fields(self), key=lambda f: f.name)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TransformerConfig":
        kwargs = {}
        for line in text.splitlines():
            if not line:
                continue
            key, _, value = line.partition("=")
            if key == "token_conditioning":
                kwargs[key] = value.strip("'\"")
            elif key == "dropout_rate":
                kwargs[key] = float(value)
            else:
                kwargs[key] = int(value)
        return cls(**kwargs)


@dataclass
class EncoderOutput:
    """Per-token contextual representations for one sequence."""

    reps: Tensor
    mask: np.ndarray

    def __post_init__(self):
        if self.reps.shape[0] != self.mask.shape[0]:
            raise ValueError("representation count must equal input token count")


@dataclass
class Checkpoint:
    config: TransformerConfig
    tensors: dict[str, Tensor]
    step: int = 0
    opt_state: dict[str, np.ndarray] | None = None
    opt_step: int = 0


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def init_params(config: TransformerConfig, seed: int = 0) -> dict[str, Tensor]:
    """Seeded parameter init in a fixed name order (reproducible byte-for-byte)."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def matrix(name, fan_in, fan_out):
        params[name] = Tensor(rng.normal(0.0, fan_in**-0.5, size=(fan_in, fan_out)), requires_grad=True)

    def norm(prefix, dim):
        params[f"{prefix}.gain"] = Tensor(np.ones(dim), requires_grad=True)
        params[f"{prefix}.bias"] = Tensor(np.zeros(dim), requires_grad=True)

    d, h = config.model_dim, config.hidden_dim
    params["embed"] = Tensor(rng.normal(0.0, d**-0.5, size=(config.vocab_size, d)), requires_grad=True)
    for i in range(config.layers):
        p = f"enc.{i}"
        norm(f"{p}.ln1", d)
        for w in ("wq", "wk", "wv", "wo"):
            matrix(f"{p}.attn.{w}", d, d)
        norm(f"{p}.ln2", d)
        matrix(f"{p}.ffn.w1", d, h)
        params[f"{p}.ffn.b1"] = Tensor(np.zeros(h), requires_grad=True)
        matrix(f"{p}.ffn.w2", h, d)
        params[f"{p}.ffn.b2"] = Tensor(np.zeros(d), requires_grad=True)
    norm("enc.norm", d)
    for i in range(config.layers):
        p = f"dec.{i}"
        norm(f"{p}.ln1", d)
        for w in ("wq", "wk", "wv", "wo"):
            matrix(f"{p}.self.{w}", d, d)
        norm(f"{p}.ln2", d)
        for w in ("wq", "wk", "wv", "wo"):
            matrix(f"{p}.cross.{w}", d, d)
        norm(f"{p}.ln3", d)
        matrix(f"{p}.ffn.w1", d, h)
        params[f"{p}.ffn.b1"] = Tensor(np.zeros(h), requires_grad=True)
        matrix(f"{p}.ffn.w2", h, d)
        params[f"{p}.ffn.b2"] = Tensor(np.zeros(d), requires_grad=True)
    norm("dec.norm", d)
    if config.token_conditioning == EXTERNAL:
        params["lang_embed"] = Tensor(rng.normal(0.0, d**-0.5, size=(config.vocab_size, d)), requires_grad=True)
    return params


def count_params(params: dict[str, Tensor]) -> int:
    return sum(p.data.size for p in params.values())


_ENCODER_PREFIXES = ("embed", "enc.")


def encoder_param_names(params: dict[str, Tensor]) -> list[str]:
    return [n for n in params if n.startswith(_ENCODER_PREFIXES)]


def extract_encoder(checkpoint: Checkpoint) -> Checkpoint:
    """Encoder-only checkpoint: embeddings + encoder stack + final norm,
    bit-identical tensors; decoder, cross-attention, and the external token
    table are dropped."""
    names = encoder_param_names(checkpoint.tensors)
    if "embed" not in names or "enc.norm.gain" not in names:
        raise ValueError("checkpoint is missing encoder tensors")
    tensors = {n: checkpoint.tensors[n] for n in names}
    return Checkpoint(checkpoint.config, tensors, step=checkpoint.step)


_SINUSOID_CACHE: dict[tuple, np.ndarray] = {}


def sinusoid_table(max_len: int, dim: int, dtype) -> np.ndarray:
    key = (max_len, dim, np.dtype(dtype).str)
    table = _SINUSOID_CACHE.get(key)
    if table is None:
        pos = np.arange(max_len, dtype=np.float64)[:, None]
        i = np.arange(dim, dtype=np.float64)[None, :]
        angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
        table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle)).astype(dtype)
        _SINUSOID_CACHE[key] = table
    return table


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------


def _attention(x_q, x_kv, bias, heads, params, prefix):
    B, Sq, D = x_q.shape
    Sk = x_kv.shape[1]
    dh = D // heads
    q = T.matmul(x_q, params[f"{prefix}.wq"])
    k = T.matmul(x_kv, params[f"{prefix}.wk"])
    v = T.matmul(x_kv, params[f"{prefix}.wv"])
    q = T.transpose(T.reshape(q, (B, Sq, heads, dh)), (0, 2, 1, 3))
    k = T.transpose(T.reshape(k, (B, Sk, heads, dh)), (0, 2, 1, 3))
    v = T.transpose(T.reshape(v, (B, Sk, heads, dh)), (0, 2, 1, 3))
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), dh**-0.5)
    scores = scores + Tensor(bias)
    attn = T.softmax(scores, axis=-1)
    ctx = T.matmul(attn, v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, Sq, D))
    return T.matmul(ctx, params[f"{prefix}.wo"])


def _ffn(x, params, prefix):
    h = T.relu(T.matmul(x, params[f"{prefix}.w1"]) + params[f"{prefix}.b1"])
    return T.matmul(h, params[f"{prefix}.w2"]) + params[f"{prefix}.b2"]


def _ln(x, params, prefix):
    return T.layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"])


def _maybe_dropout(x, config, rng):
    if rng is None or config.dropout_rate <= 0:
        return x
    return T.dropout(x, config.dropout_rate, rng)


def _embed(config, params, ids: np.ndarray, rng):
    x = T.scale(T.take(params["embed"], ids), config.model_dim**0.5)
    pos = sinusoid_table(config.max_len, config.model_dim, params["embed"].data.dtype)
    x = x + Tensor(pos[: ids.shape[1]][None, :, :])
    return _maybe_dropout(x, config, rng)


def _key_bias(mask: np.ndarray, dtype) -> np.ndarray:
    # [B, 1, 1, Sk]: 0 where visible, NEG_MASK at padding keys
    return np.where(mask[:, None, None, :], 0.0, NEG_MASK).astype(dtype)


def encode_batch(config: TransformerConfig, params, ids: np.ndarray, mask: np.ndarray, rng=None) -> Tensor:
    """Pre-norm encoder stack over padded [B, S] ids; True in ``mask`` = real token."""
    if ids.shape[1] > config.max_len:
        raise ValueError(f"input length {ids.shape[1]} exceeds max_len {config.max_len}")
    dtype = params["embed"].data.dtype
    x = _embed(config, params, ids, rng)
    bias = _key_bias(mask, dtype)
    for i in range(config.layers):
        p = f"enc.{i}"
        normed = _ln(x, params, f"{p}.ln1")
        x = x + _maybe_dropout(_attention(normed, normed, bias, config.heads, params, f"{p}.attn"), config, rng)
        x = x + _maybe_dropout(_ffn(_ln(x, params, f"{p}.ln2"), params, f"{p}.ffn"), config, rng)
    return _ln(x, params, "enc.norm")


def encode(config: TransformerConfig, params, ids, mask=None) -> EncoderOutput:
    """Single-sequence encoder entry point (the MMTE surface)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ValueError("encode expects a single id sequence")
    if len(ids) > config.max_len:
        raise ValueError(f"input length {len(ids)} exceeds max_len {config.max_len}")
    if mask is None:
        mask = ids != PAD_ID
    mask = np.asarray(mask, dtype=bool)
    reps = encode_batch(config, params, ids[None, :], mask[None, :])
    return EncoderOutput(T.reshape(reps, (len(ids), config.model_dim)), mask)


def encode_external_token(config: TransformerConfig, params, lang_token_id: int) -> Tensor:
    """One-position encoding of the target-language token (external mode only)."""
    if config.token_conditioning != EXTERNAL:
        raise ValueError("external token encoding requires token_conditioning='external'")
    return T.take(params["lang_embed"], np.array([lang_token_id]))


def _decoder_stack(config, params, enc_out, enc_bias, tgt_ids, rng):
    B, Ttgt = tgt_ids.shape
    dtype = params["embed"].data.dtype
    x = _embed(config, params, tgt_ids, rng)
    causal = np.triu(np.full((Ttgt, Ttgt), NEG_MASK, dtype=dtype), k=1)[None, None, :, :]
    self_bias = causal + _key_bias(tgt_ids != PAD_ID, dtype)
    for i in range(config.layers):
        p = f"dec.{i}"
        normed = _ln(x, params, f"{p}.ln1")
        x = x + _maybe_dropout(_attention(normed, normed, self_bias, config.heads, params, f"{p}.self"), config, rng)
        x = x + _maybe_dropout(_attention(_ln(x, params, f"{p}.ln2"), enc_out, enc_bias, config.heads, params, f"{p}.cross"), config, rng)
        x = x + _maybe_dropout(_ffn(_ln(x, params, f"{p}.ln3"), params, f"{p}.ffn"), config, rng)
    x = _ln(x, params, "dec.norm")
    return T.matmul(x, T.transpose(params["embed"]))


def cross_attention_memory(config, params, enc_out: Tensor, src_mask: np.ndarray, lang_ids=None):
    """Keys/values the decoder attends over, plus their visibility mask.

    In external mode the one-position language-token encoding is appended, so
    the cross-attention key length is src_len + 1.
    """
    if config.token_conditioning == EXTERNAL:
        if lang_ids is None:
            raise ValueError("external conditioning requires lang_ids")
        toks = T.take(params["lang_embed"], np.asarray(lang_ids, dtype=np.int64)[:, None])
        memory = T.concat([enc_out, toks], axis=1)
        mask = np.concatenate([src_mask, np.ones((src_mask.shape[0], 1), dtype=bool)], axis=1)
        return memory, mask
    return enc_out, src_mask


def decode_logits_batch(config, params, enc_out: Tensor, src_mask: np.ndarray, tgt_ids: np.ndarray, lang_ids=None, rng=None) -> Tensor:
    memory, mem_mask = cross_attention_memory(config, params, enc_out, src_mask, lang_ids)
    enc_bias = _key_bias(mem_mask, params["embed"].data.dtype)
    return _decoder_stack(config, params, memory, enc_bias, tgt_ids, rng)


def decode_logits(config, params, encoder_out: EncoderOutput, target_prefix_ids, lang_id=None) -> Tensor:
    """Causal logits [prefix_len, vocab] for one prefix (must begin with BOS)."""
    prefix = list(target_prefix_ids)
    if not prefix or prefix[0] != BOS_ID:
        raise ValueError("target prefix must begin with BOS")
    S = encoder_out.reps.shape[0]
    enc = T.reshape(encoder_out.reps, (1, S, config.model_dim))
    lang_ids = None if lang_id is None else np.array([lang_id])
    out = decode_logits_batch(config, params, enc, encoder_out.mask[None, :], np.asarray(prefix, dtype=np.int64)[None, :], lang_ids)
    return T.reshape(out, (len(prefix), config.vocab_size))


def translation_loss(config, params, batch, rng=None) -> Tensor:
    """Mean NLL over non-pad target positions for a (src, tgt, lang) batch."""
    src, src_mask, tgt, lang_ids = pad_batch(batch, config)
    enc = encode_batch(config, params, src, src_mask, rng)
    logits = decode_logits_batch(config, params, enc, src_mask, tgt[:, :-1], lang_ids, rng)
    B, Tm1, V = logits.shape
    labels = tgt[:, 1:].reshape(-1)
    return T.cross_entropy(T.reshape(logits, (B * Tm1, V)), labels, pad_id=PAD_ID)


def pad_batch(batch, config):
    """Pack (src_ids, tgt_ids, lang_id) triples into padded arrays."""
    B = len(batch)
    S = max(len(ex[0]) for ex in batch)
    Tt = max(len(ex[1]) for ex in batch)
    if S > config.max_len or Tt > config.max_len:
        raise ValueError(f"batch sequence length exceeds max_len {config.max_len}")
    src = np.full((B, S), PAD_ID, dtype=np.int64)
    tgt = np.full((B, Tt), PAD_ID, dtype=np.int64)
    lang_ids = np.zeros(B, dtype=np.int64)
    for b, (s, t, lang) in enumerate(batch):
        src[b, : len(s)] = s
        tgt[b, : len(t)] = t
        lang_ids[b] = lang
    return src, src != PAD_ID, tgt, lang_ids


def translate_greedy(config, params, source_ids, max_out: int, lang_id=None) -> list[int]:
    """Argmax decoding from BOS until EOS or ``max_out`` generated tokens."""
    outs = translate_greedy_batch(config, params, [(list(source_ids), lang_id)], max_out)
    return outs[0]


def translate_greedy_batch(config, params, sources, max_out: int) -> list[list[int]]:
    """Greedy-decode many (source_ids, lang_id) pairs in lockstep."""
    with T.no_grad():
        B = len(sources)
        S = max(len(s) for s, _ in sources)
        src = np.full((B, S), PAD_ID, dtype=np.int64)
        for b, (s, _) in enumerate(sources):
            src[b, : len(s)] = s
        src_mask = src != PAD_ID
        lang_ids = None
        if config.token_conditioning == EXTERNAL:
            lang_ids = np.array([lang for _, lang in sources], dtype=np.int64)
        enc = encode_batch(config, params, src, src_mask)
        memory, mem_mask = cross_attention_memory(config, params, enc, src_mask, lang_ids)
        enc_bias = _key_bias(mem_mask, params["embed"].data.dtype)
        prefix = np.full((B, 1), BOS_ID, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        outputs: list[list[int]] = [[] for _ in range(B)]
        for _ in range(max_out):
            logits = _decoder_stack(config, params, memory, enc_bias, prefix, None)
            step = logits.data[:, -1, :].argmax(axis=1)
            for b in range(B):
                if done[b]:
                    continue
                if step[b] == EOS_ID:
                    done[b] = True
                else:
                    outputs[b].append(int(step[b]))
            if done.all():
                break
            prefix = np.concatenate([prefix, step[:, None]], axis=1)
            if prefix.shape[1] > config.max_len:
                break
        return outputs


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

MAGIC = b"MMTE"
VERSION = 1


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    """Binary little-endian container; tensors stored float32 row-major."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    blob_lines = checkpoint.config.to_text() + f"step={checkpoint.step}\n"
    if checkpoint.opt_state is not None:
        blob_lines += f"opt_step={checkpoint.opt_step}\n"
    blob = blob_lines.encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)

    def write_tensors(tensors):
        buf.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(np.asarray(tensors[name], dtype=np.float32))
            encoded = name.encode("utf-8")
            buf.write(struct.pack("<H", len(encoded)))
            buf.write(encoded)
            buf.write(struct.pack("<B", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(arr.tobytes())

    write_tensors({n: t.data for n, t in checkpoint.tensors.items()})
    write_tensors(checkpoint.opt_state or {})
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", view, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (blob_len,) = struct.unpack_from("<I", view, 8)
    off = 12
    blob = bytes(view[off : off + blob_len]).decode("utf-8")
    off += blob_len
    config_lines = []
    step = 0
    opt_step = 0
    has_opt = False
    for line in blob.splitlines():
        if line.startswith("step="):
            step = int(line.split("=", 1)[1])
        elif line.startswith("opt_step="):
            opt_step = int(line.split("=", 1)[1])
            has_opt = True
        elif line:
            config_lines.append(line)
    config = TransformerConfig.from_text("\n".join(config_lines))

    def read_tensors(off):
        (count,) = struct.unpack_from("<I", view, off)
        off += 4
        out = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", view, off)
            off += 2
            name = bytes(view[off : off + name_len]).decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<B", view, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", view, off)
            off += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(view, dtype="<f4", count=n, offset=off).reshape(shape)
            off += 4 * n
            out[name] = arr
        return out, off

    raw_params, off = read_tensors(off)
    raw_opt, off = read_tensors(off)
    dtype = T.default_dtype()
    tensors = {n: Tensor(a.astype(dtype), requires_grad=True) for n, a in raw_params.items()}
    opt_state = {n: a.astype(np.float64) for n, a in raw_opt.items()} if (raw_opt or has_opt) else None
    return Checkpoint(config, tensors, step=step, opt_state=opt_state, opt_step=opt_step)
