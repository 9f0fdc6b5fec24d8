"""The two-encoder transformer.

One encoder stack reads source words, a second reads source subwords, and
a third bridge stack (a decoder block without the causal mask) runs
self-attention over the subword stream and cross-attention into the word
encoder's output.  The decoder attends to the bridge output and predicts
subword units; its embedding table is the same stored tensor as the
subword encoder's.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field, asdict
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ConfigError, ContractError, ShapeError
from .tensor import MASK_VALUE, Tensor
from .tensor_io import load_tensors, save_tensors

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")


class Vocab:
    """Token/id mapping with fixed special ids (pad=0, bos=1, eos=2, unk=3)."""

    def __init__(self, tokens: Sequence[str]):
        self.itos = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    @classmethod
    def from_corpus(cls, sentences: Iterable[Sequence[str]],
                    max_size: int | None = None, min_count: int = 1) -> "Vocab":
        counts: Counter[str] = Counter()
        for sent in sentences:
            counts.update(sent)
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        tokens = [t for t, c in ranked if c >= min_count]
        if max_size is not None:
            tokens = tokens[:max_size]
        return cls(tokens)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        unk = self.stoi["<unk>"]
        return [self.stoi.get(t, unk) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for tok in self.itos[len(SPECIALS):]:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])


@dataclass
class ModelConfig:
    bpe_vocab_size: int
    word_vocab_size: int
    n_layers_fw: int = 6
    n_layers_fs: int = 6
    n_layers_es: int = 6
    n_layers_dec: int = 6
    d_model: int = 512
    d_ff: int = 2048
    heads: int = 8
    dropout: float = 0.1
    max_positions: int = 256

    def __post_init__(self):
        for name in ("bpe_vocab_size", "word_vocab_size", "n_layers_fw",
                     "n_layers_fs", "n_layers_es", "n_layers_dec",
                     "d_model", "d_ff", "heads", "max_positions"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout {self.dropout} outside [0, 1)")

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads

    @property
    def d_v(self) -> int:
        return self.d_model // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


@dataclass
class SourceBatch:
    """Padded word-id and subword-id views of the same source sentences."""

    f_w: np.ndarray        # [batch, src_words] int ids
    f_w_pad: np.ndarray    # [batch, src_words] bool, True at pads
    f_s: np.ndarray        # [batch, src_subwords] int ids
    f_s_pad: np.ndarray    # [batch, src_subwords] bool, True at pads


@dataclass
class EncodedSource:
    enc1_out: Tensor       # [batch, src_words, d_model]
    enc2_out: Tensor       # [batch, src_subwords, d_model]
    enc12_out: Tensor      # [batch, src_subwords, d_model]
    f_w_pad: np.ndarray = field(repr=False, default=None)
    f_s_pad: np.ndarray = field(repr=False, default=None)


@dataclass
class Checkpoint:
    """Every learned tensor by name, plus its config and step counter."""

    params: dict[str, Tensor]
    config: ModelConfig
    step: int = 0

    def save(self, path: str) -> None:
        save_tensors(path, {name: t.data for name, t in self.params.items()})
        sidecar = {"config": self.config.to_dict(), "step": self.step}
        base = path[:-len(".tfrx")] if path.endswith(".tfrx") else path
        with open(base + ".json", "w", encoding="utf-8") as fh:
            json.dump(sidecar, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str) -> "Checkpoint":
        base = path[:-len(".tfrx")] if path.endswith(".tfrx") else path
        try:
            with open(base + ".json", encoding="utf-8") as fh:
                sidecar = json.load(fh)
        except FileNotFoundError as exc:
            raise CheckpointError(f"missing config sidecar for {path}") from exc
        config = ModelConfig.from_dict(sidecar["config"])
        arrays = load_tensors(path)
        params = {name: Tensor(arr, requires_grad=True)
                  for name, arr in arrays.items()}
        return cls(params, config, int(sidecar["step"]))


def positional_encoding(length: int, d_model: int,
                        max_positions: int = 256,
                        dtype=np.float32) -> np.ndarray:
    """Sinusoidal table: sin at even dims, cos at odd dims, wavelength
    10000^(2i/d_model)."""
    if length > max_positions:
        raise ContractError(
            f"sequence length {length} exceeds max positions {max_positions}")
    positions = np.arange(length, dtype=np.float64)[:, None]
    dims = np.arange(d_model, dtype=np.float64)[None, :]
    angles = positions / np.power(10000.0, 2.0 * (dims // 2) / d_model)
    table = np.empty((length, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(angles[:, 0::2])
    table[:, 1::2] = np.cos(angles[:, 1::2])
    return table.astype(dtype)


def padding_attention_mask(pad: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Additive mask [batch, 1, 1, len] blocking attention into pads."""
    kind = np.dtype(dtype).type
    return np.where(pad[:, None, None, :], kind(MASK_VALUE), kind(0.0))


def causal_attention_mask(length: int, dtype=np.float32) -> np.ndarray:
    """Additive mask [1, 1, len, len] blocking attention to later positions."""
    mask = np.triu(np.full((length, length), MASK_VALUE, dtype=np.dtype(dtype)), k=1)
    return mask[None, None, :, :]


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                         mask: np.ndarray | Tensor | None = None) -> Tensor:
    """softmax(q @ k^T / sqrt(d_k) + mask) @ v.

    Masked positions receive a large negative score, so their weight
    underflows to an exact zero.  Leading batch/head dimensions broadcast.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(
            f"query/key depth mismatch: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(
            f"key/value length mismatch: {k.shape} vs {v.shape}")
    d_k = q.shape[-1]
    k_t = T.transpose(k, tuple(range(k.data.ndim - 2)) + (k.data.ndim - 1, k.data.ndim - 2))
    scores = T.scale(T.matmul(q, k_t), 1.0 / math.sqrt(d_k))
    if mask is not None:
        mask_t = mask if isinstance(mask, Tensor) else T.constant(mask, dtype=scores.dtype)
        try:
            np.broadcast_shapes(mask_t.shape, scores.shape)
        except ValueError as exc:
            raise ShapeError(
                f"mask shape {mask_t.shape} does not broadcast to scores {scores.shape}") from exc
        scores = T.add(scores, mask_t)
    return T.matmul(T.softmax(scores, axis=-1), v)


def multi_head_attention(params: dict[str, Tensor], q_in: Tensor,
                         k_in: Tensor, v_in: Tensor,
                         mask: np.ndarray | None, heads: int) -> Tensor:
    """Per-head linear projections, parallel scaled-dot attention, concat,
    and the output projection.  ``params`` holds wq/wk/wv/wo, each
    [d_model, d_model]; head i uses columns [i*d_k, (i+1)*d_k)."""
    d_model = q_in.shape[-1]
    if d_model % heads != 0:
        raise ConfigError(f"d_model {d_model} not divisible by heads {heads}")
    d_k = d_model // heads

    def split(x: Tensor) -> Tensor:
        parts = T.reshape(x, x.shape[:-1] + (heads, d_k))
        ndim = len(parts.shape)
        order = tuple(range(ndim - 3)) + (ndim - 2, ndim - 3, ndim - 1)
        return T.transpose(parts, order)

    q = split(T.matmul(q_in, params["wq"]))
    k = split(T.matmul(k_in, params["wk"]))
    v = split(T.matmul(v_in, params["wv"]))
    heads_out = scaled_dot_attention(q, k, v, mask)
    ndim = len(heads_out.shape)
    order = tuple(range(ndim - 3)) + (ndim - 2, ndim - 3, ndim - 1)
    merged = T.transpose(heads_out, order)
    merged = T.reshape(merged, merged.shape[:-2] + (d_model,))
    return T.matmul(merged, params["wo"])


def _attn_params(params: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    return {name: params[f"{prefix}/{name}"] for name in ("wq", "wk", "wv", "wo")}


def _sublayer(x: Tensor, sub_out: Tensor, params: dict[str, Tensor],
              norm_prefix: str, cfg: ModelConfig, training: bool, rng) -> Tensor:
    dropped = T.dropout(sub_out, cfg.dropout, training, rng)
    return T.layer_norm(T.add(x, dropped),
                        params[f"{norm_prefix}/gain"],
                        params[f"{norm_prefix}/bias"])


def _ffn(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    hidden = T.relu(T.add(T.matmul(x, params[f"{prefix}/w1"]),
                          params[f"{prefix}/b1"]))
    return T.add(T.matmul(hidden, params[f"{prefix}/w2"]),
                 params[f"{prefix}/b2"])


def _embed(table: Tensor, ids: np.ndarray, cfg: ModelConfig,
           training: bool, rng) -> Tensor:
    x = T.scale(T.embedding(table, ids), math.sqrt(cfg.d_model))
    pe = positional_encoding(ids.shape[-1], cfg.d_model,
                             cfg.max_positions + 1, dtype=table.data.dtype)
    x = T.add(x, T.constant(pe))
    return T.dropout(x, cfg.dropout, training, rng)


def _self_attn_stack(component: str, n_layers: int, x: Tensor,
                     mask: np.ndarray, params: dict[str, Tensor],
                     cfg: ModelConfig, training: bool, rng) -> Tensor:
    for i in range(n_layers):
        prefix = f"{component}/layer_{i}"
        attn = multi_head_attention(_attn_params(params, f"{prefix}/self_attn"),
                                    x, x, x, mask, cfg.heads)
        x = _sublayer(x, attn, params, f"{prefix}/self_attn_norm", cfg, training, rng)
        x = _sublayer(x, _ffn(x, params, f"{prefix}/ffn"),
                      params, f"{prefix}/ffn_norm", cfg, training, rng)
    return x


def encode(config: ModelConfig, params: dict[str, Tensor],
           batch: SourceBatch, training: bool = False,
           rng=None) -> EncodedSource:
    """Run the word encoder, the subword encoder, and the bridge stack.

    The bridge repeats, per layer: unmasked self-attention over the
    subword stream, cross-attention with queries from that stream and
    keys/values from the word encoder's final output, then the
    feed-forward block; every sublayer sits inside residual + layer norm
    with dropout.
    """
    if batch.f_w.size and batch.f_w.max() >= config.word_vocab_size:
        raise ContractError("word ids exceed the word vocabulary")
    if batch.f_s.size and batch.f_s.max() >= config.bpe_vocab_size:
        raise ContractError("subword ids exceed the BPE vocabulary")
    dtype = params["embed/word"].data.dtype
    word_mask = padding_attention_mask(batch.f_w_pad, dtype)
    sub_mask = padding_attention_mask(batch.f_s_pad, dtype)

    x_w = _embed(params["embed/word"], batch.f_w, config, training, rng)
    enc1 = _self_attn_stack("enc_word", config.n_layers_fw, x_w,
                            word_mask, params, config, training, rng)

    x_s = _embed(params["embed/bpe"], batch.f_s, config, training, rng)
    enc2 = _self_attn_stack("enc_subword", config.n_layers_fs, x_s,
                            sub_mask, params, config, training, rng)

    y = enc2
    for i in range(config.n_layers_es):
        prefix = f"enc_cross/layer_{i}"
        attn = multi_head_attention(_attn_params(params, f"{prefix}/self_attn"),
                                    y, y, y, sub_mask, config.heads)
        y = _sublayer(y, attn, params, f"{prefix}/self_attn_norm",
                      config, training, rng)
        cross = multi_head_attention(_attn_params(params, f"{prefix}/cross_attn"),
                                     y, enc1, enc1, word_mask, config.heads)
        y = _sublayer(y, cross, params, f"{prefix}/cross_attn_norm",
                      config, training, rng)
        y = _sublayer(y, _ffn(y, params, f"{prefix}/ffn"),
                      params, f"{prefix}/ffn_norm", config, training, rng)

    return EncodedSource(enc1, enc2, y, batch.f_w_pad, batch.f_s_pad)


def decode_forward(config: ModelConfig, params: dict[str, Tensor],
                   encoded: EncodedSource, target_prefix_ids: np.ndarray,
                   training: bool = False, rng=None) -> Tensor:
    """Causally masked decoder over BPE ids attending to the bridge
    output; returns logits [batch, tgt_len, bpe_vocab].

    Sequences may be one position longer than ``max_positions`` to make
    room for the BOS offset.
    """
    ids = np.asarray(target_prefix_ids)
    tgt_len = ids.shape[-1]
    if tgt_len > config.max_positions + 1:
        raise ContractError(
            f"target length {tgt_len} exceeds max positions {config.max_positions}")
    if ids.size and ids.max() >= config.bpe_vocab_size:
        raise ContractError("target ids exceed the BPE vocabulary")
    dtype = params["embed/bpe"].data.dtype
    mask = causal_attention_mask(tgt_len, dtype) + padding_attention_mask(
        (ids == PAD_ID), dtype)
    cross_mask = padding_attention_mask(encoded.f_s_pad, dtype)

    y = _embed(params["embed/bpe"], ids, config, training, rng)
    for i in range(config.n_layers_dec):
        prefix = f"decoder/layer_{i}"
        attn = multi_head_attention(_attn_params(params, f"{prefix}/self_attn"),
                                    y, y, y, mask, config.heads)
        y = _sublayer(y, attn, params, f"{prefix}/self_attn_norm",
                      config, training, rng)
        cross = multi_head_attention(_attn_params(params, f"{prefix}/cross_attn"),
                                     y, encoded.enc12_out, encoded.enc12_out,
                                     cross_mask, config.heads)
        y = _sublayer(y, cross, params, f"{prefix}/cross_attn_norm",
                      config, training, rng)
        y = _sublayer(y, _ffn(y, params, f"{prefix}/ffn"),
                      params, f"{prefix}/ffn_norm", config, training, rng)

    return T.add(T.matmul(y, params["output/weight"]), params["output/bias"])


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int,
            dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def init_params(config: ModelConfig, seed: int,
                dtype=np.float32) -> Checkpoint:
    """Deterministic initialization: Xavier-uniform projections and FFN
    weights, N(0, d_model^-1/2) embeddings, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    d, ff = config.d_model, config.d_ff
    params: dict[str, Tensor] = {}

    def param(name: str, data: np.ndarray) -> None:
        params[name] = Tensor(data, requires_grad=True, dtype=dtype)

    emb_std = d ** -0.5
    param("embed/word",
          rng.normal(0.0, emb_std, size=(config.word_vocab_size, d)).astype(dtype))
    param("embed/bpe",
          rng.normal(0.0, emb_std, size=(config.bpe_vocab_size, d)).astype(dtype))

    stacks = (("enc_word", config.n_layers_fw, False),
              ("enc_subword", config.n_layers_fs, False),
              ("enc_cross", config.n_layers_es, True),
              ("decoder", config.n_layers_dec, True))
    for component, n_layers, has_cross in stacks:
        for i in range(n_layers):
            prefix = f"{component}/layer_{i}"
            blocks = ["self_attn"] + (["cross_attn"] if has_cross else [])
            for block in blocks:
                for w in ("wq", "wk", "wv", "wo"):
                    param(f"{prefix}/{block}/{w}", _xavier(rng, d, d, dtype))
                param(f"{prefix}/{block}_norm/gain", np.ones(d, dtype=dtype))
                param(f"{prefix}/{block}_norm/bias", np.zeros(d, dtype=dtype))
            param(f"{prefix}/ffn/w1", _xavier(rng, d, ff, dtype))
            param(f"{prefix}/ffn/b1", np.zeros(ff, dtype=dtype))
            param(f"{prefix}/ffn/w2", _xavier(rng, ff, d, dtype))
            param(f"{prefix}/ffn/b2", np.zeros(d, dtype=dtype))
            param(f"{prefix}/ffn_norm/gain", np.ones(d, dtype=dtype))
            param(f"{prefix}/ffn_norm/bias", np.zeros(d, dtype=dtype))

    param("output/weight", _xavier(rng, d, config.bpe_vocab_size, dtype))
    param("output/bias", np.zeros(config.bpe_vocab_size, dtype=dtype))
    return Checkpoint(params, config, step=0)


def make_source_batch(word_ids: list[list[int]],
                      sub_ids: list[list[int]]) -> SourceBatch:
    """Pad ragged id lists into a SourceBatch (pad id 0)."""
    def pad(rows: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
        width = max((len(r) for r in rows), default=0)
        ids = np.full((len(rows), width), PAD_ID, dtype=np.int64)
        pad_mask = np.ones((len(rows), width), dtype=bool)
        for i, row in enumerate(rows):
            ids[i, :len(row)] = row
            pad_mask[i, :len(row)] = False
        return ids, pad_mask

    f_w, f_w_pad = pad(word_ids)
    f_s, f_s_pad = pad(sub_ids)
    return SourceBatch(f_w, f_w_pad, f_s, f_s_pad)
