"""Beam-search decoding.

The search itself is generic over a "stepper" (anything with
``initial()`` and ``advance(state, token)`` returning states that carry
the log-probabilities of the next token), so tests can drive it with stub
distributions.  ``IncrementalDecoder`` is the stepper for a real
checkpoint: it caches per-layer self-attention keys/values per hypothesis
and precomputes the cross-attention projections of the bridge output once
per sentence."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .model import (BOS_ID, Checkpoint, EOS_ID, SourceBatch, EncodedSource,
                    encode, positional_encoding)
from .tensor import MASK_VALUE


@dataclass(frozen=True)
class Hypothesis:
    """A (partial) decoder output: BPE token ids, accumulated
    log-probability, and whether it ended in EOS."""

    tokens: tuple[int, ...]
    logprob: float
    finished: bool

    def normalized_score(self, length_alpha: float) -> float:
        if not self.tokens:
            return self.logprob
        return self.logprob / (len(self.tokens) ** length_alpha)


@dataclass(frozen=True)
class _BeamItem:
    tokens: tuple[int, ...]
    logprob: float
    state: object


def beam_search_nbest(stepper, beam: int = 4, max_len: int = 256,
                      length_alpha: float = 1.0,
                      eos_id: int = EOS_ID) -> list[Hypothesis]:
    """All finished hypotheses plus the unfinished beam at ``max_len``,
    ranked by logprob / length^alpha.  Deterministic: every tie is broken
    by token ids."""
    if beam < 1:
        raise ContractError(f"beam must be >= 1, got {beam}")
    live = [_BeamItem((), 0.0, stepper.initial())]
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        candidates = []
        for hyp_idx, item in enumerate(live):
            logprobs = stepper.logprobs(item.state)
            top = np.argsort(-logprobs, kind="stable")[:beam + 1]
            for token in top:
                candidates.append((item.logprob + float(logprobs[token]),
                                   hyp_idx, int(token)))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        new_live: list[_BeamItem] = []
        for score, hyp_idx, token in candidates:
            item = live[hyp_idx]
            if token == eos_id:
                finished.append(Hypothesis(item.tokens + (token,), score, True))
            elif len(new_live) < beam:
                new_live.append(_BeamItem(item.tokens + (token,), score,
                                          stepper.advance(item.state, token)))
        live = new_live
        if not live:
            break
    pool = finished + [Hypothesis(item.tokens, item.logprob, False)
                       for item in live]
    pool.sort(key=lambda h: (-h.normalized_score(length_alpha), h.tokens))
    return pool


def beam_search(stepper, beam: int = 4, max_len: int = 256,
                length_alpha: float = 1.0,
                eos_id: int = EOS_ID) -> Hypothesis:
    """Best hypothesis under length-normalized log-probability."""
    ranked = beam_search_nbest(stepper, beam, max_len, length_alpha, eos_id)
    if not ranked:
        raise ContractError("beam search produced no hypotheses")
    return ranked[0]


def _stable_log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _stable_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


class _DecoderState:
    """Per-hypothesis cache: length decoded so far plus, per layer, the
    accumulated self-attention keys and values [heads, t, d_k]."""

    __slots__ = ("length", "keys", "values", "next_logprobs")

    def __init__(self, length, keys, values, next_logprobs):
        self.length = length
        self.keys = keys
        self.values = values
        self.next_logprobs = next_logprobs


class IncrementalDecoder:
    """Single-sentence stepper over a loaded checkpoint.

    The source is encoded once; cross-attention keys/values are projected
    once per layer.  ``advance`` runs the decoder stack for one position
    only, against cached keys/values, and never mutates the given state,
    so beam hypotheses can fork freely.
    """

    def __init__(self, checkpoint: Checkpoint, source: SourceBatch,
                 encoded: EncodedSource | None = None):
        if source.f_s.shape[0] != 1:
            raise ContractError("IncrementalDecoder decodes one sentence at a time")
        if source.f_s.shape[1] == 0 or bool(source.f_s_pad.all()):
            raise ContractError("cannot decode an empty source sentence")
        cfg = checkpoint.config
        self.cfg = cfg
        self.heads = cfg.heads
        self.d_k = cfg.d_k
        self.p = {name: t.data for name, t in checkpoint.params.items()}
        if encoded is None:
            encoded = encode(cfg, checkpoint.params, source, training=False)
        memory = encoded.enc12_out.data[0]          # [src_len, d_model]
        self.cross_bias = np.where(source.f_s_pad[0], MASK_VALUE, 0.0).astype(memory.dtype)
        self.cross_k = []
        self.cross_v = []
        for i in range(cfg.n_layers_dec):
            prefix = f"decoder/layer_{i}/cross_attn"
            k = memory @ self.p[f"{prefix}/wk"]
            v = memory @ self.p[f"{prefix}/wv"]
            self.cross_k.append(self._split(k))    # [heads, src_len, d_k]
            self.cross_v.append(self._split(v))
        self.pe = positional_encoding(cfg.max_positions + 1, cfg.d_model,
                                      cfg.max_positions + 1, dtype=memory.dtype)

    def _split(self, x: np.ndarray) -> np.ndarray:
        return x.reshape(x.shape[0], self.heads, self.d_k).transpose(1, 0, 2)

    def _norm(self, x: np.ndarray, prefix: str) -> np.ndarray:
        mean = x.mean(axis=-1, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=-1, keepdims=True)
        x_hat = centered / np.sqrt(var + x.dtype.type(1e-6))
        return x_hat * self.p[f"{prefix}/gain"] + self.p[f"{prefix}/bias"]

    def initial(self) -> _DecoderState:
        layers = self.cfg.n_layers_dec
        empty_k = [np.zeros((self.heads, 0, self.d_k), dtype=self.pe.dtype)
                   for _ in range(layers)]
        empty_v = [np.zeros((self.heads, 0, self.d_k), dtype=self.pe.dtype)
                   for _ in range(layers)]
        state = _DecoderState(0, empty_k, empty_v, None)
        return self._step(state, BOS_ID)

    def advance(self, state: _DecoderState, token: int) -> _DecoderState:
        return self._step(state, token)

    def logprobs(self, state: _DecoderState) -> np.ndarray:
        return state.next_logprobs

    def _step(self, state: _DecoderState, token: int) -> _DecoderState:
        cfg = self.cfg
        pos = state.length
        if pos >= cfg.max_positions + 1:
            raise ContractError("decoder ran past max positions")
        x = (self.p["embed/bpe"][token] * self.pe.dtype.type(math.sqrt(cfg.d_model))
             + self.pe[pos])
        new_keys = []
        new_values = []
        for i in range(cfg.n_layers_dec):
            prefix = f"decoder/layer_{i}"
            q = self._split((x[None, :] @ self.p[f"{prefix}/self_attn/wq"]))
            k_new = self._split(x[None, :] @ self.p[f"{prefix}/self_attn/wk"])
            v_new = self._split(x[None, :] @ self.p[f"{prefix}/self_attn/wv"])
            keys = np.concatenate([state.keys[i], k_new], axis=1)
            values = np.concatenate([state.values[i], v_new], axis=1)
            new_keys.append(keys)
            new_values.append(values)
            scores = np.matmul(q, keys.transpose(0, 2, 1)) / math.sqrt(self.d_k)
            weights = _stable_softmax(scores)
            ctx = np.matmul(weights, values)        # [heads, 1, d_k]
            ctx = ctx.transpose(1, 0, 2).reshape(cfg.d_model)
            x = self._norm(x + ctx @ self.p[f"{prefix}/self_attn/wo"],
                           f"{prefix}/self_attn_norm")

            q2 = self._split(x[None, :] @ self.p[f"{prefix}/cross_attn/wq"])
            scores = (np.matmul(q2, self.cross_k[i].transpose(0, 2, 1))
                      / math.sqrt(self.d_k)) + self.cross_bias
            weights = _stable_softmax(scores)
            ctx = np.matmul(weights, self.cross_v[i])
            ctx = ctx.transpose(1, 0, 2).reshape(cfg.d_model)
            x = self._norm(x + ctx @ self.p[f"{prefix}/cross_attn/wo"],
                           f"{prefix}/cross_attn_norm")

            hidden = np.maximum(x @ self.p[f"{prefix}/ffn/w1"]
                                + self.p[f"{prefix}/ffn/b1"], 0)
            x = self._norm(x + (hidden @ self.p[f"{prefix}/ffn/w2"]
                                + self.p[f"{prefix}/ffn/b2"]),
                           f"{prefix}/ffn_norm")

        logits = x @ self.p["output/weight"] + self.p["output/bias"]
        return _DecoderState(pos + 1, new_keys, new_values,
                             _stable_log_softmax(logits))


def translate_batch(checkpoint: Checkpoint, source: SourceBatch,
                    beam: int = 4, max_len: int = 256,
                    length_alpha: float = 1.0) -> list[list[int]]:
    """Beam-decode each sentence of a batch against a shared read-only
    checkpoint; returns BPE ids without BOS/EOS.  ``max_len`` is clamped
    to the checkpoint's position limit."""
    if source.f_s.shape[0] == 0:
        raise ContractError("empty source batch")
    max_len = min(max_len, checkpoint.config.max_positions)
    results = []
    for row in range(source.f_s.shape[0]):
        n_words = int((~source.f_w_pad[row]).sum())
        n_subs = int((~source.f_s_pad[row]).sum())
        if n_subs == 0 or n_words == 0:
            raise ContractError(f"source sentence {row} is empty")
        single = SourceBatch(source.f_w[row:row + 1, :n_words],
                             source.f_w_pad[row:row + 1, :n_words],
                             source.f_s[row:row + 1, :n_subs],
                             source.f_s_pad[row:row + 1, :n_subs])
        stepper = IncrementalDecoder(checkpoint, single)
        best = beam_search(stepper, beam=beam, max_len=max_len,
                           length_alpha=length_alpha)
        tokens = list(best.tokens)
        if tokens and tokens[-1] == EOS_ID:
            tokens = tokens[:-1]
        results.append(tokens)
    return results


def greedy_decode(checkpoint: Checkpoint, source: SourceBatch,
                  max_len: int = 256) -> list[list[int]]:
    """Argmax decoding; identical to beam=1 and used by the overfit checks."""
    return translate_batch(checkpoint, source, beam=1, max_len=max_len,
                           length_alpha=0.0)
