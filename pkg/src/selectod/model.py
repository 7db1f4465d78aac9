"""Encoder-decoder dialogue model with span and response-selection heads.

One shared encoder reads the dialogue context. A belief decoder emits the
belief state; a response decoder, conditioned on a re-encoding of
context + belief + DB token, emits the system action followed by the
delexicalized response. Token embeddings are shared by the encoder, both
decoders, the tied output projections and the soft-token selection head.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from . import tensor as T
from .tensor import RngState, Tensor

logger = logging.getLogger(__name__)

NEG_INF = -1e9

N_RESERVED_TOKENS = 16


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    d_ff: int = 128
    max_seq_len: int = 128
    n_span_tags: int = 11
    dropout_rate: float = 0.0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "n_encoder_layers", "n_decoder_layers", "d_ff", "max_seq_len", "n_span_tags"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.vocab_size < N_RESERVED_TOKENS:
            raise ValueError(f"vocab_size must be at least {N_RESERVED_TOKENS} (reserved tokens)")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncoderState:
    """Top-layer encoder output. ``hidden`` is [B, L, d] (or [L, d] for one sequence)."""

    hidden: Tensor
    mask: np.ndarray

    @property
    def single(self) -> bool:
        return self.hidden.ndim == 2


def _batched(enc: EncoderState) -> tuple[Tensor, np.ndarray]:
    if enc.single:
        return enc.hidden.reshape(1, *enc.hidden.shape), enc.mask[None, :]
    return enc.hidden, enc.mask


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over axis 1 of [B, L, d] restricted to ``mask`` positions."""
    m = mask.astype(x.dtype)
    counts = m.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise ValueError("empty effective sequence")
    weights = Tensor(m / counts, dtype=x.dtype)
    return (x * weights[:, :, None]).sum(axis=1)


class TODModel:
    """Shared-encoder model: belief decoder, response decoder, span head, selection heads."""

    ENCODER_PREFIX = "encoder."
    DECODER_PREFIXES = ("belief_decoder.", "resp_decoder.")
    SELECTION_PREFIXES = ("select_a.", "select_b.")

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32, params: dict | None = None):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.training = False
        self._dropout_rng = RngState(seed).spawn("dropout")
        if params is None:
            params = self._init_params(RngState(seed).spawn("init"))
        self.params: dict[str, Tensor] = {}
        for name, value in params.items():
            arr = value.data if isinstance(value, Tensor) else value
            self.params[name] = Tensor(np.array(arr, dtype=self.dtype), requires_grad=True, name=name)

    # -- construction --------------------------------------------------------
    def _init_params(self, rng: RngState) -> dict[str, np.ndarray]:
        c = self.config
        d, ff = c.d_model, c.d_ff
        p: dict[str, np.ndarray] = {}

        def dense(name, n_in, n_out, scale=None, bias=True):
            std = scale if scale is not None else 1.0 / math.sqrt(n_in)
            p[f"{name}.w"] = rng.normal((n_in, n_out), std)
            if bias:
                p[f"{name}.b"] = np.zeros(n_out)

        def norm(name):
            p[f"{name}.g"] = np.ones(d)
            p[f"{name}.b"] = np.zeros(d)

        def attn(name):
            for part in ("q", "k", "v", "o"):
                dense(f"{name}.{part}", d, d, bias=False)

        p["embed.tokens"] = rng.normal((c.vocab_size, d), 1.0 / math.sqrt(d))
        p["encoder.pos"] = rng.normal((c.max_seq_len, d), 0.02)
        for i in range(c.n_encoder_layers):
            pre = f"encoder.layer{i}"
            norm(f"{pre}.ln1")
            attn(f"{pre}.self")
            norm(f"{pre}.ln2")
            dense(f"{pre}.ff1", d, ff)
            dense(f"{pre}.ff2", ff, d)
        norm("encoder.ln_f")
        for dec in ("belief_decoder", "resp_decoder"):
            p[f"{dec}.pos"] = rng.normal((c.max_seq_len, d), 0.02)
            for i in range(c.n_decoder_layers):
                pre = f"{dec}.layer{i}"
                norm(f"{pre}.ln1")
                attn(f"{pre}.self")
                norm(f"{pre}.ln2")
                attn(f"{pre}.cross")
                norm(f"{pre}.ln3")
                dense(f"{pre}.ff1", d, ff)
                dense(f"{pre}.ff2", ff, d)
            norm(f"{dec}.ln_f")
        dense("span_head", d, c.n_span_tags)
        dense("select_a", d, 1)
        dense("select_b.hidden", d, d)
        dense("select_b.out", d, 1)
        return p

    def astype(self, dtype) -> "TODModel":
        """Copy of the model with parameters cast to ``dtype`` (e.g. float64 for grad checks)."""
        clone = TODModel(self.config, dtype=dtype, params={k: v.data for k, v in self.params.items()})
        clone._dropout_rng = self._dropout_rng
        clone.training = self.training
        return clone

    def train(self, mode: bool = True) -> "TODModel":
        self.training = mode
        return self

    def eval(self) -> "TODModel":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def parameter_groups(self) -> dict[str, list[str]]:
        groups = {"embedding": [], "encoder": [], "decoder": [], "span": [], "selection": []}
        for name in self.params:
            if name.startswith("embed."):
                groups["embedding"].append(name)
            elif name.startswith(self.ENCODER_PREFIX):
                groups["encoder"].append(name)
            elif name.startswith(self.DECODER_PREFIXES):
                groups["decoder"].append(name)
            elif name.startswith("span_head."):
                groups["span"].append(name)
            else:
                groups["selection"].append(name)
        return groups

    def n_parameters(self, variant: str | None = None) -> int:
        """Parameter count. With a variant, only the selection head it trains is counted."""
        heads = {"none": (), "after_encoder": ("select_a.",), "differentiable": ("select_b.",)}
        unused = () if variant is None else tuple(set(self.SELECTION_PREFIXES) - set(heads[variant]))
        return int(sum(p.size for n, p in self.params.items() if not (unused and n.startswith(unused))))

    def has_selection_heads(self) -> bool:
        return any(n.startswith(self.SELECTION_PREFIXES) for n in self.params)

    def without_selection_heads(self) -> "TODModel":
        kept = {k: v.data for k, v in self.params.items() if not k.startswith(self.SELECTION_PREFIXES)}
        return TODModel(self.config, dtype=self.dtype, params=kept)

    # -- building blocks ------------------------------------------------------
    def _p(self, name: str) -> Tensor:
        try:
            return self.params[name]
        except KeyError:
            raise KeyError(f"parameter {name!r} is not present in this model") from None

    def _ln(self, name: str, x: Tensor) -> Tensor:
        return T.layer_norm(x, self._p(f"{name}.g"), self._p(f"{name}.b"))

    def _dense(self, name: str, x: Tensor) -> Tensor:
        y = x @ self._p(f"{name}.w")
        bias = self.params.get(f"{name}.b")
        return y + bias if bias is not None else y

    def _dropout(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.config.dropout_rate, self._dropout_rng, self.training)

    def _attention(self, name: str, xq: Tensor, xkv: Tensor, bias: np.ndarray) -> Tensor:
        B, Lq, D = xq.shape
        Lk = xkv.shape[1]
        H = self.config.n_heads
        dh = D // H
        q = (xq @ self._p(f"{name}.q.w")).reshape(B, Lq, H, dh).transpose(0, 2, 1, 3)
        k = (xkv @ self._p(f"{name}.k.w")).reshape(B, Lk, H, dh).transpose(0, 2, 3, 1)
        v = (xkv @ self._p(f"{name}.v.w")).reshape(B, Lk, H, dh).transpose(0, 2, 1, 3)
        scores = (q @ k) * (1.0 / math.sqrt(dh)) + Tensor(bias, dtype=self.dtype)
        att = self._dropout(T.softmax(scores, axis=-1))
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(B, Lq, D)
        return ctx @ self._p(f"{name}.o.w")

    def _ff(self, name: str, x: Tensor) -> Tensor:
        return self._dense(f"{name}.ff2", self._dropout(T.gelu(self._dense(f"{name}.ff1", x))))

    def _embed(self, ids: np.ndarray, pos_name: str) -> Tensor:
        L = ids.shape[1]
        return self._p("embed.tokens")[ids] + self._p(pos_name)[np.arange(L)]

    def _check_ids(self, ids: np.ndarray) -> None:
        bad = np.argwhere((ids < 0) | (ids >= self.config.vocab_size))
        if bad.size:
            pos = tuple(int(i) for i in bad[0])
            raise ValueError(f"token id {int(ids[pos])} at position {pos} is outside the vocabulary (size {self.config.vocab_size})")

    def _prepare(self, token_ids, mask=None) -> tuple[np.ndarray, np.ndarray, bool]:
        ids = np.asarray(token_ids, dtype=np.int64)
        single = ids.ndim == 1
        if single:
            ids = ids[None, :]
        if mask is None:
            mask = np.ones(ids.shape, dtype=bool)
        mask = np.asarray(mask, dtype=bool).reshape(ids.shape)
        self._check_ids(ids)
        limit = self.config.max_seq_len
        if ids.shape[1] > limit:
            logger.warning("input of length %d truncated from the left to %d tokens", ids.shape[1], limit)
            ids, mask = ids[:, -limit:], mask[:, -limit:]
        if ids.shape[1] == 0 or np.any(mask.sum(axis=1) == 0):
            raise ValueError("empty effective sequence")
        return ids, mask, single

    # -- public operations ----------------------------------------------------
    def encode(self, token_ids, mask=None) -> EncoderState:
        """Run the shared encoder over ``token_ids`` ([L] or [B, L])."""
        ids, mask, single = self._prepare(token_ids, mask)
        x = self._dropout(self._embed(ids, "encoder.pos"))
        key_bias = np.where(mask, 0.0, NEG_INF)[:, None, None, :]
        for i in range(self.config.n_encoder_layers):
            pre = f"encoder.layer{i}"
            h = self._ln(f"{pre}.ln1", x)
            x = x + self._dropout(self._attention(f"{pre}.self", h, h, key_bias))
            x = x + self._dropout(self._ff(pre, self._ln(f"{pre}.ln2", x)))
        hidden = self._ln("encoder.ln_f", x)
        if single:
            return EncoderState(hidden[0], mask[0])
        return EncoderState(hidden, mask)

    def _decode(self, which: str, enc: EncoderState, target_prefix) -> Tensor:
        hidden, enc_mask = _batched(enc)
        ids = np.asarray(target_prefix, dtype=np.int64)
        single = ids.ndim == 1
        if single:
            ids = ids[None, :]
        if ids.shape[0] != hidden.shape[0]:
            raise T.ShapeError(f"decoder batch {ids.shape[0]} does not match encoder batch {hidden.shape[0]}")
        self._check_ids(ids)
        L = ids.shape[1]
        if L > self.config.max_seq_len:
            raise ValueError(f"decoder prefix of length {L} exceeds max_seq_len={self.config.max_seq_len}")
        causal = np.triu(np.full((L, L), NEG_INF), k=1)[None, None]
        cross_bias = np.where(enc_mask, 0.0, NEG_INF)[:, None, None, :]
        x = self._dropout(self._embed(ids, f"{which}.pos"))
        for i in range(self.config.n_decoder_layers):
            pre = f"{which}.layer{i}"
            h = self._ln(f"{pre}.ln1", x)
            x = x + self._dropout(self._attention(f"{pre}.self", h, h, causal))
            x = x + self._dropout(self._attention(f"{pre}.cross", self._ln(f"{pre}.ln2", x), hidden, cross_bias))
            x = x + self._dropout(self._ff(pre, self._ln(f"{pre}.ln3", x)))
        x = self._ln(f"{which}.ln_f", x)
        logits = x @ self._p("embed.tokens").transpose(1, 0)
        return logits[0] if single else logits

    def decode_belief(self, enc: EncoderState, target_prefix) -> Tensor:
        """Teacher-forced belief logits, [len(prefix), v] (or batched)."""
        return self._decode("belief_decoder", enc, target_prefix)

    def decode_response(self, enc: EncoderState, target_prefix) -> Tensor:
        """Teacher-forced action+response logits; ``enc`` encodes context + belief + DB token."""
        return self._decode("resp_decoder", enc, target_prefix)

    def span_head(self, enc: EncoderState) -> Tensor:
        return self._dense("span_head", enc.hidden)

    def select_head_a(self, enc: EncoderState) -> Tensor:
        """One logit per sequence from the mean-pooled encoding."""
        hidden, mask = _batched(enc)
        logit = self._dense("select_a", masked_mean(hidden, mask)).reshape(hidden.shape[0])
        return logit[0] if enc.single else logit

    def select_head_b(self, soft_tokens: Tensor, mask=None) -> Tensor:
        """One logit per [k, v] sequence of probability (or one-hot) rows."""
        soft = soft_tokens if isinstance(soft_tokens, Tensor) else Tensor(soft_tokens, dtype=self.dtype)
        single = soft.ndim == 2
        if single:
            soft = soft.reshape(1, *soft.shape)
        B, k, v = soft.shape
        if v != self.config.vocab_size:
            raise T.ShapeError(f"soft tokens have {v} columns, vocabulary has {self.config.vocab_size}")
        mask = np.ones((B, k), dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(B, k)
        sums = soft.data.sum(axis=-1)
        if np.any(np.abs(sums[mask] - 1.0) > 1e-4):
            raise ValueError("soft token rows must be probability vectors (rows sum to 1)")
        projected = soft @ self._p("embed.tokens")
        pooled = masked_mean(projected, mask)
        hidden = T.tanh(self._dense("select_b.hidden", pooled))
        logit = self._dense("select_b.out", hidden).reshape(B)
        return logit[0] if single else logit

    def greedy_decode(self, enc: EncoderState, decoder: str, max_len: int, start_id: int, eos_id: int, pad_id: int = 0) -> list[list[int]]:
        """Argmax decoding; returns the tokens after ``start_id`` (EOS included when reached)."""
        which = {"belief": "belief_decoder", "response": "resp_decoder"}.get(decoder, decoder)
        if which not in ("belief_decoder", "resp_decoder"):
            raise ValueError(f"unknown decoder {decoder!r}")
        hidden, enc_mask = _batched(enc)
        batched = EncoderState(hidden, enc_mask)
        B = hidden.shape[0]
        max_len = min(max_len, self.config.max_seq_len - 1)
        prefix = np.full((B, 1), start_id, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        with T.no_grad():
            for _ in range(max_len):
                logits = self._decode(which, batched, prefix)
                nxt = np.argmax(logits.data[:, -1, :], axis=-1)
                nxt = np.where(done, pad_id, nxt)
                prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
                done |= nxt == eos_id
                if done.all():
                    break
        out = []
        for row in prefix[:, 1:]:
            seq = []
            for tok in row:
                seq.append(int(tok))
                if tok == eos_id:
                    break
            out.append(seq)
        return out

    # -- checkpoints ----------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def save(self, directory, extra: dict | None = None, dtype: str = "float32") -> str:
        meta = dict(extra or {})
        meta["config"] = self.config.to_dict()
        return T.save_tensors(directory, self.state_dict(), dtype=dtype, extra=meta)

    @classmethod
    def load(cls, directory, dtype=np.float32, drop_selection_heads: bool = False) -> "TODModel":
        arrays, manifest = T.load_tensors(directory)
        config = ModelConfig(**manifest["config"])
        if drop_selection_heads:
            arrays = {k: v for k, v in arrays.items() if not k.startswith(cls.SELECTION_PREFIXES)}
        return cls(config, dtype=dtype, params=arrays)


def strip_selection_heads(src_dir, dst_dir) -> str:
    """Copy a checkpoint without the selection-head tensors."""
    arrays, manifest = T.load_tensors(src_dir)
    kept = {k: v for k, v in arrays.items() if not k.startswith(TODModel.SELECTION_PREFIXES)}
    extra = {k: v for k, v in manifest.items() if k != "tensors"}
    dtype = next(iter(manifest["tensors"].values()))["dtype"]
    return T.save_tensors(dst_dir, kept, dtype=dtype, extra=extra)


def grad_norms(model: TODModel, names: Iterable[str]) -> float:
    """Global L2 norm of the current ``.grad`` over ``names`` (missing grads count as zero)."""
    total = 0.0
    for n in names:
        g = model.params[n].grad
        if g is not None:
            total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    return math.sqrt(total)
