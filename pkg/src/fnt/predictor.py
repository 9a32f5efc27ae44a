"""Factorized predictors, joint network, and long-content text integration.

The no-output branch is a recurrent predictor joined with the encoder through
an additive tanh bottleneck producing one scalar logit per (frame, label)
node.  The vocabulary branch is a standalone language model over tokens only:
a causal transformer offline, a recurrent stack when streaming.  Its
log-probabilities are scaled by a trainable scalar and added to the encoder's
projected vocabulary scores; the final posterior is a softmax over
[no-output, vocabulary].

History transcripts enter through a context embedding sequence C produced by
a jointly trained context encoder, a frozen external provider, or the
vocabulary predictor's own cached hidden states.  C can be pooled into an
utterance summary added before the output head, cross-attended inside every
transformer block, or attended once and concatenated in the recurrent path.
With empty history every integration path reduces exactly to the plain
forward pass of the same weights (summary zero, cross-attention skipped,
concatenation slot zero).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .nn import (
    Embedding,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    sinusoid_positions,
)
from .rng import Rng
from .tensor import (
    ShapeError,
    Tensor,
    concat,
    get_default_dtype,
    log_softmax,
    relu,
    reshape,
    softmax,
    sqrt,
    tmean,
)

__all__ = [
    "ContextEmbeddings",
    "BlankPredictor",
    "JointBlank",
    "ContextEncoder",
    "ExternalContextProvider",
    "VocabPredictorTransformer",
    "VocabPredictorRecurrent",
    "context_encode",
    "utterance_summary",
    "combine_vocab",
    "posterior",
    "joint_log_posterior",
    "write_context_file",
    "read_context_file",
    "CONTEXT_SOURCES",
]

CONTEXT_SOURCES = ("trained", "external", "predv")


@dataclass
class ContextEmbeddings:
    """Token-level history embeddings: one row per SOS/token of each utterance."""

    rows: Tensor  # (L_C, d_ctx)
    boundaries: tuple[tuple[int, int], ...] = ()  # (start, length) per utterance
    labels: tuple[int, ...] = ()  # token ids incl. SOS markers, for inspection
    source: str = "trained"

    @property
    def length(self) -> int:
        return self.rows.shape[0]

    @property
    def is_empty(self) -> bool:
        return self.length == 0

    @classmethod
    def empty(cls, d_ctx: int, source: str = "trained") -> "ContextEmbeddings":
        return cls(Tensor._wrap(np.zeros((0, d_ctx), dtype=get_default_dtype())), (), (), source)


def _sos_prefixed(history_token_seqs: Sequence[Sequence[int]], sos: int) -> tuple[list[int], list[tuple[int, int]]]:
    ids: list[int] = []
    bounds: list[tuple[int, int]] = []
    for seq in history_token_seqs:
        start = len(ids)
        ids.append(sos)
        ids.extend(int(t) for t in seq)
        bounds.append((start, len(ids) - start))
    return ids, bounds


# ---------------------------------------------------------------------------
# No-output branch
# ---------------------------------------------------------------------------


class BlankPredictor(Module):
    """Two recurrent layers over the emitted-token prefix (SOS-prefixed)."""

    def __init__(self, vocab_size: int, d_hidden: int, rng: Rng, n_layers: int = 2):
        from .nn import LstmStack

        self.vocab_size = vocab_size
        self.sos = vocab_size
        self.emb = Embedding(vocab_size + 1, d_hidden, rng.child("emb"))
        self.lstm = LstmStack(n_layers, d_hidden, d_hidden, rng.child("lstm"))

    def init_state(self):
        return self.lstm.init_state()

    def step(self, state, token: int):
        """Advance on one token; returns (state', top hidden (1, d))."""
        if not 0 <= token <= self.sos:
            raise ShapeError(f"token {token} outside vocabulary (0..{self.sos})")
        x = self.emb(np.array([token]))
        return self.lstm.step(state, x)

    def forward_sequence(self, tokens: Sequence[int]) -> Tensor:
        """Hiddens for [SOS] + tokens: row l conditions on tokens past l."""
        ids = np.array([self.sos] + [int(t) for t in tokens])
        return self.lstm.forward_sequence(self.emb(ids))


class JointBlank(Module):
    """Additive tanh joint producing the scalar no-output logit per node."""

    def __init__(self, d_enc: int, d_pred: int, d_joint: int, rng: Rng):
        self.proj_enc = Linear(d_enc, d_joint, rng.child("enc"))
        self.proj_pred = Linear(d_pred, d_joint, rng.child("pred"))
        self.out = Linear(d_joint, 1, rng.child("out"))

    def pre_activation(self, h: Tensor, g: Tensor) -> Tensor:
        """Broadcast sum of projections: (T, L+1, d_joint)."""
        t_n, l_n = h.shape[0], g.shape[0]
        he = reshape(self.proj_enc(h), (t_n, 1, -1))
        ge = reshape(self.proj_pred(g), (1, l_n, -1))
        return he + ge

    def forward(self, h: Tensor, g: Tensor) -> Tensor:
        """(T, d_enc) x (L+1, d_pred) -> (T, L+1) no-output logits."""
        from .tensor import tanh

        pre = tanh(self.pre_activation(h, g))
        t_n, l_n = h.shape[0], g.shape[0]
        return reshape(self.out(pre), (t_n, l_n))


# ---------------------------------------------------------------------------
# Context encoders
# ---------------------------------------------------------------------------


class _TransformerBlock(Module):
    def __init__(self, d: int, n_heads: int, d_ffn: int, rng: Rng, d_ctx: Optional[int] = None):
        self.ln_self = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, n_heads, rng.child("self"))
        self.cross_attn = None
        if d_ctx is not None:
            self.ln_cross = LayerNorm(d)
            self.cross_attn = MultiHeadAttention(d, n_heads, rng.child("cross"), d_kv=d_ctx)
        self.ln_ffn = LayerNorm(d)
        self.ffn = FeedForward(d, d_ffn, rng.child("ffn"))


class ContextEncoder(Module):
    """Jointly trained transformer over the SOS-separated history tokens.

    History is complete text, so attention is unmasked (bidirectional).
    """

    def __init__(self, vocab_size: int, d_ctx: int, n_layers: int, n_heads: int, rng: Rng):
        self.vocab_size = vocab_size
        self.sos = vocab_size
        self.d_ctx = d_ctx
        self.emb = Embedding(vocab_size + 1, d_ctx, rng.child("emb"))
        self.blocks = [
            _TransformerBlock(d_ctx, n_heads, 2 * d_ctx, rng.child(f"block{i}")) for i in range(n_layers)
        ]
        self.out_norm = LayerNorm(d_ctx)

    def encode(self, history_token_seqs: Sequence[Sequence[int]]) -> ContextEmbeddings:
        ids, bounds = _sos_prefixed(history_token_seqs, self.sos)
        if not ids:
            return ContextEmbeddings.empty(self.d_ctx, "trained")
        x = self.emb(np.array(ids)) + Tensor._wrap(
            sinusoid_positions(0, len(ids), self.d_ctx).astype(get_default_dtype())
        )
        for block in self.blocks:
            x = x + block.self_attn(block.ln_self(x), block.ln_self(x))
            x = x + block.ffn(block.ln_ffn(x))
        rows = self.out_norm(x)
        return ContextEmbeddings(rows, tuple(bounds), tuple(ids), "trained")


class ExternalContextProvider:
    """Frozen deterministic stand-in for a pre-trained text embedder.

    Token ids are mapped through a fixed seeded random table; the embedding at
    position l is the running mean of the utterance's rows up to l, so each
    row is position-dependent yet reproducible with no learned state.
    """

    def __init__(self, vocab_size: int, d_ctx: int, seed: int):
        self.vocab_size = vocab_size
        self.sos = vocab_size
        self.d_ctx = d_ctx
        self.table = Rng(seed).child("context-provider").normal(size=(vocab_size + 1, d_ctx))

    def encode(self, history_token_seqs: Sequence[Sequence[int]]) -> ContextEmbeddings:
        ids, bounds = _sos_prefixed(history_token_seqs, self.sos)
        if not ids:
            return ContextEmbeddings.empty(self.d_ctx, "external")
        blocks = []
        for seq in history_token_seqs:
            utt = np.array([self.sos] + [int(t) for t in seq])
            raw = self.table[utt]
            prefix = np.cumsum(raw, axis=0) / np.arange(1, len(utt) + 1)[:, None]
            blocks.append(prefix)
        rows = np.concatenate(blocks, axis=0).astype(get_default_dtype())
        return ContextEmbeddings(Tensor._wrap(rows), tuple(bounds), tuple(ids), "external")


_CTX_MAGIC = b"FNTCTX1\x00"


def write_context_file(path, utterance_rows: Sequence[np.ndarray]) -> None:
    """Per-utterance context rows: each block holds 1 SOS row + one per token."""
    with open(path, "wb") as f:
        f.write(_CTX_MAGIC)
        d_ctx = utterance_rows[0].shape[1] if utterance_rows else 0
        f.write(struct.pack("<II", len(utterance_rows), d_ctx))
        for rows in utterance_rows:
            if rows.ndim != 2 or rows.shape[0] < 1 or rows.shape[1] != d_ctx:
                raise ShapeError(f"context block must be (1+tokens, {d_ctx}); got {rows.shape}")
            f.write(struct.pack("<I", rows.shape[0] - 1))
            f.write(rows.astype("<f4").tobytes())


def read_context_file(path) -> list[np.ndarray]:
    with open(path, "rb") as f:
        magic = f.read(len(_CTX_MAGIC))
        if magic != _CTX_MAGIC:
            raise ValueError(f"{path}: not a context embedding file")
        n_utt, d_ctx = struct.unpack("<II", f.read(8))
        out = []
        for _ in range(n_utt):
            raw = f.read(4)
            if len(raw) < 4:
                raise ValueError(f"{path}: truncated context file")
            (n_tokens,) = struct.unpack("<I", raw)
            n_rows = n_tokens + 1
            payload = f.read(n_rows * d_ctx * 4)
            if len(payload) < n_rows * d_ctx * 4:
                raise ValueError(f"{path}: truncated context file")
            out.append(np.frombuffer(payload, dtype="<f4").reshape(n_rows, d_ctx).astype(np.float64))
        return out


def context_encode(
    history_token_seqs: Sequence[Sequence[int]],
    source: str,
    *,
    trained_encoder: Optional[ContextEncoder] = None,
    external_provider: Optional[ExternalContextProvider] = None,
    predv_rows: Optional[Sequence[np.ndarray]] = None,
    sos: Optional[int] = None,
    d_ctx: Optional[int] = None,
) -> ContextEmbeddings:
    """Produce C for the given history under the configured source."""
    if source == "trained":
        if trained_encoder is None:
            raise ShapeError("trained context source needs a context encoder")
        return trained_encoder.encode(history_token_seqs)
    if source == "external":
        if external_provider is None:
            raise ShapeError("external context source needs a provider")
        return external_provider.encode(history_token_seqs)
    if source == "predv":
        if predv_rows is None:
            raise ShapeError("predv context source needs cached hidden states")
        if len(predv_rows) != len(history_token_seqs):
            raise ShapeError(
                f"{len(predv_rows)} cached blocks for {len(history_token_seqs)} history utterances"
            )
        ids, bounds = _sos_prefixed(history_token_seqs, sos if sos is not None else -1)
        if not ids:
            return ContextEmbeddings.empty(d_ctx or 0, "predv")
        for rows, seq in zip(predv_rows, history_token_seqs):
            if rows.shape[0] != len(seq) + 1:
                raise ShapeError(f"cached block has {rows.shape[0]} rows for {len(seq)} tokens")
        joined = np.concatenate([np.asarray(r) for r in predv_rows], axis=0)
        return ContextEmbeddings(Tensor._wrap(joined), tuple(bounds), tuple(ids), "predv")
    raise ShapeError(f"unknown context source {source!r}; expected one of {CONTEXT_SOURCES}")


# ---------------------------------------------------------------------------
# Pooling and combination
# ---------------------------------------------------------------------------


def utterance_summary(ctx: ContextEmbeddings, d_ctx: int) -> Tensor:
    """[mean(C); std(C)] over rows; zeros for empty history."""
    if ctx.is_empty:
        return Tensor._wrap(np.zeros(2 * d_ctx, dtype=get_default_dtype()))
    rows = ctx.rows
    mean = tmean(rows, axis=0)
    centered = rows - mean
    std = sqrt(tmean(centered * centered, axis=0))
    return concat([mean, std], axis=0)


def combine_vocab(z_t: Tensor, z_l: Tensor, beta: Tensor) -> Tensor:
    """Drop the separator slot of the encoder scores and add scaled LM scores."""
    if z_t.shape[-1] != z_l.shape[-1] + 1:
        raise ShapeError(
            f"encoder scores must be one wider than LM scores; got {z_t.shape} vs {z_l.shape}"
        )
    return z_t[..., :-1] + beta * z_l


def posterior(z_b: Tensor, z_v: Tensor) -> Tensor:
    """softmax([no-output logit, vocabulary logits]); slot 0 is no-output."""
    zb = reshape(z_b, (1,))
    return softmax(concat([zb, z_v], axis=0), axis=-1)


def joint_log_posterior(z_b: Tensor, z_v: Tensor) -> Tensor:
    """Lattice-shaped log posterior: (T, L+1, 1+U) from (T, L+1) and (T, L+1, U)."""
    t_n, l_n = z_b.shape
    stacked = concat([reshape(z_b, (t_n, l_n, 1)), z_v], axis=-1)
    return log_softmax(stacked, axis=-1)


# ---------------------------------------------------------------------------
# Vocabulary predictors
# ---------------------------------------------------------------------------


@dataclass
class TransformerPredState:
    """Per-block projected key/value rows for incremental decoding."""

    self_kv: list[tuple[Optional[Tensor], Optional[Tensor]]]
    cross_kv: list[Optional[tuple[Tensor, Tensor]]]
    ctx: ContextEmbeddings
    n_tokens: int = 0
    hidden_rows: list[np.ndarray] = field(default_factory=list)


class VocabPredictorTransformer(Module):
    """Causal transformer language model with optional context integration."""

    def __init__(
        self,
        vocab_size: int,
        d_model: int,
        n_layers: int,
        n_heads: int,
        rng: Rng,
        d_ctx: Optional[int] = None,
        utterance_level: bool = False,
        token_level: bool = False,
    ):
        self.vocab_size = vocab_size
        self.sos = vocab_size
        self.d_model = d_model
        self.utterance_level = utterance_level
        self.token_level = token_level
        self.d_ctx = d_ctx if d_ctx is not None else d_model
        self.emb = Embedding(vocab_size + 1, d_model, rng.child("emb"))
        self.blocks = [
            _TransformerBlock(
                d_model,
                n_heads,
                2 * d_model,
                rng.child(f"block{i}"),
                d_ctx=self.d_ctx if token_level else None,
            )
            for i in range(n_layers)
        ]
        self.out_norm = LayerNorm(d_model)
        self.summary_proj = Linear(2 * self.d_ctx, d_model, rng.child("summary")) if utterance_level else None
        self.head = Linear(d_model, vocab_size, rng.child("head"))

    def _input_rows(self, ids: np.ndarray, offset: int = 0) -> Tensor:
        pos = sinusoid_positions(offset, len(ids), self.d_model).astype(get_default_dtype())
        return self.emb(ids) + Tensor._wrap(pos)

    def _head_out(self, o_last: Tensor, ctx: Optional[ContextEmbeddings]) -> Tensor:
        if self.utterance_level:
            summary = utterance_summary(ctx if ctx is not None else ContextEmbeddings.empty(self.d_ctx), self.d_ctx)
            o_last = o_last + self.summary_proj(reshape(summary, (1, -1)))
        return log_softmax(self.head(relu(o_last)), axis=-1)

    def forward(
        self,
        tokens: Sequence[int],
        ctx: Optional[ContextEmbeddings] = None,
        collect_attn: bool = False,
    ):
        """Rows for [SOS] + tokens -> ((L+1, U) log-probs, (L+1, d) last layer).

        With ``collect_attn`` also returns the head-averaged cross-attention
        weights per block (empty list when history is empty or integration is
        off).
        """
        ids = np.array([self.sos] + [int(t) for t in tokens])
        n = len(ids)
        x = self._input_rows(ids)
        causal = np.tril(np.ones((n, n), dtype=bool))
        use_ctx = ctx is not None and not ctx.is_empty
        attn_maps: list[np.ndarray] = []
        for block in self.blocks:
            x = x + block.self_attn(block.ln_self(x), block.ln_self(x), mask=causal)
            if self.token_level and use_ctx:
                if collect_attn:
                    delta, weights = block.cross_attn.attend(
                        block.ln_cross(x),
                        *block.cross_attn.project_kv(ctx.rows),
                        return_weights=True,
                    )
                    attn_maps.append(weights.data.copy())
                else:
                    delta = block.cross_attn(block.ln_cross(x), ctx.rows)
                x = x + delta
            x = x + block.ffn(block.ln_ffn(x))
        o_last = self.out_norm(x)
        z = self._head_out(o_last, ctx)
        if collect_attn:
            return z, o_last, attn_maps
        return z, o_last

    # ---- incremental decoding -------------------------------------------
    def init_state(self, ctx: Optional[ContextEmbeddings] = None) -> TransformerPredState:
        ctx = ctx if ctx is not None else ContextEmbeddings.empty(self.d_ctx)
        cross = []
        for block in self.blocks:
            if self.token_level and not ctx.is_empty:
                cross.append(block.cross_attn.project_kv(ctx.rows))
            else:
                cross.append(None)
        return TransformerPredState(
            self_kv=[(None, None)] * len(self.blocks),
            cross_kv=cross,
            ctx=ctx,
        )

    def step(self, state: TransformerPredState, token: Optional[int]):
        """Feed SOS (token None) or one token; returns (state', z row (U,), o row)."""
        tok = self.sos if token is None else int(token)
        x = self._input_rows(np.array([tok]), offset=state.n_tokens)
        new_kv = []
        for i, block in enumerate(self.blocks):
            q_ln = block.ln_self(x)
            k_new, v_new = block.self_attn.project_kv(q_ln)
            k_prev, v_prev = state.self_kv[i]
            k_all = k_new if k_prev is None else concat([k_prev, k_new], axis=0)
            v_all = v_new if v_prev is None else concat([v_prev, v_new], axis=0)
            new_kv.append((k_all, v_all))
            x = x + block.self_attn.attend(q_ln, k_all, v_all)
            if self.token_level and state.cross_kv[i] is not None:
                k_c, v_c = state.cross_kv[i]
                x = x + block.cross_attn.attend(block.ln_cross(x), k_c, v_c)
            x = x + block.ffn(block.ln_ffn(x))
        o_last = self.out_norm(x)
        z = self._head_out(o_last, state.ctx)
        new_state = TransformerPredState(
            self_kv=new_kv,
            cross_kv=state.cross_kv,
            ctx=state.ctx,
            n_tokens=state.n_tokens + 1,
            hidden_rows=state.hidden_rows + [o_last.data[0].copy()],
        )
        return new_state, z[0], o_last[0]


@dataclass
class RecurrentPredState:
    lstm_state: list
    ctx_kv: Optional[tuple[Tensor, Tensor]]
    ctx: ContextEmbeddings
    n_tokens: int = 0
    hidden_rows: list[np.ndarray] = field(default_factory=list)


class VocabPredictorRecurrent(Module):
    """Recurrent language model for streaming, with optional attention over C.

    The attended context row is concatenated with the recurrent output before
    the vocabulary projection; with empty history the concatenation slot is
    zero, so the pass equals the plain recurrent path of the same weights.
    """

    def __init__(
        self,
        vocab_size: int,
        d_model: int,
        n_layers: int,
        rng: Rng,
        d_ctx: Optional[int] = None,
        slongfnt_text: bool = False,
        attn_heads: int = 1,
    ):
        from .nn import LstmStack

        self.vocab_size = vocab_size
        self.sos = vocab_size
        self.d_model = d_model
        self.slongfnt_text = slongfnt_text
        self.d_ctx = d_ctx if d_ctx is not None else d_model
        self.emb = Embedding(vocab_size + 1, d_model, rng.child("emb"))
        self.lstm = LstmStack(n_layers, d_model, d_model, rng.child("lstm"))
        self.ctx_attn = (
            MultiHeadAttention(d_model, attn_heads, rng.child("ctx"), d_kv=self.d_ctx)
            if slongfnt_text
            else None
        )
        head_in = 2 * d_model if slongfnt_text else d_model
        self.head = Linear(head_in, vocab_size, rng.child("head"))

    def _attend(self, o: Tensor, ctx: Optional[ContextEmbeddings], kv=None, collect=False):
        if not self.slongfnt_text:
            return o, None
        if ctx is None or ctx.is_empty:
            pad = Tensor._wrap(np.zeros_like(o.data))
            return concat([o, pad], axis=-1), None
        if kv is None:
            kv = self.ctx_attn.project_kv(ctx.rows)
        if collect:
            att, weights = self.ctx_attn.attend(o, kv[0], kv[1], return_weights=True)
            return concat([o, att], axis=-1), weights.data.copy()
        att = self.ctx_attn.attend(o, kv[0], kv[1])
        return concat([o, att], axis=-1), None

    def forward(
        self,
        tokens: Sequence[int],
        ctx: Optional[ContextEmbeddings] = None,
        collect_attn: bool = False,
    ):
        ids = np.array([self.sos] + [int(t) for t in tokens])
        hiddens = self.lstm.forward_sequence(self.emb(ids))
        o2, weights = self._attend(hiddens, ctx, collect=collect_attn)
        z = log_softmax(self.head(o2), axis=-1)
        if collect_attn:
            return z, hiddens, ([weights] if weights is not None else [])
        return z, hiddens

    def init_state(self, ctx: Optional[ContextEmbeddings] = None) -> RecurrentPredState:
        ctx = ctx if ctx is not None else ContextEmbeddings.empty(self.d_ctx)
        kv = None
        if self.slongfnt_text and not ctx.is_empty:
            kv = self.ctx_attn.project_kv(ctx.rows)
        return RecurrentPredState(lstm_state=self.lstm.init_state(), ctx_kv=kv, ctx=ctx)

    def step(self, state: RecurrentPredState, token: Optional[int]):
        tok = self.sos if token is None else int(token)
        lstm_state, h = self.lstm.step(state.lstm_state, self.emb(np.array([tok])))
        o2, _ = self._attend(h, state.ctx, kv=state.ctx_kv)
        z = log_softmax(self.head(o2), axis=-1)
        new_state = RecurrentPredState(
            lstm_state=lstm_state,
            ctx_kv=state.ctx_kv,
            ctx=state.ctx,
            n_tokens=state.n_tokens + 1,
            hidden_rows=state.hidden_rows + [h.data[0].copy()],
        )
        return new_state, z[0], h[0]
