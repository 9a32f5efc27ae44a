"""Speech encoder: offline, long-content, and streaming chunked modes.

The encoder subsamples features by frame stacking (rate 4), adds absolute
sinusoidal positions, and applies a stack of pre-norm blocks: causal
self-attention, causal depthwise convolution (kernel 3), and a feed-forward
layer, each with a residual connection.

Streaming runs the same arithmetic chunk by chunk: every layer caches the
raw inputs of past positions as attention keys/values (bounded to
``left_chunks`` whole chunks, oldest evicted first) plus the convolution
tail, so chunked outputs match a full-sequence pass with the equivalent
windowed-causal mask to float precision.  Long-content history enters either
as concatenated features (offline, with gradients stopped at the history
frames) or as a per-layer bank of downsampled cached states prepended to the
attention context of every chunk.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .nn import (
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    sinusoid_positions,
    xavier_uniform,
)
from .rng import Rng
from .tensor import ShapeError, Tensor, concat, reshape, stop_gradient

__all__ = [
    "EncoderConfig",
    "FeatureSeq",
    "EncodedSeq",
    "ChunkCache",
    "SpeechEncoder",
    "downsample_history",
    "downsampled_length",
    "build_history_bank",
    "DOWNSAMPLE_MODES",
]

DOWNSAMPLE_MODES = ("statistical", "dilated", "mix", "none", "global_mean")


@dataclass
class EncoderConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 2
    d_ffn: int = 128
    d_feat: int = 16
    subsample_rate: int = 4
    chunk_frames: int = 2  # encoder frames per chunk, post-subsampling
    left_chunks: Optional[int] = 4  # None = unbounded left context
    downsample_rate: int = 4
    downsample_mode: str = "statistical"
    conv_kernel: int = 3

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ShapeError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.chunk_frames < 1:
            raise ShapeError("chunk_frames must be >= 1")
        if self.subsample_rate != 4:
            raise ShapeError("subsample rate is fixed at 4")
        if self.downsample_mode not in DOWNSAMPLE_MODES:
            raise ShapeError(f"unknown downsample mode {self.downsample_mode!r}")
        if self.left_chunks is not None and self.left_chunks < 0:
            raise ShapeError("left_chunks must be >= 0 or None")

    @property
    def chunk_input_frames(self) -> int:
        return self.chunk_frames * self.subsample_rate


@dataclass
class FeatureSeq:
    """Feature frames for one utterance: (T_in, d_feat), finite, T_in >= 1."""

    frames: Tensor

    def __post_init__(self):
        if not isinstance(self.frames, Tensor):
            self.frames = Tensor(np.asarray(self.frames))
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ShapeError(f"features must be (T_in, d_feat) with T_in >= 1; got {self.frames.shape}")
        if not np.isfinite(self.frames.data).all():
            raise ShapeError("features contain non-finite values")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def d_feat(self) -> int:
        return self.frames.shape[1]


def _as_features(x) -> FeatureSeq:
    return x if isinstance(x, FeatureSeq) else FeatureSeq(x)


@dataclass
class EncodedSeq:
    """Encoder output span with bookkeeping for backprop participation.

    ``grad_mask[t]`` is False exactly where position t belongs to gradient-
    stopped history; ``current_start`` is the first frame of the current
    utterance (0 unless history was prepended).
    """

    hidden: Tensor
    grad_mask: np.ndarray
    current_start: int = 0

    @property
    def current(self) -> Tensor:
        return self.hidden[self.current_start :] if self.current_start else self.hidden

    def __len__(self) -> int:
        return self.hidden.shape[0]


class ChunkCache:
    """Single-owner streaming state for one utterance.

    Per layer it holds the bounded left-context key/value source rows, the
    causal convolution tail, and a read-only history bank; ``offset`` is the
    absolute encoder-frame index of the next chunk's first frame.
    """

    def __init__(self, cfg: EncoderConfig, banks: Optional[Sequence[Optional[Tensor]]] = None):
        self.cfg = cfg
        if banks is None:
            banks = [None] * cfg.n_layers
        if len(banks) != cfg.n_layers:
            raise ShapeError(f"{len(banks)} history banks for {cfg.n_layers} layers")
        self.banks: list[Optional[Tensor]] = list(banks)
        self.left: list[Optional[Tensor]] = [None] * cfg.n_layers
        self.conv: list[Optional[Tensor]] = [None] * cfg.n_layers
        self.traces: list[list[Tensor]] = [[] for _ in range(cfg.n_layers)]
        self.offset = 0

    @property
    def left_len(self) -> int:
        return 0 if self.left[0] is None else self.left[0].shape[0]

    def append_left(self, layer: int, rows: Tensor) -> None:
        held = self.left[layer]
        joined = rows if held is None else concat([held, rows], axis=0)
        if self.cfg.left_chunks is not None:
            limit = self.cfg.left_chunks * self.cfg.chunk_frames
            if joined.shape[0] > limit:
                joined = joined[joined.shape[0] - limit :]
        self.left[layer] = joined

    def layer_traces(self) -> list[Tensor]:
        """Concatenated raw layer inputs seen so far (for future history banks)."""
        return [concat(tr, axis=0) if tr else None for tr in self.traces]


class ConformerLiteBlock(Module):
    def __init__(self, d: int, n_heads: int, d_ffn: int, rng: Rng, kernel: int = 3):
        self.ln_attn = LayerNorm(d)
        self.attn = MultiHeadAttention(d, n_heads, rng.child("attn"))
        self.ln_conv = LayerNorm(d)
        self.conv_w = Tensor(xavier_uniform(rng.child("conv"), kernel, 1, (kernel, d)), requires_grad=True)
        self.conv_b = Tensor(np.zeros(d), requires_grad=True)
        self.ln_ffn = LayerNorm(d)
        self.ffn = FeedForward(d, d_ffn, rng.child("ffn"))
        self.kernel = kernel

    def _conv(self, padded: Tensor, n_out: int) -> Tensor:
        # padded is (kernel-1+n_out, d) of post-norm rows; causal tap j looks back kernel-1-j
        acc = padded[0:n_out] * self.conv_w[0]
        for j in range(1, self.kernel):
            acc = acc + padded[j : j + n_out] * self.conv_w[j]
        return acc + self.conv_b

    def forward(
        self,
        x: Tensor,
        extra_kv: Optional[Tensor] = None,
        mask: Optional[np.ndarray] = None,
        conv_state: Optional[Tensor] = None,
    ) -> tuple[Tensor, Tensor]:
        """Returns (block output, post-norm conv rows for state carry-over)."""
        n = x.shape[0]
        kv_raw = x if extra_kv is None else concat([extra_kv, x], axis=0)
        x1 = x + self.attn(self.ln_attn(x), self.ln_attn(kv_raw), mask=mask)
        c_rows = self.ln_conv(x1)
        need = self.kernel - 1
        have = 0 if conv_state is None else conv_state.shape[0]
        pad = conv_state
        if have < need:  # sequence start: left-pad with zeros, matching the offline pass
            zeros = Tensor._wrap(np.zeros((need - have, x.shape[1]), dtype=x.data.dtype))
            pad = zeros if pad is None else concat([zeros, pad], axis=0)
        x2 = x1 + self._conv(concat([pad, c_rows], axis=0), n)
        x3 = x2 + self.ffn(self.ln_ffn(x2))
        return x3, c_rows


def _window_causal_mask(
    q_pos: np.ndarray, k_pos: np.ndarray, chunk_frames: int, left_chunks: Optional[int], n_free: int = 0
) -> np.ndarray:
    allowed = k_pos[None, :] <= q_pos[:, None]
    if left_chunks is not None:
        allowed &= (q_pos[:, None] // chunk_frames - k_pos[None, :] // chunk_frames) <= left_chunks
    if n_free:
        free = np.ones((q_pos.shape[0], n_free), dtype=bool)
        allowed = np.concatenate([free, allowed], axis=1)
    return allowed


class SpeechEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: Rng):
        self.cfg = cfg
        self.sub_proj = Linear(cfg.subsample_rate * cfg.d_feat, cfg.d_model, rng.child("subsample"))
        self.blocks = [
            ConformerLiteBlock(cfg.d_model, cfg.n_heads, cfg.d_ffn, rng.child(f"block{i}"), cfg.conv_kernel)
            for i in range(cfg.n_layers)
        ]
        self.out_norm = LayerNorm(cfg.d_model)

    # ---- front end -------------------------------------------------------
    def subsample(self, feat) -> Tensor:
        """Stack groups of 4 consecutive frames and project; length floor(T_in/4)."""
        feat = _as_features(feat)
        rate = self.cfg.subsample_rate
        t_in = feat.n_frames
        if t_in < rate:
            raise ShapeError(f"need at least {rate} input frames, got {t_in}")
        t_out = t_in // rate
        stacked = reshape(feat.frames[: t_out * rate], (t_out, rate * feat.d_feat))
        return self.sub_proj(stacked)

    def _stamp_positions(self, x: Tensor, offset: int) -> Tensor:
        codes = sinusoid_positions(offset, x.shape[0], self.cfg.d_model).astype(x.data.dtype)
        return x + Tensor._wrap(codes)

    # ---- full-sequence passes ---------------------------------------------
    def _run_full(
        self,
        x: Tensor,
        left_chunks: Optional[int],
        banks: Optional[Sequence[Optional[Tensor]]] = None,
        collect_traces: bool = False,
    ):
        n = x.shape[0]
        pos = np.arange(n)
        traces: list[Tensor] = []
        for i, block in enumerate(self.blocks):
            bank = banks[i] if banks is not None else None
            n_free = 0 if bank is None else bank.shape[0]
            mask = _window_causal_mask(pos, pos, self.cfg.chunk_frames, left_chunks, n_free)
            if collect_traces:
                traces.append(x)
            x, _ = block.forward(x, extra_kv=bank, mask=mask)
        out = self.out_norm(x)
        if collect_traces:
            return out, traces
        return out

    def encode_offline(self, feat) -> EncodedSeq:
        """Causal full-attention encoding of one utterance."""
        x = self._stamp_positions(self.subsample(feat), 0)
        hidden = self._run_full(x, left_chunks=None)
        return EncodedSeq(hidden, np.ones(hidden.shape[0], dtype=bool))

    def encode_long_speech(self, history: Sequence, current) -> EncodedSeq:
        """Encode history + current as one span; gradients stop at history frames.

        Each utterance is subsampled separately so the history/current frame
        boundary is exact; positions run over the concatenated timeline.  The
        returned sequence covers the whole span with ``grad_mask`` False on
        history positions; consumers read ``.current`` for the loss.
        """
        if not history:
            return self.encode_offline(current)
        spans = [self.subsample(FeatureSeq(stop_gradient(_as_features(h).frames))) for h in history]
        spans.append(self.subsample(current))
        lengths = [s.shape[0] for s in spans]
        x = self._stamp_positions(concat(spans, axis=0), 0)
        hidden = self._run_full(x, left_chunks=None)
        n_hist = sum(lengths[:-1])
        grad_mask = np.arange(hidden.shape[0]) >= n_hist
        return EncodedSeq(hidden, grad_mask, current_start=n_hist)

    def encode_streaming_full(
        self,
        feat,
        banks: Optional[Sequence[Optional[Tensor]]] = None,
        collect_traces: bool = False,
    ):
        """Whole-utterance pass under the streaming attention rules.

        Equals chunk-by-chunk encoding with a fresh cache to float precision;
        used for training streaming models and as the cache-consistency
        reference.
        """
        x = self._stamp_positions(self.subsample(feat), 0)
        out = self._run_full(x, self.cfg.left_chunks, banks=banks, collect_traces=collect_traces)
        if collect_traces:
            hidden, traces = out
            return EncodedSeq(hidden, np.ones(hidden.shape[0], dtype=bool)), traces
        return EncodedSeq(out, np.ones(out.shape[0], dtype=bool))

    # ---- chunked pass ------------------------------------------------------
    def new_cache(self, banks: Optional[Sequence[Optional[Tensor]]] = None) -> ChunkCache:
        return ChunkCache(self.cfg, banks)

    def encode_chunk(self, chunk_feat, cache: ChunkCache, n_valid: Optional[int] = None):
        """Encode exactly one chunk of input frames against the running cache.

        ``chunk_feat`` must hold ``chunk_frames * subsample_rate`` input frames
        (callers zero-pad the final chunk and pass ``n_valid`` so padded frames
        stay out of the cached traces).  Returns (chunk hidden, cache).
        """
        cfg = self.cfg
        feat = _as_features(chunk_feat)
        if cache.cfg is not cfg and cache.cfg != cfg:
            raise ShapeError("cache was built for a different encoder configuration")
        if feat.n_frames != cfg.chunk_input_frames:
            raise ShapeError(
                f"chunk needs exactly {cfg.chunk_input_frames} input frames, got {feat.n_frames}"
            )
        cf = cfg.chunk_frames
        n_valid = cf if n_valid is None else n_valid
        x = self._stamp_positions(self.subsample(feat), cache.offset)
        pos = np.arange(cache.offset, cache.offset + cf)
        for i, block in enumerate(self.blocks):
            bank = cache.banks[i]
            n_free = 0 if bank is None else bank.shape[0]
            left = cache.left[i]
            parts = []
            if bank is not None:
                parts.append(bank)
            if left is not None:
                parts.append(left)
            extra = concat(parts, axis=0) if parts else None
            n_left = 0 if left is None else left.shape[0]
            mask = np.concatenate(
                [
                    np.ones((cf, n_free + n_left), dtype=bool),
                    np.tril(np.ones((cf, cf), dtype=bool)),
                ],
                axis=1,
            )
            if n_valid:
                cache.traces[i].append(x[:n_valid] if n_valid < cf else x)
            next_x, c_rows = block.forward(x, extra_kv=extra, mask=mask, conv_state=cache.conv[i])
            cache.append_left(i, x)
            tail = self.cfg.conv_kernel - 1
            held = cache.conv[i]
            joined = c_rows if held is None else concat([held, c_rows], axis=0)
            cache.conv[i] = joined[max(0, joined.shape[0] - tail) :]
            x = next_x
        cache.offset += cf
        return self.out_norm(x), cache


# ---------------------------------------------------------------------------
# History downsampling
# ---------------------------------------------------------------------------


def downsampled_length(t_h: int, rate: int, mode: str) -> int:
    if mode == "none":
        return t_h
    if mode == "global_mean":
        return 1
    return -(-t_h // rate)


def downsample_history(
    h_his,
    rate: int,
    mode: str,
    rng: Optional[Rng] = None,
    training: bool = False,
) -> Tensor:
    """Shrink a (T_h, d) history trace to ceil(T_h / rate) rows.

    ``statistical`` takes per-block means (a partial final block is averaged
    over its true length); ``dilated`` picks one uniformly random frame per
    block; ``global_mean`` collapses everything to a single mean row; ``mix``
    flips a fair coin per call during training and always uses the statistical
    path at inference.  Results never carry gradients: banks are frozen.
    """
    data = h_his.data if isinstance(h_his, Tensor) else np.asarray(h_his)
    if data.ndim != 2 or data.shape[0] < 1:
        raise ShapeError(f"history must be (T_h, d) with T_h >= 1; got {data.shape}")
    if mode not in DOWNSAMPLE_MODES:
        raise ShapeError(f"unknown downsample mode {mode!r}")
    if mode == "none":
        return Tensor._wrap(data.copy())
    if mode == "global_mean":
        return Tensor._wrap(data.mean(axis=0, keepdims=True))
    if rate <= 0:
        raise ShapeError(f"downsample rate must be positive, got {rate}")
    if mode == "mix":
        if training:
            if rng is None:
                raise ShapeError("mix-mode training needs a generator")
            mode = "statistical" if rng.random() < 0.5 else "dilated"
        else:
            mode = "statistical"
    t_h = data.shape[0]
    starts = np.arange(0, t_h, rate)
    if mode == "statistical":
        sums = np.add.reduceat(data, starts, axis=0)
        counts = np.minimum(starts + rate, t_h) - starts
        return Tensor._wrap(sums / counts[:, None])
    if rng is None:
        raise ShapeError("dilated downsampling needs a generator")
    picks = np.array([int(rng.integers(s, min(s + rate, t_h))) for s in starts])
    return Tensor._wrap(data[picks].copy())


def build_history_bank(
    encodings: Sequence,
    cfg: EncoderConfig,
    rng: Optional[Rng] = None,
    training: bool = False,
) -> Optional[Tensor]:
    """Concatenate per-utterance state traces (session order) and downsample.

    ``encodings`` may hold Tensors, arrays, or EncodedSeq objects for one
    layer.  The result is frozen (no gradients) and immutable for the rest of
    the utterance's decoding; an empty list yields an empty bank (None).
    """
    rows = []
    for e in encodings:
        h = e.hidden if isinstance(e, EncodedSeq) else e
        rows.append(h.data if isinstance(h, Tensor) else np.asarray(h))
    rows = [r for r in rows if r.shape[0] > 0]
    if not rows:
        return None
    joined = np.concatenate(rows, axis=0)
    return downsample_history(joined, cfg.downsample_rate, cfg.downsample_mode, rng, training)
