"""Greedy, beam, and chunk-synchronous streaming decoding.

The beam is frame-synchronous with bounded within-frame emission rounds.  At
every round the union of finished-frame hypotheses and live continuations is
pruned to the beam width under a fixed tie-break (higher score first, then
lexicographically smaller token sequence), so ``beam_width=1`` reproduces the
greedy path exactly.  Hypotheses reaching an identical token sequence at the
same node are merged by adding their probabilities (log-sum-exp).

Streaming decode drives the chunked encoder with per-layer caches, builds the
per-layer history bank from previously decoded utterances of the session, and
obtains context embeddings on a worker thread so the chunk loop never blocks
mid-utterance.  Wall-clock accounting uses a simulated-arrival protocol:
chunk i of audio becomes available at (i+1) * chunk_duration, compute runs as
fast as the host allows, and the end latency of an utterance is the time from
the end of its audio until its final token is decoded.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .encoder import build_history_bank
from .model import DecState, FntModel
from .tensor import Tensor, no_grad

__all__ = [
    "DecodeConfig",
    "Hypothesis",
    "HistoryBuffer",
    "UtteranceDecode",
    "assemble_history",
    "update_history",
    "greedy_decode",
    "beam_decode",
    "streaming_decode",
    "HISTORY_TEXT_SOURCES",
]

HISTORY_TEXT_SOURCES = ("oracle", "hypothesis", "none")


@dataclass
class DecodeConfig:
    beam_width: int = 8
    n_his: int = 2
    max_symbols_per_frame: int = 5
    history_text_source: str = "hypothesis"
    frame_shift_s: float = 0.01
    downsample_rate: Optional[int] = None  # decode-time override of the bank rate
    downsample_mode: Optional[str] = None

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if self.n_his < 0:
            raise ValueError("n_his must be >= 0")
        if self.history_text_source not in HISTORY_TEXT_SOURCES:
            raise ValueError(f"unknown history text source {self.history_text_source!r}")


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    score: float
    state: DecState

    def key(self):
        return (-self.score, self.tokens)


def assemble_history(p: int, n_his: int, available_indices: Sequence[int]) -> list[int]:
    """The n_his largest available indices below p, in ascending order.

    Gaps in the numbering are skipped over: the immediately preceding
    *available* utterances count as history regardless of index distance.
    """
    below = sorted(i for i in set(available_indices) if i < p)
    return below[-n_his:] if n_his > 0 else []


class HistoryBuffer:
    """Per-session transcripts plus cached context artifacts.

    ``mode`` selects whether stored transcripts come from ground truth
    (oracle) or from this run's own decodes (hypothesis).
    """

    def __init__(self, mode: str = "hypothesis"):
        if mode not in ("oracle", "hypothesis"):
            raise ValueError(f"history buffer mode must be oracle|hypothesis, got {mode!r}")
        self.mode = mode
        self.transcripts: dict[int, tuple[int, ...]] = {}
        self.predv_rows: dict[int, np.ndarray] = {}
        self.enc_traces: dict[int, list[np.ndarray]] = {}

    def available(self) -> list[int]:
        return sorted(self.transcripts)

    def update(
        self,
        utt_index: int,
        transcript: Sequence[int],
        predv_rows: Optional[np.ndarray] = None,
        enc_traces: Optional[list[np.ndarray]] = None,
    ) -> None:
        if utt_index in self.transcripts:
            raise ValueError(f"utterance {utt_index} already recorded")
        self.transcripts[utt_index] = tuple(int(t) for t in transcript)
        if predv_rows is not None:
            self.predv_rows[utt_index] = predv_rows
        if enc_traces is not None:
            self.enc_traces[utt_index] = enc_traces

    def __len__(self) -> int:
        return len(self.transcripts)


def update_history(buffer: HistoryBuffer, utt_index: int, transcript: Sequence[int]) -> None:
    buffer.update(utt_index, transcript)


# ---------------------------------------------------------------------------
# Frame-synchronous search
# ---------------------------------------------------------------------------


def _extend_beam(
    model: FntModel,
    beam: list[Hypothesis],
    h_rows: Tensor,
    z_rows: Tensor,
    beam_width: int,
    max_symbols: int,
) -> list[Hypothesis]:
    """Advance the beam over the encoder frames in ``h_rows``."""
    for t in range(h_rows.shape[0]):
        h_t = h_rows[t]
        z_t = z_rows[t]
        done: dict[tuple, Hypothesis] = {}
        live: dict[tuple, Hypothesis] = {h.tokens: h for h in beam}
        for round_no in range(max_symbols + 1):
            if not live:
                break
            force_blank = round_no == max_symbols
            cands: list[tuple[tuple, float, Hypothesis, Optional[int]]] = []
            for hyp in live.values():
                scores = model.frame_scores(h_t, z_t, hyp.state)
                cands.append((hyp.tokens, hyp.score + float(scores[0]), hyp, None))
                if not force_blank:
                    for v in range(scores.shape[0] - 1):
                        cands.append(
                            (hyp.tokens + (v,), hyp.score + float(scores[1 + v]), hyp, v)
                        )
            new_live: dict[tuple, tuple[float, Hypothesis, int]] = {}
            for tokens, score, parent, tok in cands:
                if tok is None:
                    held = done.get(tokens)
                    if held is None:
                        done[tokens] = Hypothesis(tokens, score, parent.state)
                    else:
                        held.score = float(np.logaddexp(held.score, score))
                else:
                    # distinct parents cannot collide within a round; guard anyway
                    held = new_live.get(tokens)
                    if held is None or score > held[0]:
                        new_live[tokens] = (score, parent, tok)
            pool = [("done", tokens, hyp.score) for tokens, hyp in done.items()]
            pool += [("live", tokens, rec[0]) for tokens, rec in new_live.items()]
            pool.sort(key=lambda e: (-e[2], e[1], e[0] != "done"))
            kept = pool[:beam_width]
            done = {tokens: done[tokens] for kind, tokens, _ in kept if kind == "done"}
            live = {}
            for kind, tokens, _ in kept:
                if kind == "live":
                    score, parent, tok = new_live[tokens]
                    live[tokens] = Hypothesis(tokens, score, model.decode_advance(parent.state, tok))
        beam = sorted(done.values(), key=Hypothesis.key)[:beam_width]
    return beam


def beam_decode(
    encoded,
    model: FntModel,
    ctx=None,
    beam_width: int = 8,
    max_symbols: int = 5,
) -> Hypothesis:
    """Best hypothesis over the encoded utterance."""
    h_rows = encoded.hidden if hasattr(encoded, "hidden") else encoded
    with no_grad():
        z_rows = model.encoder_frame_scores(h_rows)
        beam = [Hypothesis((), 0.0, model.decode_init(ctx))]
        beam = _extend_beam(model, beam, h_rows, z_rows, beam_width, max_symbols)
    return min(beam, key=Hypothesis.key)


def greedy_decode(encoded, model: FntModel, ctx=None, max_symbols: int = 5) -> list[int]:
    """Frame-synchronous argmax decoding.

    Ties break toward the no-output symbol and then the lowest token index,
    matching the beam's tie-break, so this equals ``beam_decode`` at width 1.
    """
    h_rows = encoded.hidden if hasattr(encoded, "hidden") else encoded
    with no_grad():
        z_rows = model.encoder_frame_scores(h_rows)
        state = model.decode_init(ctx)
        tokens: list[int] = []
        for t in range(h_rows.shape[0]):
            emitted = 0
            while True:
                scores = model.frame_scores(h_rows[t], z_rows[t], state)
                best = int(np.argmax(scores))
                if best == 0 or emitted >= max_symbols:
                    break
                tokens.append(best - 1)
                state = model.decode_advance(state, best - 1)
                emitted += 1
    return tokens


# ---------------------------------------------------------------------------
# Streaming session decode
# ---------------------------------------------------------------------------


@dataclass
class UtteranceDecode:
    utterance_index: int
    tokens: tuple[int, ...]
    score: float
    chunk_timestamps: list[float] = field(default_factory=list)
    end_latency: float = 0.0
    audio_duration: float = 0.0


def _pad_chunks(features: np.ndarray, chunk_input: int) -> list[tuple[np.ndarray, int]]:
    """Split into fixed-size chunks; the final one is zero-padded to size."""
    chunks = []
    t_in = features.shape[0]
    for start in range(0, t_in, chunk_input):
        block = features[start : start + chunk_input]
        n_valid_in = block.shape[0]
        if n_valid_in < chunk_input:
            pad = np.zeros((chunk_input - n_valid_in, features.shape[1]), dtype=features.dtype)
            block = np.concatenate([block, pad], axis=0)
        chunks.append((block, n_valid_in))
    return chunks


def _history_texts(buffer: HistoryBuffer, utterances_by_index, hist_idx, source: str):
    if source == "none":
        return []
    if source == "oracle":
        return [tuple(utterances_by_index[i].tokens) for i in hist_idx]
    return [buffer.transcripts[i] for i in hist_idx]


def streaming_decode(
    model: FntModel,
    utterances: Sequence,
    cfg: DecodeConfig,
    dilated_rng=None,
) -> list[UtteranceDecode]:
    """Decode a session chunk-synchronously, threading history across utterances.

    ``utterances`` provide ``utterance_index``, ``features`` (T_in, d_feat)
    and ``tokens`` (reference transcript, used only in oracle mode).  They
    must arrive in ascending index order.  Context embeddings for utterance p
    are computed on a separate worker from the history of utterances < p and
    are awaited before p's first chunk is processed.
    """
    if not model.cfg.streaming:
        raise ValueError("streaming decode needs a streaming-mode model")
    enc_cfg = model.cfg.encoder
    if cfg.downsample_rate is not None or cfg.downsample_mode is not None:
        enc_cfg = replace(
            enc_cfg,
            downsample_rate=cfg.downsample_rate or enc_cfg.downsample_rate,
            downsample_mode=cfg.downsample_mode or enc_cfg.downsample_mode,
        )
    buffer = HistoryBuffer("hypothesis" if cfg.history_text_source != "oracle" else "oracle")
    by_index = {u.utterance_index: u for u in utterances}
    chunk_dur = enc_cfg.chunk_input_frames * cfg.frame_shift_s
    results = []
    last_index = None
    with ThreadPoolExecutor(max_workers=1) as pool, no_grad():
        for utt in utterances:
            p = utt.utterance_index
            if last_index is not None and p <= last_index:
                raise ValueError(f"session order violated: {p} after {last_index}")
            last_index = p
            feats = np.asarray(utt.features)
            duration = feats.shape[0] * cfg.frame_shift_s
            setup_start = time.perf_counter()
            hist_idx = assemble_history(p, cfg.n_his, buffer.available())
            texts = _history_texts(buffer, by_index, hist_idx, cfg.history_text_source)
            predv_rows = None
            if model.cfg.context_source == "predv" and texts:
                if cfg.history_text_source == "oracle":
                    predv_rows = None  # teacher-forced recompute inside context_for
                else:
                    predv_rows = [buffer.predv_rows[i] for i in hist_idx]
            ctx_future = pool.submit(_timed_context, model, texts, predv_rows)
            banks = None
            if model.cfg.history_speech and hist_idx:
                per_layer = [
                    [buffer.enc_traces[i][layer] for i in hist_idx]
                    for layer in range(enc_cfg.n_layers)
                ]
                banks = [
                    build_history_bank(rows, enc_cfg, rng=dilated_rng, training=False)
                    for rows in per_layer
                ]
            bank_elapsed = time.perf_counter() - setup_start
            ctx, ctx_elapsed = ctx_future.result()
            setup_elapsed = max(bank_elapsed, ctx_elapsed)  # bank and context run in parallel

            cache = model.encoder.new_cache(banks=banks)
            beam = [Hypothesis((), 0.0, model.decode_init(ctx))]
            clock = setup_elapsed
            timestamps = []
            for i, (block, n_valid_in) in enumerate(_pad_chunks(feats, enc_cfg.chunk_input_frames)):
                arrival = min((i + 1) * chunk_dur, duration)
                clock = max(clock, arrival)
                n_valid = n_valid_in // enc_cfg.subsample_rate
                if n_valid == 0:
                    # trailing sliver shorter than one encoder frame: no new
                    # outputs, but the decoder still hears the audio out
                    timestamps.append(clock)
                    continue
                t0 = time.perf_counter()
                h_chunk, cache = model.encoder.encode_chunk(Tensor(block), cache, n_valid=n_valid)
                h_valid = h_chunk[:n_valid] if n_valid < enc_cfg.chunk_frames else h_chunk
                z_rows = model.encoder_frame_scores(h_valid)
                beam = _extend_beam(
                    model, beam, h_valid, z_rows, cfg.beam_width, cfg.max_symbols_per_frame
                )
                clock += time.perf_counter() - t0
                timestamps.append(clock)
            best = min(beam, key=Hypothesis.key)
            record = UtteranceDecode(
                utterance_index=p,
                tokens=best.tokens,
                score=best.score,
                chunk_timestamps=timestamps,
                end_latency=timestamps[-1] - duration if timestamps else 0.0,
                audio_duration=duration,
            )
            results.append(record)
            transcript = tuple(utt.tokens) if buffer.mode == "oracle" else best.tokens
            buffer.update(
                p,
                transcript,
                predv_rows=model.predv_trace(best.state),
                enc_traces=[t.data.copy() for t in cache.layer_traces()],
            )
    return results


def _timed_context(model: FntModel, texts, predv_rows):
    t0 = time.perf_counter()
    with no_grad():
        ctx = model.context_for(texts, predv_rows=predv_rows)
    return ctx, time.perf_counter() - t0
