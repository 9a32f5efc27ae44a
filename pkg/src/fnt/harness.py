"""Training, evaluation, latency measurement, and attention inspection.

Training is plain stochastic gradient descent with global gradient-norm
clipping and a fixed step size; every random decision is a pure function of
(seed, step), so runs are bit-reproducible and resuming from a checkpoint
replays the remaining steps exactly.  History transcripts during training are
always the reference ones; the history length for each utterance is drawn
uniformly from {0..n_his}.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .corpus import (
    Dataset,
    confusable_positions,
    generate_text_corpus,
    load_dataset,
    sample_nhis_train,
)
from .decoder import (
    DecodeConfig,
    HistoryBuffer,
    assemble_history,
    beam_decode,
    streaming_decode,
)
from .encoder import FeatureSeq
from .losses import lm_loss
from .model import FntModel
from .rng import Rng
from .tensor import ShapeError, Tensor, no_grad, set_default_dtype

__all__ = [
    "Metrics",
    "TrainingDivergedError",
    "wer",
    "levenshtein",
    "align_tokens",
    "train",
    "evaluate",
    "stream_evaluate",
    "measure_latency",
    "dump_attention",
    "build_model",
    "load_model",
]


class TrainingDivergedError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Word error rate
# ---------------------------------------------------------------------------


def levenshtein(ref: Sequence, hyp: Sequence) -> int:
    m, n = len(ref), len(hyp)
    dp = list(range(n + 1))
    for i in range(1, m + 1):
        prev = dp[0]
        dp[0] = i
        for j in range(1, n + 1):
            tmp = dp[j]
            if ref[i - 1] == hyp[j - 1]:
                dp[j] = prev
            else:
                dp[j] = 1 + min(prev, dp[j], dp[j - 1])
            prev = tmp
    return dp[n]


def wer(ref_tokens: Sequence, hyp_tokens: Sequence) -> float:
    """Edit distance (sub+ins+del) divided by the reference length."""
    if len(ref_tokens) == 0:
        raise ValueError("reference must be non-empty")
    return levenshtein(ref_tokens, hyp_tokens) / len(ref_tokens)


def align_tokens(ref: Sequence[int], hyp: Sequence[int]) -> list[Optional[int]]:
    """For each reference position, the aligned hypothesis token (None = deleted)."""
    m, n = len(ref), len(hyp)
    dp = np.zeros((m + 1, n + 1), dtype=np.int64)
    dp[:, 0] = np.arange(m + 1)
    dp[0, :] = np.arange(n + 1)
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            dp[i, j] = min(dp[i - 1, j - 1] + cost, dp[i - 1, j] + 1, dp[i, j - 1] + 1)
    out: list[Optional[int]] = [None] * m
    i, j = m, n
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dp[i, j] == dp[i - 1, j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1):
            out[i - 1] = hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and dp[i, j] == dp[i - 1, j] + 1:
            out[i - 1] = None
            i -= 1
        else:
            j -= 1
    return out


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class Metrics:
    wer: float = 0.0
    confusable_keyword_error_rate: float = 0.0
    lm_perplexity: float = 0.0
    n_utterances: int = 0
    n_ref_tokens: int = 0
    n_confusable: int = 0
    end_latencies: list[float] = field(default_factory=list)

    @property
    def mean_end_latency(self) -> float:
        return float(np.mean(self.end_latencies)) if self.end_latencies else 0.0

    @property
    def median_end_latency(self) -> float:
        return float(np.median(self.end_latencies)) if self.end_latencies else 0.0

    def to_dict(self, with_latency: bool = False) -> dict:
        out = {
            "wer": self.wer,
            "confusable_keyword_error_rate": self.confusable_keyword_error_rate,
            "lm_perplexity": self.lm_perplexity,
            "n_utterances": self.n_utterances,
            "n_ref_tokens": self.n_ref_tokens,
            "n_confusable": self.n_confusable,
        }
        if with_latency:
            out["end_latencies"] = self.end_latencies
            out["mean_end_latency"] = self.mean_end_latency
            out["median_end_latency"] = self.median_end_latency
        return out


# ---------------------------------------------------------------------------
# Model construction
# ---------------------------------------------------------------------------


def _set_dtype(name: str) -> None:
    if name not in ("float32", "float64"):
        raise ValueError(f"train dtype must be float32|float64, got {name!r}")
    set_default_dtype(np.float32 if name == "float32" else np.float64)


def build_model(config: ExperimentConfig) -> FntModel:
    _set_dtype(config.train.dtype)
    return FntModel(config.model_config(), Rng(config.train.seed).child("model"))


def load_model(ckpt_path) -> tuple[FntModel, ExperimentConfig, dict]:
    meta, arrays = load_checkpoint(ckpt_path)
    config = ExperimentConfig.from_ini(meta["config_ini"])
    model = build_model(config)
    model.load_state(arrays)
    return model, config, meta


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    return math.sqrt(total)


def _sgd_step(params, lr: float, clip_norm: float) -> float:
    norm = _global_grad_norm(params)
    scale = lr if norm <= clip_norm or norm == 0.0 else lr * clip_norm / norm
    for p in params:
        if p.grad is not None:
            p.data = p.data - (scale * p.grad).astype(p.data.dtype)
        p.grad = None
    return norm


def _history_for(session, pos: int, n: int):
    """The n immediately preceding generated utterances (ascending)."""
    prior = session.utterances[:pos]
    take = prior[-n:] if n > 0 else []
    texts = [u.tokens for u in take]
    feats = [FeatureSeq(Tensor(u.features)) for u in take]
    return texts, feats


def _pretrain_predv(model: FntModel, config: ExperimentConfig, log) -> None:
    """Cross-entropy pre-training of the vocabulary predictor on a text pool.

    The pool keeps session structure, so models with text integration also
    see history transcripts here (drawn with the same {0..n_his} rule as
    joint training) and the context encoder trains along with the predictor.
    """
    pool_seed = Rng(config.train.seed).child("pretrain-data").seed
    sessions = generate_text_corpus(config.gen, pool_seed, config.train.pretrain_sessions)
    pool = [(s, i) for s in sessions for i in range(len(s.utterances))]
    params = list(model.vocab_pred.parameters())
    if model.context_encoder is not None:
        params += list(model.context_encoder.parameters())
    root = Rng(config.train.seed).child("pretrain")
    for step in range(config.train.pretrain_steps):
        r = root.child(f"step{step}")
        session, pos = pool[int(r.integers(0, len(pool)))]
        tokens = session.utterances[pos].tokens
        n = sample_nhis_train(config.data.n_his, r.child("nhis"))
        texts = [u.tokens for u in session.utterances[:pos][-n:]] if n else []
        ctx = model.context_for(texts)
        z, _ = model.vocab_pred.forward(tokens, ctx)
        loss = lm_loss(z[: len(tokens)], tokens)
        if not np.isfinite(loss.data).all():
            raise TrainingDivergedError(f"pre-training loss diverged at step {step}")
        loss.backward()
        _sgd_step(params, config.train.pretrain_lr, config.train.clip_norm)
        log({"phase": "pretrain", "step": step, "lm": float(loss.item())})


def train(
    config: ExperimentConfig,
    out_dir,
    dataset: Optional[Dataset] = None,
    resume_from=None,
) -> Path:
    """Train per the configuration; returns the final checkpoint path.

    Stage one (optional) pre-trains the vocabulary predictor on a synthetic
    text pool; stage two optimizes the combined objective with reference
    (oracle) history transcripts and a per-utterance history length drawn from
    {0..n_his}.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if dataset is None:
        dataset = load_dataset(config.data.dataset)
    model = build_model(config)
    start_step = 0
    if resume_from is not None:
        meta, arrays = load_checkpoint(resume_from)
        model.load_state(arrays)
        start_step = int(meta["step"])
    (out / "config.ini").write_text(config.to_ini(), encoding="utf-8")
    log_path = out / "train_log.jsonl"
    log_f = open(log_path, "a" if resume_from else "w", encoding="utf-8")

    def log(record: dict) -> None:
        log_f.write(json.dumps(record, sort_keys=True) + "\n")

    try:
        if config.train.pretrain_steps > 0 and start_step == 0:
            _pretrain_predv(model, config, log)
        sessions = dataset.split_sessions("train")
        if not sessions:
            raise ValueError("dataset has no training sessions")
        pool = [(s, i) for s in sessions for i in range(len(s.utterances))]
        params = model.parameters()
        root = Rng(config.train.seed).child("train")
        ckpt_path = out / "checkpoint.bin"
        for step in range(start_step, config.train.steps):
            r = root.child(f"step{step}")
            picks = [int(r.integers(0, len(pool))) for _ in range(config.train.batch_size)]
            stats = {"total": 0.0, "trans": 0.0, "lm": 0.0, "ctc": 0.0}
            for j, pick in enumerate(picks):
                session, pos = pool[pick]
                utt = session.utterances[pos]
                n = sample_nhis_train(config.data.n_his, r.child(f"nhis{j}"))
                texts, feats = _history_for(session, pos, n)
                try:
                    losses = model.forward_losses(
                        FeatureSeq(Tensor(utt.features)),
                        utt.tokens,
                        history_texts=texts,
                        history_feats=feats,
                        lambda_lm=config.loss.lambda_lm,
                        lambda_ctc=config.loss.lambda_ctc,
                        rng=r.child(f"mix{j}"),
                        training=True,
                    )
                except ShapeError as e:
                    if "non-finite" in str(e):
                        raise TrainingDivergedError(f"loss diverged at step {step}") from e
                    raise
                scaled = losses["total"] * (1.0 / config.train.batch_size)
                if not np.isfinite(scaled.data).all():
                    raise TrainingDivergedError(f"loss diverged at step {step}")
                scaled.backward()
                for k in stats:
                    stats[k] += float(losses[k].item()) / config.train.batch_size
            _sgd_step(params, config.train.lr, config.train.clip_norm)
            log({"phase": "train", "step": step, **{k: stats[k] for k in sorted(stats)}})
            if config.train.save_every and (step + 1) % config.train.save_every == 0:
                _save(model, config, step + 1, ckpt_path)
        _save(model, config, config.train.steps, ckpt_path)
        return ckpt_path
    finally:
        log_f.close()


def _save(model: FntModel, config: ExperimentConfig, step: int, path: Path) -> None:
    save_checkpoint(path, model.state_dict(), {"config_ini": config.to_ini(), "step": step})


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _decode_offline_session(model, session, decode: DecodeConfig, history_mode: str):
    """Sequential per-session decode honoring history assembly; yields records."""
    buffer = HistoryBuffer("oracle" if history_mode == "oracle" else "hypothesis")
    by_index = {u.utterance_index: u for u in session.utterances}
    records = []
    for utt in session.utterances:
        hist_idx = assemble_history(utt.utterance_index, decode.n_his, buffer.available())
        if history_mode == "none":
            texts = []
        elif history_mode == "oracle":
            texts = [by_index[i].tokens for i in hist_idx]
        else:
            texts = [buffer.transcripts[i] for i in hist_idx]
        with no_grad():
            ctx = model.context_for(texts)
            feats = (
                [FeatureSeq(Tensor(by_index[i].features)) for i in hist_idx]
                if model.cfg.history_speech
                else ()
            )
            h = model.encode_utterance(
                FeatureSeq(Tensor(utt.features)), history_feats=feats, training=False
            )
            best = beam_decode(h, model, ctx, decode.beam_width, decode.max_symbols_per_frame)
        records.append((utt, best.tokens))
        stored = utt.tokens if buffer.mode == "oracle" else best.tokens
        buffer.update(utt.utterance_index, stored)
    return records


def _lm_perplexity(model: FntModel, sessions) -> float:
    total, count = 0.0, 0
    with no_grad():
        for session in sessions:
            for utt in session.utterances:
                if not utt.tokens:
                    continue
                z = model.lm_logprobs(utt.tokens)
                picked = z.data[np.arange(len(utt.tokens)), np.array(utt.tokens)]
                total -= float(picked.sum())
                count += len(utt.tokens)
    return float(np.exp(total / count)) if count else float("nan")


def _score_records(records, n_pairs: int) -> Metrics:
    edits = ref_len = 0
    conf_err = conf_n = 0
    n_utts = 0
    for utt, hyp in records:
        n_utts += 1
        edits += levenshtein(utt.tokens, hyp)
        ref_len += len(utt.tokens)
        spots = confusable_positions(utt.tokens, n_pairs)
        if spots:
            aligned = align_tokens(utt.tokens, hyp)
            for pos in spots:
                conf_n += 1
                if aligned[pos] != utt.tokens[pos]:
                    conf_err += 1
    return Metrics(
        wer=edits / ref_len if ref_len else 0.0,
        confusable_keyword_error_rate=conf_err / conf_n if conf_n else 0.0,
        n_utterances=n_utts,
        n_ref_tokens=ref_len,
        n_confusable=conf_n,
    )


def evaluate(
    model: FntModel,
    dataset: Dataset,
    history_mode: str,
    n_his: int,
    beam_width: int = 8,
    max_symbols: int = 5,
    split: str = "test",
) -> tuple[Metrics, list[dict]]:
    """Offline sequential decode of every session in the split."""
    if history_mode not in ("oracle", "hypothesis", "none"):
        raise ValueError(f"history_mode must be oracle|hypothesis|none, got {history_mode!r}")
    decode = DecodeConfig(
        beam_width=beam_width,
        n_his=0 if history_mode == "none" else n_his,
        max_symbols_per_frame=max_symbols,
        history_text_source=history_mode if history_mode != "none" else "none",
    )
    sessions = dataset.split_sessions(split)
    all_records = []
    out_records = []
    for session in sessions:
        for utt, hyp in _decode_offline_session(model, session, decode, history_mode):
            all_records.append((utt, hyp))
            out_records.append(
                {
                    "session_id": utt.session_id,
                    "utterance_index": utt.utterance_index,
                    "tokens": list(hyp),
                    "text": " ".join(str(t) for t in hyp),
                    "chunk_timestamps": [],
                    "end_latency": None,
                }
            )
    metrics = _score_records(all_records, dataset.config.n_pairs)
    metrics.lm_perplexity = _lm_perplexity(model, sessions)
    return metrics, out_records


def stream_evaluate(
    model: FntModel,
    dataset: Dataset,
    decode: DecodeConfig,
    split: str = "test",
) -> tuple[Metrics, list[dict]]:
    """Chunk-synchronous decode with latency accounting."""
    sessions = dataset.split_sessions(split)
    by_key = {}
    records = []
    out_records = []
    for session in sessions:
        by_index = {u.utterance_index: u for u in session.utterances}
        for rec in streaming_decode(model, session.utterances, decode):
            utt = by_index[rec.utterance_index]
            records.append((utt, rec.tokens))
            out_records.append(
                {
                    "session_id": session.session_id,
                    "utterance_index": rec.utterance_index,
                    "tokens": list(rec.tokens),
                    "text": " ".join(str(t) for t in rec.tokens),
                    "chunk_timestamps": rec.chunk_timestamps,
                    "end_latency": rec.end_latency,
                }
            )
    metrics = _score_records(records, dataset.config.n_pairs)
    metrics.lm_perplexity = _lm_perplexity(model, sessions)
    metrics.end_latencies = [r["end_latency"] for r in out_records]
    return metrics, out_records


def measure_latency(
    model: FntModel,
    dataset: Dataset,
    decode: DecodeConfig,
    split: str = "test",
    repeats: int = 1,
) -> list[list[float]]:
    """Per-utterance end latencies under simulated real-time arrival.

    Returns one list per repeat (medians across repeats damp scheduler noise).
    """
    if not model.cfg.streaming:
        raise ValueError("latency measurement needs a streaming checkpoint")
    sessions = dataset.split_sessions(split)
    runs = []
    for _ in range(repeats):
        latencies = []
        for session in sessions:
            for rec in streaming_decode(model, session.utterances, decode):
                latencies.append(rec.end_latency)
        runs.append(latencies)
    return runs


# ---------------------------------------------------------------------------
# Attention inspection
# ---------------------------------------------------------------------------


def dump_attention(
    model: FntModel,
    dataset: Dataset,
    session_id: str,
    utterance_index: int,
    out_dir,
    n_his: int = 2,
    heatmap: bool = False,
) -> list[Path]:
    """Write per-layer query x context attention weight matrices.

    Rows are the current utterance's predictor inputs (SOS + reference
    tokens); columns are the history context positions.  Requires a model
    with token-level integration or streaming context attention.
    """
    if not (model.cfg.token_level or model.cfg.slongfnt_text):
        raise ValueError("attention dump requires token-level or streaming context integration")
    session = next((s for s in dataset.sessions if s.session_id == session_id), None)
    if session is None:
        raise ValueError(f"unknown session {session_id!r}")
    by_index = {u.utterance_index: u for u in session.utterances}
    if utterance_index not in by_index:
        raise ValueError(f"session {session_id} has no utterance {utterance_index}")
    utt = by_index[utterance_index]
    hist_idx = assemble_history(utterance_index, n_his, sorted(by_index))
    texts = [by_index[i].tokens for i in hist_idx]
    with no_grad():
        ctx = model.context_for(texts)
        if ctx.is_empty:
            raise ValueError("no history available; attention would be empty")
        _, _, maps = model.vocab_pred.forward(utt.tokens, ctx, collect_attn=True)
    sos = model.cfg.sos
    row_labels = ["<sos>"] + [str(t) for t in utt.tokens]
    col_labels = ["<sos>" if t == sos else str(t) for t in ctx.labels]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for layer, weights in enumerate(maps):
        path = out / f"attention_layer{layer:02d}.tsv"
        with open(path, "w", encoding="utf-8") as f:
            f.write("query\t" + "\t".join(col_labels) + "\n")
            for label, row in zip(row_labels, weights):
                f.write(label + "\t" + "\t".join(f"{v:.6f}" for v in row) + "\n")
        paths.append(path)
        if heatmap:
            paths.append(_render_heatmap(weights, row_labels, col_labels, out, layer))
    return paths


def _render_heatmap(weights, row_labels, col_labels, out: Path, layer: int) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(max(4, len(col_labels) * 0.4), max(3, len(row_labels) * 0.35)))
    ax.imshow(weights, aspect="auto", cmap="viridis")
    ax.set_xticks(range(len(col_labels)), col_labels, rotation=90, fontsize=6)
    ax.set_yticks(range(len(row_labels)), row_labels, fontsize=6)
    ax.set_xlabel("history context")
    ax.set_ylabel("current tokens")
    path = out / f"attention_layer{layer:02d}.png"
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
