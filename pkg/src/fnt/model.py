"""The full factorized transducer: encoder + predictors + joint + context.

One class covers the offline and streaming variants; the configuration picks
the vocabulary predictor backbone (causal transformer offline, recurrent when
streaming), the context source, and which integration paths are active.
``forward_losses`` produces the training objective for one utterance given
its history; ``decode_init`` / ``decode_advance`` / ``frame_scores`` expose
the stepwise surface the decoders drive.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .encoder import EncoderConfig, FeatureSeq, SpeechEncoder, build_history_bank
from .losses import LogitLattice, ctc_loss, lm_loss, total_loss, transducer_loss
from .nn import Linear, Module
from .predictor import (
    CONTEXT_SOURCES,
    BlankPredictor,
    ContextEmbeddings,
    ContextEncoder,
    ExternalContextProvider,
    JointBlank,
    VocabPredictorRecurrent,
    VocabPredictorTransformer,
    combine_vocab,
    context_encode,
    joint_log_posterior,
    utterance_summary,
)
from .rng import Rng
from .tensor import ShapeError, Tensor, concat, log_softmax, no_grad, reshape

__all__ = ["ModelConfig", "FntModel", "DecState"]


@dataclass
class ModelConfig:
    vocab_size: int = 50
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    d_blank: int = 32
    d_joint: int = 32
    predv_layers: int = 2
    predv_d: int = 32
    predv_heads: int = 2
    ctx_layers: int = 2
    ctx_d: int = 32
    ctx_heads: int = 2
    streaming: bool = False
    utterance_level: bool = False
    token_level: bool = False
    slongfnt_text: bool = False
    history_speech: bool = False
    context_source: str = "trained"
    beta_init: float = 1.0

    def __post_init__(self):
        if self.context_source not in CONTEXT_SOURCES:
            raise ShapeError(f"unknown context source {self.context_source!r}")
        if self.streaming and (self.utterance_level or self.token_level):
            raise ShapeError("utterance/token integration belongs to the offline predictor")
        if not self.streaming and self.slongfnt_text:
            raise ShapeError("concatenated context attention belongs to the streaming predictor")
        if self.context_source == "predv":
            if not self.streaming:
                raise ShapeError("predv context reuse requires the streaming predictor")

    @property
    def has_text_integration(self) -> bool:
        return self.utterance_level or self.token_level or self.slongfnt_text

    @property
    def d_ctx(self) -> int:
        return self.predv_d if self.context_source == "predv" else self.ctx_d

    @property
    def sos(self) -> int:
        return self.vocab_size


@dataclass
class DecState:
    """Per-hypothesis predictor state (token prefix determines it fully)."""

    blank_state: list
    blank_emb: Tensor  # (1, d_blank), hidden after the last consumed token
    vocab_state: object
    lm_row: Tensor  # (U,) LM log-probs for the next token


class FntModel(Module):
    def __init__(self, cfg: ModelConfig, rng: Rng):
        self.cfg = cfg
        u = cfg.vocab_size
        self.encoder = SpeechEncoder(cfg.encoder, rng.child("encoder"))
        self.blank_pred = BlankPredictor(u, cfg.d_blank, rng.child("blank"))
        self.joint = JointBlank(cfg.encoder.d_model, cfg.d_blank, cfg.d_joint, rng.child("joint"))
        self.ctc_head = Linear(cfg.encoder.d_model, u + 1, rng.child("ctc_head"))
        if cfg.streaming:
            self.vocab_pred = VocabPredictorRecurrent(
                u,
                cfg.predv_d,
                cfg.predv_layers,
                rng.child("predv"),
                d_ctx=cfg.d_ctx,
                slongfnt_text=cfg.slongfnt_text,
            )
        else:
            self.vocab_pred = VocabPredictorTransformer(
                u,
                cfg.predv_d,
                cfg.predv_layers,
                cfg.predv_heads,
                rng.child("predv"),
                d_ctx=cfg.d_ctx,
                utterance_level=cfg.utterance_level,
                token_level=cfg.token_level,
            )
        self.context_encoder = None
        self.external_provider = None
        if cfg.has_text_integration and cfg.context_source == "trained":
            self.context_encoder = ContextEncoder(u, cfg.ctx_d, cfg.ctx_layers, cfg.ctx_heads, rng.child("ctx"))
        if cfg.context_source == "external":
            self.external_provider = ExternalContextProvider(u, cfg.ctx_d, rng.child("provider").seed)
        self.beta = Tensor(np.array([cfg.beta_init]), requires_grad=True)

    # ---- context ----------------------------------------------------------
    def context_for(
        self,
        history_texts: Sequence[Sequence[int]],
        predv_rows: Optional[Sequence[np.ndarray]] = None,
    ) -> ContextEmbeddings:
        if not self.cfg.has_text_integration or not history_texts:
            return ContextEmbeddings.empty(self.cfg.d_ctx, self.cfg.context_source)
        if self.cfg.context_source == "predv" and predv_rows is None:
            # training-time reuse: teacher-forced hidden states, frozen like a cache
            predv_rows = []
            with no_grad():
                for seq in history_texts:
                    _, hiddens = self.vocab_pred.forward(seq)
                    predv_rows.append(hiddens.data.copy())
        return context_encode(
            history_texts,
            self.cfg.context_source,
            trained_encoder=self.context_encoder,
            external_provider=self.external_provider,
            predv_rows=predv_rows,
            sos=self.cfg.sos,
            d_ctx=self.cfg.d_ctx,
        )

    # ---- encoder dispatch ---------------------------------------------------
    def history_banks(self, history_feats: Sequence, rng: Optional[Rng] = None, training: bool = False):
        """Per-layer downsampled banks from bank-free passes over history audio."""
        if not history_feats:
            return None
        per_layer: list[list[Tensor]] = [[] for _ in range(self.cfg.encoder.n_layers)]
        with no_grad():
            for feat in history_feats:
                _, traces = self.encoder.encode_streaming_full(feat, collect_traces=True)
                for i, tr in enumerate(traces):
                    per_layer[i].append(tr)
        return [
            build_history_bank(rows, self.cfg.encoder, rng=rng, training=training) for rows in per_layer
        ]

    def encode_utterance(
        self,
        features,
        history_feats: Sequence = (),
        banks=None,
        rng: Optional[Rng] = None,
        training: bool = False,
    ) -> Tensor:
        """Current-utterance encoder states under the configured mode."""
        if self.cfg.streaming:
            if banks is None and self.cfg.history_speech and history_feats:
                banks = self.history_banks(history_feats, rng=rng, training=training)
            return self.encoder.encode_streaming_full(features, banks=banks).hidden
        if self.cfg.history_speech and history_feats:
            return self.encoder.encode_long_speech(list(history_feats), features).current
        return self.encoder.encode_offline(features).hidden

    # ---- training objective ---------------------------------------------------
    def lattice(self, h: Tensor, tokens: Sequence[int], ctx: ContextEmbeddings):
        """Joint posteriors over the (frame, label) grid for one utterance."""
        z_t_full = log_softmax(self.ctc_head(h), axis=-1)  # (T, U+1)
        g = self.blank_pred.forward_sequence(tokens)  # (L+1, d_blank)
        z_b = self.joint.forward(h, g)  # (T, L+1)
        z_l, _ = self.vocab_pred.forward(tokens, ctx)  # (L+1, U)
        t_n, l1 = z_b.shape
        z_v = combine_vocab(
            reshape(z_t_full, (t_n, 1, self.cfg.vocab_size + 1)),
            reshape(z_l, (1, l1, self.cfg.vocab_size)),
            self.beta,
        )
        logpost = joint_log_posterior(z_b, z_v)
        lattice = LogitLattice(logpost[..., 0], logpost[..., 1:])
        return lattice, z_t_full, z_l

    def forward_losses(
        self,
        features,
        tokens: Sequence[int],
        history_texts: Sequence[Sequence[int]] = (),
        history_feats: Sequence = (),
        lambda_lm: float = 0.1,
        lambda_ctc: float = 0.1,
        rng: Optional[Rng] = None,
        training: bool = True,
    ) -> dict:
        tokens = [int(t) for t in tokens]
        ctx = self.context_for(history_texts)
        feats = history_feats if self.cfg.history_speech else ()
        h = self.encode_utterance(features, history_feats=feats, rng=rng, training=training)
        lattice, z_t_full, z_l = self.lattice(h, tokens, ctx)
        l_trans = transducer_loss(lattice, tokens)
        l_ctc = ctc_loss(z_t_full, tokens)
        if tokens:
            l_lm = lm_loss(z_l[: len(tokens)], tokens)
        else:
            l_lm = Tensor(np.array(0.0))
        total = total_loss(l_trans, l_lm, l_ctc, lambda_lm, lambda_ctc)
        return {"total": total, "trans": l_trans, "lm": l_lm, "ctc": l_ctc, "lattice": lattice}

    def lm_logprobs(self, tokens: Sequence[int], ctx: Optional[ContextEmbeddings] = None) -> Tensor:
        """LM rows for [SOS]+tokens; used for perplexity and pre-training."""
        ctx = ctx if ctx is not None else ContextEmbeddings.empty(self.cfg.d_ctx, self.cfg.context_source)
        z_l, _ = self.vocab_pred.forward(tokens, ctx)
        return z_l

    # ---- stepwise decoding surface ---------------------------------------------
    def encoder_frame_scores(self, h: Tensor) -> Tensor:
        return log_softmax(self.ctc_head(h), axis=-1)

    def decode_init(self, ctx: Optional[ContextEmbeddings] = None) -> DecState:
        ctx = ctx if ctx is not None else ContextEmbeddings.empty(self.cfg.d_ctx, self.cfg.context_source)
        b_state = self.blank_pred.init_state()
        b_state, g = self.blank_pred.step(b_state, self.blank_pred.sos)
        v_state = self.vocab_pred.init_state(ctx)
        v_state, z_row, _ = self.vocab_pred.step(v_state, None)
        return DecState(b_state, g, v_state, z_row)

    def decode_advance(self, state: DecState, token: int) -> DecState:
        b_state, g = self.blank_pred.step(state.blank_state, int(token))
        v_state, z_row, _ = self.vocab_pred.step(state.vocab_state, int(token))
        return DecState(b_state, g, v_state, z_row)

    def frame_scores(self, h_t: Tensor, z_t_row: Tensor, state: DecState) -> np.ndarray:
        """Log posterior over [no-output] + vocabulary at one lattice node."""
        z_b = self.joint.forward(reshape(h_t, (1, -1)), state.blank_emb)
        z_v = combine_vocab(z_t_row, state.lm_row, self.beta)
        scores = concat([reshape(z_b, (1,)), z_v], axis=0)
        return log_softmax(scores, axis=-1).data

    def predv_trace(self, state: DecState) -> Optional[np.ndarray]:
        """Hidden rows accumulated during decoding (context reuse cache)."""
        rows = getattr(state.vocab_state, "hidden_rows", None)
        if rows is None:
            return None
        return np.stack(rows, axis=0) if rows else np.zeros((0, self.cfg.predv_d))

    # ---- checkpoint plumbing -----------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(arrays))
        extra = sorted(set(arrays) - set(own))
        if missing or extra:
            raise ShapeError(f"parameter names disagree; missing={missing}, unexpected={extra}")
        for name, p in own.items():
            incoming = arrays[name]
            if tuple(incoming.shape) != tuple(p.data.shape):
                raise ShapeError(
                    f"parameter {name}: checkpoint shape {incoming.shape} != model shape {p.data.shape}"
                )
            p.data = incoming.astype(p.data.dtype)
            p.grad = None
