"""Alignment-lattice losses and their enumeration oracles.

The transducer loss sums every monotonic interleaving of label emissions and
no-output steps over a (frame x label) grid; the CTC loss sums every frame
labeling that collapses to the target.  Both are differentiable through
custom backward rules derived from the forward/backward occupancy grids, and
both are paired with brute-force enumerators used as independent oracles on
small instances.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels as K
from .tensor import ShapeError, Tensor, _make, gather_rows, tmean

__all__ = [
    "LogitLattice",
    "OutputAlphabet",
    "TargetSeq",
    "BudgetError",
    "InfeasibleTargetError",
    "transducer_loss",
    "brute_force_transducer",
    "count_transducer_paths",
    "ctc_loss",
    "brute_force_ctc",
    "ctc_min_frames",
    "lm_loss",
    "total_loss",
]


class BudgetError(ValueError):
    """Enumeration was asked for an instance beyond its size budget."""


class InfeasibleTargetError(ValueError):
    """The target cannot be emitted within the given number of frames."""


@dataclass(frozen=True)
class OutputAlphabet:
    """Slot layout of the two blank symbols.

    The transducer no-output symbol occupies slot 0 of the joint posterior;
    the CTC separator occupies the extra final slot of the (U+1)-wide encoder
    projection.  They are distinct symbols with distinct homes.
    """

    vocab_size: int

    @property
    def transducer_blank(self) -> int:
        return 0

    @property
    def ctc_blank(self) -> int:
        return self.vocab_size


@dataclass(frozen=True)
class TargetSeq:
    tokens: tuple[int, ...]

    def __init__(self, tokens: Sequence[int]):
        object.__setattr__(self, "tokens", tuple(int(t) for t in tokens))

    def __len__(self) -> int:
        return len(self.tokens)

    def validate(self, vocab_size: int) -> None:
        for t in self.tokens:
            if not 0 <= t < vocab_size:
                raise ShapeError(f"target token {t} outside vocabulary of size {vocab_size}")


def _as_target(target) -> TargetSeq:
    return target if isinstance(target, TargetSeq) else TargetSeq(target)


@dataclass
class LogitLattice:
    """Per-(t, l) log-probabilities feeding the transducer loss.

    ``blank_logprob`` is (T, L+1); ``vocab_logprob`` is (T, L+1, U).  Rows are
    joint posteriors, so exp(blank) + sum_v exp(vocab) = 1 at every node.
    """

    blank_logprob: Tensor
    vocab_logprob: Tensor

    def __post_init__(self):
        if self.blank_logprob.ndim != 2 or self.vocab_logprob.ndim != 3:
            raise ShapeError(
                f"lattice needs (T, L+1) and (T, L+1, U); got "
                f"{self.blank_logprob.shape} and {self.vocab_logprob.shape}"
            )
        if self.blank_logprob.shape != self.vocab_logprob.shape[:2]:
            raise ShapeError(
                f"lattice grids disagree: {self.blank_logprob.shape} vs {self.vocab_logprob.shape}"
            )
        if self.T < 1:
            raise ShapeError("lattice needs at least one frame")

    @property
    def T(self) -> int:
        return self.blank_logprob.shape[0]

    @property
    def L(self) -> int:
        return self.blank_logprob.shape[1] - 1

    @property
    def U(self) -> int:
        return self.vocab_logprob.shape[2]


def _gathered_label_scores(vocab64: np.ndarray, tokens: tuple[int, ...]) -> np.ndarray:
    """vy[t, l] = log P(label y_{l+1} | t, l); final column is unreachable."""
    T, L1, _ = vocab64.shape
    vy = np.full((T, L1), K.NEG_INF)
    if tokens:
        vy[:, : len(tokens)] = vocab64[:, np.arange(len(tokens)), np.array(tokens)]
    return vy


def transducer_loss(lattice: LogitLattice, target) -> Tensor:
    """Negative log-likelihood of the target over all monotonic alignments."""
    target = _as_target(target)
    target.validate(lattice.U)
    if len(target) != lattice.L:
        raise ShapeError(f"lattice built for L={lattice.L}, target has {len(target)} tokens")
    blank, vocab = lattice.blank_logprob, lattice.vocab_logprob
    if not (np.isfinite(blank.data).all() and np.isfinite(vocab.data).all()):
        raise ShapeError("non-finite lattice entries")
    b64 = blank.data.astype(np.float64)
    v64 = vocab.data.astype(np.float64)
    vy = _gathered_label_scores(v64, target.tokens)
    alpha = K.transducer_alpha(b64, vy)
    beta = K.transducer_beta(b64, vy)
    log_z = beta[0, 0]
    T, L = lattice.T, lattice.L

    def backward(g):
        g = float(g.reshape(-1)[0])
        # blank-edge occupancy: (t, l) -> (t+1, l), plus the final no-output step
        occ_b = np.zeros_like(b64)
        if T > 1:
            occ_b[:-1] = np.exp(alpha[:-1] + b64[:-1] + beta[1:] - log_z)
        occ_b[T - 1, L] = np.exp(alpha[T - 1, L] + b64[T - 1, L] - log_z)
        # label-edge occupancy: (t, l) -> (t, l+1)
        occ_v = np.zeros_like(v64)
        if L > 0:
            occ = np.exp(alpha[:, :L] + vy[:, :L] + beta[:, 1:] - log_z)
            occ_v[:, np.arange(L), np.array(target.tokens)] = occ
        gb = (-g) * occ_b
        gv = (-g) * occ_v
        return gb.astype(blank.dtype), gv.astype(vocab.dtype)

    out = np.asarray(-log_z, dtype=blank.dtype)
    return _make(out, (blank, vocab), backward)


def count_transducer_paths(T: int, L: int) -> int:
    """Monotonic alignments of L labels into T frames (final step is no-output)."""
    import math

    return math.comb(T - 1 + L, L)


def brute_force_transducer(lattice: LogitLattice, target, max_t: int = 6, max_l: int = 4) -> float:
    """Enumerate every alignment path explicitly and sum their probabilities.

    Intentionally independent of the recursive implementation: each path is a
    placement of the L label emissions among the first T+L-1 moves (the last
    move is always the final no-output step), walked left to right.
    """
    target = _as_target(target)
    T, L = lattice.T, len(target)
    if T > max_t or L > max_l:
        raise BudgetError(f"enumeration budget is T<={max_t}, L<={max_l}; got T={T}, L={L}")
    if L != lattice.L:
        raise ShapeError(f"lattice built for L={lattice.L}, target has {L} tokens")
    blank = lattice.blank_logprob.data.astype(np.float64)
    vocab = lattice.vocab_logprob.data.astype(np.float64)
    scores = []
    n_moves = T + L - 1
    for label_slots in itertools.combinations(range(n_moves), L):
        label_set = set(label_slots)
        t = 0
        l = 0
        lp = 0.0
        for move in range(n_moves):
            if move in label_set:
                lp += vocab[t, l, target.tokens[l]]
                l += 1
            else:
                lp += blank[t, l]
                t += 1
        lp += blank[T - 1, L]
        scores.append(lp)
    m = max(scores)
    return float(-(m + np.log(np.sum(np.exp(np.array(scores) - m)))))


def ctc_min_frames(target: TargetSeq) -> int:
    """Minimum frames to emit the target: length plus one per adjacent repeat."""
    repeats = sum(1 for a, b in zip(target.tokens, target.tokens[1:]) if a == b)
    return len(target) + repeats


def _expanded_states(tokens: tuple[int, ...], sep: int) -> np.ndarray:
    ext = [sep]
    for tok in tokens:
        ext.append(tok)
        ext.append(sep)
    return np.array(ext, dtype=np.int64)


def ctc_loss(logprob: Tensor, target) -> Tensor:
    """CTC negative log-likelihood; the separator symbol occupies the last slot."""
    target = _as_target(target)
    if logprob.ndim != 2:
        raise ShapeError(f"ctc_loss expects (T, U+1); got {logprob.shape}")
    T, U1 = logprob.shape
    sep = U1 - 1
    target.validate(sep)
    if T < ctc_min_frames(target):
        raise InfeasibleTargetError(
            f"target of length {len(target)} needs at least {ctc_min_frames(target)} frames, got {T}"
        )
    lp64 = logprob.data.astype(np.float64)
    if not np.isfinite(lp64).all():
        raise ShapeError("non-finite log-probabilities")
    ext = _expanded_states(target.tokens, sep)
    S = ext.shape[0]
    alpha = K.ctc_alpha(lp64, ext)
    beta = K.ctc_beta(lp64, ext)
    log_z = alpha[T - 1, S - 1] if S == 1 else np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])

    def backward(g):
        g = float(g.reshape(-1)[0])
        # state occupancy; emission term appears in both grids, subtract once
        gamma = alpha + beta - lp64[:, ext] - log_z
        occ = np.zeros_like(lp64)
        np.add.at(occ, (np.arange(T)[:, None], ext[None, :].repeat(T, axis=0)), np.exp(gamma))
        return ((-g) * occ.astype(logprob.dtype),)

    out = np.asarray(-log_z, dtype=logprob.dtype)
    return _make(out, (logprob,), backward)


def _collapse(frames: tuple[int, ...], sep: int) -> tuple[int, ...]:
    out = []
    prev = None
    for f in frames:
        if f != prev:
            if f != sep:
                out.append(f)
            prev = f
    return tuple(out)


def brute_force_ctc(logprob: Tensor, target, max_t: int = 6) -> float:
    """Enumerate all (U+1)^T frame labelings and keep those collapsing to the target."""
    target = _as_target(target)
    T, U1 = logprob.shape
    if T > max_t:
        raise BudgetError(f"enumeration budget is T<={max_t}; got T={T}")
    sep = U1 - 1
    lp = logprob.data.astype(np.float64)
    want = target.tokens
    scores = []
    for frames in itertools.product(range(U1), repeat=T):
        if _collapse(frames, sep) != want:
            continue
        scores.append(sum(lp[t, f] for t, f in enumerate(frames)))
    if not scores:
        raise InfeasibleTargetError(f"no labeling of {T} frames collapses to {want}")
    m = max(scores)
    return float(-(m + np.log(np.sum(np.exp(np.array(scores) - m)))))


def lm_loss(vocab_logprobs: Tensor, target) -> Tensor:
    """Per-token mean negative log-probability of the target under the LM rows."""
    target = _as_target(target)
    if vocab_logprobs.ndim != 2:
        raise ShapeError(f"lm_loss expects (L, U); got {vocab_logprobs.shape}")
    if vocab_logprobs.shape[0] != len(target):
        raise ShapeError(
            f"{vocab_logprobs.shape[0]} prediction rows for {len(target)} target tokens"
        )
    target.validate(vocab_logprobs.shape[1])
    picked = gather_rows(vocab_logprobs, np.array(target.tokens, dtype=np.int64))
    return -tmean(picked)


def total_loss(l_trans: Tensor, l_lm: Tensor, l_ctc: Tensor, lambda_lm: float, lambda_ctc: float) -> Tensor:
    """Weighted training objective: alignment + LM cross-entropy + CTC."""
    return l_trans + float(lambda_lm) * l_lm + float(lambda_ctc) * l_ctc
