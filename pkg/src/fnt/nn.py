"""Neural building blocks on top of the tensor engine.

Initialization is uniform Xavier (bounds +/- sqrt(6 / (fan_in + fan_out)))
drawn from a named child of the module's seeded generator, so construction
order does not perturb sibling modules.
"""

from __future__ import annotations

import math
from typing import Iterator, Optional, Sequence

import numpy as np

from .rng import Rng
from .tensor import (
    MASK_FILL,
    EmptyContextError,
    ShapeError,
    Tensor,
    attention,
    concat,
    get_default_dtype,
    matmul,
    power,
    relu,
    reshape,
    sigmoid,
    stop_gradient,
    take_rows,
    tanh,
    tmean,
    tsum,
)

__all__ = [
    "Module",
    "Linear",
    "Embedding",
    "LayerNorm",
    "FeedForward",
    "MultiHeadAttention",
    "LstmStack",
    "xavier_uniform",
    "sinusoid_positions",
    "causal_mask",
]


def xavier_uniform(rng: Rng, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, shape or (fan_in, fan_out)).astype(get_default_dtype())


class Module:
    """Base class providing named parameter traversal for checkpoints/SGD."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: Rng, bias: bool = True):
        self.weight = Tensor(xavier_uniform(rng.child("w"), d_in, d_out), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: Rng):
        self.table = Tensor(xavier_uniform(rng.child("table"), n, d, (n, d)), requires_grad=True)

    def __call__(self, ids) -> Tensor:
        return take_rows(self.table, ids)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.shift = Tensor(np.zeros(d), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = tmean(x, axis=-1, keepdims=True)
        centered = x - mu
        var = tmean(centered * centered, axis=-1, keepdims=True)
        normed = centered * power(var + self.eps, -0.5)
        return normed * self.gain + self.shift


class FeedForward(Module):
    def __init__(self, d: int, d_hidden: int, rng: Rng):
        self.up = Linear(d, d_hidden, rng.child("up"))
        self.down = Linear(d_hidden, d, rng.child("down"))

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(relu(self.up(x)))


class MultiHeadAttention(Module):
    """h single-head kernels on d/h slices, concatenated, then projected."""

    def __init__(self, d_model: int, n_heads: int, rng: Rng, d_kv: Optional[int] = None):
        if d_model % n_heads != 0:
            raise ShapeError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        d_kv = d_kv if d_kv is not None else d_model
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = Linear(d_model, d_model, rng.child("q"))
        self.k_proj = Linear(d_kv, d_model, rng.child("k"))
        self.v_proj = Linear(d_kv, d_model, rng.child("v"))
        self.out_proj = Linear(d_model, d_model, rng.child("o"))

    def project_kv(self, kv_in: Tensor) -> tuple[Tensor, Tensor]:
        return self.k_proj(kv_in), self.v_proj(kv_in)

    def attend(
        self,
        q_in: Tensor,
        k: Tensor,
        v: Tensor,
        mask: Optional[np.ndarray] = None,
        return_weights: bool = False,
    ):
        if k.shape[0] == 0:
            raise EmptyContextError("multi-head attention over zero keys")
        q = self.q_proj(q_in)
        dh = self.d_head
        outs = []
        weights = []
        for h in range(self.n_heads):
            sl = slice(h * dh, (h + 1) * dh)
            if return_weights:
                o, w = attention(q[:, sl], k[:, sl], v[:, sl], mask=mask, return_weights=True)
                weights.append(w)
            else:
                o = attention(q[:, sl], k[:, sl], v[:, sl], mask=mask)
            outs.append(o)
        out = self.out_proj(concat(outs, axis=-1))
        if return_weights:
            # head-averaged weights; rows remain stochastic
            avg = weights[0]
            for w in weights[1:]:
                avg = avg + w
            return out, avg * (1.0 / self.n_heads)
        return out

    def __call__(self, q_in: Tensor, kv_in: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        k, v = self.project_kv(kv_in)
        return self.attend(q_in, k, v, mask=mask)


class LstmStack(Module):
    """Unidirectional LSTM layers; the gated recurrent cell behind both predictors."""

    def __init__(self, n_layers: int, d_in: int, d_hidden: int, rng: Rng):
        self.n_layers = n_layers
        self.d_hidden = d_hidden
        self.w_x: list[Tensor] = []
        self.w_h: list[Tensor] = []
        self.b: list[Tensor] = []
        for i in range(n_layers):
            d = d_in if i == 0 else d_hidden
            r = rng.child(f"layer{i}")
            self.w_x.append(Tensor(xavier_uniform(r.child("wx"), d, 4 * d_hidden), requires_grad=True))
            self.w_h.append(Tensor(xavier_uniform(r.child("wh"), d_hidden, 4 * d_hidden), requires_grad=True))
            self.b.append(Tensor(np.zeros(4 * d_hidden), requires_grad=True))

    def init_state(self) -> list[tuple[Tensor, Tensor]]:
        z = np.zeros((1, self.d_hidden), dtype=get_default_dtype())
        return [(Tensor(z.copy()), Tensor(z.copy())) for _ in range(self.n_layers)]

    def step(self, state: Sequence[tuple[Tensor, Tensor]], x: Tensor) -> tuple[list, Tensor]:
        """Advance one step; returns (state', top-layer hidden (1, d_hidden))."""
        if len(state) != self.n_layers:
            raise ShapeError(f"state has {len(state)} layers, stack has {self.n_layers}")
        if x.ndim == 1:
            x = reshape(x, (1, x.shape[0]))
        new_state = []
        inp = x
        for i in range(self.n_layers):
            h, c = state[i]
            if h.shape != (1, self.d_hidden):
                raise ShapeError(f"layer {i} state shape {h.shape} != (1, {self.d_hidden})")
            gates = matmul(inp, self.w_x[i]) + matmul(h, self.w_h[i]) + self.b[i]
            d = self.d_hidden
            i_g = sigmoid(gates[:, 0 * d : 1 * d])
            f_g = sigmoid(gates[:, 1 * d : 2 * d])
            g_g = tanh(gates[:, 2 * d : 3 * d])
            o_g = sigmoid(gates[:, 3 * d : 4 * d])
            c2 = f_g * c + i_g * g_g
            h2 = o_g * tanh(c2)
            new_state.append((h2, c2))
            inp = h2
        return new_state, inp

    def forward_sequence(self, xs: Tensor) -> Tensor:
        """Run over (L, d_in); returns top hiddens (L, d_hidden)."""
        state = self.init_state()
        outs = []
        for t in range(xs.shape[0]):
            state, h = self.step(state, xs[t])
            outs.append(h)
        return concat(outs, axis=0)


def sinusoid_positions(offset: int, length: int, d: int) -> np.ndarray:
    """Absolute sinusoidal position codes for indices [offset, offset+length)."""
    pos = np.arange(offset, offset + length, dtype=np.float64)[:, None]
    dim = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * (dim // 2) / d)
    codes = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    return codes.astype(get_default_dtype())


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))
