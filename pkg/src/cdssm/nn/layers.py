"""Parameter containers and the building blocks of the assimilation network."""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from ..rng import RandomStream
from . import autograd as ag
from .autograd import Tensor


class Module:
    """Holds parameters and submodules; names are dotted attribute paths."""

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(prefix + key + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self.named_parameters())

    def load_state_dict(self, state) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing {missing}, unexpected {extra}")
        for k, p in own.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != p.shape:
                raise ValueError(f"tensor {k!r}: checkpoint shape {v.shape} != model shape {p.shape}")
            p.data = v.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def param(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class Linear(Module):
    """``y = x W + b`` with ``W`` drawn from ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""

    def __init__(self, n_in: int, n_out: int, rng: RandomStream, bias: bool = True, zero: bool = False):
        bound = 1.0 / math.sqrt(n_in)
        w = np.zeros((n_in, n_out)) if zero else rng.uniform(-bound, bound, (n_in, n_out))
        self.weight = param(w)
        self.bias = param(np.zeros(n_out)) if bias else None

    def __call__(self, x) -> Tensor:
        y = ag.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, n: int, eps: float = 1e-5):
        self.gamma = param(np.ones(n))
        self.beta = param(np.zeros(n))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return ag.layer_norm(x, self.gamma, self.beta, self.eps)


class Dropout(Module):
    """Inverted dropout; active only when ``training`` is set and ``rate > 0``."""

    def __init__(self, rate: float = 0.0):
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        self.rate = rate
        self.training = False

    def __call__(self, x, rng: RandomStream | None = None) -> Tensor:
        if not self.training or self.rate == 0.0 or rng is None:
            return ag.as_tensor(x)
        keep = rng.uniform(size=ag.as_tensor(x).shape) >= self.rate
        return x * (keep / (1.0 - self.rate))


class MLP(Module):
    """``Linear -> ReLU -> LayerNorm`` blocks followed by a final ``Linear``."""

    def __init__(self, sizes, rng: RandomStream, norm: bool = True, zero_last: bool = False):
        sizes = list(sizes)
        n = len(sizes) - 1
        self.layers = [
            Linear(sizes[i], sizes[i + 1], rng.child(i), zero=zero_last and i == n - 1) for i in range(n)
        ]
        self.norms = [LayerNorm(sizes[i + 1]) for i in range(n - 1)] if norm else []

    def __call__(self, x) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ag.relu(x)
                if self.norms:
                    x = self.norms[i](x)
        return x


class FeedForward(Module):
    """Pre-norm residual block ``x + W2 gelu(W1 LN(x))``."""

    def __init__(self, d: int, rng: RandomStream):
        self.norm = LayerNorm(d)
        self.fc1 = Linear(d, d, rng.child(0))
        self.fc2 = Linear(d, d, rng.child(1))

    def __call__(self, x) -> Tensor:
        return x + self.fc2(ag.gelu(self.fc1(self.norm(x))))


class MaskedAttention(Module):
    """Single-head scaled dot-product attention with a boolean key mask.

    ``mask[b, i, j]`` allows query ``i`` to read key ``j``.  Rows with no
    allowed key produce zero attention output (the residual passes through).
    """

    def __init__(self, d: int, rng: RandomStream, dropout: float = 0.0):
        self.norm_q = LayerNorm(d)
        self.wq = Linear(d, d, rng.child(0), bias=False)
        self.wk = Linear(d, d, rng.child(1), bias=False)
        self.wv = Linear(d, d, rng.child(2), bias=False)
        self.norm_out = LayerNorm(d)
        self.proj = Linear(d, d, rng.child(3))
        self.drop = Dropout(dropout)
        self.scale = 1.0 / math.sqrt(d)

    def _weights(self, h, mask) -> Tensor:
        q, k = self.wq(h), self.wk(h)
        scores = ag.matmul(q, ag.swapaxes(k, -1, -2)) * self.scale
        return ag.masked_softmax(scores, mask, axis=-1)

    def weights(self, x, mask) -> Tensor:
        return self._weights(self.norm_q(x), mask)

    def __call__(self, x, mask, rng: RandomStream | None = None) -> Tensor:
        h = self.norm_q(x)
        attn = self.drop(self._weights(h, mask), rng)
        out = ag.matmul(attn, self.wv(h))
        return x + self.proj(self.norm_out(out))


class GRUCell(Module):
    def __init__(self, n_in: int, n_hidden: int, rng: RandomStream):
        self.wx = Linear(n_in, 3 * n_hidden, rng.child(0))
        self.wh = Linear(n_hidden, 3 * n_hidden, rng.child(1), bias=False)
        self.n = n_hidden

    def __call__(self, x, h) -> Tensor:
        n = self.n
        gx = self.wx(x)
        gh = self.wh(h)
        r = ag.sigmoid(gx[..., :n] + gh[..., :n])
        u = ag.sigmoid(gx[..., n : 2 * n] + gh[..., n : 2 * n])
        cand = ag.tanh(gx[..., 2 * n :] + r * gh[..., 2 * n :])
        return u * h + (1.0 - u) * cand


def time_features(t: np.ndarray, n_freq: int, max_period: float = 100.0) -> np.ndarray:
    """Sinusoidal features ``[sin(w_k t), cos(w_k t)]`` with geometric frequencies."""
    t = np.asarray(t, dtype=np.float64)
    if n_freq == 0:
        return np.zeros(t.shape + (0,))
    freqs = np.exp(-np.log(max_period) * np.arange(n_freq) / max(1, n_freq))
    ang = t[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
