"""Neural building blocks expressed in the :mod:`hipama.tensor` vocabulary.

All sequence layers take ``x`` of shape ``[B, T, d]`` together with a
``mask`` of shape ``[B, T]`` (1 for real positions, 0 for padding).  Outputs
at padded positions are zero, and real-position outputs do not depend on how
much padding follows them.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .tensor import DTYPE, ShapeError, Tensor, concat, matmul, softmax

NEG_INF = -np.inf


class Parameter(Tensor):
    """A leaf tensor that is trained."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Container that discovers parameters and submodules by attribute order."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, dict):
                for k, v in value.items():
                    if isinstance(v, Module):
                        yield from v.named_parameters(f"{name}.{k}.")
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield from v.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            children = []
            if isinstance(value, Module):
                children = [value]
            elif isinstance(value, dict):
                children = [v for v in value.values() if isinstance(v, Module)]
            elif isinstance(value, (list, tuple)):
                children = [v for v in value if isinstance(v, Module)]
            for child in children:
                yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def _check_mask(x: Tensor, mask: np.ndarray, op: str) -> np.ndarray:
    mask = np.asarray(mask, dtype=DTYPE)
    if mask.shape != x.shape[:2]:
        raise ShapeError(op, x.shape, mask.shape, detail="mask must be [B, T]")
    return mask


class Dense(Module):
    """y = xW + b over the trailing axis, with an optional activation."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, activation: str | None = None):
        self.weight = Parameter(xavier_uniform(rng, (in_dim, out_dim), in_dim, out_dim))
        self.bias = Parameter(np.zeros(out_dim))
        self.activation = activation

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError("dense", x.shape, self.weight.shape, detail="trailing dim != in_dim")
        y = matmul(x, self.weight) + self.bias
        if self.activation == "relu":
            y = y.relu()
        elif self.activation == "tanh":
            y = y.tanh()
        return y


def _sig(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_sequence(x: Tensor, w_in: Tensor, w_rec: Tensor, bias: Tensor, mask: np.ndarray) -> Tensor:
    """Masked single-layer LSTM as one fused differentiable primitive.

    Gate order in the packed weights is (input, forget, candidate, output).
    At masked steps the (h, c) state is carried through unchanged and the
    emitted output is zero.
    """
    xd = x.data
    B, T, _ = xd.shape
    H = w_rec.shape[0]
    m = mask[:, :, None]
    xz = xd @ w_in.data + bias.data  # [B, T, 4H]
    wr = w_rec.data

    h = np.zeros((B, H))
    c = np.zeros((B, H))
    hs_prev = np.empty((T, B, H))
    cs_prev = np.empty((T, B, H))
    gates = np.empty((T, B, 4 * H))
    tanh_c = np.empty((T, B, H))
    out = np.empty((B, T, H))
    for t in range(T):
        hs_prev[t] = h
        cs_prev[t] = c
        z = xz[:, t] + h @ wr
        i = _sig(z[:, :H])
        f = _sig(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = _sig(z[:, 3 * H:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        gates[t] = np.concatenate([i, f, g, o], axis=1)
        tanh_c[t] = tc
        mt = m[:, t]
        c = mt * c_new + (1.0 - mt) * c
        h = mt * h_new + (1.0 - mt) * h
        out[:, t] = mt * h

    def backward(gy):
        dxz = np.empty((B, T, 4 * H))
        dh = np.zeros((B, H))
        dc = np.zeros((B, H))
        dwr = np.zeros_like(wr)
        for t in range(T - 1, -1, -1):
            mt = m[:, t]
            dh_tot = gy[:, t] * mt + dh
            dc_tot = dc
            i = gates[t, :, :H]
            f = gates[t, :, H:2 * H]
            g = gates[t, :, 2 * H:3 * H]
            o = gates[t, :, 3 * H:]
            tc = tanh_c[t]
            dh_new = mt * dh_tot
            dc_new = mt * dc_tot + dh_new * o * (1.0 - tc * tc)
            dz = np.concatenate(
                [
                    dc_new * g * i * (1.0 - i),
                    dc_new * cs_prev[t] * f * (1.0 - f),
                    dc_new * i * (1.0 - g * g),
                    dh_new * tc * o * (1.0 - o),
                ],
                axis=1,
            )
            dxz[:, t] = dz
            dwr += hs_prev[t].T @ dz
            dh = dz @ wr.T + (1.0 - mt) * dh_tot
            dc = dc_new * f + (1.0 - mt) * dc_tot
        flat = dxz.reshape(B * T, 4 * H)
        dw_in = xd.reshape(B * T, -1).T @ flat
        dx = dxz @ w_in.data.T
        return dx, dw_in, dwr, flat.sum(axis=0)

    return Tensor._make(out, (x, w_in, w_rec, bias), backward, "lstm")


class LSTM(Module):
    """Single-layer unidirectional LSTM; forget-gate bias starts at +1."""

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator):
        self.w_in = Parameter(
            np.concatenate([xavier_uniform(rng, (in_dim, hidden), in_dim, hidden) for _ in range(4)], axis=1)
        )
        self.w_rec = Parameter(
            np.concatenate([xavier_uniform(rng, (hidden, hidden), hidden, hidden) for _ in range(4)], axis=1)
        )
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0
        self.bias = Parameter(b)
        self.hidden = hidden

    def forward(self, x: Tensor, mask: np.ndarray) -> Tensor:
        mask = _check_mask(x, mask, "lstm")
        if x.shape[-1] != self.w_in.shape[0]:
            raise ShapeError("lstm", x.shape, self.w_in.shape, detail="trailing dim != in_dim")
        if np.any(np.diff(mask, axis=1) > 0):
            raise ValueError("lstm: padding must be a suffix of each sequence")
        return lstm_sequence(x, self.w_in, self.w_rec, self.bias, mask)


def key_mask(mask: np.ndarray) -> np.ndarray:
    """[B, T] 0/1 mask -> additive [B, 1, T] mask for attention over keys."""
    return np.where(mask > 0, 0.0, NEG_INF)[:, None, :]


class MultiHeadSelfAttention(Module):
    """Scaled dot-product self-attention with per-head slices; no residual."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"attention width {dim} not divisible by {heads} heads")
        self.query = Dense(dim, dim, rng)
        self.key = Dense(dim, dim, rng)
        self.value = Dense(dim, dim, rng)
        self.out = Dense(dim, dim, rng)
        self.heads = heads
        self.last_weights: list[np.ndarray] = []

    def forward(self, x: Tensor, mask: np.ndarray) -> Tensor:
        mask = _check_mask(x, mask, "multi_head_self_attention")
        if np.any(mask.sum(axis=1) == 0):
            raise ValueError("multi_head_self_attention: empty sequence in batch")
        d = x.shape[-1]
        dh = d // self.heads
        q, k, v = self.query(x), self.key(x), self.value(x)
        km = key_mask(mask)
        outs = []
        self.last_weights = []
        for h in range(self.heads):
            cols = slice(h * dh, (h + 1) * dh)
            qh, kh, vh = q[..., cols], k[..., cols], v[..., cols]
            scores = matmul(qh, kh.transpose()) * (1.0 / math.sqrt(dh))
            w = softmax(scores, axis=-1, mask=km)
            self.last_weights.append(w.data)
            outs.append(matmul(w, vh))
        y = self.out(concat(outs, axis=-1))
        return y * mask[:, :, None]


class Conv1dSame(Module):
    """Temporal convolution with zero 'same' padding (odd kernel)."""

    def __init__(self, in_dim: int, out_dim: int, kernel_size: int, rng: np.random.Generator):
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and positive, got {kernel_size}")
        fan_in, fan_out = kernel_size * in_dim, kernel_size * out_dim
        self.weight = Parameter(xavier_uniform(rng, (kernel_size, in_dim, out_dim), fan_in, fan_out))
        self.bias = Parameter(np.zeros(out_dim))
        self.kernel_size = kernel_size

    def forward(self, x: Tensor, mask: np.ndarray) -> Tensor:
        mask = _check_mask(x, mask, "conv1d_same")
        if x.shape[-1] != self.weight.shape[1]:
            raise ShapeError("conv1d_same", x.shape, self.weight.shape, detail="trailing dim != in_dim")
        B, T, d = x.shape
        k = self.kernel_size
        half = k // 2
        xm = x * mask[:, :, None]
        if half:
            pad = Tensor(np.zeros((B, half, d)))
            xm = concat([pad, xm, pad], axis=1)
        y = None
        for j in range(k):
            term = matmul(xm[:, j:j + T, :], self.weight[j])
            y = term if y is None else y + term
        y = y + self.bias
        return y * mask[:, :, None]


class AttentionPooling(Module):
    """Re-weights the rows of a stack by softmax-normalised learned energies.

    For ``S`` of shape ``[..., K, d]`` the energies are
    ``e_i = q . tanh(W S_i + b)``; with ``u = softmax(e)`` the result keeps the
    row structure, ``A'_i = u_i * S_i``.
    """

    def __init__(self, dim: int, rng: np.random.Generator):
        self.weight = Parameter(xavier_uniform(rng, (dim, dim), dim, dim))
        self.bias = Parameter(np.zeros(dim))
        self.query = Parameter(xavier_uniform(rng, (dim, 1), dim, 1))

    def forward(self, s: Tensor) -> tuple[Tensor, Tensor]:
        if s.shape[-2] < 1:
            raise ShapeError("attention_pooling", s.shape, detail="need at least one row")
        energy = matmul((matmul(s, self.weight) + self.bias).tanh(), self.query)  # [..., K, 1]
        u = softmax(energy, axis=-2)
        return u * s, u


class Dropout(Module):
    """Inverted dropout driven by an explicit generator."""

    def __init__(self, rate: float, rng: np.random.Generator):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        if not self.training or self.rate == 0.0:
            return x
        keep = self.rng.random(x.shape) >= self.rate
        return x * (keep / (1.0 - self.rate))


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
