"""Hierarchical multi-aspect pronunciation scorer.

Phoneme level: GOP projection plus phone embedding, then LSTM, multi-head
self-attention and a convolution.  Word level: one dense module per aspect on
every phoneme position, coupled by multi-aspect attention, read out per word
as the mean over the word's phonemes.  Utterance level: aspect-averaged word
representations go through self-attention and a masked time-mean, then one
dense module per aspect, again coupled by multi-aspect attention.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .data import UTT_ASPECTS, WORD_ASPECTS, Batch
from .layers import (
    LSTM,
    AttentionPooling,
    Conv1dSame,
    Dense,
    Dropout,
    Module,
    MultiHeadSelfAttention,
    Parameter,
    sinusoidal_positions,
    xavier_uniform,
)
from .tensor import ShapeError, Tensor, concat, matmul, reshape, softmax


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_phones: int = 42
    gop_dim: int = 84
    width: int = 24
    heads: int = 4
    kernel_size: int = 3
    dropout_utt: float = 0.2
    max_len: int = 50
    aspects_word: list[str] = field(default_factory=lambda: list(WORD_ASPECTS))
    aspects_utt: list[str] = field(default_factory=lambda: list(UTT_ASPECTS))
    hierarchical: bool = True
    multi_aspect_attention: bool = True
    positional_encoding: bool = False
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.n_phones < 1 or self.width < 1 or self.heads < 1 or self.max_len < 1:
            raise ConfigError("n_phones, width, heads and max_len must be positive")
        if self.gop_dim != 2 * self.n_phones:
            raise ConfigError(f"gop_dim {self.gop_dim} != 2 * n_phones ({2 * self.n_phones})")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        if not 0.0 <= self.dropout_utt < 1.0:
            raise ConfigError(f"dropout_utt must be in [0, 1), got {self.dropout_utt}")
        for level, names, known in (("word", self.aspects_word, WORD_ASPECTS), ("utterance", self.aspects_utt, UTT_ASPECTS)):
            if not names or len(set(names)) != len(names):
                raise ConfigError(f"{level} aspects must be non-empty and unique: {names}")
            unknown = [n for n in names if n not in known]
            if unknown:
                raise ConfigError(f"unknown {level} aspects {unknown}; known: {list(known)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class AspectState:
    """Per-aspect vectors of one multi-aspect attention call (numpy copies)."""

    a: np.ndarray
    m: np.ndarray
    r: np.ndarray


@dataclass
class PredictionSet:
    phoneme: Tensor  # [B, T], zero at padding
    word: dict[str, Tensor]  # aspect -> [B, W], zero at padded words
    utterance: dict[str, Tensor]  # aspect -> [B]
    ma_weights_word: np.ndarray | None  # [B, T, N_w, N_w - 1]
    ma_weights_utt: np.ndarray | None  # [B, N_u, N_u - 1]
    aspects_word: dict[str, AspectState] = field(default_factory=dict)
    aspects_utt: dict[str, AspectState] = field(default_factory=dict)

    @property
    def phoneme_scores(self) -> np.ndarray:
        return self.phoneme.data

    @property
    def word_scores(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.word.items()}

    @property
    def utterance_scores(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.utterance.items()}


class AspectModule(Module):
    """Dense+relu body, affine scalar head, and (optionally) the pooling used
    when this aspect is the attention target."""

    def __init__(self, width: int, rng: np.random.Generator, pooling: bool):
        self.dense = Dense(width, width, rng, activation="relu")
        self.head = Dense(width, 1, rng)
        if pooling:
            self.pool = AttentionPooling(width, rng)


def multi_aspect_attention(reps: Sequence[Tensor], pools: Sequence[AttentionPooling]):
    """Let each aspect attend over the pooled stack of the other aspects.

    ``reps`` holds N tensors of shape ``[..., d]``.  Returns the refined
    representations ``r^n = a^n + m^n``, the attention vectors ``m^n`` and the
    weights as an array of shape ``[..., N, N - 1]`` (row n over the other
    aspects in list order).
    """
    n = len(reps)
    if n == 0:
        raise ValueError("multi_aspect_attention needs at least one aspect")
    if n == 1:
        zero = Tensor(np.zeros(reps[0].shape))
        return list(reps), [zero], np.zeros(reps[0].shape[:-1] + (1, 0))
    d = reps[0].shape[-1]
    lead = reps[0].shape[:-1]
    expanded = [reshape(a, lead + (1, d)) for a in reps]
    outs, ms, weights = [], [], []
    for t, a in enumerate(reps):
        others = concat([e for k, e in enumerate(expanded) if k != t], axis=-2)  # [..., N-1, d]
        pooled, _ = pools[t](others)
        scores = matmul(pooled, reshape(a, lead + (d, 1))) * (1.0 / math.sqrt(d))  # [..., N-1, 1]
        v = softmax(scores, axis=-2)
        m = (v * pooled).sum(axis=-2)
        outs.append(a + m)
        ms.append(m)
        weights.append(v.data[..., 0])
    return outs, ms, np.stack(weights, axis=-2)


class HiPAMA(Module):
    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        d = config.width
        ma = config.multi_aspect_attention
        self.gop_proj = Dense(config.gop_dim, d, rng)
        self.phone_embedding = Parameter(xavier_uniform(rng, (config.n_phones, d), config.n_phones, d))
        self.lstm = LSTM(d, d, rng)
        self.attention = MultiHeadSelfAttention(d, config.heads, rng)
        self.conv = Conv1dSame(d, d, config.kernel_size, rng)
        self.phone_head = Dense(d, 1, rng)
        self.word = {name: AspectModule(d, rng, ma) for name in config.aspects_word}
        if config.hierarchical:
            self.utt_attention = MultiHeadSelfAttention(d, config.heads, rng)
        self.utt = {name: AspectModule(d, rng, ma) for name in config.aspects_utt}
        self.utt_dropout = Dropout(config.dropout_utt, np.random.default_rng([config.seed, 7]))

    # ---------------------------------------------------------------- pieces
    def embed_inputs(self, gop: np.ndarray, phone_ids: np.ndarray, mask: np.ndarray) -> Tensor:
        cfg = self.config
        gop = np.asarray(gop, dtype=np.float64)
        phone_ids = np.asarray(phone_ids)
        if gop.shape[-1] != cfg.gop_dim:
            raise ShapeError("embed_inputs", gop.shape, (cfg.gop_dim,), detail="GOP width")
        if phone_ids.shape != gop.shape[:2] or np.shape(mask) != gop.shape[:2]:
            raise ShapeError("embed_inputs", gop.shape, phone_ids.shape, np.shape(mask))
        if phone_ids.size and (phone_ids.min() < 0 or phone_ids.max() > cfg.n_phones):
            raise ValueError(f"phone id outside [0, {cfg.n_phones}]")
        # padding id n_phones selects the extra all-zero one-hot column, which is dropped
        one_hot = np.eye(cfg.n_phones + 1)[phone_ids][..., : cfg.n_phones]
        x = self.gop_proj(Tensor(gop)) + matmul(Tensor(one_hot), self.phone_embedding)
        if cfg.positional_encoding:
            x = x + sinusoidal_positions(gop.shape[1], cfg.width)
        return x * np.asarray(mask, dtype=np.float64)[:, :, None]

    def phoneme_encoder(self, x: Tensor, mask: np.ndarray) -> tuple[Tensor, Tensor]:
        h = self.conv(self.attention(self.lstm(x, mask), mask), mask)
        scores = self.phone_head(h)[..., 0] * mask
        return h, scores

    def _aspect_block(self, modules: dict[str, AspectModule], x: Tensor):
        names = list(modules)
        a = [modules[n].dense(x) for n in names]
        if self.config.multi_aspect_attention:
            r, m, w = multi_aspect_attention(a, [modules[n].pool for n in names])
        else:
            r, m, w = a, None, None
        states = {}
        for i, n in enumerate(names):
            states[n] = AspectState(
                a[i].data, m[i].data if m is not None else np.zeros_like(a[i].data), r[i].data
            )
        return r, w, states

    def word_level(self, h: Tensor, mask: np.ndarray, word_align: np.ndarray):
        reps, weights, states = self._aspect_block(self.word, h)
        align = Tensor(word_align)
        scores = {}
        for name, r in zip(self.word, reps):
            pos = self.word[name].head(r) * mask[:, :, None]  # [B, T, 1]
            scores[name] = matmul(align, pos)[..., 0]
        return reps, scores, weights, states

    def utterance_level(self, seq: Tensor | None, mask: np.ndarray, pooled: Tensor | None = None):
        """Utterance scores from a sequence (attention + masked mean) or from a
        ready pooled vector when the hierarchy is disabled."""
        if pooled is None:
            g = self.utt_dropout(self.utt_attention(seq, mask))
            pooled = masked_mean(g, mask)
        reps, weights, states = self._aspect_block(self.utt, pooled)
        scores = {name: self.utt[name].head(r)[..., 0] for name, r in zip(self.utt, reps)}
        return scores, weights, states

    # --------------------------------------------------------------- forward
    def forward(self, batch: Batch) -> PredictionSet:
        cfg = self.config
        mask = np.asarray(batch.mask, dtype=np.float64)
        if batch.mask.shape[1] > cfg.max_len:
            raise ShapeError("forward", batch.mask.shape, (cfg.max_len,), detail="sequence longer than max_len")
        x = self.embed_inputs(batch.gop, batch.phone_ids, mask)
        h, phone_scores = self.phoneme_encoder(x, mask)
        word_reps, word_scores, w_word, s_word = self.word_level(h, mask, batch.word_align)
        if cfg.hierarchical:
            u = word_reps[0]
            for r in word_reps[1:]:
                u = u + r
            u = u * (1.0 / len(word_reps))
            utt_scores, w_utt, s_utt = self.utterance_level(u, mask)
        else:
            utt_scores, w_utt, s_utt = self.utterance_level(None, mask, pooled=masked_mean(h, mask))
        return PredictionSet(
            phoneme=phone_scores,
            word={k: v * batch.word_mask for k, v in word_scores.items()},
            utterance=utt_scores,
            ma_weights_word=w_word,
            ma_weights_utt=w_utt,
            aspects_word=s_word,
            aspects_utt=s_utt,
        )


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over the time axis of [B, T, d] counting only real positions."""
    counts = mask.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise ValueError("masked_mean: empty sequence")
    return (x * mask[:, :, None]).sum(axis=1) * (1.0 / counts)


# ------------------------------------------------------------------- loss
def masked_mse(pred: Tensor, gold: np.ndarray, mask: np.ndarray) -> Tensor:
    if pred.shape != np.shape(gold) or np.shape(gold) != np.shape(mask):
        raise ShapeError("masked_mse", pred.shape, np.shape(gold), np.shape(mask))
    n = float(np.sum(mask))
    if n == 0:
        raise ValueError("masked_mse: no unmasked elements")
    diff = (pred - gold) * mask
    return (diff * diff).sum() * (1.0 / n)


def combine_level_losses(levels: Sequence[Sequence]):
    """Sum over levels of the mean over that level's aspect losses."""
    total = None
    for losses in levels:
        level = losses[0]
        for item in losses[1:]:
            level = level + item
        level = level * (1.0 / len(losses))
        total = level if total is None else total + level
    return total


@dataclass
class LossResult:
    total: Tensor
    terms: dict[str, float]  # "level.aspect" -> MSE


def hierarchical_loss(pred: PredictionSet, batch: Batch) -> LossResult:
    phone = masked_mse(pred.phoneme, batch.phone_labels, batch.mask)
    word = {k: masked_mse(v, batch.word_labels[k], batch.word_mask) for k, v in pred.word.items()}
    utt = {k: masked_mse(v, batch.utt_labels[k], batch.utt_mask) for k, v in pred.utterance.items()}
    total = combine_level_losses([[phone], list(word.values()), list(utt.values())])
    terms = {"phoneme.accuracy": phone.item()}
    terms.update({f"word.{k}": v.item() for k, v in word.items()})
    terms.update({f"utterance.{k}": v.item() for k, v in utt.items()})
    return LossResult(total, terms)
