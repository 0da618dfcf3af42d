"""MSE / Pearson evaluation pooled over a whole dataset."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import UtteranceSample, make_batches
from .tensor import no_grad


class DegenerateCorrelationWarning(RuntimeWarning):
    """Pearson correlation requested for a constant vector."""


def pearson(x, y) -> float:
    """Sample Pearson correlation; 0.0 (with a warning) if either side is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"pearson: need two 1-D vectors of equal length, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise ValueError("pearson: need at least two points")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(xc @ xc)
    syy = float(yc @ yc)
    if sxx == 0.0 or syy == 0.0:
        warnings.warn("zero variance in pearson input; returning 0", DegenerateCorrelationWarning, stacklevel=2)
        return 0.0
    r = float(xc @ yc) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def is_degenerate(x, y) -> bool:
    return bool(np.ptp(np.asarray(x, dtype=np.float64)) == 0 or np.ptp(np.asarray(y, dtype=np.float64)) == 0)


def mse(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(np.mean((x - y) ** 2))


@dataclass
class PearsonStats:
    """Sufficient statistics for merging correlations across shards.

    Single-pass formulas lose precision relative to :func:`pearson`; use this
    only to combine shards evaluated in parallel.
    """

    n: int = 0
    sx: float = 0.0
    sy: float = 0.0
    sxx: float = 0.0
    syy: float = 0.0
    sxy: float = 0.0

    @classmethod
    def of(cls, x, y) -> "PearsonStats":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        return cls(x.size, float(x.sum()), float(y.sum()), float(x @ x), float(y @ y), float(x @ y))

    def merge(self, other: "PearsonStats") -> "PearsonStats":
        return PearsonStats(*(a + b for a, b in zip(vars(self).values(), vars(other).values())))

    def pcc(self) -> float:
        cxx = self.sxx - self.sx * self.sx / self.n
        cyy = self.syy - self.sy * self.sy / self.n
        if cxx <= 0 or cyy <= 0:
            return 0.0
        return (self.sxy - self.sx * self.sy / self.n) / math.sqrt(cxx * cyy)


@dataclass
class EvalReport:
    phoneme: dict[str, float]  # {"mse", "pcc"}
    word: dict[str, float]  # aspect -> pcc
    utterance: dict[str, float]  # aspect -> pcc
    counts: dict[str, int]
    degenerate: list[str] = field(default_factory=list)

    def to_text(self) -> str:
        """Fixed-width table following the usual phoneme / word / utterance layout."""
        cols = ["phone.mse", "phone.pcc"]
        vals = [self.phoneme["mse"], self.phoneme["pcc"]]
        cols += [f"word.{a}" for a in self.word]
        vals += list(self.word.values())
        cols += [f"utt.{a}" for a in self.utterance]
        vals += list(self.utterance.values())
        width = max(len(c) for c in cols) + 2
        lines = [
            "".join(c.rjust(width) for c in cols),
            "".join(f"{v:.6f}".rjust(width) for v in vals),
            "counts: " + ", ".join(f"{k}={v}" for k, v in self.counts.items()),
            "degenerate: " + (", ".join(self.degenerate) if self.degenerate else "none"),
        ]
        return "\n".join(lines) + "\n"

    def flat(self) -> dict[str, float]:
        out = {"phone.mse": self.phoneme["mse"], "phone.pcc": self.phoneme["pcc"]}
        out.update({f"word.{k}": v for k, v in self.word.items()})
        out.update({f"utt.{k}": v for k, v in self.utterance.items()})
        return out


def collect_predictions(model, samples: Sequence[UtteranceSample], batch_size: int = 25):
    """Pooled (prediction, gold) vectors per level and aspect, clamped to [0, 2]."""
    cfg = model.config
    phone_p, phone_g = [], []
    word_p = {a: [] for a in cfg.aspects_word}
    word_g = {a: [] for a in cfg.aspects_word}
    utt_p = {a: [] for a in cfg.aspects_utt}
    utt_g = {a: [] for a in cfg.aspects_utt}
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            for batch in make_batches(samples, batch_size, None, n_phones=cfg.n_phones, max_len=cfg.max_len):
                pred = model(batch)
                real = batch.mask > 0
                phone_p.append(pred.phoneme_scores[real])
                phone_g.append(batch.phone_labels[real])
                words = batch.word_mask > 0
                for a in cfg.aspects_word:
                    word_p[a].append(pred.word[a].data[words])
                    word_g[a].append(batch.word_labels[a][words])
                for a in cfg.aspects_utt:
                    utt_p[a].append(pred.utterance[a].data)
                    utt_g[a].append(batch.utt_labels[a])
    finally:
        model.train(was_training)

    def cat(parts):
        return np.clip(np.concatenate(parts), 0.0, 2.0)

    return (
        (cat(phone_p), np.concatenate(phone_g)),
        {a: (cat(word_p[a]), np.concatenate(word_g[a])) for a in cfg.aspects_word},
        {a: (cat(utt_p[a]), np.concatenate(utt_g[a])) for a in cfg.aspects_utt},
    )


def report_from_predictions(phone, word, utt) -> EvalReport:
    degenerate = []

    def corr(name, p, g):
        if is_degenerate(p, g):
            degenerate.append(name)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateCorrelationWarning)
            return pearson(p, g)

    return EvalReport(
        phoneme={"mse": mse(*phone), "pcc": corr("phone.accuracy", *phone)},
        word={a: corr(f"word.{a}", *pg) for a, pg in word.items()},
        utterance={a: corr(f"utt.{a}", *pg) for a, pg in utt.items()},
        counts={
            "phonemes": int(phone[0].size),
            "words": int(next(iter(word.values()))[0].size),
            "utterances": int(next(iter(utt.values()))[0].size),
        },
        degenerate=degenerate,
    )


def evaluate(model, samples: Sequence[UtteranceSample], batch_size: int = 25) -> EvalReport:
    """Phoneme MSE/PCC and word/utterance PCC pooled over the whole dataset."""
    if not samples:
        raise ValueError("evaluate: empty dataset")
    return report_from_predictions(*collect_predictions(model, samples, batch_size))


def summarize(reports: Sequence[EvalReport]) -> dict[str, tuple[float, float]]:
    """Mean and (population) std per metric across runs."""
    keys = list(reports[0].flat())
    table = np.array([[r.flat()[k] for k in keys] for r in reports])
    return {k: (float(table[:, i].mean()), float(table[:, i].std())) for i, k in enumerate(keys)}


def format_summary(summary: dict[str, tuple[float, float]]) -> str:
    width = max(len(k) for k in summary) + 2
    header = "".join(k.rjust(width) for k in summary)
    means = "".join(f"{m:.4f}".rjust(width) for m, _ in summary.values())
    stds = "".join(f"±{s:.4f}".rjust(width) for _, s in summary.values())
    return "\n".join([header, means, stds]) + "\n"
