"""Dataset records, the line-delimited file format, batching and synthetic data.

File format (UTF-8, one utterance per line, fields separated by ``" | "``)::

    utt_id | phone_ids | word_index | gop | phoneme_acc | word_acc | word_stress | word_total | utt_labels

``phone_ids``, ``word_index``, ``phoneme_acc`` and the three word-label fields
are comma-separated; ``gop`` is semicolon-separated rows of comma-separated
floats; ``utt_labels`` is ``accuracy,completeness,fluency,prosody,total``.
Phoneme labels are stored on the 0-2 scale, word and utterance labels on the
raw 0-10 scale.

Converting real Kaldi GOP output plus speechocean762 score files means
writing exactly these fields: the per-phone LPP/LPR vector as one GOP row, the
phone ids of the pure-phone inventory, and the word membership of each phone.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

WORD_ASPECTS = ("accuracy", "stress", "total")
UTT_ASPECTS = ("accuracy", "completeness", "fluency", "prosody", "total")
SEP = " | "
LABEL_SCALE = 5.0


class DataError(ValueError):
    """A record violates the dataset contract."""


def scale_labels(raw):
    """Map raw 0-10 word/utterance labels onto the 0-2 phoneme scale."""
    arr = np.asarray(raw, dtype=np.float64)
    if np.any(arr < 0) or np.any(arr > 10):
        raise DataError(f"raw label outside [0, 10]: {raw}")
    out = arr / LABEL_SCALE
    return float(out) if out.ndim == 0 else out


def unscale_labels(scaled):
    out = np.asarray(scaled, dtype=np.float64) * LABEL_SCALE
    return float(out) if out.ndim == 0 else out


@dataclass
class UtteranceSample:
    utt_id: str
    phone_ids: list[int]
    gop: np.ndarray  # [n_phonemes, gop_dim]
    word_index: list[int]
    phoneme_accuracy: list[float]
    word_labels: dict[str, list[float]]
    utt_labels: dict[str, float]

    @property
    def n_phonemes(self) -> int:
        return len(self.phone_ids)

    @property
    def n_words(self) -> int:
        return self.word_index[-1] + 1 if self.word_index else 0

    def validate(self, n_phones: int | None = None, max_len: int | None = None) -> None:
        uid = self.utt_id
        n = len(self.phone_ids)
        if not uid or "|" in uid or uid != uid.strip():
            raise DataError(f"bad utt_id {uid!r}")
        if n == 0:
            raise DataError(f"{uid}: empty utterance")
        if self.gop.ndim != 2 or self.gop.shape[0] != n:
            raise DataError(f"{uid}: {n} phonemes but {self.gop.shape[0] if self.gop.ndim else 0} GOP rows")
        if len(self.word_index) != n or len(self.phoneme_accuracy) != n:
            raise DataError(
                f"{uid}: ragged record (phones={n}, word_index={len(self.word_index)}, "
                f"phoneme_acc={len(self.phoneme_accuracy)})"
            )
        if max_len is not None and n > max_len:
            raise DataError(f"{uid}: {n} phonemes exceeds max_len {max_len}")
        gop_dim = self.gop.shape[1]
        if gop_dim % 2:
            raise DataError(f"{uid}: GOP width {gop_dim} is not 2 * n_phones")
        limit = gop_dim // 2 if n_phones is None else n_phones
        if n_phones is not None and gop_dim != 2 * n_phones:
            raise DataError(f"{uid}: GOP width {gop_dim} != 2 * n_phones ({2 * n_phones})")
        if any(p < 0 or p >= limit for p in self.phone_ids):
            raise DataError(f"{uid}: phone id outside [0, {limit})")
        if not np.all(np.isfinite(self.gop)):
            raise DataError(f"{uid}: non-finite GOP value")
        wi = self.word_index
        if wi[0] != 0 or any(b - a not in (0, 1) for a, b in zip(wi, wi[1:])):
            raise DataError(f"{uid}: word_index must start at 0 and grow by 0 or 1")
        n_words = wi[-1] + 1
        for name in WORD_ASPECTS:
            vals = self.word_labels.get(name)
            if vals is None or len(vals) != n_words:
                raise DataError(f"{uid}: expected {n_words} word {name} labels")
            if any(not 0.0 <= v <= 10.0 for v in vals):
                raise DataError(f"{uid}: word {name} label outside [0, 10]")
        if any(not 0.0 <= v <= 2.0 for v in self.phoneme_accuracy):
            raise DataError(f"{uid}: phoneme accuracy outside [0, 2]")
        for name in UTT_ASPECTS:
            v = self.utt_labels.get(name)
            if v is None or not 0.0 <= v <= 10.0:
                raise DataError(f"{uid}: utterance {name} label missing or outside [0, 10]")


# ------------------------------------------------------------------ file I/O
def _fmt(x: float) -> str:
    return repr(float(x))


def format_record(s: UtteranceSample) -> str:
    fields = [
        s.utt_id,
        ",".join(str(int(p)) for p in s.phone_ids),
        ",".join(str(int(w)) for w in s.word_index),
        ";".join(",".join(_fmt(v) for v in row) for row in s.gop),
        ",".join(_fmt(v) for v in s.phoneme_accuracy),
        *(",".join(_fmt(v) for v in s.word_labels[a]) for a in WORD_ASPECTS),
        ",".join(_fmt(s.utt_labels[a]) for a in UTT_ASPECTS),
    ]
    return SEP.join(fields)


def parse_record(line: str) -> UtteranceSample:
    parts = line.split("|")
    if len(parts) != 9:
        raise DataError(f"expected 9 fields, got {len(parts)}")
    parts = [p.strip() for p in parts]
    uid = parts[0]
    try:
        phone_ids = [int(v) for v in parts[1].split(",")]
        word_index = [int(v) for v in parts[2].split(",")]
        rows = [[float(v) for v in r.split(",")] for r in parts[3].split(";")]
        widths = {len(r) for r in rows}
        if len(widths) != 1:
            raise DataError(f"{uid}: GOP rows have differing widths {sorted(widths)}")
        gop = np.array(rows, dtype=np.float64)
        phone_acc = [float(v) for v in parts[4].split(",")]
        word_labels = {a: [float(v) for v in parts[5 + k].split(",")] for k, a in enumerate(WORD_ASPECTS)}
        utt_vals = [float(v) for v in parts[8].split(",")]
    except ValueError as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"{uid}: malformed number ({exc})") from None
    if len(utt_vals) != len(UTT_ASPECTS):
        raise DataError(f"{uid}: expected {len(UTT_ASPECTS)} utterance labels, got {len(utt_vals)}")
    return UtteranceSample(uid, phone_ids, gop, word_index, phone_acc, word_labels, dict(zip(UTT_ASPECTS, utt_vals)))


def load_dataset(path: str | Path, n_phones: int | None = None, max_len: int | None = None) -> list[UtteranceSample]:
    """Read and validate a dataset file; errors carry the line number."""
    samples = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            try:
                s = parse_record(line)
                s.validate(n_phones=n_phones, max_len=max_len)
                if s.utt_id in seen:
                    raise DataError(f"duplicate utt_id {s.utt_id}")
                if samples and s.gop.shape[1] != samples[0].gop.shape[1]:
                    raise DataError(f"{s.utt_id}: GOP width differs from earlier records")
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            seen.add(s.utt_id)
            samples.append(s)
    return samples


def write_dataset(samples: Iterable[UtteranceSample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in samples:
            f.write(format_record(s) + "\n")


# ------------------------------------------------------------------- batches
@dataclass(frozen=True)
class Batch:
    n_phones: int  # also the padding phone id
    utt_ids: tuple[str, ...]
    gop: np.ndarray  # [B, T, G]
    phone_ids: np.ndarray  # [B, T], padding = n_phones
    mask: np.ndarray  # [B, T]
    word_index: np.ndarray  # [B, T], padding = -1
    word_align: np.ndarray  # [B, W, T], rows average over a word's phonemes
    word_mask: np.ndarray  # [B, W]
    phone_labels: np.ndarray  # [B, T] on 0-2
    word_labels: dict[str, np.ndarray]  # [B, W] on 0-2
    utt_labels: dict[str, np.ndarray]  # [B] on 0-2
    utt_mask: np.ndarray  # [B]

    @property
    def size(self) -> int:
        return len(self.utt_ids)

    def pad_to(self, length: int, n_words: int | None = None) -> "Batch":
        """Same batch with extra trailing padding (used to check masking)."""
        T = self.mask.shape[1]
        W = self.word_mask.shape[1]
        n_words = W if n_words is None else n_words
        if length < T or n_words < W:
            raise ValueError("pad_to can only grow a batch")
        dt, dw = length - T, n_words - W

        def grow(a, axes_pad, value=0.0):
            return np.pad(a, axes_pad, constant_values=value)

        return _freeze(Batch(
            n_phones=self.n_phones,
            utt_ids=self.utt_ids,
            gop=grow(self.gop, ((0, 0), (0, dt), (0, 0))),
            phone_ids=grow(self.phone_ids, ((0, 0), (0, dt)), self.n_phones),
            mask=grow(self.mask, ((0, 0), (0, dt))),
            word_index=grow(self.word_index, ((0, 0), (0, dt)), -1),
            word_align=grow(self.word_align, ((0, 0), (0, dw), (0, dt))),
            word_mask=grow(self.word_mask, ((0, 0), (0, dw))),
            phone_labels=grow(self.phone_labels, ((0, 0), (0, dt))),
            word_labels={k: grow(v, ((0, 0), (0, dw))) for k, v in self.word_labels.items()},
            utt_labels=dict(self.utt_labels),
            utt_mask=self.utt_mask,
        ))


def _freeze(batch: Batch) -> Batch:
    for value in vars(batch).values():
        arrays = value.values() if isinstance(value, dict) else [value]
        for a in arrays:
            if isinstance(a, np.ndarray):
                a.setflags(write=False)
    return batch


def collate(samples: Sequence[UtteranceSample], n_phones: int = 42, max_len: int = 50) -> Batch:
    """Pad a list of samples to the longest one and build per-level masks."""
    if not samples:
        raise ValueError("collate: no samples")
    B = len(samples)
    for s in samples:
        if s.n_phonemes > max_len:
            raise DataError(f"{s.utt_id}: {s.n_phonemes} phonemes exceeds max_len {max_len}")
    T = max(s.n_phonemes for s in samples)
    W = max(s.n_words for s in samples)
    G = samples[0].gop.shape[1]
    gop = np.zeros((B, T, G))
    phone_ids = np.full((B, T), n_phones, dtype=np.int64)
    mask = np.zeros((B, T))
    word_index = np.full((B, T), -1, dtype=np.int64)
    align = np.zeros((B, W, T))
    word_mask = np.zeros((B, W))
    phone_labels = np.zeros((B, T))
    word_labels = {a: np.zeros((B, W)) for a in WORD_ASPECTS}
    utt_labels = {a: np.zeros(B) for a in UTT_ASPECTS}
    for b, s in enumerate(samples):
        n, nw = s.n_phonemes, s.n_words
        if s.gop.shape[1] != G:
            raise DataError(f"{s.utt_id}: GOP width {s.gop.shape[1]} != {G}")
        gop[b, :n] = s.gop
        phone_ids[b, :n] = s.phone_ids
        mask[b, :n] = 1.0
        wi = np.asarray(s.word_index)
        word_index[b, :n] = wi
        counts = np.bincount(wi, minlength=nw)
        align[b, wi, np.arange(n)] = 1.0 / counts[wi]
        word_mask[b, :nw] = 1.0
        phone_labels[b, :n] = s.phoneme_accuracy
        for a in WORD_ASPECTS:
            word_labels[a][b, :nw] = scale_labels(s.word_labels[a])
        for a in UTT_ASPECTS:
            utt_labels[a][b] = scale_labels(s.utt_labels[a])
    return _freeze(Batch(
        n_phones=n_phones, utt_ids=tuple(s.utt_id for s in samples), gop=gop, phone_ids=phone_ids, mask=mask,
        word_index=word_index, word_align=align, word_mask=word_mask, phone_labels=phone_labels,
        word_labels=word_labels, utt_labels=utt_labels, utt_mask=np.ones(B),
    ))


def make_batches(
    samples: Sequence[UtteranceSample],
    batch_size: int,
    shuffle_seed: int | None = None,
    n_phones: int = 42,
    max_len: int = 50,
) -> list[Batch]:
    """Split into padded batches, shuffled deterministically when a seed is given."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(samples))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(samples))
    return [
        collate([samples[i] for i in order[k:k + batch_size]], n_phones=n_phones, max_len=max_len)
        for k in range(0, len(samples), batch_size)
    ]


# ----------------------------------------------------------- synthetic data
@dataclass
class SyntheticWorld:
    """Every coefficient the generator uses; fully determined by the seed."""

    seed: int
    n_phones: int
    quality_code: np.ndarray  # [2 * n_phones], GOP direction of latent quality
    phone_code: np.ndarray  # [n_phones, 2 * n_phones]
    stress_temperature: float
    utt_mixtures: dict[str, np.ndarray] = field(default_factory=dict)  # weights over word acc/stress/total

    def describe(self) -> dict:
        return {
            "seed": self.seed,
            "n_phones": self.n_phones,
            "quality_code_norm": float(np.linalg.norm(self.quality_code)),
            "stress_temperature": self.stress_temperature,
            "utt_mixtures": {k: [float(x) for x in v] for k, v in self.utt_mixtures.items()},
        }


def synthetic_world(seed: int, n_phones: int = 42) -> SyntheticWorld:
    rng = np.random.default_rng(seed)
    gop_dim = 2 * n_phones
    world = SyntheticWorld(
        seed=seed,
        n_phones=n_phones,
        quality_code=rng.normal(size=gop_dim),
        phone_code=rng.normal(size=(n_phones, gop_dim)),
        stress_temperature=0.03,
        utt_mixtures={a: rng.dirichlet(np.ones(3)) for a in ("accuracy", "fluency", "prosody")},
    )
    return world


# zero-mean, unit-variance deviation patterns by word length
_PATTERNS = {L: (np.linspace(-1.0, 1.0, L) / np.linspace(-1.0, 1.0, L).std()) for L in range(2, 5)}


def word_stress(q: np.ndarray, temperature: float) -> float:
    """Stress label (0-10) from the spread of phoneme quality inside a word."""
    return 10.0 * math.exp(-float(np.var(q)) / temperature)


def synthetic_labels(q_words: Sequence[np.ndarray], world: SyntheticWorld):
    """Word and utterance labels (raw 0-10 scale) implied by per-word qualities."""
    acc = [5.0 * float(np.mean(q)) for q in q_words]
    stress = [word_stress(q, world.stress_temperature) for q in q_words]
    total = [0.7 * a + 0.3 * s for a, s in zip(acc, stress)]
    word_means = np.array([np.mean(acc), np.mean(stress), np.mean(total)])
    utt = {a: float(world.utt_mixtures[a] @ word_means) for a in ("accuracy", "fluency", "prosody")}
    utt["completeness"] = 10.0 * sum(a >= 5.0 for a in acc) / len(acc)
    utt["total"] = (utt["accuracy"] + utt["completeness"] + utt["fluency"] + utt["prosody"]) / 4.0
    utt = {a: min(10.0, max(0.0, utt[a])) for a in UTT_ASPECTS}
    return {"accuracy": acc, "stress": stress, "total": total}, utt


def generate_synthetic(n_utts: int, seed: int, noise: float, n_phones: int = 42) -> list[UtteranceSample]:
    """Draw utterances whose labels are exact functions of a latent quality.

    Each utterance mixes well and badly pronounced words: a per-utterance
    probability picks which words are bad, and good and bad words sit around
    two per-utterance levels on either side of the 1.0 acceptability line.
    Within a word the spread shrinks as the base improves; each phoneme's
    quality is the base plus a scaled, permuted zero-mean pattern.  GOP rows
    are a fixed linear code of (quality, phone) plus ``noise`` times standard
    normal noise.
    """
    if n_utts < 1:
        raise ValueError(f"n_utts must be >= 1, got {n_utts}")
    if noise < 0:
        raise ValueError(f"noise must be >= 0, got {noise}")
    world = synthetic_world(seed, n_phones)
    log.info("synthetic world: %s", world.describe())
    rng = np.random.default_rng([seed, 1])
    out = []
    for u in range(n_utts):
        p_bad = rng.uniform(0.0, 0.8)
        good, bad = rng.uniform(1.05, 1.6), rng.uniform(0.4, 0.95)
        n_words = int(rng.integers(3, 11))
        q_words = []
        for _ in range(n_words):
            length = int(rng.integers(2, 5))
            if rng.random() < p_bad:
                base = float(np.clip(bad + rng.normal(0.0, 0.08), 0.4, 0.98))
            else:
                base = float(np.clip(good + rng.normal(0.0, 0.08), 1.02, 1.6))
            spread = (0.04 + 0.2 * (1.6 - base) / 1.2) * rng.uniform(0.9, 1.1)
            q_words.append(np.clip(base + spread * rng.permutation(_PATTERNS[length]), 0.0, 2.0))
        q_all = np.concatenate(q_words)
        phones = rng.integers(0, n_phones, size=q_all.size)
        gop = q_all[:, None] * world.quality_code + world.phone_code[phones]
        gop = np.round(gop + noise * rng.normal(size=gop.shape), 5)
        word_labels, utt_labels = synthetic_labels(q_words, world)
        out.append(UtteranceSample(
            utt_id=f"syn{seed}_{u:05d}",
            phone_ids=[int(p) for p in phones],
            gop=gop,
            word_index=[w for w, q in enumerate(q_words) for _ in q],
            phoneme_accuracy=[float(v) for v in q_all],
            word_labels=word_labels,
            utt_labels=utt_labels,
        ))
    return out
