"""Average multi-aspect attention weights over a dataset."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .data import UtteranceSample, make_batches
from .tensor import no_grad


def others(names: Sequence[str], target: int) -> list[str]:
    return [n for k, n in enumerate(names) if k != target]


def attention_tables(model, samples: Sequence[UtteranceSample], batch_size: int = 25) -> dict[str, np.ndarray]:
    """Mean ``[N, N-1]`` weight matrix per level.

    Word-level weights are averaged over every real phoneme position in the
    dataset, utterance-level weights over every utterance.
    """
    cfg = model.config
    if not cfg.multi_aspect_attention:
        raise ValueError("checkpoint was trained without multi-aspect attention; no weights to inspect")
    if not samples:
        raise ValueError("attention_tables: empty dataset")
    word_sum = np.zeros((len(cfg.aspects_word), len(cfg.aspects_word) - 1))
    utt_sum = np.zeros((len(cfg.aspects_utt), len(cfg.aspects_utt) - 1))
    n_pos = n_utt = 0
    model.eval()
    with no_grad():
        for batch in make_batches(samples, batch_size, None, cfg.n_phones, cfg.max_len):
            pred = model(batch)
            real = batch.mask > 0
            word_sum += pred.ma_weights_word[real].sum(axis=0)
            n_pos += int(real.sum())
            utt_sum += pred.ma_weights_utt.sum(axis=0)
            n_utt += batch.size
    return {"word": word_sum / n_pos, "utterance": utt_sum / n_utt}


def format_tables(tables: dict[str, np.ndarray], aspects: dict[str, Sequence[str]]) -> str:
    """Tab-separated long format: level, target, source, weight."""
    lines = ["level\ttarget\tsource\tweight"]
    for level, mat in tables.items():
        names = aspects[level]
        for t, target in enumerate(names):
            for s, source in enumerate(others(names, t)):
                lines.append(f"{level}\t{target}\t{source}\t{mat[t, s]:.12f}")
    return "\n".join(lines) + "\n"
