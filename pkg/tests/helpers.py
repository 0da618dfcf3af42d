import numpy as np

from hipama.data import UTT_ASPECTS, UtteranceSample, collate
from hipama.model import ModelConfig

TOY = dict(n_phones=3, gop_dim=6, width=4, heads=2, dropout_utt=0.0)


def toy_config(**kw) -> ModelConfig:
    return ModelConfig(**{**TOY, **kw})


def random_sample(rng, word_index, n_phones=3, utt_id="u0") -> UtteranceSample:
    n = len(word_index)
    n_words = word_index[-1] + 1
    return UtteranceSample(
        utt_id=utt_id,
        phone_ids=[int(p) for p in rng.integers(0, n_phones, size=n)],
        gop=rng.normal(size=(n, 2 * n_phones)),
        word_index=list(word_index),
        phoneme_accuracy=[float(v) for v in rng.uniform(0, 2, size=n)],
        word_labels={a: [float(v) for v in rng.uniform(0, 10, size=n_words)] for a in ("accuracy", "stress", "total")},
        utt_labels={a: float(rng.uniform(0, 10)) for a in UTT_ASPECTS},
    )


def toy_batch(rng, n_phones=3, max_len=50):
    samples = [random_sample(rng, [0, 1, 1], n_phones, "a"), random_sample(rng, [0, 0], n_phones, "b")]
    return collate(samples, n_phones=n_phones, max_len=max_len)
