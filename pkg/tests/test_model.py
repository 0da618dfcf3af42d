import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import max_rel_error
from helpers import random_sample, toy_batch, toy_config
from hipama.data import collate, generate_synthetic, make_batches
from hipama.layers import AttentionPooling
from hipama.model import (
    ConfigError,
    HiPAMA,
    ModelConfig,
    PredictionSet,
    combine_level_losses,
    hierarchical_loss,
    masked_mean,
    multi_aspect_attention,
)
from hipama.tensor import Tensor, no_grad, softmax


@pytest.fixture(scope="module")
def default_batch():
    return make_batches(generate_synthetic(6, seed=4, noise=0.1), batch_size=6)[0]


# ------------------------------------------------------------------ config
def test_config_defaults():
    cfg = ModelConfig()
    assert (cfg.n_phones, cfg.gop_dim, cfg.width, cfg.heads, cfg.kernel_size) == (42, 84, 24, 4, 3)
    assert cfg.dropout_utt == 0.2 and cfg.max_len == 50
    assert cfg.aspects_word == ["accuracy", "stress", "total"]
    assert cfg.aspects_utt == ["accuracy", "completeness", "fluency", "prosody", "total"]
    assert cfg.hierarchical and cfg.multi_aspect_attention and not cfg.positional_encoding


@pytest.mark.parametrize(
    "kw",
    [dict(gop_dim=80), dict(aspects_word=[]), dict(aspects_utt=["accuracy", "accuracy"]), dict(width=10)],
)
def test_config_rejects_invalid(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw)


def test_parameter_names_are_unique_and_hierarchical():
    names = [n for n, _ in HiPAMA(ModelConfig()).named_parameters()]
    assert len(names) == len(set(names))
    assert "word.accuracy.dense.weight" in names
    assert "utt.completeness.pool.query" in names


# ------------------------------------------------------------------- embed
def test_embed_zero_gop_padding_ids_is_zero():
    model = HiPAMA(ModelConfig())
    out = model.embed_inputs(np.zeros((2, 5, 84)), np.full((2, 5), 42), np.zeros((2, 5)))
    assert out.shape == (2, 5, 24)
    assert np.all(out.data == 0)


def test_embed_is_pure_and_24_wide(default_batch):
    model = HiPAMA(ModelConfig())
    b = default_batch
    x1 = model.embed_inputs(b.gop, b.phone_ids, b.mask)
    x2 = model.embed_inputs(b.gop, b.phone_ids, b.mask)
    assert x1.shape[-1] == 24
    assert x1.data.tobytes() == x2.data.tobytes()
    np.testing.assert_array_equal(x1.data[0], model.embed_inputs(b.gop[:1], b.phone_ids[:1], b.mask[:1]).data[0])


def test_embed_rejects_bad_phone_id():
    model = HiPAMA(ModelConfig())
    with pytest.raises(ValueError, match="phone id"):
        model.embed_inputs(np.zeros((1, 2, 84)), np.array([[0, 43]]), np.ones((1, 2)))


# --------------------------------------------------------- phoneme encoder
def test_phoneme_encoder_shapes_and_padding():
    rng = np.random.default_rng(0)
    model = HiPAMA(ModelConfig())
    mask = np.ones((2, 50))
    mask[1, 30:] = 0
    h, scores = model.phoneme_encoder(Tensor(rng.normal(size=(2, 50, 24))), mask)
    assert h.shape == (2, 50, 24) and scores.shape == (2, 50)
    assert np.all(scores.data[1, 30:] == 0.0)


def test_phoneme_loss_gradient_wrt_lstm_input():
    rng = np.random.default_rng(1)
    model = HiPAMA(toy_config())
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    mask = np.array([[1.0, 1.0, 1.0], [1.0, 1.0, 0.0]])
    gold = rng.uniform(0, 2, size=(2, 3))

    def loss():
        _, s = model.phoneme_encoder(x, mask)
        d = (s - gold) * mask
        return (d * d).sum() * (1.0 / mask.sum())

    assert max_rel_error(loss, [x]) < 1e-4


# --------------------------------------------------- multi-aspect attention
def _pools(n, d, seed=0):
    rng = np.random.default_rng(seed)
    return [AttentionPooling(d, rng) for _ in range(n)]


def test_ma_two_aspects():
    a = [Tensor([1.0, 0.0]), Tensor([0.0, 1.0])]
    r, m, v = multi_aspect_attention(a, _pools(2, 2))
    np.testing.assert_array_equal(v, [[1.0], [1.0]])
    np.testing.assert_allclose(r[0].data, [1.0, 1.0], atol=1e-15)
    np.testing.assert_allclose(r[1].data, [1.0, 1.0], atol=1e-15)


def _oracle_ma(a, pools):
    """Straight-line evaluation with plain floats, one target at a time."""
    n, d = len(a), len(a[0])
    result = []
    for t in range(n):
        W = pools[t].weight.data.tolist()
        b = pools[t].bias.data.tolist()
        q = [row[0] for row in pools[t].query.data.tolist()]
        S = [a[k] for k in range(n) if k != t]
        e = [sum(q[j] * math.tanh(sum(s[i] * W[i][j] for i in range(d)) + b[j]) for j in range(d)) for s in S]
        z = sum(math.exp(x) for x in e)
        u = [math.exp(x) / z for x in e]
        A = [[u[i] * S[i][j] for j in range(d)] for i in range(len(S))]
        sc = [sum(a[t][j] * A[i][j] for j in range(d)) / math.sqrt(d) for i in range(len(S))]
        zs = sum(math.exp(x) for x in sc)
        v = [math.exp(x) / zs for x in sc]
        m = [sum(v[i] * A[i][j] for i in range(len(S))) for j in range(d)]
        result.append(([a[t][j] + m[j] for j in range(d)], v))
    return result


def test_ma_three_aspects_against_oracle():
    vecs = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]
    pools = _pools(3, 2, seed=5)
    r, m, v = multi_aspect_attention([Tensor(x) for x in vecs], pools)
    for n, (r_exp, v_exp) in enumerate(_oracle_ma(vecs, pools)):
        np.testing.assert_allclose(r[n].data, r_exp, rtol=0, atol=1e-12)
        np.testing.assert_allclose(v[n], v_exp, rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 5), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_ma_weight_rows_normalised(N, d, seed):
    rng = np.random.default_rng(seed)
    a = [Tensor(rng.normal(size=(3, d))) for _ in range(N)]
    r, m, v = multi_aspect_attention(a, _pools(N, d, seed))
    assert v.shape == (3, N, N - 1)
    np.testing.assert_allclose(v.sum(axis=-1), 1.0, atol=1e-12)
    for n in range(N):
        np.testing.assert_allclose(r[n].data - a[n].data, m[n].data, atol=1e-12)


def test_ma_single_aspect_is_skipped_and_empty_rejected():
    a = [Tensor([1.0, 2.0])]
    r, _, v = multi_aspect_attention(a, [])
    assert r[0] is a[0] and v.shape == (1, 0)
    with pytest.raises(ValueError):
        multi_aspect_attention([], [])


# -------------------------------------------------------------- word level
def test_single_phoneme_word_equals_position_score():
    rng = np.random.default_rng(2)
    model = HiPAMA(toy_config())
    batch = collate([random_sample(rng, [0, 1, 1])], n_phones=3)
    h, _ = model.phoneme_encoder(model.embed_inputs(batch.gop, batch.phone_ids, batch.mask), batch.mask)
    reps, scores, _, _ = model.word_level(h, batch.mask, batch.word_align)
    for name, r in zip(model.word, reps):
        pos = model.word[name].head(r).data[0, :, 0]
        assert scores[name].data[0, 0] == pos[0]
        assert scores[name].data[0, 1] == pytest.approx((pos[1] + pos[2]) / 2, abs=1e-15)


def test_word_score_is_alignment_mean():
    rng = np.random.default_rng(3)
    batch = collate([random_sample(rng, [0, 0])], n_phones=3)
    from hipama.tensor import matmul

    pos = Tensor(np.array([[[0.4], [0.8]]]))
    assert matmul(Tensor(batch.word_align), pos).data[0, 0, 0] == pytest.approx(0.6, abs=1e-15)


# --------------------------------------------------------- utterance level
def test_single_position_utterance_pools_that_position():
    rng = np.random.default_rng(4)
    model = HiPAMA(toy_config())
    g = model.utt_attention(Tensor(rng.normal(size=(2, 1, 4))), np.ones((2, 1)))
    np.testing.assert_array_equal(masked_mean(g, np.ones((2, 1))).data, g.data[:, 0])


def test_utterance_scores_ignore_trailing_padding(default_batch):
    model = HiPAMA(ModelConfig()).eval()
    b = default_batch
    with no_grad():
        p1 = model(b)
        p2 = model(b.pad_to(b.mask.shape[1] + 7, b.word_mask.shape[1] + 2))
    for k in p1.utterance:
        np.testing.assert_allclose(p1.utterance[k].data, p2.utterance[k].data, rtol=0, atol=1e-9)
    np.testing.assert_allclose(p1.ma_weights_utt.sum(axis=-1), 1.0, atol=1e-12)


# ----------------------------------------------------------------- forward
def test_default_parameter_count_in_band():
    n = HiPAMA(ModelConfig()).num_parameters()
    assert 22_100 <= n <= 41_100
    assert HiPAMA(ModelConfig(seed=9)).num_parameters() == n


def test_ablation_parameter_counts_differ():
    counts = {
        (h, ma): HiPAMA(ModelConfig(hierarchical=h, multi_aspect_attention=ma)).num_parameters()
        for h in (True, False) for ma in (True, False)
    }
    assert len(set(counts.values())) == 4


def test_eval_forward_is_bitwise_deterministic(default_batch):
    model = HiPAMA(ModelConfig()).eval()
    p1, p2 = model(default_batch), model(default_batch)
    assert p1.phoneme_scores.tobytes() == p2.phoneme_scores.tobytes()
    for k in p1.word:
        assert p1.word[k].data.tobytes() == p2.word[k].data.tobytes()
    for k in p1.utterance:
        assert p1.utterance[k].data.tobytes() == p2.utterance[k].data.tobytes()


def test_prediction_shapes(default_batch):
    b = default_batch
    p = HiPAMA(ModelConfig()).eval()(b)
    B, T = b.mask.shape
    W = b.word_mask.shape[1]
    assert p.phoneme_scores.shape == (B, T)
    assert all(v.shape == (B, W) for v in p.word_scores.values())
    assert all(v.shape == (B,) for v in p.utterance_scores.values())
    assert p.ma_weights_word.shape == (B, T, 3, 2)
    assert p.ma_weights_utt.shape == (B, 5, 4)


def test_positional_encoding_flag_changes_outputs(default_batch):
    on = HiPAMA(ModelConfig(positional_encoding=True)).eval()(default_batch)
    off = HiPAMA(ModelConfig()).eval()(default_batch)
    assert not np.array_equal(on.phoneme_scores, off.phoneme_scores)


# -------------------------------------------------------------------- loss
def _single_utterance_batch():
    rng = np.random.default_rng(6)
    s = random_sample(rng, [0])
    return collate([s], n_phones=3)


def _prediction(batch, phone, word, utt):
    return PredictionSet(
        phoneme=Tensor(np.array([[phone]])),
        word={k: Tensor(np.array([[v]])) for k, v in word.items()},
        utterance={k: Tensor(np.array([v])) for k, v in utt.items()},
        ma_weights_word=None, ma_weights_utt=None,
    )


def test_loss_zero_for_perfect_predictions():
    b = _single_utterance_batch()
    pred = _prediction(
        b, b.phone_labels[0, 0], {k: v[0, 0] for k, v in b.word_labels.items()},
        {k: v[0] for k, v in b.utt_labels.items()},
    )
    assert hierarchical_loss(pred, b).total.item() == 0.0


def test_loss_equal_terms_sum_to_three_c():
    c = 0.37
    assert combine_level_losses([[c], [c, c, c], [c] * 5]) == pytest.approx(3 * c, abs=1e-15)


def test_loss_hand_example():
    b = _single_utterance_batch()
    word_err = dict(zip(b.word_labels, [0.03, 0.06, 0.09]))
    pred = _prediction(
        b,
        b.phone_labels[0, 0] + 0.1,
        {k: b.word_labels[k][0, 0] + math.sqrt(word_err[k]) for k in b.word_labels},
        {k: b.utt_labels[k][0] - math.sqrt(0.05) for k in b.utt_labels},
    )
    result = hierarchical_loss(pred, b)
    assert result.total.item() == pytest.approx(0.12, abs=1e-12)
    assert result.terms["word.stress"] == pytest.approx(0.06, abs=1e-12)


def test_loss_rejects_shape_mismatch():
    b = _single_utterance_batch()
    pred = _prediction(b, 0.0, {k: 0.0 for k in b.word_labels}, {k: 0.0 for k in b.utt_labels})
    pred.phoneme = Tensor(np.zeros((1, 2)))
    with pytest.raises(ValueError, match="masked_mse"):
        hierarchical_loss(pred, b)


# -------------------------------------------------------------- invariants
def test_residual_identity_every_level(default_batch):
    p = HiPAMA(ModelConfig()).eval()(default_batch)
    for states in (p.aspects_word, p.aspects_utt):
        for s in states.values():
            np.testing.assert_allclose(s.r - s.a, s.m, rtol=0, atol=1e-12)


def test_no_ma_means_r_equals_a(default_batch):
    p = HiPAMA(ModelConfig(multi_aspect_attention=False)).eval()(default_batch)
    assert p.ma_weights_word is None and p.ma_weights_utt is None
    for s in list(p.aspects_word.values()) + list(p.aspects_utt.values()):
        assert np.array_equal(s.r, s.a)


def _perturbed(model, name, batch):
    dict(model.named_parameters())[name].data += 0.5
    return model(batch)


def test_ablation_isolates_aspect_modules(default_batch):
    model = HiPAMA(ModelConfig(multi_aspect_attention=False)).eval()
    before = model(default_batch)
    after = _perturbed(model, "word.stress.dense.weight", default_batch)
    assert np.array_equal(before.word["accuracy"].data, after.word["accuracy"].data)
    assert not np.array_equal(before.word["stress"].data, after.word["stress"].data)
    before = after
    after = _perturbed(model, "utt.fluency.dense.bias", default_batch)
    assert np.array_equal(before.utterance["accuracy"].data, after.utterance["accuracy"].data)


def test_hierarchy_dependence(default_batch):
    hier = HiPAMA(ModelConfig()).eval()
    before = hier(default_batch)
    after = _perturbed(hier, "word.stress.dense.weight", default_batch)
    assert not np.array_equal(before.utterance["total"].data, after.utterance["total"].data)

    flat = HiPAMA(ModelConfig(hierarchical=False)).eval()
    before = flat(default_batch)
    after = _perturbed(flat, "word.stress.dense.weight", default_batch)
    for k in before.utterance:
        assert np.array_equal(before.utterance[k].data, after.utterance[k].data)


@pytest.mark.parametrize("kw", [{}, dict(hierarchical=False), dict(multi_aspect_attention=False)])
def test_full_model_gradients(kw):
    rng = np.random.default_rng(8)
    model = HiPAMA(toy_config(**kw)).eval()
    batch = toy_batch(rng)
    assert batch.mask.shape == (2, 3)
    err = max_rel_error(lambda: hierarchical_loss(model(batch), batch).total, model.parameters())
    assert err < 1e-4


def test_captured_weights_match_recomputation(default_batch):
    model = HiPAMA(ModelConfig()).eval()
    p = model(default_batch)
    names = model.config.aspects_utt
    a = [Tensor(p.aspects_utt[n].a) for n in names]
    d = a[0].shape[-1]
    for t, name in enumerate(names):
        others = np.stack([a[k].data for k in range(len(names)) if k != t], axis=-2)
        pooled, _ = model.utt[name].pool(Tensor(others))
        scores = np.einsum("bkd,bd->bk", pooled.data, a[t].data) / math.sqrt(d)
        np.testing.assert_allclose(p.ma_weights_utt[:, t], softmax(Tensor(scores)).data, atol=1e-12)


def test_loss_decomposition(default_batch):
    model = HiPAMA(ModelConfig()).eval()
    b = default_batch
    p = model(b)
    result = hierarchical_loss(p, b)
    m = b.mask > 0
    phone = np.mean((p.phoneme_scores[m] - b.phone_labels[m]) ** 2)
    wm = b.word_mask > 0
    word = np.mean([np.mean((p.word[k].data[wm] - b.word_labels[k][wm]) ** 2) for k in p.word])
    utt = np.mean([np.mean((p.utterance[k].data - b.utt_labels[k]) ** 2) for k in p.utterance])
    assert result.total.item() == pytest.approx(phone + word + utt, abs=1e-12)
