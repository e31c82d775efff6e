import math

import numpy as np
import pytest

from endx import instrumentation
from endx import numeric as nx
from endx.aggregator import AggregatorConfig, aggregate, hop_attention, init_aggregator
from endx.cross_attention import (
    CrossAttentionConfig,
    cross_embed,
    cross_head,
    cross_refine,
    init_cross_attention,
)
from endx.encoders import (
    PAD_ID,
    UNK_ID,
    ContextualizedSeq,
    EncoderConfig,
    Vocabulary,
    encode,
    encode_sequence,
    pad_batch,
    positional_encoding,
    tokenize,
)
from endx.numeric import ParameterStore, Tensor
from oracles import loop_aggregate, loop_cross_refine, loop_transformer_encoder

from conftest import small_model


# ---------------------------------------------------------------- tokens


def test_tokenize_known_words():
    vocab = Vocabulary(["what", "is", "x", "?"])
    assert tokenize("What is X?", vocab, 10) == [vocab.id("what"), vocab.id("is"),
                                                 vocab.id("x"), vocab.id("?")]


def test_oov_maps_to_unk():
    vocab = Vocabulary(["a"])
    assert tokenize("zebra", vocab, 5) == [UNK_ID]


def test_truncation():
    vocab = Vocabulary(["w"])
    assert len(tokenize(" ".join(["w"] * 600), vocab, 512)) == 512


def test_empty_text_rejected():
    with pytest.raises(ValueError, match="empty"):
        tokenize("   ", Vocabulary(["a"]), 5)


def test_vocab_round_trip(tmp_path, tiny_vocab):
    tiny_vocab.save(tmp_path / "v.txt")
    again = Vocabulary.load(tmp_path / "v.txt")
    assert again.digest() == tiny_vocab.digest()
    assert len(again) == len(tiny_vocab)


def test_pad_batch():
    ids, mask = pad_batch([[5, 6, 7], [8]])
    assert ids.tolist() == [[5, 6, 7], [8, PAD_ID, PAD_ID]]
    assert mask.tolist() == [[True, True, True], [True, False, False]]


# ---------------------------------------------------------------- encoder


def test_encoder_matches_loop_oracle(tiny_model):
    ids = [2, 5, 3, 7, 4]
    out = encode_sequence(ids, tiny_model.encoder, tiny_model.params, "dual").values.data[0]
    params = tiny_model.params.snapshot()
    ref = loop_transformer_encoder(ids, params, "dual", 8, 2, 1)
    np.testing.assert_allclose(out, ref, atol=1e-8)


def test_encoder_two_layers_matches_oracle(tiny_vocab):
    model = small_model(tiny_vocab, seed=3, layers=2)
    ids = [4, 9, 2]
    out = encode_sequence(ids, model.encoder, model.params, "cross").values.data[0]
    ref = loop_transformer_encoder(ids, model.params.snapshot(), "cross", 8, 2, 2)
    np.testing.assert_allclose(out, ref, atol=1e-8)


def test_padding_does_not_change_valid_rows(tiny_model):
    ids = [3, 6, 2]
    short = encode_sequence(ids, tiny_model.encoder, tiny_model.params, "dual").values.data[0]
    padded_ids, mask = pad_batch([ids + [PAD_ID] * 4])
    long = encode(padded_ids, mask, tiny_model.encoder, tiny_model.params, "dual").values.data[0]
    np.testing.assert_allclose(long[:3], short, atol=1e-12)
    assert np.all(long[3:] == 0.0)


@pytest.mark.parametrize("kind", ["rnn", "gru", "lstm"])
def test_recurrent_padding_invariance(tiny_vocab, kind):
    model = small_model(tiny_vocab, kind=kind)
    ids = [3, 6, 2]
    short = encode_sequence(ids, model.encoder, model.params, "dual").values.data[0]
    padded_ids, mask = pad_batch([ids + [PAD_ID] * 2])
    long = encode(padded_ids, mask, model.encoder, model.params, "dual").values.data[0]
    np.testing.assert_allclose(long[:3], short, atol=1e-12)


def test_zero_weights_give_position_encodings_through_norms(tiny_vocab):
    model = small_model(tiny_vocab)
    for name in model.dual_parameter_names():
        if not name.endswith("gain"):
            model.params.assign(name, np.zeros(model.params[name].shape))
    out = encode_sequence([2, 3], model.encoder, model.params, "dual").values.data[0]
    pe = positional_encoding(2, 8)
    ln = (pe - pe.mean(1, keepdims=True)) / np.sqrt(pe.var(1, keepdims=True) + 1e-5)
    # a second norm of an already normalised row only rescales by the epsilon
    ln = (ln - ln.mean(1, keepdims=True)) / np.sqrt(ln.var(1, keepdims=True) + 1e-5)
    np.testing.assert_allclose(out, ln, atol=1e-10)


def test_encoder_shapes_and_length_limit(tiny_model):
    ids, mask = pad_batch([[2, 3, 4], [5, 6]])
    seq = encode(ids, mask, tiny_model.encoder, tiny_model.params, "dual")
    assert seq.values.shape == (2, 3, 8)
    with pytest.raises(ValueError, match="max_len"):
        encode(ids, mask, tiny_model.encoder, tiny_model.params, "dual", max_len=2)


def test_encoder_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(kind="cnn")
    with pytest.raises(ValueError, match="divisible"):
        EncoderConfig(d_model=10, heads=3)


def test_dual_encoding_never_touches_cross_attention(tiny_model):
    with instrumentation.watch() as delta:
        tiny_model.embed_texts(["where do owls sleep ?"], "question")
    assert delta.get(instrumentation.CROSS_ATTENTION, 0) == 0
    assert delta[instrumentation.QUESTION_ENCODINGS] == 1


# ---------------------------------------------------------------- aggregator


def _agg_store(d=4, hops=2, seed=0):
    store = ParameterStore()
    with nx.precision("float64"):
        init_aggregator(store, "agg", d, AggregatorConfig(hops=hops), np.random.default_rng(seed))
    return store


def test_aggregator_matches_loop_oracle(rng):
    store = _agg_store()
    h = rng.normal(size=(1, 3, 4))
    out = aggregate(ContextualizedSeq(Tensor(h), np.ones((1, 3), bool)), store, "agg").data[0]
    p = store.snapshot()
    ref = loop_aggregate(h[0].tolist(), None, p["agg.W1"].tolist(), p["agg.W2"].tolist(),
                         p["agg.Wp"].tolist(), p["agg.bp"].tolist())
    np.testing.assert_allclose(out, ref, atol=1e-8)


def test_length_one_sequence_is_projection_of_token(rng):
    store = _agg_store()
    h = rng.normal(size=(1, 1, 4))
    out = aggregate(ContextualizedSeq(Tensor(h), np.ones((1, 1), bool)), store, "agg").data[0]
    expected = np.tile(h[0, 0], 2) @ store["agg.Wp"].data + store["agg.bp"].data
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_uniform_logits_pool_the_mean(rng):
    store = _agg_store()
    store.assign("agg.W2", np.zeros((4, 2)))
    h = rng.normal(size=(1, 4, 4))
    _, weights = aggregate(ContextualizedSeq(Tensor(h), np.ones((1, 4), bool)), store, "agg",
                           return_attention=True)
    np.testing.assert_allclose(weights.data, 0.25)
    pooled = weights.data[0] @ h[0]
    np.testing.assert_allclose(pooled, np.tile(h[0].mean(0), (2, 1)))


def test_hop_weights_sum_to_one_and_skip_pads(rng):
    store = _agg_store()
    h = rng.normal(size=(2, 5, 4))
    mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], bool)
    w = hop_attention(ContextualizedSeq(Tensor(h), mask), store, "agg").data
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)
    assert np.all(w[0, :, 3:] == 0.0)


def test_all_pad_sequence_rejected():
    store = _agg_store()
    with pytest.raises(ValueError, match="all-pad"):
        hop_attention(ContextualizedSeq(Tensor(np.zeros((1, 2, 4))), np.zeros((1, 2), bool)),
                      store, "agg")


# ---------------------------------------------------------------- cross-attention


def _cross_store(d=2, heads=1, seed=0):
    store = ParameterStore()
    with nx.precision("float64"):
        init_cross_attention(store, d, CrossAttentionConfig(heads=heads, ffn_mult=1),
                             np.random.default_rng(seed))
    return store


def test_cross_head_hand_fixture():
    store = _cross_store()
    store.assign("cross.attn.Wq", np.eye(2))
    store.assign("cross.attn.Wk", np.eye(2))
    store.assign("cross.attn.Wv", np.array([[1.0, 2.0], [3.0, 4.0]]))
    source = ContextualizedSeq(Tensor(np.array([[[1.0, 0.0], [0.0, 1.0]]])), np.ones((1, 2), bool))
    guide = ContextualizedSeq(Tensor(np.array([[[2.0, 0.0], [0.0, 0.0]]])), np.ones((1, 2), bool))
    out = cross_head(source, guide, store, CrossAttentionConfig(heads=1, ffn_mult=1), 0).data[0]
    # guide row 0: logits [2, 0] / sqrt 2; row 1: equal logits
    w = math.exp(math.sqrt(2.0)) / (math.exp(math.sqrt(2.0)) + 1.0)
    v = np.array([[1.0, 2.0], [3.0, 4.0]])
    expected = np.array([w * v[0] + (1 - w) * v[1], 0.5 * v[0] + 0.5 * v[1]])
    np.testing.assert_allclose(out, expected, atol=1e-10)


def test_single_source_token_gives_value_projection(rng):
    store = _cross_store(d=4, heads=2)
    cfg = CrossAttentionConfig(heads=2, ffn_mult=1)
    source = ContextualizedSeq(Tensor(rng.normal(size=(1, 1, 4))), np.ones((1, 1), bool))
    guide = ContextualizedSeq(Tensor(rng.normal(size=(1, 3, 4))), np.ones((1, 3), bool))
    out = cross_head(source, guide, store, cfg, 1).data[0]
    expected = source.values.data[0, 0] @ store["cross.attn.Wv"].data[:, 2:]
    np.testing.assert_allclose(out, np.tile(expected, (3, 1)), atol=1e-12)


def test_refined_rows_follow_the_guide(tiny_model):
    ids_q, mask_q = pad_batch([[2, 3, 4]])
    ids_a, mask_a = pad_batch([[5, 6, 7, 8, 9]])
    q = encode(ids_q, mask_q, tiny_model.encoder, tiny_model.params, "cross")
    a = encode(ids_a, mask_a, tiny_model.encoder, tiny_model.params, "cross")
    assert cross_refine(q, a, tiny_model.params, tiny_model.cross).values.shape == (1, 5, 8)
    assert cross_refine(a, q, tiny_model.params, tiny_model.cross).values.shape == (1, 3, 8)


def test_degenerate_weights_give_bias_rows(rng):
    store = _cross_store(d=4, heads=2)
    cfg = CrossAttentionConfig(heads=2, ffn_mult=1)
    for name in ("cross.attn.Wo", "cross.ffn.W2", "cross.ffn.b2"):
        store.assign(name, np.zeros(store[name].shape))
    store.assign("cross.ln.bias", np.array([0.1, -0.2, 0.3, 0.4]))
    source = ContextualizedSeq(Tensor(rng.normal(size=(1, 2, 4))), np.ones((1, 2), bool))
    guide = ContextualizedSeq(Tensor(rng.normal(size=(1, 3, 4))), np.ones((1, 3), bool))
    out = cross_refine(source, guide, store, cfg).values.data[0]
    np.testing.assert_allclose(out, np.tile([0.1, -0.2, 0.3, 0.4], (3, 1)), atol=1e-12)


def test_cross_refine_matches_loop_oracle(tiny_model, rng):
    src = rng.normal(size=(1, 3, 8))
    gd = rng.normal(size=(1, 4, 8))
    smask = np.array([[True, True, False]])
    gmask = np.array([[True, True, True, False]])
    out = cross_refine(ContextualizedSeq(Tensor(src), smask), ContextualizedSeq(Tensor(gd), gmask),
                       tiny_model.params, tiny_model.cross).values.data[0]
    ref = loop_cross_refine(src[0].tolist(), smask[0].tolist(), gd[0].tolist(),
                            gmask[0].tolist(), tiny_model.params.snapshot(), 2)
    np.testing.assert_allclose(out, ref, atol=1e-8)


def test_batched_cross_embed_equals_per_pair(tiny_model):
    qs = [[2, 3, 4], [5, 6]]
    ans = [[7, 8], [9, 10, 11, 12]]
    ids_q, mask_q = pad_batch(qs)
    ids_a, mask_a = pad_batch(ans)
    rq, ra = tiny_model.cross_embed(ids_q, mask_q, ids_a, mask_a)
    assert rq.shape == ra.shape == (2, tiny_model.embedding_dim)
    for i in range(2):
        one_q, one_mq = pad_batch([qs[i]])
        one_a, one_ma = pad_batch([ans[i]])
        sq, sa = tiny_model.cross_embed(one_q, one_mq, one_a, one_ma)
        np.testing.assert_allclose(rq.data[i], sq.data[0], atol=1e-10)
        np.testing.assert_allclose(ra.data[i], sa.data[0], atol=1e-10)


def test_symmetric_inputs_give_equal_cross_embeddings(tiny_model):
    tiny_model.params.assign("cross.agg.a.W1", tiny_model.params["cross.agg.q.W1"].data)
    tiny_model.params.assign("cross.agg.a.W2", tiny_model.params["cross.agg.q.W2"].data)
    tiny_model.params.assign("cross.agg.a.Wp", tiny_model.params["cross.agg.q.Wp"].data)
    ids, mask = pad_batch([[2, 3, 4]])
    seq = encode(ids, mask, tiny_model.encoder, tiny_model.params, "cross")
    rq, ra = cross_embed(seq, seq, tiny_model.params, tiny_model.cross)
    np.testing.assert_allclose(rq.data, ra.data, atol=1e-12)


def test_cross_attention_is_counted(tiny_model):
    ids, mask = pad_batch([[2, 3]])
    with instrumentation.watch() as delta:
        tiny_model.cross_embed(ids, mask, ids, mask)
    assert delta[instrumentation.CROSS_ATTENTION] == 2


def test_mismatched_pair_rejected(rng):
    store = _cross_store(d=4, heads=2)
    a = ContextualizedSeq(Tensor(rng.normal(size=(2, 2, 4))), np.ones((2, 2), bool))
    b = ContextualizedSeq(Tensor(rng.normal(size=(1, 2, 4))), np.ones((1, 2), bool))
    with pytest.raises(ValueError, match="batch"):
        cross_refine(a, b, store, CrossAttentionConfig(heads=2, ffn_mult=1))
