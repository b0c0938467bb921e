import numpy as np
import pytest

from jachess import autodiff as ad
from jachess.model import (
    EOS,
    PAD,
    Checkpoint,
    ConfigError,
    ModelConfig,
    attention_mask,
    encode_batch,
    forward,
    forward_ids,
    init_model,
    load_checkpoint,
    pair_forward,
    param_names,
    predict,
    save_checkpoint,
)


@pytest.fixture(scope="module")
def ckpt():
    return init_model(ModelConfig())


@pytest.mark.parametrize("kw,msg", [
    ({"embed_dim": 30, "num_heads": 4}, "divisible"),
    ({"vocab_size": 2}, "special"),
    ({"num_classes": 1}, "num_classes"),
    ({"num_layers": 0}, "num_layers"),
])
def test_config_validation(kw, msg):
    with pytest.raises(ConfigError, match=msg):
        ModelConfig(**kw)


def test_from_dict_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown"):
        ModelConfig.from_dict({"hidden": 3})


def test_init_is_seeded():
    a = init_model(ModelConfig(seed=3))
    b = init_model(ModelConfig(seed=3))
    c = init_model(ModelConfig(seed=4))
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert not np.array_equal(a.params["h0.wq"], c.params["h0.wq"])
    assert list(a.params) == param_names(a.config)


def test_encode_batch_pads_and_validates():
    cfg = ModelConfig(max_seq_len=5)
    ids, lengths = encode_batch([[3, 4], [5, 6, 7]], cfg)
    assert ids.tolist() == [[3, 4, PAD], [5, 6, 7]]
    assert lengths.tolist() == [2, 3]
    with pytest.raises(ValueError, match="max_seq_len"):
        encode_batch([[3] * 6], cfg)
    with pytest.raises(ValueError, match="vocab_size"):
        encode_batch([[3, 99]], cfg)
    with pytest.raises(ValueError, match="empty"):
        encode_batch([], cfg)


def test_attention_mask_is_causal_and_hides_pads():
    m = attention_mask(np.array([2]), 3)[0, 0]
    allowed = m == 0
    assert allowed.tolist() == [[True, False, False], [True, True, False], [True, True, False]]


def test_padding_does_not_change_logits(ckpt):
    short = [5, 9, 11]
    alone = forward(ckpt, short).logits.data
    batched = forward(ckpt, [short, [4, 4, 4, 4, 4, 4, 4]]).logits.data
    np.testing.assert_allclose(batched[0], alone[0], rtol=1e-12, atol=1e-12)


def test_layers_are_last_token_vectors(ckpt):
    tr = forward(ckpt, [[5, 6, 7], [8, 9]])
    assert len(tr.layers) == ckpt.config.num_layers
    assert all(z.shape == (2, ckpt.config.embed_dim) for z in tr.layers)
    assert tr.logits.shape == (2, 2)
    np.testing.assert_allclose(tr.probs.data.sum(axis=1), 1.0)


def test_causal_last_token_ignores_nothing_before_it(ckpt):
    a = forward(ckpt, [5, 6, 7]).logits.data
    b = forward(ckpt, [9, 6, 7]).logits.data
    assert not np.allclose(a, b)


def test_regression_head():
    ck = init_model(ModelConfig(num_classes=0))
    tr = forward(ck, [4, 5, 6])
    assert tr.logits.shape == (1, 1) and tr.probs is None


def test_upto_stops_early(ckpt):
    tr = forward(ckpt, [4, 5], upto=2)
    assert len(tr.layers) == 2 and tr.logits is None
    with pytest.raises(ValueError):
        forward(ckpt, [4, 5], upto=0)


def test_embeddings_override_matches_clean(ckpt):
    ids, lengths = encode_batch([[4, 5, 6]], ckpt.config)
    clean = forward_ids(ckpt, ids, lengths).logits.data
    emb = ckpt.params["tok_emb"][ids]
    same = forward_ids(ckpt, ids, lengths, embeddings=emb).logits.data
    assert np.array_equal(clean, same)
    with pytest.raises(ad.ShapeError):
        forward_ids(ckpt, ids, lengths, embeddings=emb[:, :2])


def test_pair_forward_inserts_separator(ckpt):
    a = pair_forward(ckpt, [4, 5], [6]).logits.data
    b = forward(ckpt, [4, 5, EOS, 6]).logits.data
    assert np.array_equal(a, b)
    with pytest.raises(ValueError, match="pair length"):
        pair_forward(ckpt, [4] * 20, [5] * 20)


def test_predict_matches_forward(ckpt):
    seqs = [[4, 5, 6], [7, 8], [9, 10, 11, 12]]
    np.testing.assert_allclose(predict(ckpt, seqs, batch_size=2), forward(ckpt, seqs).logits.data,
                               rtol=1e-12, atol=1e-12)


def test_train_mode_gradients_reach_embedding_table(ckpt):
    ids, lengths = encode_batch([[4, 5, 4]], ckpt.config)
    tr = forward_ids(ckpt, ids, lengths, train=True)
    g = ad.grad(ad.cross_entropy(tr.logits, np.array([1])), [tr.params["tok_emb"]])[0].data
    touched = np.flatnonzero(np.abs(g).sum(axis=1))
    assert touched.tolist() == [4, 5]


def test_checkpoint_roundtrip_and_bytes(tmp_path, ckpt):
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    save_checkpoint(Checkpoint(ckpt.config, ckpt.params, 7), p1)
    save_checkpoint(Checkpoint(ckpt.config, ckpt.params, 7), p2)
    assert p1.read_bytes() == p2.read_bytes()
    back = load_checkpoint(p1)
    assert back.step == 7 and back.config == ckpt.config
    assert all(np.array_equal(back.params[k], ckpt.params[k]) for k in ckpt.params)


def test_load_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(p)
