import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from peneo.corpus import SynthSpec, Vocab, generate_synthetic_corpus, tokenize
from peneo.decoder import decode, scores_from_logits
from peneo.encoder import (
    LAYOUT_TABLES,
    Encoder,
    EncoderConfig,
    FeatureError,
    bucketize,
    encode,
    export_features,
    layout_inputs,
    load_external_features,
)
from peneo.fixtures import mini_form
from peneo.model import ModelConfig, PEneoModel
from peneo.numerics import ConfigurationError, ParamStore, grad_check, make_rng
from peneo.parser import parse_document


def make_encoder(vocab_size, seed=0, **kw):
    store = ParamStore()
    return Encoder(EncoderConfig(vocab_size, **kw), store, make_rng(seed)), store


def test_config_validation():
    with pytest.raises(ConfigurationError):
        EncoderConfig(10, c_e=10, heads=3)
    with pytest.raises(ConfigurationError):
        EncoderConfig(10, coord_buckets=1)


def test_bucketize_edges():
    np.testing.assert_array_equal(bucketize(np.array([-0.2, 0.0, 0.49, 0.5, 1.0, 1.3]), 4), [0, 0, 1, 2, 3, 3])


def test_layout_inputs_mini(mini_tokens):
    ids = layout_inputs(mini_tokens, 10)
    assert set(ids) == {"tok", *LAYOUT_TABLES}
    # "12" and "Fox" share their line box but not their in-line offsets
    assert ids["x"][3] == ids["x"][4] and ids["y"][3] == ids["y"][4]
    assert ids["rs"][3] == 0 and ids["rs"][4] > 0


def test_zero_layers_is_embedding_sum(mini_tokens, mini_vocab):
    enc, store = make_encoder(len(mini_vocab), layers=0, c_e=16)
    f = encode(mini_tokens, enc)
    ids = enc.inputs(mini_tokens)
    expected = store["enc/tok"].value[ids["tok"]]
    for k in LAYOUT_TABLES:
        expected = expected + store[f"enc/{k}"].value[ids[k]]
    np.testing.assert_array_equal(f, expected)


@given(st.permutations(range(5)))
def test_permutation_equivariance(perm):
    doc = mini_form()
    vocab = Vocab.build([doc])
    enc, _ = make_encoder(len(vocab), c_e=16, layers=2)
    base = tokenize(doc, vocab)
    f = encode(base, enc)
    doc.lines = [doc.lines[i] for i in perm]
    shuffled = tokenize(doc, vocab)
    g = encode(shuffled, enc)
    # row of token t in the shuffled doc corresponds to the same (line, offset) in the base doc
    index = [base.line_spans[t.line_id][0] + (t.index - shuffled.line_spans[t.line_id][0]) for t in shuffled.tokens]
    np.testing.assert_allclose(g, f[index], rtol=0, atol=1e-6)


def test_encoder_gradient_probe(mini_tokens, mini_vocab):
    enc, store = make_encoder(len(mini_vocab), c_e=8, layers=1, heads=2, coord_buckets=16, layout_init="random")
    ids = enc.inputs(mini_tokens)
    probe = make_rng(5).normal(size=(mini_tokens.N, 8))

    def fn():
        f, cache = enc.forward(ids)
        enc.backward(probe.astype(f.dtype), cache)
        return float((f * probe).sum())

    assert grad_check(fn, store, max_coords_per_param=0) < 1e-4


def test_encoder_deterministic_and_finite(mini_tokens, mini_vocab):
    a = encode(mini_tokens, make_encoder(len(mini_vocab), seed=3)[0])
    b = encode(mini_tokens, make_encoder(len(mini_vocab), seed=3)[0])
    assert a.tobytes() == b.tobytes()
    assert np.isfinite(a).all()


def test_sinusoidal_falls_back_when_narrow(mini_vocab):
    _, store = make_encoder(len(mini_vocab), c_e=16)
    assert not np.allclose(store["enc/tok"].value[:, :8], 0)


def test_vocab_out_of_range(mini_tokens):
    enc, _ = make_encoder(3)
    with pytest.raises(ConfigurationError):
        enc.inputs(mini_tokens)


# ---------------------------------------------------------------------------
# external features


def test_feature_roundtrip(tmp_path, rng):
    feats = {"doc-a": rng.normal(size=(6, 8)).astype(np.float32), "doc-b": rng.normal(size=(3, 8)).astype(np.float32)}
    path = tmp_path / "feats.pene"
    export_features(path, feats)
    for k, v in feats.items():
        assert load_external_features(path, k, expected_n=v.shape[0]).tobytes() == v.tobytes()


def test_feature_errors(tmp_path):
    path = tmp_path / "feats.pene"
    export_features(path, {"doc-a": np.zeros((6, 8), dtype=np.float32), "doc-c": np.zeros(4, dtype=np.float32)})
    with pytest.raises(FeatureError) as e:
        load_external_features(path, "doc-x")
    assert e.value.code == "missing_doc"
    with pytest.raises(FeatureError) as e:
        load_external_features(path, "doc-a", expected_n=5)
    assert e.value.code == "n_mismatch"
    with pytest.raises(FeatureError) as e:
        load_external_features(path, "doc-c")
    assert e.value.code == "bad_rank"


def test_zero_features_still_parse(mini_tokens, mini_vocab):
    model = PEneoModel(mini_vocab, ModelConfig(c_e=16))
    f = np.zeros((mini_tokens.N, 16), dtype=np.float32)
    logits, _ = model.forward(mini_tokens, features=f)
    scores = scores_from_logits(logits)
    pairs = parse_document(decode(scores), scores, mini_tokens)
    assert isinstance(pairs, list)
    assert all(p.key_tokens and p.value_tokens for p in pairs)


def test_shift_augmentation_translates_centres():
    doc = generate_synthetic_corpus(SynthSpec(docs=1), seed=0)[0]
    t = tokenize(doc, Vocab.build([doc]))
    a = layout_inputs(t, 64)
    b = layout_inputs(t, 64, shift=(0.05, 0.0))
    np.testing.assert_array_equal(a["y"], b["y"])
    np.testing.assert_array_equal(a["w"], b["w"])
    assert (b["x"] >= a["x"]).all() and (b["x"] > a["x"]).any()
