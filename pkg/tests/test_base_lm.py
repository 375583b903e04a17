import math

import numpy as np
import pytest

from phead import autodiff as ad
from phead.base_lm import (CLS, MASK, PAD, SEP, UNK, BaseLM, BaseLMConfig, PretrainConfig, Vocab, dumps_base,
                           encode, freeze, load_base, loads_base, pretrain_mlm, save_base, tokenize)
from phead.errors import ConfigError, CorruptionError, DataError, FrozenParameterError
from phead.optim import SGD
from phead.toy import toy_corpus


class TestVocabAndTokenize:
    def test_reserved_ids(self):
        v = Vocab.build(["hello world"])
        assert [v.id(t) for t in ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")] == [PAD, UNK, CLS, SEP, MASK]
        assert sorted(v.index.values()) == list(range(len(v)))

    def test_play_music(self):
        v = Vocab.build(["play music now"])
        assert tokenize("Play Music", v) == [v.id("play"), v.id("music")]

    def test_empty(self):
        assert tokenize("", Vocab.build(["x"])) == []

    def test_oov_is_unk(self):
        assert tokenize("zxqv", Vocab.build(["play music"])) == [1]

    def test_punctuation_split(self):
        v = Vocab.build(["what's up, doc?"])
        assert tokenize("what's up, doc?", v) == [v.id(w) for w in ["what", "'", "s", "up", ",", "doc", "?"]]


class TestEncode:
    def test_shape_contract(self, random_base):
        for t in range(1, random_base.config.max_seq_len + 1):
            enc = encode(random_base, [CLS] + [5] * (t - 1))
            assert enc.hidden.shape == (t, 8)
            assert enc.cls_index == 0 and not enc.truncated

    def test_deterministic(self, random_base):
        a = encode(random_base, [CLS, 5, 6, 7]).hidden
        b = encode(random_base, [CLS, 5, 6, 7]).hidden
        assert np.array_equal(a, b)

    def test_truncates_and_flags(self, random_base):
        enc = encode(random_base, [CLS] + [5] * 20)
        assert enc.truncated and enc.hidden.shape == (8, 8) and len(enc.token_ids) == 8

    def test_batched_matches_single(self, random_base):
        seqs = [[CLS, 5, 6], [CLS, 7, 8, 9, 10], [CLS]]
        many = random_base.encode_many(seqs)
        for s, e in zip(seqs, many):
            np.testing.assert_allclose(e.hidden, encode(random_base, s).hidden, atol=1e-5)

    def test_order_matters(self, small_base):
        v = small_base.vocab
        a = encode(small_base, [CLS] + tokenize("play music", v)).hidden
        b = encode(small_base, [CLS] + tokenize("music play", v)).hidden
        assert not np.allclose(a, b)


class TestPretrain:
    def test_initial_loss_near_uniform(self):
        corpus = ["one two three four five six seven eight nine ten eleven twelve"]
        res = pretrain_mlm(corpus, PretrainConfig(d_model=16, n_layers=1, n_heads=2, d_ff_base=16,
                                                  mask_prob=1e-9, epochs=1, lr=1e-9))
        v = len(res.model.vocab)
        assert res.loss_history[0] == pytest.approx(math.log(v), rel=0.1)

    def test_loss_halves_on_synthetic_corpus(self):
        res = pretrain_mlm(toy_corpus(200, seed=3), PretrainConfig(epochs=30, seed=0))
        assert res.loss_history[-1] < 0.5 * res.loss_history[0]

    def test_seed_determinism(self):
        cfg = PretrainConfig(d_model=16, n_layers=1, n_heads=2, d_ff_base=16, epochs=2, seed=4)
        a = pretrain_mlm(toy_corpus(60), cfg).model
        b = pretrain_mlm(toy_corpus(60), cfg).model
        assert dumps_base(a) == dumps_base(b)

    def test_tiny_corpus_rejected(self):
        with pytest.raises(DataError):
            pretrain_mlm(["a b c"])
        with pytest.raises(DataError):
            pretrain_mlm([])

    def test_bad_mask_prob(self):
        with pytest.raises(ConfigError):
            pretrain_mlm(toy_corpus(10), PretrainConfig(mask_prob=1.0))


class TestFreeze:
    def test_idempotent_and_checksum(self, random_base):
        freeze(random_base)
        c = random_base.weights_checksum
        freeze(random_base)
        assert random_base.frozen and random_base.weights_checksum == c == random_base.checksum()

    def test_optimizer_rejects_frozen(self, random_base):
        freeze(random_base)
        with pytest.raises(FrozenParameterError):
            SGD(random_base.tensors(), lr=0.1)

    def test_weights_read_only(self, random_base):
        freeze(random_base)
        with pytest.raises(ValueError):
            random_base.tok_emb.data[0, 0] = 1.0

    def test_frozen_encode_records_no_graph(self, random_base):
        freeze(random_base)
        ids = np.array([[CLS, 5, 6]])
        h = random_base.hidden_states(ids, np.ones_like(ids, dtype=bool))
        assert not h.requires_grad

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            BaseLMConfig(d_model=10, n_heads=3).validate()


class TestBaseFile:
    def test_round_trip_bitwise(self, small_base, tmp_path):
        save_base(small_base, tmp_path / "base.pibm")
        loaded = load_base(tmp_path / "base.pibm")
        assert loaded.frozen and loaded.vocab.tokens == small_base.vocab.tokens
        for a, b in zip(small_base.tensors(), loaded.tensors()):
            assert np.array_equal(a.data, b.data)
        assert loaded.weights_checksum == small_base.weights_checksum

    def test_layout(self, small_base):
        blob = dumps_base(small_base)
        assert blob[:4] == b"PIBM" and int.from_bytes(blob[4:8], "little") == 1

    def test_corruption_detected(self, small_base):
        blob = bytearray(dumps_base(small_base))
        blob[len(blob) // 2] ^= 0x40
        with pytest.raises(CorruptionError):
            loads_base(bytes(blob))
