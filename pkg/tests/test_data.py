import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phead.base_lm import CLS, SEP, Vocab
from phead.data import (Dataset, LabeledExample, convert_clinc, convert_snips, dump_jsonl, load_jsonl,
                        make_binary_pairs, pair_ids, predict_class, subsample_per_class, verbalize)
from phead.errors import ConfigError, DataError
from phead.toy import TOY_CLASSES, make_toy_dataset


def write_lines(path, rows):
    path.write_text("\n".join(r if isinstance(r, str) else json.dumps(r) for r in rows) + "\n")
    return path


class TestJsonl:
    def test_two_classes(self, tmp_path):
        p = write_lines(tmp_path / "d.jsonl", [{"text": "a", "label": "x"}, {"text": "b", "label": "y"}])
        ds = load_jsonl(p)
        assert ds.classes == ["x", "y"] and len(ds.train) == 2 and ds.test == []

    def test_header_fixes_order(self, tmp_path):
        p = write_lines(tmp_path / "d.jsonl", [{"classes": ["y", "x"], "name": "demo"},
                                               {"text": "a", "label": "x", "split": "test"}])
        ds = load_jsonl(p)
        assert ds.classes == ["y", "x"] and ds.name == "demo" and len(ds.test) == 1

    def test_empty_file(self, tmp_path):
        with pytest.raises(DataError, match="no classes"):
            load_jsonl(write_lines(tmp_path / "e.jsonl", []))

    def test_malformed_line_number(self, tmp_path):
        p = write_lines(tmp_path / "m.jsonl", [{"text": "a", "label": "x"}, "{not json"])
        with pytest.raises(DataError, match=":2:"):
            load_jsonl(p)

    def test_missing_label(self, tmp_path):
        with pytest.raises(DataError):
            load_jsonl(write_lines(tmp_path / "m.jsonl", [{"text": "a"}]))

    def test_undeclared_class(self, tmp_path):
        p = write_lines(tmp_path / "m.jsonl", [{"classes": ["x"]}, {"text": "a", "label": "z"}])
        with pytest.raises(DataError):
            load_jsonl(p)

    def test_round_trip(self, tiny_dataset, tmp_path):
        dump_jsonl(tiny_dataset, tmp_path / "t.jsonl")
        back = load_jsonl(tmp_path / "t.jsonl")
        assert back == tiny_dataset


class TestVerbalize:
    @pytest.mark.parametrize("name,expected", [("play_music", "play music"), ("PlayMusic", "play music"),
                                               ("AddToPlaylist", "add to playlist"), ("weather", "weather"),
                                               ("get__weather_", "get weather")])
    def test_examples(self, name, expected):
        assert verbalize(name) == expected

    def test_pair_layout(self):
        v = Vocab.build(["play music the song"])
        assert pair_ids("play music", "the song", v) == [CLS, v.id("play"), v.id("music"), SEP,
                                                          v.id("the"), v.id("song")]


class TestPairs:
    def test_true_only(self, tiny_dataset):
        pairs = make_binary_pairs(tiny_dataset, 0)
        assert len(pairs) == 5 and all(p.target for p in pairs)
        assert Counter(p.label_text for p in pairs) == Counter({"play music": 2, "get weather": 2, "rate book": 1})

    def test_all_negatives(self, tiny_dataset):
        pairs = make_binary_pairs(tiny_dataset, 2)
        assert len(pairs) == 15 and sum(p.target for p in pairs) == 5
        for text in {p.input_text for p in pairs}:
            assert len({p.label_text for p in pairs if p.input_text == text}) == 3

    def test_too_many_negatives(self, tiny_dataset):
        with pytest.raises(ConfigError):
            make_binary_pairs(tiny_dataset, 3)

    def test_negatives_never_match(self, tiny_dataset):
        by_text = {ex.text: verbalize(ex.class_name) for ex in tiny_dataset.train}
        for p in make_binary_pairs(tiny_dataset, 1, seed=3):
            assert (p.label_text == by_text[p.input_text]) == p.target

    def test_seeded(self, tiny_dataset):
        assert make_binary_pairs(tiny_dataset, 1, seed=7) == make_binary_pairs(tiny_dataset, 1, seed=7)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 6), st.lists(st.integers(0, 5), min_size=0, max_size=40), st.integers(0, 100))
    def test_pair_counts_property(self, n_classes, labels, seed):
        classes = [f"c{i}" for i in range(n_classes)]
        ds = Dataset("h", classes, [LabeledExample(f"t{j}", classes[l % n_classes]) for j, l in enumerate(labels)])
        assert len(make_binary_pairs(ds, 0, seed)) == len(labels)
        assert len(make_binary_pairs(ds, n_classes - 1, seed)) == len(labels) * n_classes


class TestSubsample:
    def test_identity_at_full_size(self, tiny_dataset):
        full = Dataset("x", ["a", "b"], [LabeledExample(str(i), "ab"[i % 2]) for i in range(6)])
        assert subsample_per_class(full, "train", 3).train == full.train

    def test_toy_counts(self):
        ds = make_toy_dataset()
        sub = subsample_per_class(ds, "train", 100)
        assert len(sub.train) == 700
        assert Counter(e.class_name for e in sub.train) == {c: 100 for c in TOY_CLASSES}

    def test_nested(self):
        ds = make_toy_dataset()
        small = set(subsample_per_class(ds, "train", 20, seed=4).train)
        large = set(subsample_per_class(ds, "train", 50, seed=4).train)
        assert small < large

    def test_too_few(self, tiny_dataset):
        with pytest.raises(DataError):
            subsample_per_class(tiny_dataset, "train", 2)


def brute_force_argmax(scores, classes):
    best_score = max(scores)
    for c, s in zip(classes, scores):
        if s == best_score:
            return c, s


class TestPredictClass:
    CLASSES = ["a", "b", "c"]

    @pytest.mark.parametrize("scores,expected", [((0.9, 0.2, 0.3), "a"), ((0.5, 0.5, 0.1), "a"),
                                                 ((0.1, 0.1, 0.1), "a"), ((0.1, 0.2, 0.7), "c")])
    def test_examples(self, scores, expected):
        table = dict(zip(self.CLASSES, scores))
        assert predict_class(lambda c, x: table[c], "x", self.CLASSES).class_name == expected

    def test_calls_each_class_once(self):
        calls = []
        predict_class(lambda c, x: calls.append((c, x)) or 0.0, "hi", self.CLASSES)
        assert calls == [("a", "hi"), ("b", "hi"), ("c", "hi")]

    def test_ranking_sorted_and_stable(self):
        table = {"a": 0.2, "b": 0.9, "c": 0.2}
        pred = predict_class(lambda c, x: table[c], "x", self.CLASSES)
        assert pred.ranking == [("b", 0.9), ("a", 0.2), ("c", 0.2)]

    def test_no_classes(self):
        with pytest.raises(DataError):
            predict_class(lambda c, x: 0.0, "x", [])

    def test_matches_oracle_on_random_vectors(self):
        rng = np.random.default_rng(11)
        classes = [f"k{i}" for i in range(7)]
        for trial in range(1000):
            # coarse grid forces frequent ties
            scores = rng.integers(0, 5, size=7) / 4 if trial % 2 else rng.random(7)
            table = dict(zip(classes, scores))
            pred = predict_class(lambda c, x: table[c], "x", classes)
            assert (pred.class_name, pred.confidence) == brute_force_argmax(list(scores), classes)

    @given(st.permutations(list(range(5))))
    def test_permutation_moves_winner_with_scores(self, perm):
        classes = [f"k{i}" for i in range(5)]
        scores = {c: s for c, s in zip(classes, [0.1, 0.9, 0.3, 0.5, 0.2])}
        shuffled = [classes[i] for i in perm]
        assert predict_class(lambda c, x: scores[c], "x", shuffled).class_name == "k1"


class TestConverters:
    def test_snips_seq_layout(self, tmp_path):
        for split, rows in (("train", [("play jazz", "PlayMusic"), ("rain today", "GetWeather")]),
                            ("test", [("play pop", "PlayMusic")])):
            (tmp_path / split).mkdir()
            (tmp_path / split / "seq.in").write_text("\n".join(t for t, _ in rows))
            (tmp_path / split / "label").write_text("\n".join(l for _, l in rows))
        ds = convert_snips(tmp_path)
        assert ds.classes == ["GetWeather", "PlayMusic"] and len(ds.train) == 2 and len(ds.test) == 1

    def test_snips_json_layout(self, tmp_path):
        utt = {"PlayMusic": [{"data": [{"text": "play "}, {"text": "jazz", "entity": "genre"}]}]}
        (tmp_path / "train_PlayMusic_full.json").write_text(json.dumps(utt))
        (tmp_path / "validate_PlayMusic.json").write_text(json.dumps(utt))
        ds = convert_snips(tmp_path)
        assert ds.train == [LabeledExample("play jazz", "PlayMusic")] and len(ds.test) == 1

    def test_clinc_drops_oos_and_subsamples(self, tmp_path):
        blob = {"train": [["hi", "greet"], ["bye", "leave"], ["what", "oos"]] * 3,
                "oos_train": [["x", "oos"]],
                "test": [[f"t{i}", "greet"] for i in range(5)] + [[f"u{i}", "leave"] for i in range(5)]}
        blob["train"] = [r for r in blob["train"] if r[1] != "oos"]
        (tmp_path / "data_full.json").write_text(json.dumps(blob))
        ds = convert_clinc(tmp_path / "data_full.json", test_per_class=2)
        assert ds.classes == ["greet", "leave"] and len(ds.test) == 4 and len(ds.train) == 6
