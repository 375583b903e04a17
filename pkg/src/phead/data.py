"""Datasets and the (label, text) -> True/False task construction."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .base_lm import CLS, SEP, Vocab, tokenize
from .errors import ConfigError, DataError


@dataclass(frozen=True)
class LabeledExample:
    text: str
    class_name: str


@dataclass(frozen=True)
class BinaryTaskExample:
    label_text: str
    input_text: str
    target: bool


@dataclass
class Dataset:
    name: str
    classes: list[str]
    train: list[LabeledExample] = field(default_factory=list)
    test: list[LabeledExample] = field(default_factory=list)

    def __post_init__(self):
        known = set(self.classes)
        if len(known) != len(self.classes):
            raise DataError("duplicate class names")
        for ex in self.train + self.test:
            if not ex.class_name:
                raise DataError("empty class name")
            if ex.class_name not in known:
                raise DataError(f"example class {ex.class_name!r} not in declared classes")

    def split(self, name: str) -> list[LabeledExample]:
        if name not in ("train", "test"):
            raise ConfigError(f"unknown split {name!r}")
        return getattr(self, name)


_CAMEL = re.compile(r"(?<=[a-z0-9])(?=[A-Z])")


def verbalize(class_name: str) -> str:
    """``play_music`` / ``PlayMusic`` -> ``play music``."""
    return " ".join(_CAMEL.sub(" ", class_name).replace("_", " ").lower().split())


def pair_ids(label_text: str, input_text: str, vocab: Vocab) -> list[int]:
    """[CLS] label tokens [SEP] text tokens."""
    return [CLS] + tokenize(label_text, vocab) + [SEP] + tokenize(input_text, vocab)


# ----------------------------------------------------------------------
# JSONL interchange format


def load_jsonl(path, name: str | None = None) -> Dataset:
    """Read a dataset file.

    Each line is ``{"text": ..., "label": ..., "split": "train"|"test"}``
    (``split`` defaults to train).  An optional first line
    ``{"classes": [...]}`` fixes the class order; otherwise classes are the
    sorted unique labels.
    """
    path = Path(path)
    classes: list[str] | None = None
    train: list[LabeledExample] = []
    test: list[LabeledExample] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: malformed JSON ({e.msg})") from None
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            if "classes" in obj and "text" not in obj:
                if classes is not None or train or test:
                    raise DataError(f"{path}:{lineno}: classes header must be the first line")
                cl = obj["classes"]
                if not isinstance(cl, list) or not all(isinstance(c, str) and c for c in cl):
                    raise DataError(f"{path}:{lineno}: 'classes' must be a list of nonempty strings")
                classes = list(cl)
                name = name or obj.get("name")
                continue
            text, label = obj.get("text"), obj.get("label")
            if not isinstance(text, str) or not isinstance(label, str):
                raise DataError(f"{path}:{lineno}: 'text' and 'label' must be strings")
            split = obj.get("split", "train")
            if split not in ("train", "test"):
                raise DataError(f"{path}:{lineno}: unknown split {split!r}")
            (train if split == "train" else test).append(LabeledExample(text, label))
    if classes is None:
        classes = sorted({ex.class_name for ex in train + test})
    if not classes:
        raise DataError(f"{path}: no classes")
    return Dataset(name or path.stem, classes, train, test)


def dump_jsonl(ds: Dataset, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"classes": ds.classes, "name": ds.name}) + "\n")
        for split in ("train", "test"):
            for ex in ds.split(split):
                fh.write(json.dumps({"text": ex.text, "label": ex.class_name, "split": split}) + "\n")


# ----------------------------------------------------------------------
# task construction


def make_binary_pairs(ds: Dataset, negatives_per_example: int = 0, seed: int = 0,
                      examples: Sequence[LabeledExample] | None = None) -> list[BinaryTaskExample]:
    """One True pair per example plus ``negatives_per_example`` False pairs.

    Negative classes are drawn uniformly without replacement from the other
    classes.  The output order is shuffled by ``seed``.
    """
    n_classes = len(ds.classes)
    if negatives_per_example < 0:
        raise ConfigError("negatives_per_example must be >= 0")
    if negatives_per_example >= max(n_classes, 1):
        raise ConfigError(f"negatives_per_example={negatives_per_example} needs more than {n_classes} classes")
    rng = np.random.default_rng(seed)
    examples = ds.train if examples is None else examples
    pairs: list[BinaryTaskExample] = []
    for ex in examples:
        pairs.append(BinaryTaskExample(verbalize(ex.class_name), ex.text, True))
        if negatives_per_example:
            others = [c for c in ds.classes if c != ex.class_name]
            for j in rng.choice(len(others), size=negatives_per_example, replace=False):
                pairs.append(BinaryTaskExample(verbalize(others[j]), ex.text, False))
    order = rng.permutation(len(pairs))
    return [pairs[i] for i in order]


def subsample_per_class(ds: Dataset, split: str, k: int, seed: int = 0) -> Dataset:
    """Exactly ``k`` examples per class from ``split``, nested across ``k``.

    Each class's examples are permuted once by (seed, class index) and the
    first ``k`` are kept, so a larger ``k`` always contains a smaller one.
    The other split is carried over unchanged.
    """
    pool = ds.split(split)
    by_class: dict[str, list[int]] = {c: [] for c in ds.classes}
    for i, ex in enumerate(pool):
        by_class[ex.class_name].append(i)
    keep: list[int] = []
    for ci, c in enumerate(ds.classes):
        idx = by_class[c]
        if len(idx) < k:
            raise DataError(f"class {c!r} has only {len(idx)} {split} examples, need {k}")
        perm = np.random.default_rng([seed, ci]).permutation(len(idx))
        keep.extend(idx[j] for j in perm[:k])
    chosen = [pool[i] for i in sorted(keep)]
    if split == "train":
        return Dataset(ds.name, list(ds.classes), chosen, list(ds.test))
    return Dataset(ds.name, list(ds.classes), list(ds.train), chosen)


@dataclass(frozen=True)
class Prediction:
    class_name: str
    confidence: float
    ranking: list[tuple[str, float]]


def predict_class(conf_fn: Callable[[str, str], float], x: str, classes: Sequence[str]) -> Prediction:
    """Score every class with ``conf_fn(class_name, x)`` and pick the max.

    Ties go to the class listed first; the ranking is stable in the same way.
    """
    if not classes:
        raise DataError("predict_class needs at least one class")
    scores = [(c, float(conf_fn(c, x))) for c in classes]
    best = 0
    for i in range(1, len(scores)):
        if scores[i][1] > scores[best][1]:
            best = i
    ranking = sorted(scores, key=lambda s: -s[1])
    return Prediction(scores[best][0], scores[best][1], ranking)


# ----------------------------------------------------------------------
# converters from the original dataset layouts


def _snips_chunks_text(utterance: dict) -> str:
    return "".join(chunk["text"] for chunk in utterance["data"]).strip()


def convert_snips(src) -> Dataset:
    """SNIPS benchmark data to a :class:`Dataset`.

    Accepts either the joint-NLU layout (``train/seq.in`` + ``train/label``,
    same for ``test``) or directories of per-intent ``*.json`` files in the
    original benchmark format (``{"Intent": [{"data": [{"text": ...}]}]}``),
    where files whose name contains ``validate`` or ``test`` become the test
    split.
    """
    src = Path(src)
    train: list[LabeledExample] = []
    test: list[LabeledExample] = []
    if (src / "train" / "seq.in").exists():
        for split, sink in (("train", train), ("test", test)):
            d = src / split
            if not (d / "seq.in").exists():
                continue
            texts = (d / "seq.in").read_text(encoding="utf-8").splitlines()
            labels = (d / "label").read_text(encoding="utf-8").splitlines()
            if len(texts) != len(labels):
                raise DataError(f"{d}: seq.in and label line counts differ")
            sink.extend(LabeledExample(t.strip(), l.strip()) for t, l in zip(texts, labels) if t.strip())
    else:
        files = [src] if src.is_file() else sorted(src.rglob("*.json"))
        if not files:
            raise DataError(f"{src}: no SNIPS files found")
        for f in files:
            blob = json.loads(f.read_text(encoding="utf-8", errors="replace"))
            sink = test if ("validate" in f.name or "test" in f.name) else train
            for intent, utterances in blob.items():
                sink.extend(LabeledExample(_snips_chunks_text(u), intent) for u in utterances)
    classes = sorted({ex.class_name for ex in train + test})
    return Dataset("snips", classes, train, test)


def convert_clinc(src, test_per_class: int | None = 10, seed: int = 0,
                  include_val: bool = False) -> Dataset:
    """Clinc150 ``data_full.json`` to a :class:`Dataset`.

    Out-of-scope examples are dropped.  With ``test_per_class`` set, the test
    split is subsampled to that many examples per intent.
    """
    blob = json.loads(Path(src).read_text(encoding="utf-8"))
    train = [LabeledExample(t, l) for t, l in blob["train"]]
    if include_val:
        train += [LabeledExample(t, l) for t, l in blob.get("val", [])]
    test = [LabeledExample(t, l) for t, l in blob["test"]]
    classes = sorted({ex.class_name for ex in train + test})
    ds = Dataset("clinc150", classes, train, test)
    if test_per_class:
        ds = subsample_per_class(ds, "test", test_per_class, seed)
    return ds
