"""Frozen-base training of heads, evaluation, and the data-vs-epoch grid."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .base_lm import BaseLM
from .data import BinaryTaskExample, Dataset, LabeledExample, make_binary_pairs, pair_ids, \
    predict_class, subsample_per_class, verbalize
from .encoder import pad_batch
from .errors import ConfigError, DataError, FrozenParameterError
from .head import FALSE_INDEX, TRUE_INDEX, LinearHead, PersonalizationHead, PHConfig, confidences, init_head
from .optim import SGD

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 0.02
    epochs: int = 50
    anneal_factor: float = 0.5
    anneal_patience: int = 3
    min_lr: float = 1e-4
    seed: int = 0
    negatives_per_example: int = 0

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0 < self.anneal_factor < 1:
            raise ConfigError("anneal_factor must lie in (0, 1)")
        if self.anneal_patience < 1:
            raise ConfigError("anneal_patience must be >= 1")
        if self.min_lr <= 0:
            raise ConfigError("min_lr must be > 0")
        if self.negatives_per_example < 0:
            raise ConfigError("negatives_per_example must be >= 0")


@dataclass
class TrainingReport:
    epoch_losses: list[float]
    trainable_param_count: int
    wall_time: float
    base_checksum_before: str
    base_checksum_after: str
    final_lr: float
    lr_history: list[float] = field(default_factory=list)
    optimizer: str = "sgd+plateau-anneal"
    config: dict = field(default_factory=dict)

    @property
    def base_unchanged(self) -> bool:
        return self.base_checksum_before == self.base_checksum_after

    def to_dict(self) -> dict:
        d = asdict(self)
        d["base_unchanged"] = self.base_unchanged
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


@dataclass
class EvalMetrics:
    accuracy: float
    macro_f1: float
    micro_f1: float
    per_class: dict[str, dict[str, float]]
    confusion: dict[str, dict[str, int]]
    n_examples: int

    def to_dict(self) -> dict:
        return asdict(self)


def _hex(d: int) -> str:
    return f"{d:016x}"


# ----------------------------------------------------------------------
# pair encoding through the frozen base


class EncodingCache:
    """Memoizes frozen-base states per (label text, input text) pair.

    Safe only because the base is frozen: its output is a pure function of
    the ids.
    """

    def __init__(self, base: BaseLM, batch_size: int = 64):
        if not base.frozen:
            raise FrozenParameterError("encoding cache requires a frozen base model")
        self.base = base
        self.batch_size = batch_size
        self._store: dict[tuple[str, str], np.ndarray] = {}

    def get(self, keys: Sequence[tuple[str, str]]) -> list[np.ndarray]:
        missing = list(dict.fromkeys(k for k in keys if k not in self._store))
        if missing:
            seqs = [pair_ids(lab, txt, self.base.vocab) for lab, txt in missing]
            for k, enc in zip(missing, self.base.encode_many(seqs, self.batch_size)):
                self._store[k] = enc.hidden
        return [self._store[k] for k in keys]

    def __len__(self) -> int:
        return len(self._store)


def _batch_tensor(states: list[np.ndarray]) -> tuple[Tensor, np.ndarray]:
    h, mask = pad_batch(states, 0.0)
    return Tensor(h), mask


def _check_training_inputs(base: BaseLM, d_model: int, pairs) -> None:
    if not base.frozen:
        raise FrozenParameterError("base model must be frozen before training a head")
    if not pairs:
        raise DataError("no training pairs")
    if d_model != base.d_model:
        raise ConfigError(f"head d_model {d_model} does not match base d_model {base.d_model}")


class HeadTrainer:
    """Resumable SGD run for one head; ``run`` may be called repeatedly.

    Continuing a run keeps the learning rate, plateau counters and epoch
    index, so evaluating after 50 epochs and again after 50 more is one
    continuous 100-epoch run.
    """

    def __init__(self, base: BaseLM, model, pairs: Sequence[BinaryTaskExample], cfg: TrainConfig,
                 cache: EncodingCache | None = None):
        cfg.validate()
        _check_training_inputs(base, model.d_model, pairs)
        self.base = base
        self.model = model
        self.cfg = cfg
        self.cache = cache or EncodingCache(base)
        self.states = self.cache.get([(p.label_text, p.input_text) for p in pairs])
        self.targets = np.array([TRUE_INDEX if p.target else FALSE_INDEX for p in pairs], dtype=np.int64)
        self.opt = SGD(model.parameters(), cfg.lr)
        self.epoch = 0
        self.best = math.inf
        self.bad_epochs = 0
        self.losses: list[float] = []
        self.lr_history: list[float] = []
        self.wall_time = 0.0
        self.checksum_before = base.checksum()

    def _epoch(self) -> float:
        cfg = self.cfg
        shuffle_rng = np.random.default_rng([cfg.seed, self.epoch])
        drop_rng = np.random.default_rng([cfg.seed, self.epoch, 1])
        order = shuffle_rng.permutation(len(self.states))
        total, n = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start: start + cfg.batch_size]
            h, mask = _batch_tensor([self.states[i] for i in idx])
            logits = self.model.logits(h, mask, training=True, rng=drop_rng)
            loss = ad.cross_entropy(logits, self.targets[idx])
            self.opt.zero_grad()
            loss.backward()
            self.opt.step()
            total += loss.item()
            n += 1
        return total / n

    def _anneal(self, loss: float) -> None:
        if loss < self.best:
            self.best = loss
            self.bad_epochs = 0
            return
        self.bad_epochs += 1
        if self.bad_epochs >= self.cfg.anneal_patience:
            self.opt.lr = max(self.opt.lr * self.cfg.anneal_factor, self.cfg.min_lr)
            self.bad_epochs = 0

    def run(self, epochs: int) -> None:
        t0 = time.perf_counter()
        for _ in range(epochs):
            loss = self._epoch()
            self.losses.append(loss)
            self.lr_history.append(self.opt.lr)
            self.epoch += 1
            self._anneal(loss)
            log.debug("epoch %d loss %.4f lr %.4g", self.epoch, loss, self.opt.lr)
        self.wall_time += time.perf_counter() - t0

    def report(self) -> TrainingReport:
        return TrainingReport(
            epoch_losses=list(self.losses),
            trainable_param_count=sum(p.size for p in self.opt.params),
            wall_time=self.wall_time,
            base_checksum_before=_hex(self.checksum_before),
            base_checksum_after=_hex(self.base.checksum()),
            final_lr=self.opt.lr,
            lr_history=list(self.lr_history),
            config=asdict(self.cfg),
        )


def train_head(base: BaseLM, head: PersonalizationHead, pairs: Sequence[BinaryTaskExample],
               cfg: TrainConfig, cache: EncodingCache | None = None):
    trainer = HeadTrainer(base, head, pairs, cfg, cache)
    trainer.run(cfg.epochs)
    return head, trainer.report()


def train_linear_only(base: BaseLM, cfg: TrainConfig, pairs: Sequence[BinaryTaskExample],
                      cache: EncodingCache | None = None, linear: LinearHead | None = None):
    linear = linear or LinearHead.init(base.d_model, cfg.seed)
    trainer = HeadTrainer(base, linear, pairs, cfg, cache)
    trainer.run(cfg.epochs)
    return linear, trainer.report()


# ----------------------------------------------------------------------
# evaluation


def score_matrix(base: BaseLM, model, texts: Sequence[str], classes: Sequence[str],
                 cache: EncodingCache | None = None, batch_size: int = 128) -> np.ndarray:
    """P(True) for every (text, class) pair, shape [len(texts), len(classes)]."""
    cache = cache or EncodingCache(base)
    keys = [(verbalize(c), t) for t in texts for c in classes]
    states = cache.get(keys)
    out = np.empty(len(keys))
    with ad.no_grad():
        for start in range(0, len(keys), batch_size):
            h, mask = _batch_tensor(states[start: start + batch_size])
            out[start: start + batch_size] = confidences(model.logits(h, mask, training=False).data)
    return out.reshape(len(texts), len(classes))


def metrics_from_predictions(truth: Sequence[str], pred: Sequence[str], classes: Sequence[str]) -> EvalMetrics:
    confusion = {c: {p: 0 for p in classes} for c in classes}
    for t, p in zip(truth, pred):
        confusion[t][p] += 1
    per_class = {}
    tp_all = fp_all = fn_all = 0
    for c in classes:
        tp = confusion[c][c]
        fp = sum(confusion[o][c] for o in classes) - tp
        fn = sum(confusion[c].values()) - tp
        tp_all, fp_all, fn_all = tp_all + tp, fp_all + fp, fn_all + fn
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class[c] = {"precision": precision, "recall": recall, "f1": f1, "support": tp + fn}
    n = len(truth)
    micro = 2 * tp_all / (2 * tp_all + fp_all + fn_all) if n else 0.0
    return EvalMetrics(
        accuracy=tp_all / n if n else 0.0,
        macro_f1=float(np.mean([per_class[c]["f1"] for c in classes])),
        micro_f1=micro,
        per_class=per_class,
        confusion=confusion,
        n_examples=n,
    )


def evaluate(base: BaseLM, model, test: Sequence[LabeledExample], classes: Sequence[str],
             cache: EncodingCache | None = None) -> EvalMetrics:
    if not test:
        raise DataError("empty test set")
    classes = list(classes)
    texts = [ex.text for ex in test]
    scores = score_matrix(base, model, texts, classes, cache)
    col = {c: j for j, c in enumerate(classes)}
    preds = []
    for i, x in enumerate(texts):
        row = scores[i]
        preds.append(predict_class(lambda c, _x: row[col[c]], x, classes).class_name)
    return metrics_from_predictions([ex.class_name for ex in test], preds, classes)


# ----------------------------------------------------------------------
# data-vs-epoch grid


@dataclass
class GridCell:
    hidden_dim: int
    heads: int
    per_class: int
    epoch: int
    seed: int
    params: int
    accuracy: float | None = None
    macro_f1: float | None = None
    micro_f1: float | None = None
    wall_time: float = 0.0
    error: str | None = None


def run_data_epoch_grid(base: BaseLM, cfg: TrainConfig, ds: Dataset, per_class_counts: Sequence[int],
                        epoch_checkpoints: Sequence[int], ph_configs: Sequence[PHConfig], seed: int = 0,
                        cache: EncodingCache | None = None) -> list[GridCell]:
    """Train each head config on nested per-class subsamples, evaluating at
    each epoch checkpoint of one continuous run.  A failing (config, count)
    run is recorded on its cells and the grid continues.
    """
    if list(per_class_counts) != sorted(per_class_counts) or list(epoch_checkpoints) != sorted(epoch_checkpoints):
        raise ConfigError("per_class_counts and epoch_checkpoints must be ascending")
    cache = cache or EncodingCache(base)
    run_cfg = TrainConfig(**{**asdict(cfg), "seed": seed})
    cells: list[GridCell] = []
    for pc in ph_configs:
        for count in per_class_counts:
            try:
                sub = subsample_per_class(ds, "train", count, seed)
                pairs = make_binary_pairs(sub, run_cfg.negatives_per_example, seed)
                head = init_head(PHConfig(pc.d_model, pc.d_ff, pc.n_heads, pc.dropout_p, seed))
                trainer = HeadTrainer(base, head, pairs, run_cfg, cache)
                done = 0
                for cp in epoch_checkpoints:
                    trainer.run(cp - done)
                    done = cp
                    m = evaluate(base, head, ds.test, ds.classes, cache)
                    cells.append(GridCell(pc.d_ff, pc.n_heads, count, cp, seed, head.param_count(),
                                          m.accuracy, m.macro_f1, m.micro_f1, trainer.wall_time))
            except Exception as e:  # per-cell isolation; recorded, not raised
                log.warning("grid cell d_ff=%d heads=%d count=%d failed: %s", pc.d_ff, pc.n_heads, count, e)
                for cp in epoch_checkpoints:
                    if not any(c.hidden_dim == pc.d_ff and c.heads == pc.n_heads and c.per_class == count
                               and c.epoch == cp for c in cells):
                        cells.append(GridCell(pc.d_ff, pc.n_heads, count, cp, seed, 0, error=repr(e)))
    return cells


def differential_matrix(cells: Sequence[GridCell]) -> dict:
    """Per head config: macro-F1 of every (count, epoch) cell and its gain
    over the smallest-count, fewest-epoch cell."""
    out: dict = {}
    for c in cells:
        key = f"d_ff={c.hidden_dim},heads={c.heads}"
        out.setdefault(key, {})[(c.per_class, c.epoch)] = c.macro_f1
    table = {}
    for key, row in out.items():
        ref_key = min(row)
        ref = row[ref_key]
        table[key] = {f"{k[0]}/class,{k[1]}ep": {"macro_f1": v,
                                                 "diff": None if v is None or ref is None else v - ref}
                      for k, v in sorted(row.items())}
    return table
