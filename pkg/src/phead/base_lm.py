"""The shared base language model: tokenizer, encoder, MLM pretraining, freezing."""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import BLOCK_TENSORS, EncoderBlock, block_shapes, pad_batch
from .errors import ConfigError, DataError, FormatError
from .optim import Adam
from .serialization import Reader, Writer, atomic_write, weights_digest

log = logging.getLogger(__name__)

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
RESERVED = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
TOKENIZER_ID = "lower-ws-punct-v1"
BASE_MAGIC = b"PIBM"
BASE_VERSION = 1

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def split_words(text: str) -> list[str]:
    """Lowercase and split on whitespace and punctuation boundaries."""
    return _TOKEN_RE.findall(text.lower())


class Vocab:
    def __init__(self, tokens: list[str]):
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise FormatError("vocab must start with the reserved tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise FormatError("vocab contains duplicate tokens")

    @classmethod
    def build(cls, corpus: list[str], min_count: int = 1) -> "Vocab":
        counts = Counter(w for line in corpus for w in split_words(line))
        words = sorted((w for w, c in counts.items() if c >= min_count and w not in RESERVED),
                       key=lambda w: (-counts[w], w))
        return cls(list(RESERVED) + words)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)


def tokenize(text: str, vocab: Vocab) -> list[int]:
    return [vocab.id(w) for w in split_words(text)]


@dataclass
class BaseLMConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff_base: int = 128
    max_seq_len: int = 64
    dropout_p: float = 0.1

    def validate(self) -> None:
        if min(self.d_model, self.n_layers, self.n_heads, self.d_ff_base, self.max_seq_len) < 1:
            raise ConfigError(f"base LM dims must be positive: {self}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout probability must lie in [0, 1), got {self.dropout_p}")


@dataclass
class Encoding:
    hidden: np.ndarray  # [T, d_model]
    token_ids: list[int]
    cls_index: int = 0
    truncated: bool = False


class BaseLM:
    """Token + learned position embeddings feeding a stack of encoder blocks.

    The masked-LM output layer is tied to the token embeddings plus a bias.
    """

    def __init__(self, vocab: Vocab, config: BaseLMConfig, tok_emb: Tensor, pos_emb: Tensor,
                 blocks: list[EncoderBlock], mlm_bias: Tensor):
        config.validate()
        self.vocab = vocab
        self.config = config
        self.tok_emb = tok_emb
        self.pos_emb = pos_emb
        self.blocks = blocks
        self.mlm_bias = mlm_bias
        self.frozen = False
        self.weights_checksum: int | None = None

    @classmethod
    def init(cls, vocab: Vocab, config: BaseLMConfig, seed: int = 0) -> "BaseLM":
        config.validate()
        rng = np.random.default_rng(seed)
        tok = ad.parameter((len(vocab), config.d_model), rng, "normal", name="tok_emb")
        pos = ad.parameter((config.max_seq_len, config.d_model), rng, "normal", name="pos_emb")
        blocks = [EncoderBlock.init(config.d_model, config.d_ff_base, config.n_heads,
                                    config.dropout_p, rng, prefix=f"layer{i}.")
                  for i in range(config.n_layers)]
        bias = ad.parameter((len(vocab),), rng, "zeros", name="mlm_bias")
        return cls(vocab, config, tok, pos, blocks, bias)

    @property
    def d_model(self) -> int:
        return self.config.d_model

    def tensors(self) -> list[Tensor]:
        out = [self.tok_emb, self.pos_emb]
        for b in self.blocks:
            out.extend(b.tensors())
        out.append(self.mlm_bias)
        return out

    def param_count(self) -> int:
        return sum(t.size for t in self.tensors())

    def checksum(self) -> int:
        return weights_digest(t.data for t in self.tensors())

    # ------------------------------------------------------------------
    def hidden_states(self, ids: np.ndarray, key_mask: np.ndarray, training: bool = False,
                      rng: np.random.Generator | None = None) -> Tensor:
        """[B, T] ids -> [B, T, d_model] hidden states (graph-recording)."""
        t = ids.shape[1]
        h = ad.embedding(self.tok_emb, ids) + self.pos_emb[:t]
        for block in self.blocks:
            h = block.forward(h, key_mask, training, rng)
        return h

    def mlm_logits(self, h: Tensor) -> Tensor:
        return h @ self.tok_emb.transpose() + self.mlm_bias

    def _clip(self, input_ids) -> tuple[list[int], bool]:
        ids = [int(i) for i in input_ids]
        if len(ids) > self.config.max_seq_len:
            return ids[: self.config.max_seq_len], True
        return ids, False

    def encode_many(self, sequences: list[list[int]], batch_size: int = 64) -> list[Encoding]:
        """Eval-mode encoding of many id sequences; no graph is recorded."""
        out: list[Encoding] = []
        with ad.no_grad():
            for start in range(0, len(sequences), batch_size):
                chunk = [self._clip(s) for s in sequences[start: start + batch_size]]
                for ids, _ in chunk:
                    if not ids:
                        raise DataError("cannot encode an empty id sequence")
                ids, mask = pad_batch([np.asarray(c[0], dtype=np.int64) for c in chunk], PAD)
                h = self.hidden_states(ids, mask).data
                for i, (seq, trunc) in enumerate(chunk):
                    out.append(Encoding(h[i, : len(seq)].copy(), seq, 0, trunc))
        return out


def encode(model: BaseLM, input_ids) -> Encoding:
    return model.encode_many([list(input_ids)])[0]


def freeze(model: BaseLM) -> BaseLM:
    """Mark every weight read-only and record the weights checksum. Idempotent."""
    if model.frozen:
        return model
    for t in model.tensors():
        t.requires_grad = False
        t.frozen = True
        t.grad = None
        t.data.flags.writeable = False
    model.frozen = True
    model.weights_checksum = model.checksum()
    return model


# ----------------------------------------------------------------------
# masked language model pretraining


@dataclass
class PretrainConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff_base: int = 128
    max_seq_len: int = 64
    dropout_p: float = 0.1
    mask_prob: float = 0.15
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    min_vocab: int = 10

    def model_config(self) -> BaseLMConfig:
        return BaseLMConfig(self.d_model, self.n_layers, self.n_heads, self.d_ff_base,
                            self.max_seq_len, self.dropout_p)


@dataclass
class PretrainResult:
    model: BaseLM
    loss_history: list[float] = field(default_factory=list)
    config: dict = field(default_factory=dict)


def _mask_tokens(ids: np.ndarray, n_real: np.ndarray, mask_prob: float, vocab_size: int,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """BERT-style 80/10/10 corruption; at least one target per sequence."""
    maskable = ids >= len(RESERVED)
    chosen = maskable & (rng.random(ids.shape) < mask_prob)
    for i in range(ids.shape[0]):
        if not chosen[i].any() and maskable[i].any():
            chosen[i, rng.choice(np.flatnonzero(maskable[i]))] = True
    corrupted = ids.copy()
    roll = rng.random(ids.shape)
    corrupted[chosen & (roll < 0.8)] = MASK
    swap = chosen & (roll >= 0.8) & (roll < 0.9)
    corrupted[swap] = rng.integers(len(RESERVED), vocab_size, size=int(swap.sum()))
    return corrupted, chosen


def pretrain_mlm(corpus: list[str], config: PretrainConfig | None = None) -> PretrainResult:
    """Build a vocabulary from ``corpus`` and train an unfrozen base LM by MLM."""
    cfg = config or PretrainConfig()
    if not corpus:
        raise DataError("pretraining corpus is empty")
    if not 0.0 < cfg.mask_prob < 1.0:
        raise ConfigError(f"mask_prob must lie in (0, 1), got {cfg.mask_prob}")
    vocab = Vocab.build(corpus)
    if len(vocab) - len(RESERVED) < cfg.min_vocab:
        raise DataError(f"corpus yields only {len(vocab) - len(RESERVED)} tokens; need >= {cfg.min_vocab}")
    model = BaseLM.init(vocab, cfg.model_config(), cfg.seed)
    seqs = []
    for line in corpus:
        ids = [CLS] + tokenize(line, vocab) + [SEP]
        if len(ids) > 2:
            seqs.append(np.asarray(ids[: cfg.max_seq_len], dtype=np.int64))
    opt = Adam(model.tensors(), lr=cfg.lr)
    history = []
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(seqs))
        total, batches = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [seqs[i] for i in order[start: start + cfg.batch_size]]
            ids, key_mask = pad_batch(batch, PAD)
            corrupted, chosen = _mask_tokens(ids, key_mask.sum(1), cfg.mask_prob, len(vocab), rng)
            h = model.hidden_states(corrupted, key_mask, training=True, rng=rng)
            logits = model.mlm_logits(h).reshape(-1, len(vocab))
            loss = ad.cross_entropy(logits, ids.reshape(-1), weights=chosen.reshape(-1))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            batches += 1
        history.append(total / batches)
        log.info("mlm epoch %d loss %.4f", epoch + 1, history[-1])
    return PretrainResult(model, history, asdict(cfg))


# ----------------------------------------------------------------------
# binary file format


def save_base(model: BaseLM, path) -> None:
    atomic_write(path, dumps_base(model))


def dumps_base(model: BaseLM) -> bytes:
    c = model.config
    w = Writer()
    w.raw(BASE_MAGIC)
    w.u32(BASE_VERSION)
    for v in (c.d_model, c.n_layers, c.n_heads, c.d_ff_base, c.max_seq_len, len(model.vocab)):
        w.u32(v)
    w.f32(c.dropout_p)
    w.u32(int(model.frozen))
    w.string(TOKENIZER_ID)
    for tok in model.vocab.tokens:
        w.string(tok)
    for t in model.tensors():
        w.array(t.data)
    return w.finish()


def load_base(path) -> BaseLM:
    return loads_base(Path(path).read_bytes())


def loads_base(blob: bytes) -> BaseLM:
    r = Reader(blob, BASE_MAGIC)
    version = r.u32()
    if version != BASE_VERSION:
        raise FormatError(f"unsupported base model version {version}")
    d_model, n_layers, n_heads, d_ff, max_len, n_vocab = (r.u32() for _ in range(6))
    cfg = BaseLMConfig(d_model, n_layers, n_heads, d_ff, max_len, round(r.f32(), 6))
    frozen = bool(r.u32())
    tokenizer = r.string()
    if tokenizer != TOKENIZER_ID:
        raise FormatError(f"unknown tokenizer {tokenizer!r}")
    vocab = Vocab([r.string() for _ in range(n_vocab)])
    tok = Tensor(r.array((n_vocab, d_model)), requires_grad=True, name="tok_emb")
    pos = Tensor(r.array((max_len, d_model)), requires_grad=True, name="pos_emb")
    blocks = []
    shapes = block_shapes(d_model, d_ff)
    for i in range(n_layers):
        params = {n: Tensor(r.array(shapes[n]), requires_grad=True, name=f"layer{i}.{n}")
                  for n in BLOCK_TENSORS}
        blocks.append(EncoderBlock(d_model, d_ff, n_heads, cfg.dropout_p, params))
    bias = Tensor(r.array((n_vocab,)), requires_grad=True, name="mlm_bias")
    r.done()
    model = BaseLM(vocab, cfg, tok, pos, blocks, bias)
    if frozen:
        freeze(model)
    return model
