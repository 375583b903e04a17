"""Personalization heads: one encoder block plus a two-way output layer."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .base_lm import Encoding
from .encoder import BLOCK_TENSORS, EncoderBlock, block_shapes
from .errors import ConfigError, DimensionError, FormatError
from .serialization import Reader, Writer, atomic_write

# output index of the True class; index 1 is False
TRUE_INDEX = 0
FALSE_INDEX = 1

HEAD_MAGIC = b"PIPH"
HEAD_VERSION = 1
HEAD_HEADER_BYTES = 4 + 4 + 3 * 4 + 4 + 8  # magic, version, dims, dropout, seed
HEAD_FILE_OVERHEAD = HEAD_HEADER_BYTES + 8  # plus trailing CRC-64


@dataclass(frozen=True)
class PHConfig:
    d_model: int
    d_ff: int
    n_heads: int
    dropout_p: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.d_model < 1 or self.d_ff < 1 or self.n_heads < 1:
            raise ConfigError(f"head dims must be >= 1: {self}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout probability must lie in [0, 1), got {self.dropout_p}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")


class PersonalizationHead:
    def __init__(self, config: PHConfig, block: EncoderBlock, w_out: Tensor, b_out: Tensor):
        self.config = config
        self.block = block
        self.w_out = w_out
        self.b_out = b_out

    @property
    def d_model(self) -> int:
        return self.config.d_model

    def tensors(self) -> list[Tensor]:
        return self.block.tensors() + [self.w_out, self.b_out]

    def parameters(self) -> list[Tensor]:
        return self.tensors()

    def param_count(self) -> int:
        return sum(t.size for t in self.tensors())

    def logits(self, hidden: Tensor, key_mask: np.ndarray | None = None, training: bool = False,
               rng: np.random.Generator | None = None) -> Tensor:
        """[B, T, d_model] base states -> [B, 2] logits read at the [CLS] position."""
        if hidden.shape[-1] != self.d_model:
            raise ConfigError(f"hidden width {hidden.shape[-1]} does not match head d_model {self.d_model}")
        h = self.block.forward(hidden, key_mask, training, rng)
        return h[:, 0, :] @ self.w_out + self.b_out

    def copy(self) -> "PersonalizationHead":
        return loads_head(dumps_head(self))


class LinearHead:
    """Output layer alone on top of the frozen base's [CLS] state."""

    def __init__(self, d_model: int, w_out: Tensor, b_out: Tensor):
        self.d_model = d_model
        self.w_out = w_out
        self.b_out = b_out

    @classmethod
    def init(cls, d_model: int, seed: int = 0) -> "LinearHead":
        rng = np.random.default_rng(seed)
        return cls(d_model, ad.parameter((d_model, 2), rng, name="w_out"),
                   ad.parameter((2,), rng, "zeros", name="b_out"))

    def tensors(self) -> list[Tensor]:
        return [self.w_out, self.b_out]

    def parameters(self) -> list[Tensor]:
        return self.tensors()

    def param_count(self) -> int:
        return sum(t.size for t in self.tensors())

    def logits(self, hidden: Tensor, key_mask=None, training: bool = False, rng=None) -> Tensor:
        if hidden.shape[-1] != self.d_model:
            raise ConfigError(f"hidden width {hidden.shape[-1]} does not match d_model {self.d_model}")
        return hidden[:, 0, :] @ self.w_out + self.b_out


def init_head(config: PHConfig) -> PersonalizationHead:
    config.validate()
    rng = np.random.default_rng(config.seed)
    block = EncoderBlock.init(config.d_model, config.d_ff, config.n_heads, config.dropout_p, rng)
    w_out = ad.parameter((config.d_model, 2), rng, name="w_out")
    b_out = ad.parameter((2,), rng, "zeros", name="b_out")
    return PersonalizationHead(config, block, w_out, b_out)


def ph_forward(head, enc: Encoding, training: bool = False,
               rng: np.random.Generator | None = None) -> Tensor:
    """Logits [2] for a single encoded sequence."""
    hidden = np.asarray(enc.hidden)
    if hidden.ndim != 2 or hidden.shape[0] < 1:
        raise DimensionError(f"encoding must be [T x d_model] with T >= 1, got {hidden.shape}")
    if hidden.shape[1] != head.d_model:
        raise ConfigError(f"encoding width {hidden.shape[1]} does not match head d_model {head.d_model}")
    out = head.logits(Tensor(hidden[None]), None, training, rng)
    return out.reshape(2)


def confidence(logits) -> float:
    """P(True) from the two output logits."""
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return float(e[TRUE_INDEX] / e.sum())


def confidences(logits: np.ndarray) -> np.ndarray:
    """Row-wise P(True) for a [B, 2] logit array."""
    z = np.asarray(logits, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, z[:, FALSE_INDEX] - z[:, TRUE_INDEX]))


# ----------------------------------------------------------------------
# binary file format


def head_file_size(config: PHConfig) -> int:
    from .cost import count_ph_params
    return 4 * count_ph_params(config.d_model, config.d_ff, include_output=True) + HEAD_FILE_OVERHEAD


def dumps_head(head: PersonalizationHead) -> bytes:
    c = head.config
    w = Writer()
    w.raw(HEAD_MAGIC)
    w.u32(HEAD_VERSION)
    w.u32(c.d_model)
    w.u32(c.d_ff)
    w.u32(c.n_heads)
    w.f32(c.dropout_p)
    w.u64(c.seed)
    for t in head.tensors():
        w.array(t.data)
    return w.finish()


def loads_head(blob: bytes) -> PersonalizationHead:
    r = Reader(blob, HEAD_MAGIC)
    version = r.u32()
    if version != HEAD_VERSION:
        raise FormatError(f"unsupported head version {version}")
    d_model, d_ff, n_heads = r.u32(), r.u32(), r.u32()
    dropout = round(r.f32(), 6)
    cfg = PHConfig(d_model, d_ff, n_heads, dropout, r.u64())
    cfg.validate()
    shapes = block_shapes(d_model, d_ff)
    params = {n: Tensor(r.array(shapes[n]), requires_grad=True, name=n) for n in BLOCK_TENSORS}
    block = EncoderBlock(d_model, d_ff, n_heads, dropout, params)
    w_out = Tensor(r.array((d_model, 2)), requires_grad=True, name="w_out")
    b_out = Tensor(r.array((2,)), requires_grad=True, name="b_out")
    r.done()
    return PersonalizationHead(cfg, block, w_out, b_out)


def save_head(head: PersonalizationHead, path) -> None:
    atomic_write(path, dumps_head(head))


def load_head(path) -> PersonalizationHead:
    return loads_head(Path(path).read_bytes())
