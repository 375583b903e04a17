"""Post-norm transformer encoder block shared by the base LM and the heads."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError

MASK_VALUE = -1e9

# declared tensor order; serialization and parameter counting rely on it
BLOCK_TENSORS = ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o",
                 "ln1_gain", "ln1_bias", "w_1", "b_1", "w_2", "b_2",
                 "ln2_gain", "ln2_bias")


def block_shapes(d_model: int, d_ff: int) -> dict[str, tuple[int, ...]]:
    d = d_model
    return {
        "w_q": (d, d), "b_q": (d,), "w_k": (d, d), "b_k": (d,),
        "w_v": (d, d), "b_v": (d,), "w_o": (d, d), "b_o": (d,),
        "ln1_gain": (d,), "ln1_bias": (d,),
        "w_1": (d, d_ff), "b_1": (d_ff,), "w_2": (d_ff, d), "b_2": (d,),
        "ln2_gain": (d,), "ln2_bias": (d,),
    }


class EncoderBlock:
    """Self-attention -> add & norm -> ReLU FFN -> dropout -> add & norm."""

    def __init__(self, d_model: int, d_ff: int, n_heads: int, dropout_p: float,
                 params: dict[str, Tensor]):
        if n_heads < 1 or d_model % n_heads:
            raise ConfigError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        if d_ff < 1:
            raise ConfigError(f"d_ff must be >= 1, got {d_ff}")
        if not 0.0 <= dropout_p < 1.0:
            raise ConfigError(f"dropout probability must lie in [0, 1), got {dropout_p}")
        self.d_model = d_model
        self.d_ff = d_ff
        self.n_heads = n_heads
        self.dropout_p = dropout_p
        self.params = params

    @classmethod
    def init(cls, d_model: int, d_ff: int, n_heads: int, dropout_p: float,
             rng: np.random.Generator, prefix: str = "") -> "EncoderBlock":
        params = {}
        for name, shape in block_shapes(d_model, d_ff).items():
            if name.startswith("w_"):
                kind = "glorot"
            elif name.endswith("gain"):
                kind = "ones"
            else:
                kind = "zeros"
            params[name] = ad.parameter(shape, rng, kind, name=prefix + name)
        return cls(d_model, d_ff, n_heads, dropout_p, params)

    def tensors(self) -> list[Tensor]:
        return [self.params[n] for n in BLOCK_TENSORS]

    def forward(self, h: Tensor, key_mask: np.ndarray | None = None, training: bool = False,
                rng: np.random.Generator | None = None, return_attention: bool = False):
        """``h`` is [B, T, d_model]; ``key_mask`` is [B, T] with True for real tokens."""
        p = self.params
        if h.ndim != 3 or h.shape[-1] != self.d_model:
            raise DimensionError(f"encoder block expects [B, T, {self.d_model}], got {h.shape}")
        b, t, d = h.shape
        nh = self.n_heads
        dh = d // nh

        def heads(x: Tensor) -> Tensor:
            return x.reshape(b, t, nh, dh).transpose(0, 2, 1, 3)

        q = heads(h @ p["w_q"] + p["b_q"])
        k = heads(h @ p["w_k"] + p["b_k"])
        v = heads(h @ p["w_v"] + p["b_v"])
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        if key_mask is not None:
            bias = np.where(key_mask, 0.0, MASK_VALUE).astype(h.dtype)[:, None, None, :]
            scores = scores + Tensor(bias, dtype=h.dtype)
        attn = ad.softmax(scores, axis=-1)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
        h1 = ad.layer_norm(h + (ctx @ p["w_o"] + p["b_o"]), p["ln1_gain"], p["ln1_bias"])
        ff = ad.relu(h1 @ p["w_1"] + p["b_1"]) @ p["w_2"] + p["b_2"]
        ff = ad.dropout(ff, self.dropout_p, training, rng)
        out = ad.layer_norm(h1 + ff, p["ln2_gain"], p["ln2_bias"])
        if return_attention:
            return out, attn
        return out


def pad_batch(seqs: list[np.ndarray], pad_value=0) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad a list of [T_i, ...] arrays; returns (batch, key_mask)."""
    t = max(len(s) for s in seqs)
    tail = seqs[0].shape[1:]
    out = np.full((len(seqs), t) + tail, pad_value, dtype=seqs[0].dtype)
    mask = np.zeros((len(seqs), t), dtype=bool)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
        mask[i, : len(s)] = True
    return out, mask
