"""Perceiving (unmasked) and deciding (causal) pre-norm Transformer blocks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .engine import Tensor, ops

PRE_NORM = "pre_norm"
LITERAL = "literal"


class BlockConfigError(ValueError):
    pass


@dataclass
class BlockParams:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    ff1_w: Tensor
    ff1_b: Tensor
    ff2_w: Tensor
    ff2_b: Tensor

    @classmethod
    def from_dict(cls, params: dict[str, Tensor], prefix: str) -> "BlockParams":
        return cls(**{f: params[f"{prefix}.{f}"] for f in cls.__dataclass_fields__})


def block_param_shapes(dim: int, ff_dim: int) -> dict[str, tuple[int, ...]]:
    return {
        "ln1_g": (dim,), "ln1_b": (dim,),
        "wq": (dim, dim), "bq": (dim,),
        "wk": (dim, dim), "bk": (dim,),
        "wv": (dim, dim), "bv": (dim,),
        "wo": (dim, dim), "bo": (dim,),
        "ln2_g": (dim,), "ln2_b": (dim,),
        "ff1_w": (dim, ff_dim), "ff1_b": (ff_dim,),
        "ff2_w": (ff_dim, dim), "ff2_b": (dim,),
    }


def causal_mask(n: int) -> np.ndarray:
    """True where attention is forbidden (j > i)."""
    return np.triu(np.ones((n, n), dtype=bool), k=1)


def multi_head_self_attention(
    x: Tensor,
    p: BlockParams,
    n_heads: int,
    causal: bool,
    capture: list | None = None,
) -> Tensor:
    """Scaled dot-product attention over ``x`` of shape ``(B, T, D)``."""
    if x.ndim == 2:
        return multi_head_self_attention(x.reshape(1, *x.shape), p, n_heads, causal, capture).reshape(*x.shape)
    b, t, d = x.shape
    if d % n_heads:
        raise BlockConfigError(f"embedding width {d} not divisible by {n_heads} heads")
    hd = d // n_heads

    def heads(w, bias):
        y = ops.linear(x, w, bias).reshape(b, t, n_heads, hd)
        return ops.transpose(y, (0, 2, 1, 3))

    q, k, v = heads(p.wq, p.bq), heads(p.wk, p.bk), heads(p.wv, p.bv)
    scores = ops.mul(ops.matmul(q, ops.swapaxes(k, -1, -2)), 1.0 / math.sqrt(hd))
    if causal:
        scores = ops.masked_fill(scores, causal_mask(t))
    att = ops.softmax(scores, axis=-1)
    if capture is not None:
        capture.append(att.data)
    out = ops.transpose(ops.matmul(att, v), (0, 2, 1, 3)).reshape(b, t, d)
    return ops.linear(out, p.wo, p.bo)


def feed_forward(x: Tensor, p: BlockParams) -> Tensor:
    return ops.linear(ops.gelu(ops.linear(x, p.ff1_w, p.ff1_b)), p.ff2_w, p.ff2_b)


def block_forward(
    x: Tensor,
    p: BlockParams,
    n_heads: int,
    causal: bool,
    residual_mode: str = PRE_NORM,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    capture: list | None = None,
) -> Tensor:
    attn = multi_head_self_attention(ops.layer_norm(x, p.ln1_g, p.ln1_b), p, n_heads, causal, capture)
    mid = ops.add(x, ops.dropout(attn, dropout, rng))
    ff = ops.dropout(feed_forward(ops.layer_norm(mid, p.ln2_g, p.ln2_b), p), dropout, rng)
    if residual_mode == PRE_NORM:
        return ops.add(mid, ff)
    if residual_mode == LITERAL:
        # residual taken from the block input; attention enters only via the FFN
        return ops.add(x, ff)
    raise BlockConfigError(f"unknown residual mode {residual_mode!r}")


def perceiving_block_forward(z: Tensor, p: BlockParams, n_heads: int, **kw) -> Tensor:
    """Unmasked block over ``(..., 1+N, D)`` patch sequences."""
    return block_forward(z, p, n_heads, causal=False, **kw)


def deciding_block_forward(y: Tensor, p: BlockParams, n_heads: int, context: int | None = None, **kw) -> Tensor:
    """Causally masked block over the ``2+3K`` trajectory tokens."""
    if context is not None and y.shape[-2] != 2 + 3 * context:
        raise BlockConfigError(f"deciding input has {y.shape[-2]} tokens, expected 2+3K = {2 + 3 * context}")
    return block_forward(y, p, n_heads, causal=True, **kw)
