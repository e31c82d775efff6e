"""Scaled dot-product multi-head attention shared by the self- and cross-attention blocks."""
import math

import numpy as np

from . import numeric as nx
from .numeric import Tensor


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(B, L, d) -> (B, heads, L, d // heads)"""
    b, length, d = x.shape
    return nx.transpose(nx.reshape(x, (b, length, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """(B, heads, L, dh) -> (B, L, heads * dh)"""
    b, h, length, dh = x.shape
    return nx.reshape(nx.transpose(x, (0, 2, 1, 3)), (b, length, h * dh))


def multi_head_attention(queries: Tensor, keys: Tensor, key_mask: np.ndarray,
                         wq: Tensor, wk: Tensor, wv: Tensor, heads: int) -> Tensor:
    """Concatenated heads softmax(Q K^T / sqrt(dh)) V, before the output projection.

    ``queries`` is (B, Lq, d), ``keys`` is (B, Lk, d) and ``key_mask`` (B, Lk)
    removes padded key positions from every softmax support.
    """
    d = queries.shape[-1]
    if d % heads:
        raise ValueError(f"model dim {d} not divisible by {heads} heads")
    q = split_heads(queries @ wq, heads)
    k = split_heads(keys @ wk, heads)
    v = split_heads(keys @ wv, heads)
    logits = (q @ nx.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d // heads))
    weights = nx.softmax_rows(logits, mask=np.asarray(key_mask, bool)[:, None, None, :])
    return merge_heads(weights @ v)
