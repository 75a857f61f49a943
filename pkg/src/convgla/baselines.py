"""Quadratic attention baselines: causal softmax, RoPE, sliding window.

``softmax_attention`` and ``rope_apply`` run on the autodiff tape (the
teacher trains through them); ``sliding_window_attention`` and the blocked
prefill are plain-numpy inference references.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor, as_tensor, from_op

# Additive pre-softmax mask value. exp(x) is exactly 0.0 for x < -746, so
# masked weights vanish bit-exactly as long as |valid scores| stay << 1e9.
MASK_VALUE = -1e9


@dataclass(frozen=True)
class AttnConfig:
    """Per-layer attention geometry shared by all baselines."""

    d_model: int
    n_heads: int
    rope: bool = True
    rope_theta: float = 10000.0
    window: int | None = None  # None = full causal

    def __post_init__(self):
        if self.d_model <= 0 or self.n_heads <= 0:
            raise ConfigError(f"d_model={self.d_model}, n_heads={self.n_heads} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.window is not None and self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def causal_mask(n: int) -> np.ndarray:
    """[n, n] additive mask: 0 on/below the diagonal, MASK_VALUE above."""
    return np.triu(np.full((n, n), MASK_VALUE), k=1)


def softmax_attention(q, k, v, scale: float | None = None) -> Tensor:
    """Causal softmax attention over the last two axes.

    q, k, v: [..., N, d]. scale defaults to 1/sqrt(d). Position t attends
    to positions <= t only; masked weights are exactly zero.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape != k.shape or k.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"q/k/v shapes inconsistent: {q.shape}, {k.shape}, {v.shape}")
    n, d = q.shape[-2], q.shape[-1]
    if scale is None:
        scale = 1.0 / np.sqrt(d)
    scores = T.matmul(q, T.transpose(k)) * scale
    weights = T.softmax(scores + Tensor(causal_mask(n)), axis=-1)
    return T.matmul(weights, v)


def _rope_angles(n: int, d: int, theta: float, pos: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    if pos is None:
        pos = np.arange(n)
    pos = np.asarray(pos, dtype=np.float64)
    if pos.shape != (n,):
        raise ShapeError(f"pos shape {pos.shape} != ({n},)")
    inv_freq = theta ** (-np.arange(0, d, 2, dtype=np.float64) / d)  # [d/2]
    ang = pos[:, None] * inv_freq[None, :]  # [n, d/2]
    return np.cos(ang), np.sin(ang)


def rope_apply(x, pos: np.ndarray | None = None, theta: float = 10000.0) -> Tensor:
    """Rotate feature pairs (x[2j], x[2j+1]) by pos * theta^(-2j/d).

    x: [..., N, d] with even d; pos defaults to arange(N). Norm-preserving,
    and dot products of rotated q/k depend on positions only through their
    difference.
    """
    x = as_tensor(x)
    n, d = x.shape[-2], x.shape[-1]
    if d % 2:
        raise ShapeError(f"rope needs even feature dim, got shape {x.shape}")
    cos, sin = _rope_angles(n, d, theta, pos)
    xe, xo = x.data[..., 0::2], x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def backward(g: np.ndarray) -> None:
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin  # inverse rotation
        gx[..., 1::2] = -ge * sin + go * cos
        x.grad = gx if x.grad is None else x.grad + gx

    return from_op("rope", out, (x,), backward)


def sliding_window_attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, window: int, scale: float | None = None
) -> np.ndarray:
    """Causal softmax restricted to the last `window` keys (self included).

    Plain-numpy inference reference. Banded: scores live in an [N, window]
    buffer indexed by key lag, so memory is O(N*window) rather than O(N^2).
    Equals full softmax_attention whenever window >= N.
    """
    if window < 1:
        raise ConfigError(f"window must be >= 1, got {window}")
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.ndim > 2:
        out = np.empty(q.shape[:-1] + (v.shape[-1],))
        for idx in np.ndindex(q.shape[:-2]):
            out[idx] = sliding_window_attention(q[idx], k[idx], v[idx], window, scale)
        return out
    n, d = q.shape
    if scale is None:
        scale = 1.0 / np.sqrt(d)
    w = min(window, n)
    scores = np.full((n, w), -np.inf)  # scores[t, j] = q_t . k_{t-j}
    for j in range(w):
        scores[j:, j] = np.einsum("td,td->t", q[j:], k[: n - j]) * scale
    scores -= scores.max(axis=1, keepdims=True)
    p = np.exp(scores)  # exp(-inf) = 0 closes the band exactly
    p /= p.sum(axis=1, keepdims=True)
    out = np.zeros((n, v.shape[-1]))
    for j in range(w):
        out[j:] += p[j:, j, None] * v[: n - j]
    return out


def softmax_prefill_blocked(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, scale: float | None = None, block: int = 512
) -> np.ndarray:
    """Full causal softmax computed `block` query rows at a time.

    Numerically identical layout to softmax_attention but never materialises
    the [N, N] score matrix, so 32K-token prefills fit in memory.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.ndim > 2:
        out = np.empty(q.shape[:-1] + (v.shape[-1],))
        for idx in np.ndindex(q.shape[:-2]):
            out[idx] = softmax_prefill_blocked(q[idx], k[idx], v[idx], scale, block)
        return out
    n, d = q.shape
    if scale is None:
        scale = 1.0 / np.sqrt(d)
    out = np.empty((n, v.shape[-1]))
    for s in range(0, n, block):
        e = min(s + block, n)
        scores = q[s:e] @ k[:e].T * scale  # [b, e] — keys beyond row are masked below
        rows = np.arange(s, e)[:, None]
        scores[rows < np.arange(e)[None, :]] = -np.inf
        scores -= scores.max(axis=1, keepdims=True)
        p = np.exp(scores)
        out[s:e] = (p / p.sum(axis=1, keepdims=True)) @ v[:e]
    return out
